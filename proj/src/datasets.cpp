// SPDX-License-Identifier: Apache-2.0
#include "divqat/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_set>

#include "divqat/errors.hpp"

namespace divqat {

namespace {

constexpr double kPi = 3.14159265358979323846;

}  // namespace

int64_t TaskSpec::flat_dim() const { return Tensor::checked_numel(input_shape); }

void TaskSpec::validate() const {
  if (num_classes < 2) throw ConfigError("task: num_classes must be >= 2");
  if (train_samples < 1 || test_samples < 1)
    throw ConfigError("task: sample counts must be positive");
  if (input_shape.empty()) throw ConfigError("task: input_shape is empty");
  for (int d : input_shape)
    if (d < 1) throw ConfigError("task: input extents must be positive");
  if (!(spread > 0.0)) throw ConfigError("task: spread must be positive");
  if (kind == TaskKind::TexturedPatches) {
    if (input_shape.size() != 3)
      throw ConfigError("task: textured_patches needs an HxWxC input shape");
  } else if (flat_dim() < 2) {
    throw ConfigError("task: blobs and rings need at least 2 input dimensions");
  }
}

TaskKind parse_task_kind(const std::string& s) {
  if (s == "gaussian_blobs") return TaskKind::GaussianBlobs;
  if (s == "ring_patterns") return TaskKind::RingPatterns;
  if (s == "textured_patches") return TaskKind::TexturedPatches;
  throw ConfigError("task: unknown kind '" + s + "'");
}

std::string task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::GaussianBlobs: return "gaussian_blobs";
    case TaskKind::RingPatterns: return "ring_patterns";
    case TaskKind::TexturedPatches: return "textured_patches";
  }
  return "?";
}

Relation parse_relation(const std::string& s) {
  if (s == "in_distribution") return Relation::InDistribution;
  if (s == "near_distribution") return Relation::NearDistribution;
  if (s == "out_of_distribution") return Relation::OutOfDistribution;
  throw ConfigError("relation: unknown kind '" + s + "'");
}

std::string relation_name(Relation r) {
  switch (r) {
    case Relation::InDistribution: return "in_distribution";
    case Relation::NearDistribution: return "near_distribution";
    case Relation::OutOfDistribution: return "out_of_distribution";
  }
  return "?";
}

namespace {

/// Class geometry in natural coordinates plus the affine squash
/// [lo, hi] -> [0, 1]. Built deterministically from the task alone.
struct Geometry {
  TaskKind kind;
  int K = 0;
  int64_t D = 0;
  float lo = 0.0f, hi = 1.0f;
  // blobs
  std::vector<float> means;  // K x D
  float sigma = 0.0f;
  // rings
  std::vector<float> radii;
  float sigma_r = 0.0f, sigma_bg = 0.0f;
  // patches
  int H = 0, W = 0, C = 0;
  std::vector<float> thetas;
  float freq = 2.0f, amplitude = 0.35f, noise_sigma = 0.05f;

  float squash(float x) const {
    const float t = (x - lo) / (hi - lo);
    return std::min(std::max(t, 0.0f), 1.0f);
  }
  float unsquash(float t) const { return lo + t * (hi - lo); }
};

Geometry build_geometry(const TaskSpec& task) {
  Geometry g;
  g.kind = task.kind;
  g.K = task.num_classes;
  g.D = task.flat_dim();
  const float spread = static_cast<float>(task.spread);
  switch (task.kind) {
    case TaskKind::GaussianBlobs: {
      const float R = 3.0f;
      g.sigma = 0.5f * spread;
      g.means.assign(static_cast<size_t>(g.K) * g.D, 0.0f);
      for (int k = 0; k < g.K; ++k) {
        const double a = 2.0 * kPi * k / g.K;
        g.means[static_cast<size_t>(k) * g.D + 0] = R * static_cast<float>(std::cos(a));
        g.means[static_cast<size_t>(k) * g.D + 1] = R * static_cast<float>(std::sin(a));
      }
      g.hi = R + 4.0f * g.sigma;
      g.lo = -g.hi;
      break;
    }
    case TaskKind::RingPatterns: {
      g.sigma_r = 0.15f * spread;
      g.sigma_bg = 0.15f * spread;
      g.radii.resize(static_cast<size_t>(g.K));
      for (int k = 0; k < g.K; ++k) g.radii[static_cast<size_t>(k)] = 1.0f + k;
      g.hi = g.radii.back() + 4.0f * std::max(g.sigma_r, g.sigma_bg);
      g.lo = -g.hi;
      break;
    }
    case TaskKind::TexturedPatches: {
      g.H = task.input_shape[0];
      g.W = task.input_shape[1];
      g.C = task.input_shape[2];
      g.noise_sigma = 0.05f * spread;
      g.thetas.resize(static_cast<size_t>(g.K));
      for (int k = 0; k < g.K; ++k)
        g.thetas[static_cast<size_t>(k)] = static_cast<float>(kPi * k / g.K);
      g.lo = 0.5f - g.amplitude - 4.0f * g.noise_sigma;
      g.hi = 0.5f + g.amplitude + 4.0f * g.noise_sigma;
      break;
    }
  }
  return g;
}

/// Displaces the class geometry for a near-distribution surrogate.
void apply_near_shift(Geometry& g, double shift, Rng& rng) {
  switch (g.kind) {
    case TaskKind::GaussianBlobs:
      for (int k = 0; k < g.K; ++k) {
        std::vector<double> dir(static_cast<size_t>(g.D));
        double norm = 0.0;
        for (auto& d : dir) {
          d = rng.normal();
          norm += d * d;
        }
        norm = std::sqrt(std::max(norm, 1e-12));
        for (int64_t j = 0; j < g.D; ++j)
          g.means[static_cast<size_t>(k) * g.D + j] +=
              static_cast<float>(shift * g.sigma * dir[static_cast<size_t>(j)] / norm);
      }
      break;
    case TaskKind::RingPatterns:
      for (auto& r : g.radii) r += static_cast<float>(shift) * g.sigma_r;
      break;
    case TaskKind::TexturedPatches:
      for (auto& th : g.thetas)
        th += static_cast<float>(shift * kPi / (4.0 * g.K));
      break;
  }
}

/// One sample of class k written to `row` in normalized coordinates.
/// Draw order is fixed per kind; determinism depends on it.
void sample_input(const Geometry& g, int k, Rng& rng, float* row) {
  switch (g.kind) {
    case TaskKind::GaussianBlobs: {
      const float* mu = g.means.data() + static_cast<size_t>(k) * g.D;
      for (int64_t d = 0; d < g.D; ++d)
        row[d] = g.squash(mu[d] + g.sigma * static_cast<float>(rng.normal()));
      break;
    }
    case TaskKind::RingPatterns: {
      const double phi = 2.0 * kPi * rng.uniform();
      const double r = g.radii[static_cast<size_t>(k)] + g.sigma_r * rng.normal();
      row[0] = g.squash(static_cast<float>(r * std::cos(phi)));
      row[1] = g.squash(static_cast<float>(r * std::sin(phi)));
      for (int64_t d = 2; d < g.D; ++d)
        row[d] = g.squash(g.sigma_bg * static_cast<float>(rng.normal()));
      break;
    }
    case TaskKind::TexturedPatches: {
      const double phi = 2.0 * kPi * rng.uniform();
      const double th = g.thetas[static_cast<size_t>(k)];
      const double cu = std::cos(th), sv = std::sin(th);
      const double scale = 2.0 * kPi * g.freq / std::max(g.H, g.W);
      int64_t i = 0;
      for (int u = 0; u < g.H; ++u)
        for (int v = 0; v < g.W; ++v) {
          const double wave = std::sin(scale * (u * cu + v * sv) + phi);
          for (int c = 0; c < g.C; ++c, ++i)
            row[i] = g.squash(static_cast<float>(
                0.5 + g.amplitude * wave + g.noise_sigma * rng.normal()));
        }
      break;
    }
  }
}

/// Mean-removed, per-class orthogonal grating basis used for the
/// patch-region membership test; norms folded into the threshold.
struct PatchProbe {
  std::vector<float> e1, e2;  // unit vectors, length D
  float threshold = 0.0f;
};

std::vector<PatchProbe> build_patch_probes(const Geometry& g) {
  std::vector<PatchProbe> probes;
  const int64_t D = g.D;
  const float a_norm = g.amplitude / (g.hi - g.lo);
  for (int k = 0; k < g.K; ++k) {
    const double th = g.thetas[static_cast<size_t>(k)];
    const double cu = std::cos(th), sv = std::sin(th);
    const double scale = 2.0 * kPi * g.freq / std::max(g.H, g.W);
    std::vector<double> gs(static_cast<size_t>(D)), gc(static_cast<size_t>(D));
    int64_t i = 0;
    for (int u = 0; u < g.H; ++u)
      for (int v = 0; v < g.W; ++v) {
        const double arg = scale * (u * cu + v * sv);
        for (int c = 0; c < g.C; ++c, ++i) {
          gs[static_cast<size_t>(i)] = std::sin(arg);
          gc[static_cast<size_t>(i)] = std::cos(arg);
        }
      }
    for (auto* v : {&gs, &gc}) {
      double mean = 0.0;
      for (double x : *v) mean += x;
      mean /= static_cast<double>(D);
      for (auto& x : *v) x -= mean;
    }
    double a = 0.0, b = 0.0, c2 = 0.0;
    for (int64_t j = 0; j < D; ++j) {
      a += gs[static_cast<size_t>(j)] * gs[static_cast<size_t>(j)];
      b += gs[static_cast<size_t>(j)] * gc[static_cast<size_t>(j)];
      c2 += gc[static_cast<size_t>(j)] * gc[static_cast<size_t>(j)];
    }
    // Smallest singular value of the 2-column basis; the in-class wave
    // cos(phi) gs + sin(phi) gc projects with at least this norm.
    const double lam_min = 0.5 * ((a + c2) - std::sqrt((a - c2) * (a - c2) + 4.0 * b * b));
    PatchProbe p;
    p.threshold = std::max(0.5f * a_norm * static_cast<float>(std::sqrt(std::max(lam_min, 0.0))),
                           1e-3f);
    // Gram-Schmidt basis of span(gs, gc).
    p.e1.resize(static_cast<size_t>(D));
    p.e2.resize(static_cast<size_t>(D));
    const double n1 = std::sqrt(std::max(a, 1e-12));
    for (int64_t j = 0; j < D; ++j)
      p.e1[static_cast<size_t>(j)] = static_cast<float>(gs[static_cast<size_t>(j)] / n1);
    const double proj = b / n1;
    double n2 = 0.0;
    for (int64_t j = 0; j < D; ++j) {
      const double r = gc[static_cast<size_t>(j)] - proj * gs[static_cast<size_t>(j)] / n1;
      p.e2[static_cast<size_t>(j)] = static_cast<float>(r);
      n2 += r * r;
    }
    n2 = std::sqrt(std::max(n2, 1e-12));
    for (auto& x : p.e2) x = static_cast<float>(x / n2);
    probes.push_back(std::move(p));
  }
  return probes;
}

/// Region membership oracle shared by OOD rejection and the empirical
/// 3-sigma test. Rows arrive in normalized [0,1] coordinates.
struct RegionChecker {
  const Geometry* g = nullptr;
  std::vector<PatchProbe> probes;

  explicit RegionChecker(const Geometry& geom) : g(&geom) {
    if (g->kind == TaskKind::TexturedPatches) probes = build_patch_probes(*g);
  }

  bool inside_any(const float* row) const {
    switch (g->kind) {
      case TaskKind::GaussianBlobs: {
        const double thr = 3.0 * g->sigma * std::sqrt(static_cast<double>(g->D));
        for (int k = 0; k < g->K; ++k) {
          const float* mu = g->means.data() + static_cast<size_t>(k) * g->D;
          double d2 = 0.0;
          for (int64_t j = 0; j < g->D; ++j) {
            const double diff = g->unsquash(row[j]) - mu[j];
            d2 += diff * diff;
          }
          if (d2 <= thr * thr) return true;
        }
        return false;
      }
      case TaskKind::RingPatterns: {
        const double x = g->unsquash(row[0]);
        const double y = g->unsquash(row[1]);
        const double r = std::sqrt(x * x + y * y);
        for (float rk : g->radii)
          if (std::fabs(r - rk) <= 3.0 * g->sigma_r) return true;
        return false;
      }
      case TaskKind::TexturedPatches: {
        double mean = 0.0;
        for (int64_t j = 0; j < g->D; ++j) mean += row[j];
        mean /= static_cast<double>(g->D);
        for (const auto& p : probes) {
          double q1 = 0.0, q2 = 0.0;
          for (int64_t j = 0; j < g->D; ++j) {
            const double x = row[j] - mean;
            q1 += x * p.e1[static_cast<size_t>(j)];
            q2 += x * p.e2[static_cast<size_t>(j)];
          }
          if (std::sqrt(q1 * q1 + q2 * q2) >= p.threshold) return true;
        }
        return false;
      }
    }
    return false;
  }
};

uint64_t row_hash(const float* row, int64_t width) {
  uint64_t h = 1469598103934665603ull;
  for (int64_t i = 0; i < width; ++i) {
    uint32_t bits;
    std::memcpy(&bits, row + i, sizeof bits);
    for (int k = 0; k < 4; ++k) {
      h ^= (bits >> (8 * k)) & 0xffu;
      h *= 1099511628211ull;
    }
  }
  return h;
}

Dataset sample_split(const TaskSpec& task, const Geometry& g, int n, Rng rng) {
  std::vector<int> labels;
  labels.reserve(static_cast<size_t>(n));
  const int base = n / task.num_classes;
  const int extra = n % task.num_classes;
  for (int k = 0; k < task.num_classes; ++k)
    for (int i = 0; i < base + (k < extra ? 1 : 0); ++i) labels.push_back(k);
  const auto perm = rng.permutation(n);
  std::vector<int> shuffled(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    shuffled[static_cast<size_t>(i)] = labels[static_cast<size_t>(perm[static_cast<size_t>(i)])];

  std::vector<int> shape = task.input_shape;
  shape.insert(shape.begin(), n);
  Dataset d;
  d.inputs = Tensor(std::move(shape));
  d.labels = std::move(shuffled);
  d.num_classes = task.num_classes;
  const int64_t w = task.flat_dim();
  for (int i = 0; i < n; ++i)
    sample_input(g, d.labels[static_cast<size_t>(i)], rng, d.inputs.data() + i * w);
  return d;
}

}  // namespace

SplitDataset generate(const TaskSpec& task) {
  task.validate();
  const Geometry g = build_geometry(task);
  SplitDataset out;
  out.task = task;
  out.train = sample_split(task, g, task.train_samples, Rng(Rng::derive(task.seed, "train")));
  out.test = sample_split(task, g, task.test_samples, Rng(Rng::derive(task.seed, "test")));
  return out;
}

Tensor adversary_variant(const TaskSpec& task, const DistributionRelation& rel,
                         uint64_t seed, int count, const SplitDataset& victim) {
  task.validate();
  if (count < 1) throw UsageError("adversary_variant: count must be positive");
  Geometry g = build_geometry(task);
  Rng rng(Rng::derive(seed, "adversary"));
  if (rel.relation == Relation::NearDistribution) {
    Rng shift_rng(Rng::derive(seed, "near-geometry"));
    apply_near_shift(g, rel.shift, shift_rng);
  }
  RegionChecker checker(g);

  const int64_t w = task.flat_dim();
  std::unordered_set<uint64_t> victim_hashes;
  for (const Dataset* d : {&victim.train, &victim.test})
    for (int64_t r = 0; r < d->size(); ++r)
      victim_hashes.insert(row_hash(d->inputs.data() + r * w, w));

  std::vector<int> shape = task.input_shape;
  shape.insert(shape.begin(), count);
  Tensor out(std::move(shape));
  for (int i = 0; i < count; ++i) {
    float* row = out.data() + static_cast<int64_t>(i) * w;
    bool ok = false;
    for (int attempt = 0; attempt < 10000 && !ok; ++attempt) {
      if (rel.relation == Relation::OutOfDistribution) {
        for (int64_t j = 0; j < w; ++j) row[j] = static_cast<float>(rng.uniform());
        if (checker.inside_any(row)) continue;
      } else {
        const int k = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(task.num_classes)));
        sample_input(g, k, rng, row);
      }
      ok = victim_hashes.find(row_hash(row, w)) == victim_hashes.end();
      // A hash hit is almost surely a collision, not a reuse, but redraw
      // regardless: the guarantee is exact-match freedom.
    }
    if (!ok) throw UsageError("adversary_variant: could not draw a fresh sample");
  }
  return out;
}

double fraction_outside_regions(const TaskSpec& task, const Tensor& inputs) {
  task.validate();
  const Geometry g = build_geometry(task);
  RegionChecker checker(g);
  const int64_t n = batch_rows(inputs);
  if (n == 0) throw UsageError("fraction_outside_regions: empty input");
  const int64_t w = row_width(inputs);
  if (w != task.flat_dim())
    throw UsageError("fraction_outside_regions: row width does not match task");
  int64_t outside = 0;
  for (int64_t r = 0; r < n; ++r)
    if (!checker.inside_any(inputs.data() + r * w)) ++outside;
  return static_cast<double>(outside) / static_cast<double>(n);
}

// ---- persistence -------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'Q', 'D', 'S'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
void put_i32(std::string& out, int32_t v) { put_u32(out, static_cast<uint32_t>(v)); }
void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  size_t off = 0;
  std::string where;

  void need(size_t n) const {
    if (off + n > buf.size())
      throw ParseError(where + ": truncated at byte offset " + std::to_string(off) +
                       " (need " + std::to_string(n) + " more)");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[off + static_cast<size_t>(i)]))
           << (8 * i);
    off += 4;
    return v;
  }
  int32_t i32() { return static_cast<int32_t>(u32()); }
  float f32() {
    const uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(buf[off++]);
  }
};

std::string slurp(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(std::string(what) + ": cannot open '" + path + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

void spill(const std::string& path, const std::string& data, const char* what) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError(std::string(what) + ": cannot write '" + path + "'");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw UsageError(std::string(what) + ": short write to '" + path + "'");
}

}  // namespace

void save_container(const std::string& path, const Container& c) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  out.push_back(static_cast<char>(c.kind));
  put_u32(out, static_cast<uint32_t>(c.inputs.rank()));
  for (int i = 0; i < c.inputs.rank(); ++i) put_i32(out, c.inputs.dim(i));
  for (float v : c.inputs.values()) put_f32(out, v);
  const int64_t n = batch_rows(c.inputs);
  if (c.kind == ContainerKind::Labeled) {
    if (static_cast<int64_t>(c.labels.size()) != n)
      throw UsageError("container: label count does not match inputs");
    put_u32(out, static_cast<uint32_t>(c.num_classes));
    for (int v : c.labels) put_i32(out, v);
  } else if (c.kind == ContainerKind::SoftLabeled) {
    if (batch_rows(c.soft_labels) != n || c.soft_labels.rank() != 2)
      throw UsageError("container: soft labels must be [N, K]");
    put_u32(out, static_cast<uint32_t>(c.soft_labels.dim(1)));
    for (float v : c.soft_labels.values()) put_f32(out, v);
  }
  spill(path, out, "container");
}

Container load_container(const std::string& path) {
  const std::string data = slurp(path, "container");
  Reader r{data, 0, "container '" + path + "'"};
  r.need(4);
  if (std::memcmp(data.data(), kMagic, 4) != 0)
    throw ParseError(r.where + ": bad magic");
  r.off = 4;
  const uint32_t version = r.u32();
  if (version != kVersion)
    throw ParseError(r.where + ": unsupported version " + std::to_string(version));
  Container c;
  const uint8_t kind = r.u8();
  if (kind > 2) throw ParseError(r.where + ": unknown payload kind");
  c.kind = static_cast<ContainerKind>(kind);
  const uint32_t rank = r.u32();
  if (rank == 0 || rank > 16) throw ParseError(r.where + ": implausible rank");
  std::vector<int> shape(rank);
  for (auto& d : shape) {
    d = r.i32();
    if (d < 0) throw ParseError(r.where + ": negative extent");
  }
  Tensor inputs(shape);
  for (int64_t i = 0; i < inputs.numel(); ++i) inputs[i] = r.f32();
  c.inputs = std::move(inputs);
  const int64_t n = batch_rows(c.inputs);
  if (c.kind == ContainerKind::Labeled) {
    c.num_classes = static_cast<int>(r.u32());
    c.labels.resize(static_cast<size_t>(n));
    for (auto& v : c.labels) v = r.i32();
  } else if (c.kind == ContainerKind::SoftLabeled) {
    const int k = static_cast<int>(r.u32());
    c.num_classes = k;
    Tensor soft({static_cast<int>(n), k});
    for (int64_t i = 0; i < soft.numel(); ++i) soft[i] = r.f32();
    c.soft_labels = std::move(soft);
  }
  if (r.off != data.size())
    throw ParseError(r.where + ": trailing bytes at offset " + std::to_string(r.off));
  return c;
}

void save_dataset(const std::string& path, const Dataset& d) {
  Container c;
  c.kind = ContainerKind::Labeled;
  c.inputs = d.inputs;
  c.labels = d.labels;
  c.num_classes = d.num_classes;
  save_container(path, c);
}

Dataset load_dataset(const std::string& path) {
  Container c = load_container(path);
  if (c.kind != ContainerKind::Labeled)
    throw ParseError("dataset '" + path + "': container does not hold labeled data");
  Dataset d;
  d.inputs = std::move(c.inputs);
  d.labels = std::move(c.labels);
  d.num_classes = c.num_classes;
  return d;
}

namespace {

std::string shape_token(const Tensor& t) {
  std::string s;
  for (int i = 0; i < t.rank(); ++i) {
    if (i) s += 'x';
    s += std::to_string(t.dim(i));
  }
  return s;
}

const char* kind_token(ContainerKind k) {
  switch (k) {
    case ContainerKind::Labeled: return "labeled";
    case ContainerKind::SoftLabeled: return "soft";
    case ContainerKind::Unlabeled: return "unlabeled";
  }
  return "?";
}

}  // namespace

void export_csv(const std::string& path, const Container& c) {
  std::string out;
  out += "# DQDS kind=";
  out += kind_token(c.kind);
  out += " shape=" + shape_token(c.inputs);
  out += " classes=" + std::to_string(c.num_classes);
  out += "\n";
  const int64_t n = batch_rows(c.inputs);
  const int64_t w = row_width(c.inputs);
  char buf[48];
  for (int64_t r = 0; r < n; ++r) {
    for (int64_t j = 0; j < w; ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(c.inputs[r * w + j]));
      if (j) out += ',';
      out += buf;
    }
    if (c.kind == ContainerKind::Labeled) {
      out += ',';
      out += std::to_string(c.labels[static_cast<size_t>(r)]);
    } else if (c.kind == ContainerKind::SoftLabeled) {
      const int64_t k = row_width(c.soft_labels);
      for (int64_t j = 0; j < k; ++j) {
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(c.soft_labels[r * k + j]));
        out += ',';
        out += buf;
      }
    }
    out += '\n';
  }
  spill(path, out, "csv export");
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

float parse_float_field(const std::string& s, const std::string& where) {
  const char* begin = s.c_str();
  char* end = nullptr;
  const float v = std::strtof(begin, &end);
  if (end == begin || *end != '\0')
    throw ParseError(where + ": malformed number '" + s + "'");
  return v;
}

int parse_label_field(const std::string& s, const std::string& where) {
  const char* begin = s.c_str();
  char* end = nullptr;
  const long v = std::strtol(begin, &end, 10);
  if (end == begin || *end != '\0')
    throw ParseError(where + ": malformed label '" + s + "'");
  return static_cast<int>(v);
}

Dataset import_csv(const std::string& path) {
  const std::string data = slurp(path, "csv import");
  std::vector<int> declared_shape;
  int declared_classes = -1;
  std::vector<float> values;
  std::vector<int> labels;
  int64_t width = -1;

  size_t pos = 0;
  int line_no = 0;
  while (pos < data.size()) {
    size_t eol = data.find('\n', pos);
    if (eol == std::string::npos) eol = data.size();
    std::string line = data.substr(pos, eol - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    pos = eol + 1;
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "csv '" + path + "' line " + std::to_string(line_no);
    if (line[0] == '#') {
      const size_t sp = line.find("shape=");
      if (sp != std::string::npos) {
        size_t i = sp + 6;
        while (i < line.size() && line[i] != ' ') {
          size_t j = line.find_first_of("x ", i);
          if (j == std::string::npos) j = line.size();
          declared_shape.push_back(parse_label_field(line.substr(i, j - i), where));
          i = j < line.size() && line[j] == 'x' ? j + 1 : j;
        }
      }
      const size_t cp = line.find("classes=");
      if (cp != std::string::npos)
        declared_classes = parse_label_field(line.substr(cp + 8), where);
      continue;
    }
    const auto fields = split_csv_line(line);
    if (fields.size() < 2) throw ParseError(where + ": expected features and a label");
    if (width < 0) width = static_cast<int64_t>(fields.size()) - 1;
    if (static_cast<int64_t>(fields.size()) != width + 1)
      throw ParseError(where + ": expected " + std::to_string(width + 1) + " fields, got " +
                       std::to_string(fields.size()));
    for (int64_t j = 0; j < width; ++j)
      values.push_back(parse_float_field(fields[static_cast<size_t>(j)], where));
    labels.push_back(parse_label_field(fields.back(), where));
  }
  if (labels.empty()) throw ParseError("csv '" + path + "': no data rows");

  const int64_t n = static_cast<int64_t>(labels.size());
  std::vector<int> shape;
  if (!declared_shape.empty()) {
    shape = declared_shape;
    shape[0] = static_cast<int>(n);
    if (Tensor::checked_numel(shape) != n * width)
      throw ParseError("csv '" + path + "': declared shape does not match row width");
  } else {
    shape = {static_cast<int>(n), static_cast<int>(width)};
  }
  Dataset d;
  d.inputs = Tensor(std::move(shape), std::move(values));
  d.labels = std::move(labels);
  int maxl = 0;
  for (int l : d.labels) {
    if (l < 0) throw ParseError("csv '" + path + "': negative label");
    maxl = std::max(maxl, l);
  }
  d.num_classes = declared_classes > 0 ? declared_classes : maxl + 1;
  if (maxl >= d.num_classes)
    throw ParseError("csv '" + path + "': label exceeds declared class count");
  return d;
}

uint32_t read_be_u32(Reader& r) {
  r.need(4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v = (v << 8) | static_cast<uint32_t>(static_cast<unsigned char>(r.buf[r.off + static_cast<size_t>(i)]));
  r.off += 4;
  return v;
}

Dataset import_idx(const std::string& path) {
  std::string labels_path = path;
  auto replace_all = [](std::string& s, const std::string& from, const std::string& to) {
    size_t p = 0;
    while ((p = s.find(from, p)) != std::string::npos) {
      s.replace(p, from.size(), to);
      p += to.size();
    }
  };
  replace_all(labels_path, "images", "labels");
  replace_all(labels_path, "idx3", "idx1");
  if (labels_path == path)
    throw ParseError("idx '" + path + "': cannot derive a labels filename");

  const std::string img = slurp(path, "idx images");
  Reader ir{img, 0, "idx images '" + path + "'"};
  if (read_be_u32(ir) != 0x00000803u)
    throw ParseError(ir.where + ": bad magic (want idx3-ubyte)");
  const uint32_t n = read_be_u32(ir);
  const uint32_t h = read_be_u32(ir);
  const uint32_t w = read_be_u32(ir);
  const int64_t count = static_cast<int64_t>(n) * h * w;
  ir.need(static_cast<size_t>(count));

  const std::string lab = slurp(labels_path, "idx labels");
  Reader lr{lab, 0, "idx labels '" + labels_path + "'"};
  if (read_be_u32(lr) != 0x00000801u)
    throw ParseError(lr.where + ": bad magic (want idx1-ubyte)");
  if (read_be_u32(lr) != n)
    throw ParseError(lr.where + ": label count does not match image count");
  lr.need(n);

  Dataset d;
  d.inputs = Tensor({static_cast<int>(n), static_cast<int>(h), static_cast<int>(w), 1});
  for (int64_t i = 0; i < count; ++i)
    d.inputs[i] = static_cast<float>(static_cast<unsigned char>(img[ir.off + static_cast<size_t>(i)])) / 255.0f;
  d.labels.resize(n);
  int maxl = 0;
  for (uint32_t i = 0; i < n; ++i) {
    d.labels[i] = static_cast<unsigned char>(lab[lr.off + i]);
    maxl = std::max(maxl, d.labels[i]);
  }
  d.num_classes = maxl + 1;
  return d;
}

}  // namespace

Dataset import_external(const std::string& path, const std::string& format) {
  Dataset d;
  if (format == "csv") {
    d = import_csv(path);
  } else if (format == "idx") {
    d = import_idx(path);
  } else {
    throw ConfigError("import: unknown format '" + format + "' (expected csv|idx)");
  }
  float lo = 0.0f, hi = 1.0f;
  for (float v : d.inputs.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (lo < 0.0f || hi > 1.0f) {
    const float span = hi - lo;
    for (auto& v : d.inputs.values()) v = (v - lo) / span;
  }
  return d;
}

}  // namespace divqat
