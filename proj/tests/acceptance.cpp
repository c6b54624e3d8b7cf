// SPDX-License-Identifier: Apache-2.0
// Acceptance gate: eleven end-to-end criteria covering the alpha-zero
// reduction, gradient correctness, the divergence/extraction trends on
// the desk configurations, budget compliance, quantization and metric
// properties, determinism, and query accounting. Prints one pass/fail
// line per criterion and exits nonzero if any fails.
#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "divqat/attacks.hpp"
#include "divqat/checkpoint.hpp"
#include "divqat/datasets.hpp"
#include "divqat/defenses.hpp"
#include "divqat/errors.hpp"
#include "divqat/experiment.hpp"
#include "divqat/fdcheck.hpp"
#include "divqat/losses.hpp"
#include "divqat/nn.hpp"
#include "divqat/quant.hpp"
#include "divqat/rng.hpp"
#include "divqat/tensor.hpp"
#include "divqat/train.hpp"

#ifndef ACCEPTANCE_CONFIG_DIR
#define ACCEPTANCE_CONFIG_DIR "configs"
#endif

using namespace divqat;

namespace {

int g_failures = 0;

std::string fmt(const char* f, ...) {
  va_list ap;
  va_start(ap, f);
  char buf[1024];
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

void verdict(int idx, const char* name, bool ok, const std::string& detail) {
  std::printf("[%2d] %s  %s%s%s\n", idx, ok ? "PASS" : "FAIL", name,
              detail.empty() ? "" : ": ", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

void run_criterion(int idx, const char* name,
                   const std::function<std::pair<bool, std::string>()>& fn) {
  try {
    auto [ok, detail] = fn();
    verdict(idx, name, ok, detail);
  } catch (const std::exception& e) {
    verdict(idx, name, false, fmt("exception: %s", e.what()));
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) return std::string();
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

const MetricsReport* find_row(const std::vector<MetricsReport>& rows, const std::string& cell,
                              int seed) {
  for (const auto& r : rows)
    if (r.cell == cell && r.seed == seed) return &r;
  return nullptr;
}

std::vector<double> cell_values(const std::vector<MetricsReport>& rows, const std::string& cell,
                                const std::function<double(const MetricsReport&)>& get) {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.cell == cell) v.push_back(get(r));
  return v;
}

double cell_median(const std::vector<MetricsReport>& rows, const std::string& cell,
                   const std::function<double(const MetricsReport&)>& get) {
  return median_of(cell_values(rows, cell, get));
}

/// Largest-alpha divqat row for one seed whose reported divergence stays
/// within the ell-1 budget; null when none qualifies.
const MetricsReport* select_row(const std::vector<MetricsReport>& rows, int seed, double budget) {
  const MetricsReport* best = nullptr;
  for (const auto& r : rows) {
    if (r.seed != seed || r.method != "divqat" || !r.alpha || !r.mean_l1) continue;
    if (*r.mean_l1 > budget) continue;
    if (!best || *r.alpha > *best->alpha) best = &r;
  }
  return best;
}

Tensor uniform_batch(const std::vector<int>& sample_shape, int rows, Rng& rng) {
  std::vector<int> shape{rows};
  for (int d : sample_shape) shape.push_back(d);
  Tensor x(shape);
  for (auto& v : x.values()) v = rng.uniform_f(0.0f, 1.0f);
  return x;
}

bool rows_on_simplex(const Tensor& probs, double tol, std::string* why) {
  const int64_t rows = batch_rows(probs);
  const int64_t width = row_width(probs);
  for (int64_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (int64_t c = 0; c < width; ++c) {
      const double v = probs[r * width + c];
      if (!(v >= 0.0) || v > 1.0 + tol) {
        if (why) *why = fmt("entry (%lld,%lld) = %.9g", (long long)r, (long long)c, v);
        return false;
      }
      sum += v;
    }
    if (std::fabs(sum - 1.0) > tol) {
      if (why) *why = fmt("row %lld sums to %.9g", (long long)r, sum);
      return false;
    }
  }
  return true;
}

// ---- relu margin surgery for finite-difference probes -------------------
// A central difference is only a derivative estimate while the forward
// stays smooth between the two probe points, so models that feed relu
// get their biases nudged until every pre-activation keeps a safe
// distance from the kink. Both branches stay populated: even units are
// pushed fully active, odd units get zero centered in the widest gap
// between their pre-activation values.

Parameter* find_param(Model& m, const std::string& name) {
  for (auto& p : m.params)
    if (p.name == name) return &p;
  return nullptr;
}

/// Bias shift placing zero either below every value (unit stays active)
/// or inside the widest interior gap (rows split across both branches);
/// returns {shift, distance from zero to the nearest value}.
std::pair<double, double> kink_gap_shift(std::vector<double> v, bool prefer_split) {
  std::sort(v.begin(), v.end());
  double shift = 0.25 - v.front();
  double margin = 0.25;
  if (prefer_split) {
    double best = 0.0, at = 0.0;
    for (size_t i = 0; i + 1 < v.size(); ++i) {
      const double half = (v[i + 1] - v[i]) / 2.0;
      if (half > best) {
        best = half;
        at = -(v[i] + v[i + 1]) / 2.0;
      }
    }
    if (best >= 0.05) {
      shift = at;
      margin = best;
    }
  }
  return {shift, margin};
}

/// Dense pre-activations in double, independent of the tape.
std::vector<std::vector<double>> dense_pre(const std::vector<std::vector<double>>& x,
                                           const Tensor& w, const Tensor& b) {
  const int64_t in = w.dim(0), out = w.dim(1);
  std::vector<std::vector<double>> pre(static_cast<size_t>(out),
                                       std::vector<double>(x.size()));
  for (size_t r = 0; r < x.size(); ++r)
    for (int64_t j = 0; j < out; ++j) {
      double s = b[j];
      for (int64_t i = 0; i < in; ++i) s += x[r][static_cast<size_t>(i)] * w[i * out + j];
      pre[static_cast<size_t>(j)][r] = s;
    }
  return pre;
}

/// Shifts both hidden biases of an "mlp" model so every pre-activation
/// stays at least `min_margin` from the kink. Reports the largest
/// first-hidden activation (it bounds how far a weight probe can move
/// the second layer's pre-activations). False when a unit has no gap.
bool margin_mlp(Model& m, const Tensor& x, double min_margin, double* first_hidden_max) {
  const int64_t rows = x.dim(0);
  const int64_t in = x.numel() / rows;
  std::vector<std::vector<double>> h(static_cast<size_t>(rows),
                                     std::vector<double>(static_cast<size_t>(in)));
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t i = 0; i < in; ++i)
      h[static_cast<size_t>(r)][static_cast<size_t>(i)] = x[r * in + i];
  const char* names[2] = {"fc1", "fc2"};
  for (int li = 0; li < 2; ++li) {
    Parameter* w = find_param(m, std::string(names[li]) + ".w");
    Parameter* b = find_param(m, std::string(names[li]) + ".b");
    if (!w || !b) return false;
    auto pre = dense_pre(h, w->value, b->value);
    const size_t units = pre.size();
    std::vector<std::vector<double>> next(static_cast<size_t>(rows),
                                          std::vector<double>(units));
    double hmax = 0.0;
    for (size_t j = 0; j < units; ++j) {
      auto [shift, margin] = kink_gap_shift(pre[j], j % 2 == 1);
      if (margin < min_margin) return false;
      b->value[static_cast<int64_t>(j)] += static_cast<float>(shift);
      for (size_t r = 0; r < static_cast<size_t>(rows); ++r) {
        const double v = pre[j][r] + shift;
        next[r][j] = v > 0.0 ? v : 0.0;
        hmax = std::max(hmax, next[r][j]);
      }
    }
    if (li == 0 && first_hidden_max) *first_hidden_max = hmax;
    h = std::move(next);
  }
  return true;
}

/// Valid NHWC convolution in double; x is row-major [B,H,W,Ci].
std::vector<double> conv_pre(const std::vector<double>& x, int B, int H, int W, int Ci,
                             const Tensor& w, const Tensor& b) {
  const int KH = w.dim(0), KW = w.dim(1), Co = w.dim(3);
  const int OH = H - KH + 1, OW = W - KW + 1;
  std::vector<double> out(static_cast<size_t>(B) * OH * OW * Co);
  for (int n = 0; n < B; ++n)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow)
        for (int oc = 0; oc < Co; ++oc) {
          double s = b[oc];
          for (int kh = 0; kh < KH; ++kh)
            for (int kw = 0; kw < KW; ++kw)
              for (int ic = 0; ic < Ci; ++ic)
                s += x[((static_cast<size_t>(n) * H + oh + kh) * W + ow + kw) * Ci + ic] *
                     w[((static_cast<int64_t>(kh) * KW + kw) * Ci + ic) * Co + oc];
          out[((static_cast<size_t>(n) * OH + oh) * OW + ow) * Co + oc] = s;
        }
  return out;
}

/// Same bias surgery for the two convolution layers of "miniconv".
bool margin_miniconv(Model& m, const Tensor& x, double min_margin, double* first_hidden_max) {
  int B = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
  std::vector<double> h(x.values().begin(), x.values().end());
  const char* names[2] = {"conv1", "conv2"};
  for (int li = 0; li < 2; ++li) {
    Parameter* wp = find_param(m, std::string(names[li]) + ".w");
    Parameter* bp = find_param(m, std::string(names[li]) + ".b");
    if (!wp || !bp) return false;
    auto pre = conv_pre(h, B, H, W, Ci, wp->value, bp->value);
    const int Co = wp->value.dim(3);
    const size_t per = pre.size() / static_cast<size_t>(Co);
    double hmax = 0.0;
    for (int c = 0; c < Co; ++c) {
      std::vector<double> vals(per);
      for (size_t i = 0; i < per; ++i) vals[i] = pre[i * static_cast<size_t>(Co) + c];
      auto [shift, margin] = kink_gap_shift(vals, c % 2 == 1);
      if (margin < min_margin) return false;
      bp->value[c] += static_cast<float>(shift);
      for (size_t i = 0; i < per; ++i) {
        const double v = pre[i * static_cast<size_t>(Co) + c] + shift;
        pre[i * static_cast<size_t>(Co) + c] = v > 0.0 ? v : 0.0;
        hmax = std::max(hmax, pre[i * static_cast<size_t>(Co) + c]);
      }
    }
    if (li == 0 && first_hidden_max) *first_hidden_max = hmax;
    h = std::move(pre);
    H = H - wp->value.dim(0) + 1;
    W = W - wp->value.dim(1) + 1;
    Ci = Co;
  }
  return true;
}

}  // namespace

int main() {
  std::printf("divqat acceptance gate\n");
  std::fflush(stdout);

  // ---- shared harness runs (the expensive part, done once) ------------
  std::vector<MetricsReport> desk_a, desk_b, df, rs, dcp;
  ExperimentConfig desk_cfg, df_cfg, rs_cfg;
  std::string setup_error;
  try {
    const std::string cfgdir = ACCEPTANCE_CONFIG_DIR;
    desk_cfg = ExperimentConfig::from_json_file(cfgdir + "/desk.json");
    df_cfg = ExperimentConfig::from_json_file(cfgdir + "/desk_datafree.json");
    rs_cfg = ExperimentConfig::from_json_file(cfgdir + "/desk_stacked.json");

    auto timed = [](const char* label, const std::function<std::vector<MetricsReport>()>& run) {
      std::fprintf(stderr, "# running %s...\n", label);
      return run();
    };
    desk_cfg.out_dir = "acc_desk_a";
    desk_a = timed("desk knockoff (first pass)", [&] { return run_experiment(desk_cfg); });
    desk_cfg.out_dir = "acc_desk_b";
    desk_b = timed("desk knockoff (repeat pass)", [&] { return run_experiment(desk_cfg); });
    desk_cfg.out_dir = "acc_desk_a";

    df_cfg.out_dir = "acc_datafree";
    df = timed("desk datafree", [&] { return run_experiment(df_cfg); });

    rs_cfg.out_dir = "acc_rs";
    rs = timed("stacked reverse_sigmoid", [&] { return run_experiment(rs_cfg); });
    ExperimentConfig dcp_cfg = rs_cfg;
    dcp_cfg.defense_kind = DefenseKind::Deception;
    dcp_cfg.out_dir = "acc_dcp";
    dcp = timed("stacked deception", [&] { return run_experiment(dcp_cfg); });

    for (const auto* set : {&desk_a, &desk_b, &df, &rs, &dcp})
      for (const auto& r : *set)
        if (!r.error.empty() && setup_error.empty())
          setup_error = fmt("cell %s seed %d failed: %s", r.cell.c_str(), r.seed, r.error.c_str());
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  if (!setup_error.empty()) std::fprintf(stderr, "# setup error: %s\n", setup_error.c_str());

  std::vector<std::string> desk_cells;
  std::vector<double> alpha_grid;
  for (const auto& c : desk_cfg.cells) {
    desk_cells.push_back(c.cell_id());
    if (c.method == QuantMethod::DivQat) alpha_grid.push_back(c.alpha);
  }
  const double l1_budget = desk_cfg.defense_budget;
  double knockoff_gap = std::nan("");

  auto adv = [](const MetricsReport& r) { return r.adversary_error_pct.value(); };
  auto defe = [](const MetricsReport& r) { return r.defender_error_pct; };
  auto klf = [](const MetricsReport& r) { return r.kl_to_float; };

  // ---- 1: alpha-zero reduction ----------------------------------------
  run_criterion(1, "alpha-zero reduction (divqat == qat trajectory)", [&]() {
    TaskSpec t;
    t.kind = TaskKind::GaussianBlobs;
    t.num_classes = 4;
    t.input_shape = {6, 6, 1};
    t.train_samples = 300;
    t.test_samples = 150;
    t.spread = 1.0;
    t.seed = 13;
    SplitDataset d = generate(t);
    Rng init(21);
    Model fm = make_model("mlp", t.input_shape, t.num_classes, init);
    DivQatConfig fcfg;
    fcfg.epochs = 4;
    Rng ftr(22);
    train_model(fm, d, fcfg, ftr);

    Model q1 = prepare_qat(fm, QuantSpec{});
    Model q2 = prepare_qat(fm, QuantSpec{});
    DivQatConfig ft;
    ft.epochs = 3;
    Rng r1(55), r2(55);
    TrainHistory h1 = train_qat(q1, d, ft, r1);
    ft.alpha = 0.0;
    TrainHistory h2 = train_divqat(q2, fm, d, ft, r2);
    if (h1.epochs.size() != h2.epochs.size())
      return std::make_pair(false, std::string("history length mismatch"));
    for (size_t e = 0; e < h1.epochs.size(); ++e)
      if (h1.epochs[e].param_checksum != h2.epochs[e].param_checksum)
        return std::make_pair(false, fmt("checksum diverges at epoch %zu", e + 1));
    if (q1.param_checksum() != q2.param_checksum())
      return std::make_pair(false, std::string("final checksum mismatch"));

    if (!setup_error.empty()) return std::make_pair(false, "harness: " + setup_error);
    const std::string a0 = MethodCell{QuantMethod::DivQat, 0.0}.cell_id();
    for (int seed : desk_cfg.seeds) {
      const MetricsReport* q = find_row(desk_a, "qat", seed);
      const MetricsReport* z = find_row(desk_a, a0, seed);
      if (!q || !z) return std::make_pair(false, fmt("missing desk rows for seed %d", seed));
      if (q->defender_error_pct != z->defender_error_pct ||
          q->adversary_error_pct != z->adversary_error_pct || q->kl_to_float != z->kl_to_float)
        return std::make_pair(false, fmt("desk divqat-a0 != qat at seed %d", seed));
      if (!z->mean_l1 || *z->mean_l1 != 0.0)
        return std::make_pair(false, fmt("divqat-a0 divergence nonzero at seed %d", seed));
    }
    return std::make_pair(true, fmt("%zu epochs checksum-identical; desk divqat-a0 == qat on %zu seeds",
                                    h1.epochs.size(), desk_cfg.seeds.size()));
  });

  // ---- 2: finite-difference gradient audit -----------------------------
  // Each sub-check pins its own numerical regime. Layer ops are probed on
  // power-of-two grids where every float operation is exact and the loss
  // is quadratic, so the central difference equals the derivative bit for
  // bit. Model compositions either contain no relu (linear arch) or run
  // after relu margin surgery so no probe can cross a kink. Loss nodes
  // reduce in 64-bit; their noise floor masks only coordinates whose true
  // slope sits below the probe's resolution, while a structurally wrong
  // gradient still surfaces through its large side.
  run_criterion(2, "gradient correctness (fd on layers, ste, losses)", [&]() {
    std::vector<std::pair<std::string, FdReport>> checks;
    std::string surgery_error;

    auto fd_params = [](const std::vector<Parameter*>& ps,
                        const std::function<TensorId(Tape&)>& build,
                        double eps, double floor, uint64_t seed) {
      auto loss = [&]() -> double {
        Tape t;
        return t.scalar_value(build(t));
      };
      auto grad = [&]() {
        Tape t;
        t.backward(build(t));
      };
      FdOptions opt;
      opt.epsilon = eps;
      opt.noise_floor = floor;
      opt.samples = 60;
      Rng rng(seed);
      return fd_check(ps, loss, grad, opt, rng);
    };

    {
      Rng r(601);
      Tensor x({4, 12});
      for (auto& v : x.values())
        v = 0.125f * static_cast<float>(static_cast<int>(r.uniform_int(9)) - 4);
      Parameter w(Tensor({12, 6}), "w"), b(Tensor({6}), "b");
      for (auto& v : w.value.values())
        v = 0.125f * static_cast<float>(static_cast<int>(r.uniform_int(17)) - 8);
      for (auto& v : b.value.values())
        v = 0.125f * static_cast<float>(static_cast<int>(r.uniform_int(17)) - 8);
      auto build = [&](Tape& t) {
        return t.sum_all(t.square(t.add_rows(t.matmul(t.constant(x), t.leaf(w)), t.leaf(b))));
      };
      checks.emplace_back("dense (exact grid)", fd_params({&w, &b}, build, 0.125, 1e-4, 601));
    }

    {
      Rng r(602);
      Parameter x(Tensor({64}), "x");
      for (auto& v : x.value.values()) {
        const int m = 32 + static_cast<int>(r.uniform_int(97));  // |x| in [0.5, 2]
        v = (r.uniform() < 0.5 ? -1.0f : 1.0f) * 0.015625f * static_cast<float>(m);
      }
      auto build = [&](Tape& t) { return t.sum_all(t.square(t.relu(t.leaf(x)))); };
      checks.emplace_back("relu (exact grid, both branches)",
                          fd_params({&x}, build, 0.015625, 1e-4, 602));
    }

    {
      Rng r(603);
      Parameter xp(Tensor({2, 6, 6, 1}), "x"), wp(Tensor({3, 3, 1, 2}), "w"),
          bp(Tensor({2}), "b");
      auto fill = [&](Tensor& tv) {
        for (auto& v : tv.values())
          v = 0.0625f * static_cast<float>(static_cast<int>(r.uniform_int(9)) - 4);
      };
      fill(xp.value);
      fill(wp.value);
      fill(bp.value);
      auto build = [&](Tape& t) {
        return t.sum_all(t.square(t.conv2d(t.leaf(xp), t.leaf(wp), t.leaf(bp))));
      };
      checks.emplace_back("conv2d (exact grid, x/w/bias paths)",
                          fd_params({&xp, &wp, &bp}, build, 0.0625, 1e-4, 603));
    }

    {
      Rng r(604);
      Parameter x(Tensor({2, 3, 4}), "x");
      for (auto& v : x.value.values())
        v = 0.015625f * static_cast<float>(static_cast<int>(r.uniform_int(129)) - 64);
      auto build = [&](Tape& t) { return t.sum_all(t.square(t.reshape(t.leaf(x), {4, 6}))); };
      checks.emplace_back("reshape (exact grid)", fd_params({&x}, build, 0.015625, 1e-4, 604));
    }

    {
      Rng r(605);
      Parameter x(Tensor({24}), "x");
      // Slopes stay above sigmoid'(1.2) ~ 0.17, well clear of float noise.
      for (auto& v : x.value.values())
        v = (r.uniform() < 0.5 ? -1.0f : 1.0f) * r.uniform_f(0.2f, 1.2f);
      auto build = [&](Tape& t) { return t.sum_all(t.sigmoid(t.leaf(x))); };
      checks.emplace_back("sigmoid", fd_params({&x}, build, 2e-2, 1e-4, 605));
    }

    {
      // STE node: the scale is a power of two and the probe step spans
      // eight exact grid cells, so the staircase's central difference is
      // exactly the straight-through slope of 1 in float arithmetic.
      FakeQuantState s;
      s.scale = {0.0625f};
      s.zero_point = {0};
      s.qmin = 0;
      s.qmax = 255;
      Parameter x(Tensor({64}), "x");
      Rng xr(404);
      for (auto& v : x.value.values())
        v = 0.0625f * (static_cast<float>(40 + xr.uniform_int(160)) + 0.25f);
      auto build = [&](Tape& t) { return t.sum_all(fake_quant_op(t, t.leaf(x), s)); };
      checks.emplace_back("ste fake-quant node", fd_params({&x}, build, 0.5, 1e-4, 504));
    }

    Rng lr(606);
    Parameter lg(Tensor({4, 10}), "logits");
    for (auto& v : lg.value.values()) v = 2.0f * static_cast<float>(lr.normal());
    Tensor ref_lg({4, 10});
    for (auto& v : ref_lg.values()) v = 2.0f * static_cast<float>(lr.normal());
    std::vector<int> y4(4);
    for (auto& y : y4) y = static_cast<int>(lr.uniform_int(10));
    checks.emplace_back("cross_entropy", fd_params({&lg}, [&](Tape& t) {
                          return ce_from_logits(t, t.leaf(lg), y4);
                        }, 1e-2, 0.02, 607));
    checks.emplace_back("kl_divergence", fd_params({&lg}, [&](Tape& t) {
                          return kl_from_logits(t, t.leaf(lg), t.constant(ref_lg));
                        }, 1e-2, 0.02, 608));
    checks.emplace_back("divqat_loss", fd_params({&lg}, [&](Tape& t) {
                          TensorId ce = ce_from_logits(t, t.leaf(lg), y4);
                          TensorId kl = kl_from_logits(t, t.leaf(lg), t.constant(ref_lg));
                          return t.add_scaled(ce, kl, -0.7f);
                        }, 1e-2, 0.02, 609));

    {
      Rng r(610);
      Model lin = make_model("linear", {2, 2, 1}, 3, r);
      Tensor x({6, 2, 2, 1});
      for (auto& v : x.values()) v = r.uniform_f(-1.0f, 1.0f);
      std::vector<int> y(6);
      for (auto& v : y) v = static_cast<int>(r.uniform_int(3));
      std::vector<Parameter*> ps;
      for (auto& p : lin.params) ps.push_back(&p);
      auto build = [&](Tape& t) { return ce_from_logits(t, lin.forward(t, t.constant(x)), y); };
      checks.emplace_back("linear model + cross_entropy", fd_params(ps, build, 1e-2, 0.03, 610));
    }

    {
      Rng r(611);
      Model mlp = make_model("mlp", {6, 6, 1}, 4, r);
      Tensor x({8, 6, 6, 1});
      for (auto& v : x.values()) v = r.uniform_f(-1.0f, 1.0f);
      std::vector<int> y(8);
      for (auto& v : y) v = static_cast<int>(r.uniform_int(4));
      double hmax = 0.0;
      if (!margin_mlp(mlp, x, 0.05, &hmax) || 5e-3 * std::max(1.0, hmax) > 0.03) {
        surgery_error = fmt("mlp relu margin surgery failed (hidden max %.3f)", hmax);
      } else {
        std::vector<Parameter*> ps;
        for (auto& p : mlp.params) ps.push_back(&p);
        auto build = [&](Tape& t) { return ce_from_logits(t, mlp.forward(t, t.constant(x)), y); };
        checks.emplace_back("mlp + cross_entropy (margined relu)",
                            fd_params(ps, build, 5e-3, 0.04, 611));
      }
    }

    {
      Rng r(612);
      Model conv = make_model("miniconv", {6, 6, 1}, 4, r);
      Tensor x({4, 6, 6, 1});
      for (auto& v : x.values()) v = r.uniform_f(-1.0f, 1.0f);
      std::vector<int> y(4);
      for (auto& v : y) v = static_cast<int>(r.uniform_int(4));
      // A first-kernel probe reaches the second conv's pre-activations
      // through every 3x3 tap of one input channel; bound that path too.
      double taps = 0.0;
      const Tensor& w2 = find_param(conv, "conv2.w")->value;
      const int ci2 = w2.dim(2), co2 = w2.dim(3);
      for (int c = 0; c < ci2; ++c)
        for (int oc = 0; oc < co2; ++oc) {
          double s = 0.0;
          for (int k = 0; k < 9; ++k)
            s += std::fabs(w2[(static_cast<int64_t>(k) * ci2 + c) * co2 + oc]);
          taps = std::max(taps, s);
        }
      double hmax = 0.0;
      if (!margin_miniconv(conv, x, 0.05, &hmax) ||
          5e-3 * std::max({1.0, hmax, taps}) > 0.03) {
        surgery_error = fmt("miniconv relu margin surgery failed (hidden max %.3f, taps %.3f)",
                            hmax, taps);
      } else {
        std::vector<Parameter*> ps;
        for (auto& p : conv.params) ps.push_back(&p);
        auto build = [&](Tape& t) {
          return ce_from_logits(t, conv.forward(t, t.constant(x)), y);
        };
        checks.emplace_back("miniconv + cross_entropy (margined relu)",
                            fd_params(ps, build, 5e-3, 0.04, 612));
      }
    }

    {
      Rng r(613);
      Model stu = make_model("linear", {2, 2, 1}, 3, r);
      Model ref = make_model("linear", {2, 2, 1}, 3, r);
      ref.set_trainable(false);
      Tensor x({6, 2, 2, 1});
      for (auto& v : x.values()) v = r.uniform_f(-1.0f, 1.0f);
      std::vector<int> y(6);
      for (auto& v : y) v = static_cast<int>(r.uniform_int(3));
      std::vector<Parameter*> ps;
      for (auto& p : stu.params) ps.push_back(&p);
      auto build = [&](Tape& t) {
        TensorId xi = t.constant(x);
        TensorId sl = stu.forward(t, xi);
        return t.add_scaled(ce_from_logits(t, sl, y), kl_from_logits(t, sl, ref.forward(t, xi)),
                            -0.7f);
      };
      checks.emplace_back("divqat objective (linear student)",
                          fd_params(ps, build, 1e-2, 0.03, 613));
    }

    {
      Rng r(614);
      Model stu = make_model("mlp", {6, 6, 1}, 4, r);
      Model ref = make_model("mlp", {6, 6, 1}, 4, r);
      ref.set_trainable(false);
      Tensor x({8, 6, 6, 1});
      for (auto& v : x.values()) v = r.uniform_f(-1.0f, 1.0f);
      std::vector<int> y(8);
      for (auto& v : y) v = static_cast<int>(r.uniform_int(4));
      // Only the student is probed; the frozen reference forward never
      // moves, so its relu kinks need no margin.
      double hmax = 0.0;
      if (!margin_mlp(stu, x, 0.05, &hmax) || 5e-3 * std::max(1.0, hmax) > 0.03) {
        surgery_error = fmt("student mlp relu margin surgery failed (hidden max %.3f)", hmax);
      } else {
        std::vector<Parameter*> ps;
        for (auto& p : stu.params) ps.push_back(&p);
        auto build = [&](Tape& t) {
          TensorId xi = t.constant(x);
          TensorId sl = stu.forward(t, xi);
          return t.add_scaled(ce_from_logits(t, sl, y),
                              kl_from_logits(t, sl, ref.forward(t, xi)), -0.7f);
        };
        checks.emplace_back("divqat objective (mlp student, margined relu)",
                            fd_params(ps, build, 5e-3, 0.04, 614));
      }
    }

    if (!surgery_error.empty()) return std::make_pair(false, surgery_error);
    double worst = 0.0;
    for (const auto& [name, rep] : checks) {
      if (!rep.ok() || rep.checked < 50)
        return std::make_pair(false, name + ": " + rep.describe());
      worst = std::max(worst, rep.max_rel_err);
    }
    return std::make_pair(true, fmt("%zu checks, >=50 coords each, max rel err %.2e",
                                    checks.size(), worst));
  });

  // ---- 3: divergence grows with alpha ----------------------------------
  run_criterion(3, "median final kl non-decreasing over alpha grid", [&]() {
    if (!setup_error.empty()) return std::make_pair(false, setup_error);
    std::string detail = "median kl";
    double prev = -1.0;
    for (double a : alpha_grid) {
      const std::string cell = MethodCell{QuantMethod::DivQat, a}.cell_id();
      const double m = cell_median(desk_a, cell, klf);
      detail += fmt(" %.3f", m);
      if (m < prev)
        return std::make_pair(false, fmt("kl median drops at alpha %g (%.6f < %.6f)", a, m, prev));
      prev = m;
    }
    return std::make_pair(true, detail + fmt(" over %zu alphas", alpha_grid.size()));
  });

  // ---- 4: knockoff hardening at bounded utility cost -------------------
  run_criterion(4, "knockoff: divqat raises adversary error >=2pts, drop <=5pts", [&]() {
    if (!setup_error.empty()) return std::make_pair(false, setup_error);
    std::vector<double> sel_adv, sel_def, sel_alpha;
    for (int seed : desk_cfg.seeds) {
      const MetricsReport* s = select_row(desk_a, seed, l1_budget);
      if (!s) return std::make_pair(false, fmt("no feasible alpha at seed %d", seed));
      sel_adv.push_back(s->adversary_error_pct.value());
      sel_def.push_back(s->defender_error_pct);
      sel_alpha.push_back(s->alpha.value());
    }
    const double adv_gap = median_of(sel_adv) - cell_median(desk_a, "qat", adv);
    const double def_drop = median_of(sel_def) - cell_median(desk_a, "qat", defe);
    knockoff_gap = adv_gap;
    const bool ok = adv_gap >= 2.0 && def_drop <= 5.0;
    return std::make_pair(ok, fmt("adversary gap %+.1f pts, defender drop %+.1f pts, alpha %g/%g/%g",
                                  adv_gap, def_drop, sel_alpha[0], sel_alpha[1], sel_alpha[2]));
  });

  // ---- 5: data-free attack is hurt at least as much --------------------
  run_criterion(5, "datafree: divqat gap positive and >= knockoff gap", [&]() {
    if (!setup_error.empty()) return std::make_pair(false, setup_error);
    if (std::isnan(knockoff_gap))
      return std::make_pair(false, std::string("knockoff gap unavailable"));
    std::vector<double> sel_adv;
    for (int seed : df_cfg.seeds) {
      const MetricsReport* s = select_row(df, seed, l1_budget);
      if (!s) return std::make_pair(false, fmt("no feasible alpha at seed %d", seed));
      sel_adv.push_back(s->adversary_error_pct.value());
    }
    const double gap = median_of(sel_adv) - cell_median(df, "qat", adv);
    const bool ok = gap > 0.0 && gap >= knockoff_gap - 1e-12;
    return std::make_pair(ok, fmt("datafree gap %+.1f pts vs knockoff %+.1f pts", gap, knockoff_gap));
  });

  // ---- 6: stacking with output perturbation defenses -------------------
  run_criterion(6, "stacked defenses: divqat+defense >= qat+defense", [&]() {
    if (!setup_error.empty()) return std::make_pair(false, setup_error);
    const std::string a1 = MethodCell{QuantMethod::DivQat, 1.0}.cell_id();
    const double rs_div = cell_median(rs, a1, adv);
    const double rs_qat = cell_median(rs, "qat", adv);
    const double dcp_div = cell_median(dcp, a1, adv);
    const double dcp_qat = cell_median(dcp, "qat", adv);
    const bool ok = rs_div >= rs_qat && dcp_div >= dcp_qat;
    return std::make_pair(ok, fmt("reverse_sigmoid %.1f vs %.1f; deception %.1f vs %.1f",
                                  rs_div, rs_qat, dcp_div, dcp_qat));
  });

  // ---- 7: ell-1 budget compliance against emitted reports --------------
  run_criterion(7, "ell-1 budget: defenses and selected models within 0.6", [&]() {
    if (!setup_error.empty()) return std::make_pair(false, setup_error);
    int defended = 0;
    for (const std::string dir : {"acc_rs", "acc_dcp"}) {
      const std::vector<MetricsReport> emitted = collect_reports(dir);
      if (emitted.empty()) return std::make_pair(false, "no emitted reports in " + dir);
      for (const auto& r : emitted) {
        if (!r.mean_l1)
          return std::make_pair(false, fmt("%s %s/%d has no mean_l1", dir.c_str(),
                                           r.cell.c_str(), r.seed));
        if (*r.mean_l1 > l1_budget + 1e-9)
          return std::make_pair(false, fmt("%s %s/%d mean_l1 %.6f exceeds %.1f", dir.c_str(),
                                           r.cell.c_str(), r.seed, *r.mean_l1, l1_budget));
        const auto& mem = dir == "acc_rs" ? rs : dcp;
        const MetricsReport* m = find_row(mem, r.cell, r.seed);
        if (!m || !m->mean_l1 || *m->mean_l1 != *r.mean_l1)
          return std::make_pair(false, fmt("emitted mean_l1 disagrees with run for %s/%d",
                                           r.cell.c_str(), r.seed));
        ++defended;
      }
    }
    const std::vector<MetricsReport> desk_emitted = collect_reports("acc_desk_a");
    int selected = 0;
    for (int seed : desk_cfg.seeds) {
      const MetricsReport* s = select_row(desk_emitted, seed, l1_budget);
      if (!s) return std::make_pair(false, fmt("no feasible alpha in emitted desk reports, seed %d", seed));
      if (*s->mean_l1 > l1_budget)
        return std::make_pair(false, fmt("selected model mean_l1 %.6f exceeds budget", *s->mean_l1));
      ++selected;
    }
    // The remaining defense kinds calibrate within the same budget.
    Model victim = load_model_file("acc_desk_a/qat/1/checkpoints/victim.dqck");
    TaskSpec t = desk_cfg.task;
    t.seed = Rng::derive(desk_cfg.master_seed, "data|seed1");
    SplitDataset d = generate(t);
    for (DefenseKind k : {DefenseKind::RandomNoise, DefenseKind::TopK}) {
      CalibratedDefense cd = calibrate_to_budget(k, victim, d.test.inputs, l1_budget, 991);
      if (cd.achieved_mean_l1 > l1_budget + 1e-9)
        return std::make_pair(false, fmt("%s calibrates to %.6f > budget",
                                         defense_kind_name(k).c_str(), cd.achieved_mean_l1));
    }
    return std::make_pair(true, fmt("%d defended rows + %d selected models within %.1f; "
                                    "noise/topk calibration compliant",
                                    defended, selected, l1_budget));
  });

  // ---- 8: quantization grid properties ----------------------------------
  run_criterion(8, "quant invariants over 10000 tensors per scheme/profile", [&]() {
    int64_t tensors = 0;
    for (QuantProfile profile : {QuantProfile::Server, QuantProfile::Mobile}) {
      for (QuantRole role : {QuantRole::Activation, QuantRole::Weight}) {
        Rng rng(9000 + 10 * static_cast<int>(profile) + static_cast<int>(role));
        for (int i = 0; i < 10000; ++i) {
          QuantSpec spec;
          spec.profile = profile;
          spec.bit_width = 2 + static_cast<int>(rng.uniform_int(7));
          const int rows = 1 + static_cast<int>(rng.uniform_int(6));
          const int cols = 1 + static_cast<int>(rng.uniform_int(6));
          Tensor x({rows, cols});
          const float lo = rng.uniform_f(-8.0f, 8.0f);
          const float hi = i % 97 == 0 ? lo : lo + rng.uniform_f(0.0f, 16.0f);
          for (auto& v : x.values()) v = rng.uniform_f(std::min(lo, hi), std::max(lo, hi));
          x[static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(x.numel())))] = 0.0f;

          FakeQuantState s;
          if (role == QuantRole::Weight) {
            s = weight_qparams(x, spec);
          } else {
            Observer obs;
            obs.observe(x);
            s = compute_qparams(obs, spec, role);
          }
          std::vector<uint8_t> mask;
          const Tensor y = fake_quantize_with_mask(x, s, mask);
          const Tensor z = fake_quantize(y, s);
          const int channels = static_cast<int>(s.scale.size());
          std::vector<std::set<float>> grid(static_cast<size_t>(channels));
          for (int64_t c = 0; c < x.numel(); ++c) {
            const int ch = s.per_channel ? static_cast<int>(c % cols) : 0;
            const double step = s.scale[static_cast<size_t>(ch)];
            const double zp = s.zero_point[static_cast<size_t>(ch)];
            if (!std::isfinite(y[c]) || z[c] != y[c])
              return std::make_pair(false, fmt("idempotence breaks at tensor %d coord %lld",
                                               i, (long long)c));
            const double q = y[c] / step + zp;
            if (std::fabs(q - std::round(q)) > 1e-2)
              return std::make_pair(false, fmt("off-grid value at tensor %d coord %lld", i,
                                               (long long)c));
            if (std::round(q) < s.qmin || std::round(q) > s.qmax)
              return std::make_pair(false, fmt("grid index escapes range at tensor %d", i));
            if (mask[static_cast<size_t>(c)] &&
                std::fabs(y[c] - x[c]) > 0.5 * step + 1e-5 * (std::fabs(x[c]) + step))
              return std::make_pair(false, fmt("in-range error above step/2 at tensor %d", i));
            if (s.zero_point[static_cast<size_t>(ch)] == 0 && x[c] == 0.0f && y[c] != 0.0f)
              return std::make_pair(false, fmt("zero not exact at tensor %d", i));
            grid[static_cast<size_t>(ch)].insert(y[c]);
          }
          const int64_t cardinality = int64_t{1} << spec.bit_width;
          for (const auto& g : grid)
            if (static_cast<int64_t>(g.size()) > cardinality)
              return std::make_pair(false, fmt("grid cardinality %zu exceeds 2^%d at tensor %d",
                                               g.size(), spec.bit_width, i));
          if (role == QuantRole::Weight && spec.weight_scheme() == QuantScheme::PerChannelSymmetric)
            for (auto zp : s.zero_point)
              if (zp != 0) return std::make_pair(false, fmt("symmetric zero point %d", zp));
          ++tensors;
        }
      }
    }
    return std::make_pair(true, fmt("%lld tensors, bit widths 2..8, no violations",
                                    (long long)tensors));
  });

  // ---- 9: metric oracles vs brute force ---------------------------------
  run_criterion(9, "metric oracles match brute force on 100 instances", [&]() {
    Rng rng(777);
    double worst = 0.0;
    auto close = [&](double a, double b) {
      worst = std::max(worst, std::fabs(a - b));
      return std::fabs(a - b) <= 1e-6 * std::max({1.0, std::fabs(a), std::fabs(b)});
    };
    for (int i = 0; i < 100; ++i) {
      const int B = 2 + static_cast<int>(rng.uniform_int(11));
      const int K = 2 + static_cast<int>(rng.uniform_int(9));
      Tensor p({B, K}), q({B, K});
      for (Tensor* t : {&p, &q}) {
        for (int r = 0; r < B; ++r) {
          double sum = 0.0;
          for (int c = 0; c < K; ++c) {
            t->at(r, c) = rng.uniform_f(0.001f, 1.0f);
            sum += t->at(r, c);
          }
          for (int c = 0; c < K; ++c) t->at(r, c) = static_cast<float>(t->at(r, c) / sum);
        }
      }
      std::vector<int> labels(static_cast<size_t>(B));
      for (auto& y : labels) y = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(K)));

      double ce_bf = 0.0, kl_bf = 0.0, l1_bf = 0.0;
      for (int r = 0; r < B; ++r) {
        ce_bf += -std::log(static_cast<double>(std::max(p.at(r, labels[static_cast<size_t>(r)]),
                                                        kEpsilonFloor)));
        for (int c = 0; c < K; ++c) {
          const float pv = p.at(r, c), qv = q.at(r, c);
          if (pv != 0.0f)
            kl_bf += static_cast<double>(pv) *
                     (std::log(static_cast<double>(std::max(pv, kEpsilonFloor))) -
                      std::log(static_cast<double>(std::max(qv, kEpsilonFloor))));
          l1_bf += std::fabs(static_cast<double>(pv) - static_cast<double>(qv));
        }
      }
      ce_bf /= B;
      kl_bf /= B;
      if (!close(cross_entropy(p, labels), ce_bf))
        return std::make_pair(false, fmt("cross_entropy deviates at instance %d", i));
      if (!close(kl_divergence(p, q), kl_bf))
        return std::make_pair(false, fmt("kl_divergence deviates at instance %d", i));
      if (!close(l1_distance(p, q), l1_bf))
        return std::make_pair(false, fmt("l1_distance deviates at instance %d", i));
      if (!close(divqat_loss(labels, p, q, 0.37), ce_bf - 0.37 * kl_bf))
        return std::make_pair(false, fmt("divqat_loss deviates at instance %d", i));

      Rng mr(1000 + static_cast<uint64_t>(i));
      Model victim = make_model("linear", {2, 2, 1}, K, mr);
      Model student = make_model("linear", {2, 2, 1}, K, mr);
      Dataset test;
      test.inputs = uniform_batch({2, 2, 1}, B, mr);
      test.labels = labels;
      test.num_classes = K;
      const ExtractionMetrics em = evaluate_extraction(victim, student, test);
      const Tensor vl = victim.logits(test.inputs);
      const Tensor sl = student.logits(test.inputs);
      int err = 0, dis = 0;
      for (int r = 0; r < B; ++r) {
        auto amax = [&](const Tensor& t) {
          int best = 0;
          for (int c = 1; c < K; ++c)
            if (t.at(r, c) > t.at(r, best)) best = c;
          return best;
        };
        if (amax(sl) != labels[static_cast<size_t>(r)]) ++err;
        if (amax(sl) != amax(vl)) ++dis;
      }
      if (!close(em.adversary_error_pct, 100.0 * err / B) ||
          !close(em.disagreement_pct, 100.0 * dis / B))
        return std::make_pair(false, fmt("extraction metrics deviate at instance %d", i));
    }
    return std::make_pair(true, fmt("6 metrics x 100 instances, max |dev| %.2e", worst));
  });

  // ---- 10: simplex everywhere + byte-identical reruns -------------------
  run_criterion(10, "simplex outputs and byte-identical repeat run", [&]() {
    if (!setup_error.empty()) return std::make_pair(false, setup_error);
    Model victim = load_model_file("acc_desk_a/qat/1/checkpoints/victim.dqck");
    Rng xr(303);
    Tensor x = uniform_batch(victim.input_shape, 200, xr);
    std::string why;
    const Tensor probs = victim.predict_proba(x);
    if (!rows_on_simplex(probs, 1e-6, &why))
      return std::make_pair(false, "model probabilities off simplex: " + why);

    Rng nr(304);
    DefenseConfig rs_cfg2{DefenseKind::ReverseSigmoid, 0.3, 1.5, 0.0, 0.0, 1, 0.6};
    DefenseConfig dcp_cfg2{DefenseKind::Deception, 0.0, 1.0, 0.7, 0.0, 1, 0.6};
    DefenseConfig noise_cfg{DefenseKind::RandomNoise, 0.0, 1.0, 0.0, 0.2, 1, 0.6};
    DefenseConfig topk_cfg{DefenseKind::TopK, 0.0, 1.0, 0.0, 0.0, 3, 0.6};
    for (const DefenseConfig& dc : {rs_cfg2, dcp_cfg2, noise_cfg, topk_cfg})
      if (!rows_on_simplex(apply_defense(probs, dc, &nr), 1e-6, &why))
        return std::make_pair(false, fmt("%s output off simplex: %s",
                                         defense_kind_name(dc.kind).c_str(), why.c_str()));

    VictimOracle oracle(victim, rs_cfg2, 11, -1);
    if (!rows_on_simplex(oracle.query(uniform_batch(victim.input_shape, 64, xr)), 1e-6, &why))
      return std::make_pair(false, "oracle output off simplex: " + why);

    if (report_csv(desk_a) != report_csv(desk_b))
      return std::make_pair(false, std::string("aggregate csv differs between runs"));
    int files = 0;
    for (const auto& cell : desk_cells) {
      for (int seed : desk_cfg.seeds) {
        for (const char* leaf : {"report.json", "history.jsonl", "checkpoints/victim.dqck"}) {
          const std::string rel = cell + "/" + std::to_string(seed) + "/" + leaf;
          const std::string a = read_file("acc_desk_a/" + rel);
          const std::string b = read_file("acc_desk_b/" + rel);
          if (a.empty() || a != b)
            return std::make_pair(false, "artifact differs or missing: " + rel);
          ++files;
        }
      }
    }
    return std::make_pair(true, fmt("simplex ok (model, 4 defenses, oracle); %d artifact files "
                                    "byte-identical across runs", files));
  });

  // ---- 11: query accounting ---------------------------------------------
  run_criterion(11, "query accounting exact and within budget", [&]() {
    Rng mr(11);
    Model v = make_model("linear", {2, 2, 1}, 4, mr);
    VictimOracle oracle(v, DefenseConfig{}, 1, 100);
    int64_t submitted = 0;
    for (int n : {10, 32, 1}) {
      oracle.query(uniform_batch({2, 2, 1}, n, mr));
      submitted += n;
    }
    if (oracle.query_count() != submitted)
      return std::make_pair(false, fmt("count %lld != submitted %lld",
                                       (long long)oracle.query_count(), (long long)submitted));
    bool threw = false;
    try {
      oracle.query(uniform_batch({2, 2, 1}, 58, mr));
    } catch (const BudgetExhaustedError&) {
      threw = true;
    }
    if (!threw || oracle.query_count() != submitted)
      return std::make_pair(false, std::string("over-budget batch was not rejected cleanly"));
    oracle.query(uniform_batch({2, 2, 1}, 57, mr));
    submitted += 57;
    if (oracle.query_count() != 100 || oracle.remaining() != 0)
      return std::make_pair(false, std::string("exact exhaustion not reached"));
    try {
      oracle.query(uniform_batch({2, 2, 1}, 1, mr));
      return std::make_pair(false, std::string("query beyond budget was served"));
    } catch (const BudgetExhaustedError&) {
    }

    if (!setup_error.empty()) return std::make_pair(false, setup_error);
    for (const auto* set : {&desk_a, &rs, &dcp})
      for (const auto& r : *set) {
        if (!r.query_count || *r.query_count != desk_cfg.attack.budget)
          return std::make_pair(false, fmt("knockoff row %s/%d spent %lld of %lld",
                                           r.cell.c_str(), r.seed,
                                           r.query_count ? (long long)*r.query_count : -1,
                                           (long long)desk_cfg.attack.budget));
      }
    int64_t df_spent = -1;
    for (const auto& r : df) {
      if (!r.query_count || *r.query_count <= 0 || *r.query_count > df_cfg.attack.budget)
        return std::make_pair(false, fmt("datafree row %s/%d outside budget", r.cell.c_str(),
                                         r.seed));
      df_spent = *r.query_count;
    }
    return std::make_pair(true, fmt("manual ledger exact; knockoff rows at %lld/%lld; "
                                    "datafree %lld <= %lld",
                                    (long long)desk_cfg.attack.budget,
                                    (long long)desk_cfg.attack.budget, (long long)df_spent,
                                    (long long)df_cfg.attack.budget));
  });

  std::printf("acceptance: %d/11 criteria passed\n", 11 - g_failures);
  return g_failures == 0 ? 0 : 1;
}
