// SPDX-License-Identifier: Apache-2.0
#include "divqat/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "divqat/errors.hpp"
#include "divqat/losses.hpp"

namespace divqat {

DefenseKind parse_defense_kind(const std::string& s) {
  if (s == "none") return DefenseKind::None;
  if (s == "reverse_sigmoid") return DefenseKind::ReverseSigmoid;
  if (s == "deception") return DefenseKind::Deception;
  if (s == "random_noise") return DefenseKind::RandomNoise;
  if (s == "topk_truncation") return DefenseKind::TopK;
  throw ConfigError("defense: unknown kind '" + s + "'");
}

std::string defense_kind_name(DefenseKind k) {
  switch (k) {
    case DefenseKind::None: return "none";
    case DefenseKind::ReverseSigmoid: return "reverse_sigmoid";
    case DefenseKind::Deception: return "deception";
    case DefenseKind::RandomNoise: return "random_noise";
    case DefenseKind::TopK: return "topk_truncation";
  }
  return "?";
}

void DefenseConfig::validate(int num_classes) const {
  if (l1_budget < 0.0) throw ConfigError("defense: l1_budget must be nonnegative");
  switch (kind) {
    case DefenseKind::None:
      break;
    case DefenseKind::ReverseSigmoid:
      if (beta < 0.0) throw ConfigError("defense: reverse_sigmoid beta must be >= 0");
      if (!(gamma > 0.0)) throw ConfigError("defense: reverse_sigmoid gamma must be > 0");
      break;
    case DefenseKind::Deception:
      if (!(strength >= 0.0 && strength <= 1.0))
        throw ConfigError("defense: deception strength must lie in [0,1]");
      break;
    case DefenseKind::RandomNoise:
      if (eps < 0.0) throw ConfigError("defense: random_noise eps must be >= 0");
      break;
    case DefenseKind::TopK:
      if (k < 1) throw ConfigError("defense: topk k must be >= 1");
      if (num_classes > 0 && k > num_classes)
        throw ConfigError("defense: topk k exceeds class count");
      break;
  }
}

namespace {

constexpr double kClipFloor = 1e-7;

void clip_renorm_row(float* row, int64_t k) {
  double sum = 0.0;
  for (int64_t i = 0; i < k; ++i) {
    row[i] = static_cast<float>(std::min(std::max(static_cast<double>(row[i]), kClipFloor), 1.0));
    sum += row[i];
  }
  for (int64_t i = 0; i < k; ++i)
    row[i] = static_cast<float>(row[i] / sum);
}

/// Row indices ordered by descending probability, ties to lower index.
void rank_desc(const float* row, int64_t k, std::vector<int>& order) {
  order.resize(static_cast<size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [row](int a, int b) { return row[a] > row[b]; });
}

}  // namespace

Tensor apply_reverse_sigmoid(const Tensor& probs, double beta, double gamma) {
  if (beta < 0.0 || !(gamma > 0.0))
    throw ConfigError("reverse_sigmoid: beta >= 0 and gamma > 0 required");
  const int64_t rows = batch_rows(probs);
  const int64_t k = row_width(probs);
  Tensor out(probs.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const float* in = probs.data() + r * k;
    float* o = out.data() + r * k;
    for (int64_t i = 0; i < k; ++i) {
      const double p = std::min(std::max(static_cast<double>(in[i]), kClipFloor), 1.0 - kClipFloor);
      const double s = 1.0 / (1.0 + std::exp(-gamma * std::log(p / (1.0 - p))));
      o[i] = static_cast<float>(p - beta * (s - 0.5));
    }
    clip_renorm_row(o, k);
  }
  return out;
}

Tensor apply_deception(const Tensor& probs, double strength) {
  if (!(strength >= 0.0 && strength <= 1.0))
    throw ConfigError("deception: strength must lie in [0,1]");
  const int64_t rows = batch_rows(probs);
  const int64_t k = row_width(probs);
  Tensor out(probs.shape());
  std::vector<int> order;
  for (int64_t r = 0; r < rows; ++r) {
    const float* in = probs.data() + r * k;
    float* o = out.data() + r * k;
    rank_desc(in, k, order);
    // d keeps the top entry and hands the j-th runner-up the value of
    // the (K-j)-th; for [0.6,0.3,0.1] that is [0.6,0.1,0.3].
    for (int64_t i = 0; i < k; ++i) o[i] = in[i];
    for (int64_t j = 1; j < k; ++j) {
      const int dst = order[static_cast<size_t>(j)];
      const int src = order[static_cast<size_t>(k - j)];
      const double d = in[src];
      o[dst] = static_cast<float>((1.0 - strength) * in[dst] + strength * d);
    }
    clip_renorm_row(o, k);
  }
  return out;
}

Tensor apply_random_noise(const Tensor& probs, double eps, Rng& rng) {
  if (eps < 0.0) throw ConfigError("random_noise: eps must be >= 0");
  const int64_t rows = batch_rows(probs);
  const int64_t k = row_width(probs);
  Tensor out(probs.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const float* in = probs.data() + r * k;
    float* o = out.data() + r * k;
    for (int64_t i = 0; i < k; ++i)
      o[i] = static_cast<float>(in[i] + eps * (2.0 * rng.uniform() - 1.0));
    clip_renorm_row(o, k);
  }
  return out;
}

Tensor truncate_topk(const Tensor& probs, int k) {
  const int64_t rows = batch_rows(probs);
  const int64_t width = row_width(probs);
  if (k < 1 || k > width) throw ConfigError("topk: k must lie in [1, K]");
  Tensor out(probs.shape());
  std::vector<int> order;
  for (int64_t r = 0; r < rows; ++r) {
    const float* in = probs.data() + r * width;
    float* o = out.data() + r * width;
    rank_desc(in, width, order);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) sum += in[order[static_cast<size_t>(j)]];
    for (int64_t i = 0; i < width; ++i) o[i] = 0.0f;
    if (sum <= 0.0) sum = 1.0;
    for (int j = 0; j < k; ++j) {
      const int idx = order[static_cast<size_t>(j)];
      o[idx] = static_cast<float>(in[idx] / sum);
    }
  }
  return out;
}

double l1_distance(const Tensor& p, const Tensor& q) {
  if (!p.same_shape(q)) throw UsageError("l1_distance: shape mismatch");
  double sum = 0.0;
  for (int64_t i = 0; i < p.numel(); ++i)
    sum += std::fabs(static_cast<double>(p[i]) - static_cast<double>(q[i]));
  return sum;
}

double mean_row_l1(const Tensor& p, const Tensor& q) {
  if (!p.same_shape(q)) throw UsageError("mean_row_l1: shape mismatch");
  const int64_t rows = batch_rows(p);
  if (rows == 0) throw UsageError("mean_row_l1: empty batch");
  return l1_distance(p, q) / static_cast<double>(rows);
}

double max_row_l1(const Tensor& p, const Tensor& q) {
  if (!p.same_shape(q)) throw UsageError("max_row_l1: shape mismatch");
  const int64_t rows = batch_rows(p);
  const int64_t k = row_width(p);
  double best = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (int64_t i = 0; i < k; ++i)
      sum += std::fabs(static_cast<double>(p[r * k + i]) - static_cast<double>(q[r * k + i]));
    best = std::max(best, sum);
  }
  return best;
}

Tensor apply_defense(const Tensor& probs, const DefenseConfig& cfg, Rng* rng) {
  switch (cfg.kind) {
    case DefenseKind::None:
      return probs;
    case DefenseKind::ReverseSigmoid:
      return apply_reverse_sigmoid(probs, cfg.beta, cfg.gamma);
    case DefenseKind::Deception:
      return apply_deception(probs, cfg.strength);
    case DefenseKind::RandomNoise:
      if (!rng) throw UsageError("random_noise defense needs an RNG stream");
      return apply_random_noise(probs, cfg.eps, *rng);
    case DefenseKind::TopK:
      return truncate_topk(probs, cfg.k);
  }
  throw UsageError("apply_defense: unhandled kind");
}

namespace {

int count_argmax_flips(const Tensor& clean, const Tensor& defended) {
  const int64_t rows = batch_rows(clean);
  const int64_t k = row_width(clean);
  int flips = 0;
  for (int64_t r = 0; r < rows; ++r) {
    int a = 0, b = 0;
    const float* c = clean.data() + r * k;
    const float* d = defended.data() + r * k;
    for (int64_t i = 1; i < k; ++i) {
      if (c[i] > c[a]) a = static_cast<int>(i);
      if (d[i] > d[b]) b = static_cast<int>(i);
    }
    if (a != b) ++flips;
  }
  return flips;
}

DefenseConfig config_with_param(DefenseKind kind, double param) {
  DefenseConfig c;
  c.kind = kind;
  switch (kind) {
    case DefenseKind::ReverseSigmoid: c.beta = param; break;
    case DefenseKind::Deception: c.strength = param; break;
    case DefenseKind::RandomNoise: c.eps = param; break;
    default: break;
  }
  return c;
}

}  // namespace

CalibratedDefense calibrate_to_budget(DefenseKind kind, const Model& victim,
                                      const Tensor& heldout_inputs, double l1_budget,
                                      uint64_t seed) {
  if (batch_rows(heldout_inputs) == 0)
    throw UsageError("calibrate_to_budget: empty held-out set");
  if (l1_budget < 0.0) throw ConfigError("calibrate_to_budget: negative budget");

  CalibratedDefense out;
  out.config.kind = DefenseKind::None;
  out.config.l1_budget = l1_budget;
  if (kind == DefenseKind::None || l1_budget == 0.0) return out;

  const Tensor clean = victim.predict_proba(heldout_inputs);
  const int width = static_cast<int>(row_width(clean));
  const uint64_t eval_seed = Rng::derive(seed, "defense-calibration");

  auto measure = [&](const DefenseConfig& cfg, double& mean_l1, double& max_l1,
                     int& flips) {
    Rng rng(eval_seed);  // common random numbers across candidates
    const Tensor defended = apply_defense(clean, cfg, &rng);
    mean_l1 = mean_row_l1(clean, defended);
    max_l1 = max_row_l1(clean, defended);
    flips = count_argmax_flips(clean, defended);
  };

  if (kind == DefenseKind::TopK) {
    // Discrete strength: smaller k perturbs more. Keep the smallest
    // feasible k (k = K is the identity and always feasible).
    DefenseConfig best;
    best.kind = DefenseKind::TopK;
    best.k = width;
    double best_mean = 0.0, best_max = 0.0;
    for (int k = width; k >= 1; --k) {
      DefenseConfig cand;
      cand.kind = DefenseKind::TopK;
      cand.k = k;
      double mean_l1, max_l1;
      int flips;
      measure(cand, mean_l1, max_l1, flips);
      if (mean_l1 <= l1_budget) {
        best = cand;
        best_mean = mean_l1;
        best_max = max_l1;
      }
    }
    out.config = best;
    out.config.l1_budget = l1_budget;
    out.achieved_mean_l1 = best_mean;
    out.achieved_max_l1 = best_max;
    return out;
  }

  const double param_hi = kind == DefenseKind::Deception ? 1.0 : 2.0;
  auto feasible = [&](double param, double& mean_l1, double& max_l1) {
    const DefenseConfig cand = config_with_param(kind, param);
    int flips;
    measure(cand, mean_l1, max_l1, flips);
    if (kind == DefenseKind::ReverseSigmoid && flips > 0) return false;
    return mean_l1 <= l1_budget;
  };

  double lo = 0.0, lo_mean = 0.0, lo_max = 0.0;
  double hi_mean, hi_max;
  if (feasible(param_hi, hi_mean, hi_max)) {
    lo = param_hi;
    lo_mean = hi_mean;
    lo_max = hi_max;
  } else {
    double hi = param_hi;
    for (int it = 0; it < 48; ++it) {
      const double mid = 0.5 * (lo + hi);
      double m_mean, m_max;
      if (feasible(mid, m_mean, m_max)) {
        lo = mid;
        lo_mean = m_mean;
        lo_max = m_max;
      } else {
        hi = mid;
      }
    }
  }
  out.config = config_with_param(kind, lo);
  out.config.l1_budget = l1_budget;
  out.achieved_mean_l1 = lo_mean;
  out.achieved_max_l1 = lo_max;
  return out;
}

}  // namespace divqat
