// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "divqat/nn.hpp"
#include "divqat/rng.hpp"
#include "divqat/tensor.hpp"

namespace divqat {

enum class DefenseKind { None, ReverseSigmoid, Deception, RandomNoise, TopK };

DefenseKind parse_defense_kind(const std::string& s);
std::string defense_kind_name(DefenseKind k);

/// Output-perturbation defense settings. Only the parameter matching
/// `kind` is read; defenses are pure row transforms (noise draws come
/// from a caller-supplied stream).
struct DefenseConfig {
  DefenseKind kind = DefenseKind::None;
  double beta = 0.0;      // reverse_sigmoid magnitude
  double gamma = 1.0;     // reverse_sigmoid steepness, > 0
  double strength = 0.0;  // deception mix in [0,1]
  double eps = 0.0;       // random_noise amplitude
  int k = 1;              // topk_truncation keep count
  double l1_budget = 0.6;

  void validate(int num_classes = -1) const;
};

/// r_i = p_i - beta * (logistic(gamma * logit(p_i)) - 1/2), clipped to
/// [1e-7, 1] and renormalized, each row independently.
Tensor apply_reverse_sigmoid(const Tensor& probs, double beta, double gamma);

/// Keeps each row's top entry in place and mixes the remaining entries
/// toward their reversed ranking: q = (1-s) p + s d. Argmax exact.
Tensor apply_deception(const Tensor& probs, double strength);

/// Adds U(-eps, eps) per entry, clips to [1e-7, 1], renormalizes.
Tensor apply_random_noise(const Tensor& probs, double eps, Rng& rng);

/// Keeps the k largest entries per row (ties to the lower class index),
/// zeroes the rest, renormalizes.
Tensor truncate_topk(const Tensor& probs, int k);

/// Sum of absolute differences over all elements (for a single row,
/// the simplex ell-1 distance). UsageError on shape mismatch.
double l1_distance(const Tensor& p, const Tensor& q);

/// Mean / max of per-row ell-1 distances over a batch.
double mean_row_l1(const Tensor& p, const Tensor& q);
double max_row_l1(const Tensor& p, const Tensor& q);

/// Dispatch on cfg.kind; rng may be null unless kind is random_noise.
Tensor apply_defense(const Tensor& probs, const DefenseConfig& cfg, Rng* rng);

struct CalibratedDefense {
  DefenseConfig config;
  double achieved_mean_l1 = 0.0;
  double achieved_max_l1 = 0.0;
};

/// Largest defense strength whose mean per-row ell-1 perturbation on
/// the held-out inputs stays within `l1_budget`, found by binary search
/// (discrete scan for topk). Noise candidates are scored under common
/// random numbers so the search is deterministic and monotone.
/// reverse_sigmoid additionally rejects parameters that flip any
/// held-out argmax. Budget 0 returns the identity defense.
CalibratedDefense calibrate_to_budget(DefenseKind kind, const Model& victim,
                                      const Tensor& heldout_inputs, double l1_budget,
                                      uint64_t seed);

}  // namespace divqat
