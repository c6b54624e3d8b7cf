// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "divqat/autodiff.hpp"
#include "divqat/tensor.hpp"

namespace divqat {

/// Probabilities below this are floored before entering a log or ratio.
constexpr float kEpsilonFloor = 1e-7f;

// Probability-space evaluations (metrics, oracles). Batch means,
// accumulated in 64-bit.

/// Mean over rows of -log(max(p[label], floor)). UsageError on a label
/// outside [0, K).
double cross_entropy(const Tensor& probs, const std::vector<int>& labels);

/// Mean over rows of sum_i p_i * log(p_i / q_i), natural log, both log
/// arguments floored; terms with p_i == 0 contribute nothing.
/// UsageError on shape mismatch.
double kl_divergence(const Tensor& probs_quant, const Tensor& probs_large);

/// cross_entropy(probs_quant, labels) - alpha * kl_divergence(quant, large).
/// ConfigError on negative alpha.
double divqat_loss(const std::vector<int>& labels, const Tensor& probs_quant,
                   const Tensor& probs_large, double alpha);

// Logit-space tape nodes used by the training loops. All stable via
// log-sum-exp; gradients hand-derived and finite-difference verified.

/// Scalar mean over the batch of -log_softmax(logits)[label].
TensorId ce_from_logits(Tape& t, TensorId logits, const std::vector<int>& labels);

/// Scalar mean of -sum_i target_i * log_softmax(logits)_i (soft labels).
TensorId soft_ce_from_logits(Tape& t, TensorId logits, const Tensor& targets);

/// Scalar mean KL(softmax(logits_q) || softmax(logits_l)). Gradient
/// flows into logits_q only; the reference side stays fixed.
TensorId kl_from_logits(Tape& t, TensorId logits_q, TensorId logits_l);

}  // namespace divqat
