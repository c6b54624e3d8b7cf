// SPDX-License-Identifier: Apache-2.0
#include "divqat/losses.hpp"

#include <cmath>

#include "divqat/errors.hpp"

namespace divqat {

double cross_entropy(const Tensor& probs, const std::vector<int>& labels) {
  const int64_t rows = batch_rows(probs);
  const int64_t cols = row_width(probs);
  if (rows == 0) throw UsageError("cross_entropy: empty batch");
  if (static_cast<int64_t>(labels.size()) != rows)
    throw UsageError("cross_entropy: label count does not match batch");
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    const int y = labels[static_cast<size_t>(r)];
    if (y < 0 || y >= cols) throw UsageError("cross_entropy: label out of range");
    const double p = std::max<double>(probs[r * cols + y], kEpsilonFloor);
    total -= std::log(p);
  }
  return total / static_cast<double>(rows);
}

double kl_divergence(const Tensor& probs_quant, const Tensor& probs_large) {
  if (!probs_quant.same_shape(probs_large))
    throw UsageError("kl_divergence: shape mismatch " + probs_quant.shape_str() + " vs " +
                     probs_large.shape_str());
  const int64_t rows = batch_rows(probs_quant);
  const int64_t cols = row_width(probs_quant);
  if (rows == 0) throw UsageError("kl_divergence: empty batch");
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) {
      const double p = probs_quant[r * cols + c];
      if (p <= 0.0) continue;
      const double pf = std::max(p, static_cast<double>(kEpsilonFloor));
      const double qf = std::max<double>(probs_large[r * cols + c], kEpsilonFloor);
      total += p * std::log(pf / qf);
    }
  return total / static_cast<double>(rows);
}

double divqat_loss(const std::vector<int>& labels, const Tensor& probs_quant,
                   const Tensor& probs_large, double alpha) {
  if (alpha < 0.0) throw ConfigError("divqat: alpha must be nonnegative");
  return cross_entropy(probs_quant, labels) - alpha * kl_divergence(probs_quant, probs_large);
}

TensorId ce_from_logits(Tape& t, TensorId logits, const std::vector<int>& labels) {
  const Tensor& z = t.value(logits);
  const int64_t rows = batch_rows(z);
  const int64_t cols = row_width(z);
  if (rows == 0) throw UsageError("ce_from_logits: empty batch");
  if (static_cast<int64_t>(labels.size()) != rows)
    throw UsageError("ce_from_logits: label count does not match batch");
  const Tensor lsm = log_softmax(z);
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    const int y = labels[static_cast<size_t>(r)];
    if (y < 0 || y >= cols) throw UsageError("ce_from_logits: label out of range");
    total -= lsm[r * cols + y];
  }
  TensorId id = t.add_node(Tensor::scalar(static_cast<float>(total / static_cast<double>(rows))),
                           {logits});
  if (t.needs(id)) {
    Tensor probs = softmax(z);
    t.set_backward(id, [logits, id, labels, probs = std::move(probs), rows, cols](Tape& tp) {
      const float g = tp.grad(id)[0] / static_cast<float>(rows);
      float* gz = tp.grad_accum_ptr(logits);
      for (int64_t r = 0; r < rows; ++r) {
        const int y = labels[static_cast<size_t>(r)];
        for (int64_t c = 0; c < cols; ++c) {
          const float onehot = c == y ? 1.0f : 0.0f;
          gz[r * cols + c] += g * (probs[r * cols + c] - onehot);
        }
      }
    });
  }
  return id;
}

TensorId soft_ce_from_logits(Tape& t, TensorId logits, const Tensor& targets) {
  const Tensor& z = t.value(logits);
  if (!z.same_shape(targets)) throw UsageError("soft_ce_from_logits: shape mismatch");
  const int64_t rows = batch_rows(z);
  const int64_t cols = row_width(z);
  if (rows == 0) throw UsageError("soft_ce_from_logits: empty batch");
  const Tensor lsm = log_softmax(z);
  double total = 0.0;
  for (int64_t i = 0; i < z.numel(); ++i)
    total -= static_cast<double>(targets[i]) * lsm[i];
  TensorId id = t.add_node(Tensor::scalar(static_cast<float>(total / static_cast<double>(rows))),
                           {logits});
  if (t.needs(id)) {
    Tensor probs = softmax(z);
    // Per row with target mass S: d/dz_c = (S * p_c - t_c) / B.
    std::vector<float> mass(static_cast<size_t>(rows), 0.0f);
    for (int64_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (int64_t c = 0; c < cols; ++c) s += targets[r * cols + c];
      mass[static_cast<size_t>(r)] = static_cast<float>(s);
    }
    t.set_backward(id, [logits, id, targets, probs = std::move(probs),
                        mass = std::move(mass), rows, cols](Tape& tp) {
      const float g = tp.grad(id)[0] / static_cast<float>(rows);
      float* gz = tp.grad_accum_ptr(logits);
      for (int64_t r = 0; r < rows; ++r) {
        const float s = mass[static_cast<size_t>(r)];
        for (int64_t c = 0; c < cols; ++c)
          gz[r * cols + c] += g * (s * probs[r * cols + c] - targets[r * cols + c]);
      }
    });
  }
  return id;
}

TensorId kl_from_logits(Tape& t, TensorId logits_q, TensorId logits_l) {
  const Tensor& zq = t.value(logits_q);
  const Tensor& zl = t.value(logits_l);
  if (!zq.same_shape(zl)) throw UsageError("kl_from_logits: shape mismatch");
  const int64_t rows = batch_rows(zq);
  const int64_t cols = row_width(zq);
  if (rows == 0) throw UsageError("kl_from_logits: empty batch");
  const Tensor lq = log_softmax(zq);
  const Tensor ll = log_softmax(zl);
  Tensor pq = softmax(zq);
  std::vector<float> row_kl(static_cast<size_t>(rows), 0.0f);
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int64_t c = 0; c < cols; ++c)
      acc += static_cast<double>(pq[r * cols + c]) * (lq[r * cols + c] - ll[r * cols + c]);
    row_kl[static_cast<size_t>(r)] = static_cast<float>(acc);
    total += acc;
  }
  TensorId id = t.add_node(Tensor::scalar(static_cast<float>(total / static_cast<double>(rows))),
                           {logits_q});
  if (t.needs(id)) {
    // d/dzq_c of sum_i pq_i (lq_i - ll_i) = pq_c ((lq_c - ll_c) - row KL).
    Tensor diff({static_cast<int>(rows), static_cast<int>(cols)});
    for (int64_t i = 0; i < zq.numel(); ++i) diff[i] = lq[i] - ll[i];
    t.set_backward(id, [logits_q, id, pq = std::move(pq), diff = std::move(diff),
                        row_kl = std::move(row_kl), rows, cols](Tape& tp) {
      const float g = tp.grad(id)[0] / static_cast<float>(rows);
      float* gz = tp.grad_accum_ptr(logits_q);
      for (int64_t r = 0; r < rows; ++r) {
        const float rk = row_kl[static_cast<size_t>(r)];
        for (int64_t c = 0; c < cols; ++c)
          gz[r * cols + c] += g * pq[r * cols + c] * (diff[r * cols + c] - rk);
      }
    });
  }
  return id;
}

}  // namespace divqat
