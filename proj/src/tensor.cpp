// SPDX-License-Identifier: Apache-2.0
#include "divqat/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

namespace divqat {

int64_t Tensor::checked_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw UsageError("tensor: negative extent");
    n *= d;
  }
  return n;
}

bool Tensor::all_finite() const {
  for (float v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::string s;
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape_[i]);
  }
  return s.empty() ? "scalar" : s;
}

Tensor softmax(const Tensor& logits) {
  const int64_t rows = batch_rows(logits);
  const int64_t cols = row_width(logits);
  Tensor out(logits.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const float* in = logits.data() + r * cols;
    float* o = out.data() + r * cols;
    float m = -std::numeric_limits<float>::infinity();
    for (int64_t c = 0; c < cols; ++c) m = std::max(m, in[c]);
    double sum = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      const double e = std::exp(static_cast<double>(in[c]) - m);
      o[c] = static_cast<float>(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int64_t c = 0; c < cols; ++c)
      o[c] = static_cast<float>(o[c] * inv);
  }
  return out;
}

Tensor log_softmax(const Tensor& logits) {
  const int64_t rows = batch_rows(logits);
  const int64_t cols = row_width(logits);
  Tensor out(logits.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const float* in = logits.data() + r * cols;
    float* o = out.data() + r * cols;
    float m = -std::numeric_limits<float>::infinity();
    for (int64_t c = 0; c < cols; ++c) m = std::max(m, in[c]);
    double sum = 0.0;
    for (int64_t c = 0; c < cols; ++c)
      sum += std::exp(static_cast<double>(in[c]) - m);
    const double lse = m + std::log(sum);
    for (int64_t c = 0; c < cols; ++c)
      o[c] = static_cast<float>(in[c] - lse);
  }
  return out;
}

Tensor gather_rows(const Tensor& t, const std::vector<int64_t>& idx) {
  const int64_t w = row_width(t);
  std::vector<int> shape = t.shape();
  shape[0] = static_cast<int>(idx.size());
  Tensor out(std::move(shape));
  for (size_t i = 0; i < idx.size(); ++i) {
    const int64_t r = idx[i];
    if (r < 0 || r >= batch_rows(t)) throw UsageError("gather_rows: index out of range");
    const float* src = t.data() + r * w;
    float* dst = out.data() + static_cast<int64_t>(i) * w;
    for (int64_t c = 0; c < w; ++c) dst[c] = src[c];
  }
  return out;
}

}  // namespace divqat
