// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "divqat/errors.hpp"

namespace divqat {

/// Dense n-dimensional array of 32-bit reals, row-major.
/// Value-semantic: copies are deep, safe to move across threads.
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0f) {}

  Tensor(std::vector<int> shape, std::vector<float> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    if (checked_numel(shape_) != static_cast<int64_t>(data_.size()))
      throw UsageError("tensor: value count does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, float v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(float v) { return Tensor({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& values() { return data_; }
  const std::vector<float>& values() const { return data_; }

  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  /// 2-D accessor, [rows, cols].
  float& at(int r, int c) { return data_[static_cast<size_t>(r) * dim(1) + c]; }
  float at(int r, int c) const { return data_[static_cast<size_t>(r) * dim(1) + c]; }

  /// Same data, new shape. Element count must match.
  Tensor reshaped(std::vector<int> new_shape) const {
    if (checked_numel(new_shape) != numel())
      throw UsageError("reshape: element count mismatch");
    return Tensor(std::move(new_shape), data_);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const;

  /// "2x3x4" style, for error messages.
  std::string shape_str() const;

  static int64_t checked_numel(const std::vector<int>& shape);

private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

/// Rows of a [B, ...] tensor: number of leading-extent slices.
inline int64_t batch_rows(const Tensor& t) {
  return t.rank() == 0 ? 0 : t.dim(0);
}

/// Elements per leading-extent slice.
inline int64_t row_width(const Tensor& t) {
  return t.rank() == 0 || t.dim(0) == 0 ? 0 : t.numel() / t.dim(0);
}

/// Numerically stable softmax over the last axis (max-subtraction),
/// per-row sums accumulated in 64-bit. Rows sum to 1 within 1e-6.
Tensor softmax(const Tensor& logits);

/// log(softmax) over the last axis via the log-sum-exp identity.
Tensor log_softmax(const Tensor& logits);

/// Gathers rows `idx` of a [N, ...] tensor into a new [len(idx), ...] tensor.
Tensor gather_rows(const Tensor& t, const std::vector<int64_t>& idx);

}  // namespace divqat
