// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "divqat/tensor.hpp"

namespace divqat {

using TensorId = int32_t;

/// Trainable (or frozen) weight blob. Gradients accumulate into `grad`
/// across backward sweeps until the optimizer clears them.
struct Parameter {
  Tensor value;
  Tensor grad;
  bool trainable = true;
  std::string name;

  explicit Parameter(Tensor v, std::string n = {}, bool train = true)
      : value(std::move(v)), grad(value.shape()), trainable(train), name(std::move(n)) {}

  void zero_grad() {
    for (auto& g : grad.values()) g = 0.0f;
  }
};

/// Reverse-mode tape. One tape per training step: record a forward pass,
/// call backward() on a scalar root, read gradients out of Parameters.
///
/// Extension point for ops with hand-derived gradients:
///   TensorId out = tape.add_node(value, {in_a, in_b});
///   if (tape.needs(out))
///     tape.set_backward(out, [=](Tape& t) { ...t.accum_grad(in_a, ...)... });
class Tape {
public:
  using BackwardFn = std::function<void(Tape&)>;

  Tape() { nodes_.reserve(64); }

  /// Leaf with no gradient demand (inputs, labels, frozen teacher weights).
  TensorId constant(Tensor v);

  /// Leaf bound to a Parameter; after backward() its gradient lands in p.grad.
  TensorId leaf(Parameter& p);

  /// Raw node insertion; needs_grad is the OR over inputs.
  TensorId add_node(Tensor value, std::initializer_list<TensorId> inputs);
  TensorId add_node(Tensor value, const std::vector<TensorId>& inputs);
  void set_backward(TensorId id, BackwardFn fn);

  const Tensor& value(TensorId id) const { return nodes_[static_cast<size_t>(id)].value; }
  float scalar_value(TensorId id) const;
  bool needs(TensorId id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

  /// Gradient of the sweep root w.r.t. node `id`; zeros if the node was
  /// never reached. Allocates on demand.
  const Tensor& grad(TensorId id);

  /// Adds `g` (shape of the node's value) into the node's gradient.
  void accum_grad(TensorId id, const Tensor& g);
  /// Adds into the gradient through a raw accumulator to avoid a temporary.
  float* grad_accum_ptr(TensorId id);

  /// Reverse sweep from a scalar root seeded with 1. Throws UsageError if
  /// the root is not a single element.
  void backward(TensorId root);

  /// Reverse sweep seeded with an externally supplied output gradient.
  void backward_with_grad(TensorId root, const Tensor& root_grad);

  size_t size() const { return nodes_.size(); }

  // ---- primitive ops -------------------------------------------------

  /// [B, I] x [I, O] -> [B, O]
  TensorId matmul(TensorId a, TensorId b);
  /// [B, O] + [O] broadcast over rows.
  TensorId add_rows(TensorId a, TensorId bias);
  /// NHWC valid-or-padded convolution, stride 1.
  /// x [B,H,W,Cin], w [KH,KW,Cin,Cout], bias [Cout] folded into the output.
  TensorId conv2d(TensorId x, TensorId w, TensorId bias, int pad = 0);
  TensorId relu(TensorId x);
  TensorId sigmoid(TensorId x);
  TensorId reshape(TensorId x, std::vector<int> shape);
  TensorId add(TensorId a, TensorId b);
  TensorId sub(TensorId a, TensorId b);
  TensorId mul(TensorId a, TensorId b);
  TensorId square(TensorId a);
  TensorId scale(TensorId a, float s);
  /// a + coeff * b, elementwise, shapes equal. Scalar loss combiner.
  TensorId add_scaled(TensorId a, TensorId b, float coeff);
  TensorId sum_all(TensorId a);
  TensorId mean_all(TensorId a);

private:
  struct Node {
    Tensor value;
    Tensor grad;
    Parameter* param = nullptr;
    BackwardFn backward;
    bool needs_grad = false;
  };

  void sweep(TensorId root);

  std::vector<Node> nodes_;
};

}  // namespace divqat
