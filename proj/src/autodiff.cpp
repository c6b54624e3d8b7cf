// SPDX-License-Identifier: Apache-2.0
#include "divqat/autodiff.hpp"

#include <cmath>

namespace divqat {

TensorId Tape::constant(Tensor v) {
  nodes_.push_back(Node{std::move(v), Tensor{}, nullptr, nullptr, false});
  return static_cast<TensorId>(nodes_.size() - 1);
}

TensorId Tape::leaf(Parameter& p) {
  Node n;
  n.value = p.value;
  n.param = &p;
  n.needs_grad = p.trainable;
  nodes_.push_back(std::move(n));
  return static_cast<TensorId>(nodes_.size() - 1);
}

TensorId Tape::add_node(Tensor value, std::initializer_list<TensorId> inputs) {
  Node n;
  n.value = std::move(value);
  for (TensorId i : inputs) n.needs_grad = n.needs_grad || needs(i);
  nodes_.push_back(std::move(n));
  return static_cast<TensorId>(nodes_.size() - 1);
}

TensorId Tape::add_node(Tensor value, const std::vector<TensorId>& inputs) {
  Node n;
  n.value = std::move(value);
  for (TensorId i : inputs) n.needs_grad = n.needs_grad || needs(i);
  nodes_.push_back(std::move(n));
  return static_cast<TensorId>(nodes_.size() - 1);
}

void Tape::set_backward(TensorId id, BackwardFn fn) {
  nodes_[static_cast<size_t>(id)].backward = std::move(fn);
}

float Tape::scalar_value(TensorId id) const {
  const Tensor& v = value(id);
  if (v.numel() != 1) throw UsageError("scalar_value: node has " + v.shape_str() + " elements");
  return v[0];
}

const Tensor& Tape::grad(TensorId id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty() && n.value.numel() > 0) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::accum_grad(TensorId id, const Tensor& g) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.value.same_shape(g)) throw UsageError("accum_grad: shape mismatch");
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  float* dst = n.grad.data();
  const float* src = g.data();
  const int64_t m = g.numel();
  for (int64_t i = 0; i < m; ++i) dst[i] += src[i];
}

float* Tape::grad_accum_ptr(TensorId id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad.data();
}

void Tape::backward(TensorId root) {
  Node& r = nodes_[static_cast<size_t>(root)];
  if (r.value.numel() != 1)
    throw UsageError("backward: root must be scalar, got " + r.value.shape_str());
  if (r.grad.empty()) r.grad = Tensor(r.value.shape());
  r.grad[0] += 1.0f;
  sweep(root);
}

void Tape::backward_with_grad(TensorId root, const Tensor& root_grad) {
  Node& r = nodes_[static_cast<size_t>(root)];
  if (!r.value.same_shape(root_grad))
    throw UsageError("backward_with_grad: seed shape mismatch");
  accum_grad(root, root_grad);
  sweep(root);
}

void Tape::sweep(TensorId root) {
  for (TensorId i = root; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this);
  }
  // Flush leaf gradients into their bound parameters.
  for (TensorId i = root; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.param || !n.param->trainable || n.grad.empty()) continue;
    float* dst = n.param->grad.data();
    const float* src = n.grad.data();
    const int64_t m = n.grad.numel();
    for (int64_t j = 0; j < m; ++j) dst[j] += src[j];
    n.grad = Tensor{};  // consumed; repeated sweeps re-accumulate from scratch
  }
}

// ---- primitive ops ---------------------------------------------------

TensorId Tape::matmul(TensorId a, TensorId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw UsageError("matmul: incompatible shapes " + A.shape_str() + " x " + B.shape_str());
  const int M = A.dim(0), K = A.dim(1), N = B.dim(1);
  Tensor out({M, N});
  for (int i = 0; i < M; ++i) {
    const float* arow = A.data() + static_cast<int64_t>(i) * K;
    float* orow = out.data() + static_cast<int64_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const float av = arow[k];
      if (av == 0.0f) continue;
      const float* brow = B.data() + static_cast<int64_t>(k) * N;
      for (int j = 0; j < N; ++j) orow[j] += av * brow[j];
    }
  }
  TensorId id = add_node(std::move(out), {a, b});
  if (needs(id))
    set_backward(id, [a, b, id, M, K, N](Tape& t) {
      const Tensor& go = t.grad(id);
      const Tensor& A2 = t.value(a);
      const Tensor& B2 = t.value(b);
      if (t.needs(a)) {
        float* ga = t.grad_accum_ptr(a);
        for (int i = 0; i < M; ++i)
          for (int j = 0; j < N; ++j) {
            const float g = go[static_cast<int64_t>(i) * N + j];
            if (g == 0.0f) continue;
            const float* brow = B2.data() + 0;
            for (int k = 0; k < K; ++k)
              ga[static_cast<int64_t>(i) * K + k] += g * brow[static_cast<int64_t>(k) * N + j];
          }
      }
      if (t.needs(b)) {
        float* gb = t.grad_accum_ptr(b);
        for (int i = 0; i < M; ++i)
          for (int k = 0; k < K; ++k) {
            const float av = A2[static_cast<int64_t>(i) * K + k];
            if (av == 0.0f) continue;
            const float* grow = go.data() + static_cast<int64_t>(i) * N;
            float* gbrow = gb + static_cast<int64_t>(k) * N;
            for (int j = 0; j < N; ++j) gbrow[j] += av * grow[j];
          }
      }
    });
  return id;
}

TensorId Tape::add_rows(TensorId a, TensorId bias) {
  const Tensor& A = value(a);
  const Tensor& Bv = value(bias);
  if (A.rank() != 2 || Bv.rank() != 1 || A.dim(1) != Bv.dim(0))
    throw UsageError("add_rows: incompatible shapes");
  const int M = A.dim(0), N = A.dim(1);
  Tensor out(A.shape());
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j)
      out[static_cast<int64_t>(i) * N + j] = A[static_cast<int64_t>(i) * N + j] + Bv[j];
  TensorId id = add_node(std::move(out), {a, bias});
  if (needs(id))
    set_backward(id, [a, bias, id, M, N](Tape& t) {
      const Tensor& go = t.grad(id);
      if (t.needs(a)) t.accum_grad(a, go);
      if (t.needs(bias)) {
        float* gb = t.grad_accum_ptr(bias);
        for (int i = 0; i < M; ++i)
          for (int j = 0; j < N; ++j) gb[j] += go[static_cast<int64_t>(i) * N + j];
      }
    });
  return id;
}

TensorId Tape::conv2d(TensorId x, TensorId w, TensorId bias, int pad) {
  const Tensor& X = value(x);
  const Tensor& W = value(w);
  const Tensor& Bv = value(bias);
  if (X.rank() != 4 || W.rank() != 4)
    throw UsageError("conv2d: expects NHWC input and KHxKWxCinxCout weights");
  const int B = X.dim(0), H = X.dim(1), Wd = X.dim(2), Ci = X.dim(3);
  const int KH = W.dim(0), KW = W.dim(1), Co = W.dim(3);
  if (W.dim(2) != Ci || Bv.numel() != Co)
    throw UsageError("conv2d: channel mismatch");
  const int OH = H + 2 * pad - KH + 1;
  const int OW = Wd + 2 * pad - KW + 1;
  if (OH <= 0 || OW <= 0) throw UsageError("conv2d: kernel larger than padded input");
  Tensor out({B, OH, OW, Co});
  auto xat = [&](int b, int h, int v, int c) -> float {
    if (h < 0 || h >= H || v < 0 || v >= Wd) return 0.0f;
    return X[((static_cast<int64_t>(b) * H + h) * Wd + v) * Ci + c];
  };
  for (int b = 0; b < B; ++b)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        float* orow = out.data() + ((static_cast<int64_t>(b) * OH + oh) * OW + ow) * Co;
        for (int oc = 0; oc < Co; ++oc) orow[oc] = Bv[oc];
        for (int kh = 0; kh < KH; ++kh)
          for (int kw = 0; kw < KW; ++kw)
            for (int ic = 0; ic < Ci; ++ic) {
              const float xv = xat(b, oh + kh - pad, ow + kw - pad, ic);
              if (xv == 0.0f) continue;
              const float* wrow = W.data() + ((static_cast<int64_t>(kh) * KW + kw) * Ci + ic) * Co;
              for (int oc = 0; oc < Co; ++oc) orow[oc] += xv * wrow[oc];
            }
      }
  TensorId id = add_node(std::move(out), {x, w, bias});
  if (needs(id))
    set_backward(id, [x, w, bias, id, B, H, Wd, Ci, KH, KW, Co, pad](Tape& t) {
      const Tensor& go = t.grad(id);
      const Tensor& X2 = t.value(x);
      const Tensor& W2 = t.value(w);
      const int OH = H + 2 * pad - KH + 1;
      const int OW = Wd + 2 * pad - KW + 1;
      const bool nx = t.needs(x), nw = t.needs(w), nb = t.needs(bias);
      float* gx = nx ? t.grad_accum_ptr(x) : nullptr;
      float* gw = nw ? t.grad_accum_ptr(w) : nullptr;
      float* gb = nb ? t.grad_accum_ptr(bias) : nullptr;
      for (int b = 0; b < B; ++b)
        for (int oh = 0; oh < OH; ++oh)
          for (int ow = 0; ow < OW; ++ow) {
            const float* grow = go.data() + ((static_cast<int64_t>(b) * OH + oh) * OW + ow) * Co;
            if (gb)
              for (int oc = 0; oc < Co; ++oc) gb[oc] += grow[oc];
            for (int kh = 0; kh < KH; ++kh) {
              const int ih = oh + kh - pad;
              if (ih < 0 || ih >= H) continue;
              for (int kw = 0; kw < KW; ++kw) {
                const int iw = ow + kw - pad;
                if (iw < 0 || iw >= Wd) continue;
                for (int ic = 0; ic < Ci; ++ic) {
                  const int64_t xoff = ((static_cast<int64_t>(b) * H + ih) * Wd + iw) * Ci + ic;
                  const int64_t woff = ((static_cast<int64_t>(kh) * KW + kw) * Ci + ic) * Co;
                  if (gx) {
                    float s = 0.0f;
                    for (int oc = 0; oc < Co; ++oc) s += grow[oc] * W2[woff + oc];
                    gx[xoff] += s;
                  }
                  if (gw) {
                    const float xv = X2[xoff];
                    if (xv != 0.0f)
                      for (int oc = 0; oc < Co; ++oc) gw[woff + oc] += xv * grow[oc];
                  }
                }
              }
            }
          }
    });
  return id;
}

TensorId Tape::relu(TensorId x) {
  const Tensor& X = value(x);
  Tensor out(X.shape());
  const int64_t m = X.numel();
  for (int64_t i = 0; i < m; ++i) out[i] = X[i] > 0.0f ? X[i] : 0.0f;
  TensorId id = add_node(std::move(out), {x});
  if (needs(id))
    set_backward(id, [x, id, m](Tape& t) {
      const Tensor& go = t.grad(id);
      const Tensor& X2 = t.value(x);
      float* gx = t.grad_accum_ptr(x);
      for (int64_t i = 0; i < m; ++i)
        if (X2[i] > 0.0f) gx[i] += go[i];
    });
  return id;
}

TensorId Tape::sigmoid(TensorId x) {
  const Tensor& X = value(x);
  Tensor out(X.shape());
  const int64_t m = X.numel();
  for (int64_t i = 0; i < m; ++i)
    out[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(X[i]))));
  TensorId id = add_node(std::move(out), {x});
  if (needs(id))
    set_backward(id, [x, id, m](Tape& t) {
      const Tensor& go = t.grad(id);
      const Tensor& Y = t.value(id);
      float* gx = t.grad_accum_ptr(x);
      for (int64_t i = 0; i < m; ++i) gx[i] += go[i] * Y[i] * (1.0f - Y[i]);
    });
  return id;
}

TensorId Tape::reshape(TensorId x, std::vector<int> shape) {
  Tensor out = value(x).reshaped(std::move(shape));
  TensorId id = add_node(std::move(out), {x});
  if (needs(id))
    set_backward(id, [x, id](Tape& t) {
      const Tensor& go = t.grad(id);
      t.accum_grad(x, go.reshaped(t.value(x).shape()));
    });
  return id;
}

TensorId Tape::add(TensorId a, TensorId b) { return add_scaled(a, b, 1.0f); }
TensorId Tape::sub(TensorId a, TensorId b) { return add_scaled(a, b, -1.0f); }

TensorId Tape::add_scaled(TensorId a, TensorId b, float coeff) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B)) throw UsageError("add_scaled: shape mismatch");
  Tensor out(A.shape());
  const int64_t m = A.numel();
  for (int64_t i = 0; i < m; ++i) out[i] = A[i] + coeff * B[i];
  TensorId id = add_node(std::move(out), {a, b});
  if (needs(id))
    set_backward(id, [a, b, id, coeff, m](Tape& t) {
      const Tensor& go = t.grad(id);
      if (t.needs(a)) t.accum_grad(a, go);
      if (t.needs(b)) {
        float* gb = t.grad_accum_ptr(b);
        for (int64_t i = 0; i < m; ++i) gb[i] += coeff * go[i];
      }
    });
  return id;
}

TensorId Tape::mul(TensorId a, TensorId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B)) throw UsageError("mul: shape mismatch");
  Tensor out(A.shape());
  const int64_t m = A.numel();
  for (int64_t i = 0; i < m; ++i) out[i] = A[i] * B[i];
  TensorId id = add_node(std::move(out), {a, b});
  if (needs(id))
    set_backward(id, [a, b, id, m](Tape& t) {
      const Tensor& go = t.grad(id);
      const Tensor& A2 = t.value(a);
      const Tensor& B2 = t.value(b);
      if (t.needs(a)) {
        float* ga = t.grad_accum_ptr(a);
        for (int64_t i = 0; i < m; ++i) ga[i] += go[i] * B2[i];
      }
      if (t.needs(b)) {
        float* gb = t.grad_accum_ptr(b);
        for (int64_t i = 0; i < m; ++i) gb[i] += go[i] * A2[i];
      }
    });
  return id;
}

TensorId Tape::square(TensorId a) {
  const Tensor& A = value(a);
  Tensor out(A.shape());
  const int64_t m = A.numel();
  for (int64_t i = 0; i < m; ++i) out[i] = A[i] * A[i];
  TensorId id = add_node(std::move(out), {a});
  if (needs(id))
    set_backward(id, [a, id, m](Tape& t) {
      const Tensor& go = t.grad(id);
      const Tensor& A2 = t.value(a);
      float* ga = t.grad_accum_ptr(a);
      for (int64_t i = 0; i < m; ++i) ga[i] += 2.0f * A2[i] * go[i];
    });
  return id;
}

TensorId Tape::scale(TensorId a, float s) {
  const Tensor& A = value(a);
  Tensor out(A.shape());
  const int64_t m = A.numel();
  for (int64_t i = 0; i < m; ++i) out[i] = s * A[i];
  TensorId id = add_node(std::move(out), {a});
  if (needs(id))
    set_backward(id, [a, id, s, m](Tape& t) {
      const Tensor& go = t.grad(id);
      float* ga = t.grad_accum_ptr(a);
      for (int64_t i = 0; i < m; ++i) ga[i] += s * go[i];
    });
  return id;
}

TensorId Tape::sum_all(TensorId a) {
  const Tensor& A = value(a);
  double s = 0.0;
  for (int64_t i = 0; i < A.numel(); ++i) s += A[i];
  TensorId id = add_node(Tensor::scalar(static_cast<float>(s)), {a});
  if (needs(id))
    set_backward(id, [a, id](Tape& t) {
      const float g = t.grad(id)[0];
      float* ga = t.grad_accum_ptr(a);
      const int64_t m = t.value(a).numel();
      for (int64_t i = 0; i < m; ++i) ga[i] += g;
    });
  return id;
}

TensorId Tape::mean_all(TensorId a) {
  const Tensor& A = value(a);
  const int64_t m = A.numel();
  if (m == 0) throw UsageError("mean_all: empty tensor");
  double s = 0.0;
  for (int64_t i = 0; i < m; ++i) s += A[i];
  TensorId id = add_node(Tensor::scalar(static_cast<float>(s / static_cast<double>(m))), {a});
  if (needs(id))
    set_backward(id, [a, id, m](Tape& t) {
      const float g = t.grad(id)[0] / static_cast<float>(m);
      float* ga = t.grad_accum_ptr(a);
      for (int64_t i = 0; i < m; ++i) ga[i] += g;
    });
  return id;
}

}  // namespace divqat
