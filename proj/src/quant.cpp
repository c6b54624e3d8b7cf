// SPDX-License-Identifier: Apache-2.0
#include "divqat/quant.hpp"

#include <algorithm>
#include <cmath>

#include "divqat/errors.hpp"

namespace divqat {

void QuantSpec::validate() const {
  if (bit_width < 2 || bit_width > 8)
    throw ConfigError("quant: bit_width must lie in [2, 8], got " + std::to_string(bit_width));
}

QuantProfile parse_profile(const std::string& s) {
  if (s == "server") return QuantProfile::Server;
  if (s == "mobile") return QuantProfile::Mobile;
  throw ConfigError("quant: unknown profile '" + s + "' (expected server|mobile)");
}

std::string profile_name(QuantProfile p) {
  return p == QuantProfile::Server ? "server" : "mobile";
}

void FakeQuantState::validate() const {
  if (scale.empty() || scale.size() != zero_point.size())
    throw UsageError("fake-quant state: scale/zero_point size mismatch");
  if (qmin >= qmax) throw UsageError("fake-quant state: empty integer range");
  for (size_t i = 0; i < scale.size(); ++i) {
    if (!(scale[i] > 0.0f) || !std::isfinite(scale[i]))
      throw UsageError("fake-quant state: scale must be positive and finite");
    if (zero_point[i] < qmin || zero_point[i] > qmax)
      throw UsageError("fake-quant state: zero_point outside integer range");
  }
}

void Observer::observe(const float* data, int64_t n) {
  if (n <= 0) return;
  float mn = data[0], mx = data[0];
  for (int64_t i = 1; i < n; ++i) {
    mn = std::min(mn, data[i]);
    mx = std::max(mx, data[i]);
  }
  if (!initialized) {
    min_val = mn;
    max_val = mx;
    initialized = true;
    return;
  }
  if (mode == Mode::MinMax) {
    min_val = std::min(min_val, mn);
    max_val = std::max(max_val, mx);
  } else {
    min_val += momentum * (mn - min_val);
    max_val += momentum * (mx - max_val);
  }
}

void quant_range(const QuantSpec& spec, QuantRole role, int32_t& qmin, int32_t& qmax) {
  spec.validate();
  const int32_t levels = 1 << spec.bit_width;
  if (role == QuantRole::Activation) {
    qmin = 0;
    qmax = levels - 1;
    return;
  }
  if (spec.weight_scheme() == QuantScheme::PerTensorAffine) {
    qmin = -(levels / 2);
    qmax = levels / 2 - 1;
  } else {
    qmax = levels / 2 - 1;
    qmin = -qmax;
  }
}

void affine_qparams(float mn, float mx, int32_t qmin, int32_t qmax,
                    float& scale, int32_t& zp) {
  mn = std::min(mn, 0.0f);
  mx = std::max(mx, 0.0f);
  if (mn == mx) {
    scale = 1.0f;
    zp = 0;
    return;
  }
  scale = (mx - mn) / static_cast<float>(qmax - qmin);
  if (!(scale > 0.0f) || !std::isfinite(scale)) {
    scale = 1.0f;
    zp = 0;
    return;
  }
  const float z = std::nearbyint(static_cast<float>(qmin) - mn / scale);
  zp = static_cast<int32_t>(std::min(std::max(z, static_cast<float>(qmin)),
                                     static_cast<float>(qmax)));
}

void symmetric_qparams(float mn, float mx, int32_t qmax, float& scale) {
  const float absmax = std::max(std::fabs(mn), std::fabs(mx));
  scale = absmax / static_cast<float>(qmax);
  if (!(scale > 0.0f) || !std::isfinite(scale)) scale = 1.0f;
}

FakeQuantState compute_qparams(const Observer& obs, const QuantSpec& spec, QuantRole role) {
  if (!obs.initialized)
    throw CalibrationError("quant: observer has no data; run calibration first");
  FakeQuantState s;
  quant_range(spec, role, s.qmin, s.qmax);
  const QuantScheme scheme =
      role == QuantRole::Activation ? spec.activation_scheme() : spec.weight_scheme();
  s.scale.assign(1, 1.0f);
  s.zero_point.assign(1, 0);
  if (scheme == QuantScheme::PerTensorAffine) {
    affine_qparams(obs.min_val, obs.max_val, s.qmin, s.qmax, s.scale[0], s.zero_point[0]);
  } else {
    symmetric_qparams(obs.min_val, obs.max_val, s.qmax, s.scale[0]);
  }
  s.validate();
  return s;
}

FakeQuantState weight_qparams(const Tensor& w, const QuantSpec& spec) {
  FakeQuantState s;
  quant_range(spec, QuantRole::Weight, s.qmin, s.qmax);
  if (spec.weight_scheme() == QuantScheme::PerTensorAffine) {
    float mn = w.numel() > 0 ? w[0] : 0.0f;
    float mx = mn;
    for (int64_t i = 1; i < w.numel(); ++i) {
      mn = std::min(mn, w[i]);
      mx = std::max(mx, w[i]);
    }
    s.scale.assign(1, 1.0f);
    s.zero_point.assign(1, 0);
    affine_qparams(mn, mx, s.qmin, s.qmax, s.scale[0], s.zero_point[0]);
  } else {
    const int C = w.rank() > 0 ? w.dim(w.rank() - 1) : 1;
    s.per_channel = true;
    s.scale.assign(static_cast<size_t>(C), 1.0f);
    s.zero_point.assign(static_cast<size_t>(C), 0);
    std::vector<float> absmax(static_cast<size_t>(C), 0.0f);
    for (int64_t i = 0; i < w.numel(); ++i) {
      const size_t c = static_cast<size_t>(i % C);
      absmax[c] = std::max(absmax[c], std::fabs(w[i]));
    }
    for (int c = 0; c < C; ++c)
      symmetric_qparams(-absmax[static_cast<size_t>(c)], absmax[static_cast<size_t>(c)],
                        s.qmax, s.scale[static_cast<size_t>(c)]);
  }
  s.validate();
  return s;
}

namespace {

inline float fq_scalar(float x, float scale, int32_t zp, int32_t qmin, int32_t qmax,
                       bool& in_range) {
  const float q = std::nearbyint(x / scale + static_cast<float>(zp));
  in_range = q >= static_cast<float>(qmin) && q <= static_cast<float>(qmax);
  const float qc = std::min(std::max(q, static_cast<float>(qmin)), static_cast<float>(qmax));
  return (qc - static_cast<float>(zp)) * scale;
}

}  // namespace

Tensor fake_quantize(const Tensor& x, const FakeQuantState& s) {
  std::vector<uint8_t> unused;
  return fake_quantize_with_mask(x, s, unused);
}

Tensor fake_quantize_with_mask(const Tensor& x, const FakeQuantState& s,
                               std::vector<uint8_t>& mask) {
  s.validate();
  const int64_t n = x.numel();
  Tensor out(x.shape());
  mask.assign(static_cast<size_t>(n), 1);
  bool in = true;
  if (!s.per_channel) {
    const float sc = s.scale[0];
    const int32_t zp = s.zero_point[0];
    for (int64_t i = 0; i < n; ++i) {
      out[i] = fq_scalar(x[i], sc, zp, s.qmin, s.qmax, in);
      mask[static_cast<size_t>(i)] = in ? 1 : 0;
    }
  } else {
    const int64_t C = static_cast<int64_t>(s.scale.size());
    if (x.rank() == 0 || x.dim(x.rank() - 1) != C)
      throw UsageError("fake_quantize: per-channel state expects last axis of " +
                       std::to_string(C));
    for (int64_t i = 0; i < n; ++i) {
      const size_t c = static_cast<size_t>(i % C);
      out[i] = fq_scalar(x[i], s.scale[c], s.zero_point[c], s.qmin, s.qmax, in);
      mask[static_cast<size_t>(i)] = in ? 1 : 0;
    }
  }
  return out;
}

TensorId fake_quant_op(Tape& t, TensorId x, const FakeQuantState& s) {
  std::vector<uint8_t> mask;
  Tensor y = fake_quantize_with_mask(t.value(x), s, mask);
  TensorId id = t.add_node(std::move(y), {x});
  if (t.needs(id))
    t.set_backward(id, [x, id, mask = std::move(mask)](Tape& tp) {
      const Tensor& go = tp.grad(id);
      float* gx = tp.grad_accum_ptr(x);
      const int64_t n = go.numel();
      for (int64_t i = 0; i < n; ++i)
        if (mask[static_cast<size_t>(i)]) gx[i] += go[i];
    });
  return id;
}

}  // namespace divqat
