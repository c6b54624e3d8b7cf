// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "divqat/autodiff.hpp"
#include "divqat/tensor.hpp"

namespace divqat {

enum class QuantProfile { Server, Mobile };
enum class QuantScheme { PerTensorAffine, PerChannelSymmetric };

/// Bit width plus device profile. The profile fixes the weight scheme:
/// server packs weights per-channel symmetric, mobile per-tensor affine.
/// Activations are per-tensor affine on an unsigned grid in both profiles.
struct QuantSpec {
  int bit_width = 8;
  QuantProfile profile = QuantProfile::Server;

  QuantScheme weight_scheme() const {
    return profile == QuantProfile::Server ? QuantScheme::PerChannelSymmetric
                                           : QuantScheme::PerTensorAffine;
  }
  QuantScheme activation_scheme() const { return QuantScheme::PerTensorAffine; }

  /// ConfigError unless 2 <= bit_width <= 8.
  void validate() const;
};

QuantProfile parse_profile(const std::string& s);
std::string profile_name(QuantProfile p);

/// Grid parameters for one fake-quant site. `scale`/`zero_point` hold one
/// entry per channel of the last axis when per_channel, else one entry.
struct FakeQuantState {
  std::vector<float> scale{1.0f};
  std::vector<int32_t> zero_point{0};
  int32_t qmin = 0;
  int32_t qmax = 255;
  bool per_channel = false;

  void validate() const;  // UsageError on scale<=0 or zp outside [qmin,qmax]
};

/// Running range tracker for activation calibration.
struct Observer {
  enum class Mode { MinMax, MovingAverage };

  float min_val = 0.0f;
  float max_val = 0.0f;
  bool initialized = false;
  Mode mode = Mode::MinMax;
  float momentum = 0.01f;

  void observe(const float* data, int64_t n);
  void observe(const Tensor& t) { observe(t.data(), t.numel()); }
  void reset() { initialized = false; min_val = max_val = 0.0f; }
};

enum class QuantRole { Activation, Weight };

/// Integer grid for a role under a spec. Activations use the unsigned
/// range [0, 2^b-1]; affine weights the signed range [-2^(b-1), 2^(b-1)-1];
/// symmetric weights the zero-centered range [-(2^(b-1)-1), 2^(b-1)-1].
void quant_range(const QuantSpec& spec, QuantRole role, int32_t& qmin, int32_t& qmax);

/// scale=(max-min)/(qmax-qmin), zp=round(qmin - min/scale) clamped.
/// The range is first extended to contain 0 so an all-positive batch
/// still represents zero exactly. min==max collapses to scale=1, zp=0.
void affine_qparams(float mn, float mx, int32_t qmin, int32_t qmax,
                    float& scale, int32_t& zp);

/// scale=max(|mn|,|mx|)/qmax, zp=0; zero range collapses to scale=1.
void symmetric_qparams(float mn, float mx, int32_t qmax, float& scale);

/// Observer-backed per-tensor qparams. CalibrationError if the observer
/// has never seen data.
FakeQuantState compute_qparams(const Observer& obs, const QuantSpec& spec, QuantRole role);

/// Stateless weight qparams from the current tensor values. Per-channel
/// states slice along the last axis (output channels of conv and dense).
FakeQuantState weight_qparams(const Tensor& w, const QuantSpec& spec);

/// y = (clamp(round(x/scale + zp), qmin, qmax) - zp) * scale.
Tensor fake_quantize(const Tensor& x, const FakeQuantState& s);

/// Same, also emitting the straight-through mask: 1 where the rounded
/// value fell inside [qmin, qmax] before clamping, else 0.
Tensor fake_quantize_with_mask(const Tensor& x, const FakeQuantState& s,
                               std::vector<uint8_t>& mask);

/// Tape node wrapping fake_quantize; backward multiplies by the mask.
TensorId fake_quant_op(Tape& t, TensorId x, const FakeQuantState& s);

}  // namespace divqat
