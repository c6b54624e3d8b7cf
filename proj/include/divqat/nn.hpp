// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "divqat/autodiff.hpp"
#include "divqat/quant.hpp"
#include "divqat/rng.hpp"
#include "divqat/tensor.hpp"

namespace divqat {

enum class LayerKind { Conv2d, Dense, Relu, Sigmoid, Flatten };

/// Activation fake-quant site. Observes ranges while training and not
/// frozen; quantizes from live observer stats until frozen, then from
/// the cached state.
struct ActQuant {
  bool present = false;
  bool quantize = true;
  bool frozen = false;
  Observer observer;
  FakeQuantState state;
};

struct Layer {
  LayerKind kind = LayerKind::Relu;
  int w = -1;  // parameter indices, -1 when absent
  int b = -1;
  int pad = 0;
  bool weight_fq = false;
  bool weight_quantize = true;
  ActQuant act;
};

/// Value-semantic feedforward network. Copies are deep and independent;
/// a frozen copy is safe to share read-only.
class Model {
public:
  std::string arch;
  std::vector<int> input_shape;  // per-sample shape, no batch extent
  int num_classes = 0;
  std::vector<Parameter> params;
  std::vector<Layer> layers;
  bool quantized = false;
  QuantSpec qspec;
  bool train_mode = true;

  /// Records the forward pass on the tape and returns the logits node.
  /// Observers update only in train mode on unfrozen sites.
  TensorId forward(Tape& t, TensorId x);

  /// Eval-style forward on a throwaway tape; no observer updates.
  Tensor logits(const Tensor& x) const;

  /// softmax(logits): one probability row per input.
  Tensor predict_proba(const Tensor& x) const;

  void set_train(bool m) { train_mode = m; }
  void set_trainable(bool t) {
    for (auto& p : params) p.trainable = t;
  }
  void zero_grad() {
    for (auto& p : params) p.zero_grad();
  }
  int64_t param_count() const;

  /// FNV-1a over raw parameter bytes; detects any weight mutation.
  uint64_t param_checksum() const;

private:
  TensorId forward_impl(Tape& t, TensorId x, bool allow_observe);
};

/// Architectures: "miniconv" (conv3x3x8, relu, conv3x3x16, relu, flatten,
/// dense), "miniconv_wide" (16/32 filters), "mlp" (flatten, dense 64,
/// relu, dense 64, relu, dense), "linear" (flatten, dense). Weights
/// He-normal from `rng`, biases 0.
Model make_model(const std::string& arch, std::vector<int> input_shape,
                 int num_classes, Rng& rng);

/// Latent -> dense 64 -> relu -> dense output_dim -> sigmoid; emits rows
/// in (0,1) shaped for a victim once reshaped to its input shape.
Model make_generator(int latent_dim, int output_dim, Rng& rng);

struct FakeQuantCount {
  int weight_sites = 0;
  int activation_sites = 0;
};
FakeQuantCount count_fake_quant_sites(const Model& m);

/// Deep copy with fake-quant sites on every weight and every layer
/// output activation (reshapes carry none), parameters taken from the
/// float model. Observers start empty.
Model prepare_qat(const Model& float_model, const QuantSpec& spec);

/// Calibration-only quantization: observe activation ranges over the
/// batches with grids disabled, then freeze qparams and enable them.
/// No parameter changes. CalibrationError on an empty batch list.
Model ptq(const Model& float_model, const QuantSpec& spec,
          const std::vector<Tensor>& calibration_batches);

/// Locks every activation site's qparams from its observer and stops
/// range updates. CalibrationError if any site never saw data.
void freeze_observers(Model& m);

/// Resumes range tracking; frozen states are discarded on next forward.
void enable_observers(Model& m);

/// Master switch for grid rounding at every site; observers unaffected.
void set_quantization_enabled(Model& m, bool on);

}  // namespace divqat
