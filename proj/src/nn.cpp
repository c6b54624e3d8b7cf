// SPDX-License-Identifier: Apache-2.0
#include "divqat/nn.hpp"

#include <cmath>
#include <cstring>

#include "divqat/errors.hpp"

namespace divqat {

TensorId Model::forward(Tape& t, TensorId x) {
  return forward_impl(t, x, train_mode);
}

Tensor Model::logits(const Tensor& x) const {
  Tape t;
  TensorId in = t.constant(x);
  TensorId out = const_cast<Model*>(this)->forward_impl(t, in, false);
  return t.value(out);
}

Tensor Model::predict_proba(const Tensor& x) const { return softmax(logits(x)); }

int64_t Model::param_count() const {
  int64_t n = 0;
  for (const auto& p : params) n += p.value.numel();
  return n;
}

uint64_t Model::param_checksum() const {
  uint64_t h = 1469598103934665603ull;
  for (const auto& p : params)
    for (float v : p.value.values()) {
      uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int k = 0; k < 4; ++k) {
        h ^= (bits >> (8 * k)) & 0xffu;
        h *= 1099511628211ull;
      }
    }
  return h;
}

TensorId Model::forward_impl(Tape& t, TensorId x, bool allow_observe) {
  const Tensor& in = t.value(x);
  const int want_rank = static_cast<int>(input_shape.size()) + 1;
  bool ok = in.rank() == want_rank;
  for (int i = 0; ok && i < want_rank - 1; ++i)
    ok = in.dim(i + 1) == input_shape[static_cast<size_t>(i)];
  if (!ok)
    throw ConfigError("model '" + arch + "': input shape " + in.shape_str() +
                      " does not match configured per-sample shape");
  TensorId cur = x;
  for (Layer& L : layers) {
    switch (L.kind) {
      case LayerKind::Conv2d: {
        TensorId w = t.leaf(params[static_cast<size_t>(L.w)]);
        if (L.weight_fq && L.weight_quantize)
          w = fake_quant_op(t, w, weight_qparams(params[static_cast<size_t>(L.w)].value, qspec));
        TensorId b = t.leaf(params[static_cast<size_t>(L.b)]);
        cur = t.conv2d(cur, w, b, L.pad);
        break;
      }
      case LayerKind::Dense: {
        TensorId w = t.leaf(params[static_cast<size_t>(L.w)]);
        if (L.weight_fq && L.weight_quantize)
          w = fake_quant_op(t, w, weight_qparams(params[static_cast<size_t>(L.w)].value, qspec));
        TensorId b = t.leaf(params[static_cast<size_t>(L.b)]);
        cur = t.matmul(cur, w);
        cur = t.add_rows(cur, b);
        break;
      }
      case LayerKind::Relu:
        cur = t.relu(cur);
        break;
      case LayerKind::Sigmoid:
        cur = t.sigmoid(cur);
        break;
      case LayerKind::Flatten: {
        const Tensor& v = t.value(cur);
        cur = t.reshape(cur, {v.dim(0), static_cast<int>(row_width(v))});
        break;
      }
    }
    if (L.act.present) {
      if (allow_observe && !L.act.frozen) L.act.observer.observe(t.value(cur));
      if (L.act.quantize) {
        const FakeQuantState st =
            L.act.frozen ? L.act.state : compute_qparams(L.act.observer, qspec, QuantRole::Activation);
        cur = fake_quant_op(t, cur, st);
      }
    }
  }
  return cur;
}

namespace {

Parameter he_normal(std::vector<int> shape, int fan_in, Rng& rng, std::string name,
                    float gain = 2.0f) {
  Tensor t(std::move(shape));
  const float stddev = std::sqrt(gain / static_cast<float>(fan_in));
  for (auto& v : t.values()) v = static_cast<float>(rng.normal()) * stddev;
  return Parameter(std::move(t), std::move(name));
}

void add_conv(Model& m, int cin, int cout, int k, Rng& rng, const std::string& name) {
  Layer L;
  L.kind = LayerKind::Conv2d;
  L.w = static_cast<int>(m.params.size());
  m.params.push_back(he_normal({k, k, cin, cout}, k * k * cin, rng, name + ".w"));
  L.b = static_cast<int>(m.params.size());
  m.params.push_back(Parameter(Tensor({cout}), name + ".b"));
  m.layers.push_back(L);
}

void add_dense(Model& m, int in, int out, Rng& rng, const std::string& name,
               float gain = 2.0f) {
  Layer L;
  L.kind = LayerKind::Dense;
  L.w = static_cast<int>(m.params.size());
  m.params.push_back(he_normal({in, out}, in, rng, name + ".w", gain));
  L.b = static_cast<int>(m.params.size());
  m.params.push_back(Parameter(Tensor({out}), name + ".b"));
  m.layers.push_back(L);
}

void add_plain(Model& m, LayerKind k) {
  Layer L;
  L.kind = k;
  m.layers.push_back(L);
}

int64_t flat_dim(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

}  // namespace

Model make_model(const std::string& arch, std::vector<int> input_shape,
                 int num_classes, Rng& rng) {
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  Model m;
  m.arch = arch;
  m.input_shape = std::move(input_shape);
  m.num_classes = num_classes;
  if (arch == "miniconv" || arch == "miniconv_wide") {
    if (m.input_shape.size() != 3)
      throw ConfigError("model '" + arch + "': expects HxWxC input");
    const int H = m.input_shape[0], W = m.input_shape[1], C = m.input_shape[2];
    const int c1 = arch == "miniconv" ? 8 : 16;
    const int c2 = arch == "miniconv" ? 16 : 32;
    const int oh = H - 4, ow = W - 4;  // two 3x3 valid convolutions
    if (oh < 1 || ow < 1)
      throw ConfigError("model '" + arch + "': input too small for two 3x3 convolutions");
    add_conv(m, C, c1, 3, rng, "conv1");
    add_plain(m, LayerKind::Relu);
    add_conv(m, c1, c2, 3, rng, "conv2");
    add_plain(m, LayerKind::Relu);
    add_plain(m, LayerKind::Flatten);
    add_dense(m, oh * ow * c2, num_classes, rng, "fc");
  } else if (arch == "mlp") {
    const int in = static_cast<int>(flat_dim(m.input_shape));
    add_plain(m, LayerKind::Flatten);
    add_dense(m, in, 64, rng, "fc1");
    add_plain(m, LayerKind::Relu);
    add_dense(m, 64, 64, rng, "fc2");
    add_plain(m, LayerKind::Relu);
    add_dense(m, 64, num_classes, rng, "fc3");
  } else if (arch == "linear") {
    add_plain(m, LayerKind::Flatten);
    add_dense(m, static_cast<int>(flat_dim(m.input_shape)), num_classes, rng, "fc");
  } else {
    throw ConfigError("model: unknown architecture '" + arch + "'");
  }
  return m;
}

Model make_generator(int latent_dim, int output_dim, Rng& rng) {
  if (latent_dim < 1 || output_dim < 1)
    throw ConfigError("generator: latent and output dims must be positive");
  Model m;
  m.arch = "generator";
  m.input_shape = {latent_dim};
  m.num_classes = output_dim;
  add_dense(m, latent_dim, 64, rng, "g1");
  add_plain(m, LayerKind::Relu);
  add_dense(m, 64, output_dim, rng, "g2", 1.0f);
  add_plain(m, LayerKind::Sigmoid);
  return m;
}

FakeQuantCount count_fake_quant_sites(const Model& m) {
  FakeQuantCount c;
  for (const auto& L : m.layers) {
    if (L.weight_fq) ++c.weight_sites;
    if (L.act.present) ++c.activation_sites;
  }
  return c;
}

Model prepare_qat(const Model& float_model, const QuantSpec& spec) {
  spec.validate();
  Model m = float_model;
  m.quantized = true;
  m.qspec = spec;
  for (Layer& L : m.layers) {
    if (L.kind == LayerKind::Conv2d || L.kind == LayerKind::Dense) {
      L.weight_fq = true;
      L.weight_quantize = true;
    }
    if (L.kind != LayerKind::Flatten) {
      L.act = ActQuant{};
      L.act.present = true;
    }
  }
  return m;
}

Model ptq(const Model& float_model, const QuantSpec& spec,
          const std::vector<Tensor>& calibration_batches) {
  if (calibration_batches.empty())
    throw CalibrationError("ptq: calibration set is empty");
  Model m = prepare_qat(float_model, spec);
  set_quantization_enabled(m, false);
  m.set_train(true);
  for (const Tensor& batch : calibration_batches) {
    Tape t;
    m.forward(t, t.constant(batch));
  }
  freeze_observers(m);
  set_quantization_enabled(m, true);
  m.set_train(false);
  return m;
}

void freeze_observers(Model& m) {
  for (Layer& L : m.layers) {
    if (!L.act.present) continue;
    L.act.state = compute_qparams(L.act.observer, m.qspec, QuantRole::Activation);
    L.act.frozen = true;
  }
}

void enable_observers(Model& m) {
  for (Layer& L : m.layers)
    if (L.act.present) L.act.frozen = false;
}

void set_quantization_enabled(Model& m, bool on) {
  for (Layer& L : m.layers) {
    if (L.weight_fq) L.weight_quantize = on;
    if (L.act.present) L.act.quantize = on;
  }
}

}  // namespace divqat
