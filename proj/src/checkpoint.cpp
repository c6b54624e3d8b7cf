// SPDX-License-Identifier: Apache-2.0
#include "divqat/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <utility>

#include <json.hpp>

#include "divqat/errors.hpp"
#include "divqat/rng.hpp"

namespace divqat {

namespace {

constexpr char kMagic[4] = {'D', 'Q', 'C', 'K'};
constexpr uint32_t kVersion = 1;

// ---- little-endian byte IO --------------------------------------------

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_i32(std::string& out, int32_t v) { put_u32(out, static_cast<uint32_t>(v)); }
void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}
void put_u8(std::string& out, uint8_t v) { out.push_back(static_cast<char>(v)); }
void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<uint32_t>(s.size()));
  out.append(s);
}
void put_dims(std::string& out, const std::vector<int>& dims) {
  put_u32(out, static_cast<uint32_t>(dims.size()));
  for (int d : dims) put_i32(out, d);
}

struct ByteReader {
  const uint8_t* p;
  size_t n;
  size_t off = 0;

  void need(size_t k) const {
    if (off + k > n)
      throw ParseError("checkpoint: truncated at byte offset " + std::to_string(off));
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[off + i]) << (8 * i);
    off += 4;
    return v;
  }
  int32_t i32() { return static_cast<int32_t>(u32()); }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  uint8_t u8() {
    need(1);
    return p[off++];
  }
  std::string str() {
    uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(p + off), len);
    off += len;
    return s;
  }
  std::vector<int> dims() {
    uint32_t r = u32();
    if (r > 16) throw ParseError("checkpoint: implausible rank at byte offset " +
                                 std::to_string(off - 4));
    std::vector<int> d(r);
    for (auto& x : d) x = i32();
    return d;
  }
};

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw UsageError("cannot open for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw UsageError("write failed: " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return bytes;
}

// ---- shared structure helpers -----------------------------------------

Model rebuild_skeleton(const std::string& arch, const std::vector<int>& input_shape,
                       int num_classes, bool quantized, const QuantSpec& spec) {
  Rng scratch(0);  // every parameter is overwritten from the file
  Model m;
  if (arch == "generator") {
    if (input_shape.size() != 1)
      throw ParseError("checkpoint: generator input shape must be rank 1");
    m = make_generator(input_shape[0], num_classes, scratch);
  } else {
    m = make_model(arch, input_shape, num_classes, scratch);
  }
  if (quantized) m = prepare_qat(m, spec);
  m.set_train(false);
  return m;
}

void restore_param(Parameter& p, const std::string& name, bool trainable,
                   const std::vector<int>& shape, std::vector<float> data) {
  if (p.name != name)
    throw ParseError("checkpoint: parameter order mismatch, expected '" + p.name +
                     "', file has '" + name + "'");
  if (p.value.shape() != shape)
    throw ParseError("checkpoint: shape mismatch for parameter '" + name + "'");
  p.value = Tensor(shape, std::move(data));
  p.trainable = trainable;
}

}  // namespace

// ---- binary form -------------------------------------------------------

void save_checkpoint(const std::string& path, const Model& m) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_str(out, m.arch);
  put_dims(out, m.input_shape);
  put_i32(out, m.num_classes);
  put_u8(out, m.quantized ? 1 : 0);
  if (m.quantized) {
    put_i32(out, m.qspec.bit_width);
    put_u8(out, m.qspec.profile == QuantProfile::Server ? 0 : 1);
    put_u32(out, static_cast<uint32_t>(m.layers.size()));
    for (const Layer& L : m.layers) {
      put_u8(out, L.weight_quantize ? 1 : 0);
      put_u8(out, L.act.present ? 1 : 0);
      if (!L.act.present) continue;
      put_u8(out, L.act.quantize ? 1 : 0);
      put_u8(out, L.act.frozen ? 1 : 0);
      const Observer& o = L.act.observer;
      put_f32(out, o.min_val);
      put_f32(out, o.max_val);
      put_u8(out, o.initialized ? 1 : 0);
      put_u8(out, o.mode == Observer::Mode::MinMax ? 0 : 1);
      put_f32(out, o.momentum);
      const FakeQuantState& s = L.act.state;
      put_u32(out, static_cast<uint32_t>(s.scale.size()));
      for (float v : s.scale) put_f32(out, v);
      put_u32(out, static_cast<uint32_t>(s.zero_point.size()));
      for (int32_t v : s.zero_point) put_i32(out, v);
      put_i32(out, s.qmin);
      put_i32(out, s.qmax);
      put_u8(out, s.per_channel ? 1 : 0);
    }
  }
  put_u32(out, static_cast<uint32_t>(m.params.size()));
  for (const Parameter& p : m.params) {
    put_str(out, p.name);
    put_u8(out, p.trainable ? 1 : 0);
    put_dims(out, p.value.shape());
    for (int64_t i = 0; i < p.value.numel(); ++i) put_f32(out, p.value[i]);
  }
  write_file(path, out);
}

Model load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  ByteReader r{reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size()};
  r.need(4);
  if (std::memcmp(r.p, kMagic, 4) != 0) throw ParseError("checkpoint: bad magic");
  r.off = 4;
  const uint32_t version = r.u32();
  if (version != kVersion)
    throw ParseError("checkpoint: unsupported version " + std::to_string(version));
  const std::string arch = r.str();
  const std::vector<int> input_shape = r.dims();
  const int num_classes = r.i32();
  const bool quantized = r.u8() != 0;
  QuantSpec spec;
  if (quantized) {
    spec.bit_width = r.i32();
    spec.profile = r.u8() == 0 ? QuantProfile::Server : QuantProfile::Mobile;
    spec.validate();
  }
  Model m = rebuild_skeleton(arch, input_shape, num_classes, quantized, spec);
  if (quantized) {
    const uint32_t n_layers = r.u32();
    if (n_layers != m.layers.size())
      throw ParseError("checkpoint: layer count mismatch for architecture '" + arch + "'");
    for (Layer& L : m.layers) {
      L.weight_quantize = r.u8() != 0;
      const bool present = r.u8() != 0;
      if (present != L.act.present)
        throw ParseError("checkpoint: activation site layout mismatch");
      if (!present) continue;
      L.act.quantize = r.u8() != 0;
      L.act.frozen = r.u8() != 0;
      Observer& o = L.act.observer;
      o.min_val = r.f32();
      o.max_val = r.f32();
      o.initialized = r.u8() != 0;
      o.mode = r.u8() == 0 ? Observer::Mode::MinMax : Observer::Mode::MovingAverage;
      o.momentum = r.f32();
      FakeQuantState& s = L.act.state;
      s.scale.assign(r.u32(), 0.0f);
      for (auto& v : s.scale) v = r.f32();
      s.zero_point.assign(r.u32(), 0);
      for (auto& v : s.zero_point) v = r.i32();
      s.qmin = r.i32();
      s.qmax = r.i32();
      s.per_channel = r.u8() != 0;
    }
  }
  const uint32_t n_params = r.u32();
  if (n_params != m.params.size())
    throw ParseError("checkpoint: parameter count mismatch for architecture '" + arch + "'");
  for (Parameter& p : m.params) {
    const std::string name = r.str();
    const bool trainable = r.u8() != 0;
    const std::vector<int> shape = r.dims();
    const int64_t count = Tensor::checked_numel(shape);
    std::vector<float> data(static_cast<size_t>(count));
    for (auto& v : data) v = r.f32();
    restore_param(p, name, trainable, shape, std::move(data));
  }
  if (r.off != r.n)
    throw ParseError("checkpoint: " + std::to_string(r.n - r.off) + " trailing bytes");
  return m;
}

// ---- base64 -------------------------------------------------------------

static const char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string encode_base64(const uint8_t* data, size_t n) {
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (size_t i = 0; i < n; i += 3) {
    uint32_t v = static_cast<uint32_t>(data[i]) << 16;
    if (i + 1 < n) v |= static_cast<uint32_t>(data[i + 1]) << 8;
    if (i + 2 < n) v |= static_cast<uint32_t>(data[i + 2]);
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(i + 1 < n ? kB64[(v >> 6) & 63] : '=');
    out.push_back(i + 2 < n ? kB64[v & 63] : '=');
  }
  return out;
}

std::vector<uint8_t> decode_base64(const std::string& s) {
  if (s.size() % 4 != 0) throw ParseError("base64: length not a multiple of 4");
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    throw ParseError("base64: invalid character");
  };
  std::vector<uint8_t> out;
  out.reserve(s.size() / 4 * 3);
  for (size_t i = 0; i < s.size(); i += 4) {
    const bool pad2 = s[i + 2] == '=';
    const bool pad3 = s[i + 3] == '=';
    if ((pad2 && !pad3) || ((pad2 || pad3) && i + 4 != s.size()))
      throw ParseError("base64: malformed padding");
    uint32_t v = static_cast<uint32_t>(val(s[i])) << 18 |
                 static_cast<uint32_t>(val(s[i + 1])) << 12;
    if (!pad2) v |= static_cast<uint32_t>(val(s[i + 2])) << 6;
    if (!pad3) v |= static_cast<uint32_t>(val(s[i + 3]));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
    if (!pad2) out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
    if (!pad3) out.push_back(static_cast<uint8_t>(v & 0xff));
  }
  return out;
}

// ---- JSON form -----------------------------------------------------------

namespace {

std::string floats_to_b64(const std::vector<float>& v) {
  std::string raw;
  raw.reserve(v.size() * 4);
  for (float x : v) put_f32(raw, x);
  return encode_base64(reinterpret_cast<const uint8_t*>(raw.data()), raw.size());
}

std::vector<float> b64_to_floats(const std::string& s, const char* what) {
  const std::vector<uint8_t> raw = decode_base64(s);
  if (raw.size() % 4 != 0)
    throw ParseError(std::string("checkpoint: ") + what + " payload is not float32 data");
  std::vector<float> out(raw.size() / 4);
  for (size_t i = 0; i < out.size(); ++i) {
    uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<uint32_t>(raw[4 * i + b]) << (8 * b);
    std::memcpy(&out[i], &bits, 4);
  }
  return out;
}

}  // namespace

void save_checkpoint_json(const std::string& path, const Model& m) {
  nlohmann::json j;
  j["format"] = "dqck";
  j["version"] = kVersion;
  j["arch"] = m.arch;
  j["input_shape"] = m.input_shape;
  j["num_classes"] = m.num_classes;
  j["quantized"] = m.quantized;
  if (m.quantized) {
    j["qspec"] = {{"bit_width", m.qspec.bit_width}, {"profile", profile_name(m.qspec.profile)}};
    nlohmann::json layers = nlohmann::json::array();
    for (const Layer& L : m.layers) {
      nlohmann::json lj;
      lj["weight_quantize"] = L.weight_quantize;
      lj["act_present"] = L.act.present;
      if (L.act.present) {
        const Observer& o = L.act.observer;
        const FakeQuantState& s = L.act.state;
        lj["quantize"] = L.act.quantize;
        lj["frozen"] = L.act.frozen;
        lj["observer"] = {{"min", floats_to_b64({o.min_val})},
                          {"max", floats_to_b64({o.max_val})},
                          {"initialized", o.initialized},
                          {"mode", o.mode == Observer::Mode::MinMax ? "minmax" : "moving_average"},
                          {"momentum", floats_to_b64({o.momentum})}};
        lj["state"] = {{"scale", floats_to_b64(s.scale)},
                       {"zero_point", s.zero_point},
                       {"qmin", s.qmin},
                       {"qmax", s.qmax},
                       {"per_channel", s.per_channel}};
      }
      layers.push_back(std::move(lj));
    }
    j["layers"] = std::move(layers);
  }
  nlohmann::json params = nlohmann::json::array();
  for (const Parameter& p : m.params) {
    params.push_back({{"name", p.name},
                      {"trainable", p.trainable},
                      {"shape", p.value.shape()},
                      {"data", floats_to_b64(p.value.values())}});
  }
  j["params"] = std::move(params);
  write_file(path, j.dump(2) + "\n");
}

Model load_checkpoint_json(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: invalid JSON: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "dqck")
      throw ParseError("checkpoint: not a model file");
    if (j.at("version").get<uint32_t>() != kVersion)
      throw ParseError("checkpoint: unsupported version");
    const auto arch = j.at("arch").get<std::string>();
    const auto input_shape = j.at("input_shape").get<std::vector<int>>();
    const int num_classes = j.at("num_classes").get<int>();
    const bool quantized = j.at("quantized").get<bool>();
    QuantSpec spec;
    if (quantized) {
      spec.bit_width = j.at("qspec").at("bit_width").get<int>();
      spec.profile = parse_profile(j.at("qspec").at("profile").get<std::string>());
      spec.validate();
    }
    Model m = rebuild_skeleton(arch, input_shape, num_classes, quantized, spec);
    if (quantized) {
      const auto& layers = j.at("layers");
      if (layers.size() != m.layers.size())
        throw ParseError("checkpoint: layer count mismatch for architecture '" + arch + "'");
      for (size_t i = 0; i < m.layers.size(); ++i) {
        Layer& L = m.layers[i];
        const auto& lj = layers[i];
        L.weight_quantize = lj.at("weight_quantize").get<bool>();
        if (lj.at("act_present").get<bool>() != L.act.present)
          throw ParseError("checkpoint: activation site layout mismatch");
        if (!L.act.present) continue;
        L.act.quantize = lj.at("quantize").get<bool>();
        L.act.frozen = lj.at("frozen").get<bool>();
        const auto& oj = lj.at("observer");
        Observer& o = L.act.observer;
        o.min_val = b64_to_floats(oj.at("min").get<std::string>(), "observer")[0];
        o.max_val = b64_to_floats(oj.at("max").get<std::string>(), "observer")[0];
        o.initialized = oj.at("initialized").get<bool>();
        o.mode = oj.at("mode").get<std::string>() == "minmax" ? Observer::Mode::MinMax
                                                              : Observer::Mode::MovingAverage;
        o.momentum = b64_to_floats(oj.at("momentum").get<std::string>(), "observer")[0];
        const auto& sj = lj.at("state");
        FakeQuantState& s = L.act.state;
        s.scale = b64_to_floats(sj.at("scale").get<std::string>(), "state");
        s.zero_point = sj.at("zero_point").get<std::vector<int32_t>>();
        s.qmin = sj.at("qmin").get<int32_t>();
        s.qmax = sj.at("qmax").get<int32_t>();
        s.per_channel = sj.at("per_channel").get<bool>();
      }
    }
    const auto& params = j.at("params");
    if (params.size() != m.params.size())
      throw ParseError("checkpoint: parameter count mismatch for architecture '" + arch + "'");
    for (size_t i = 0; i < m.params.size(); ++i) {
      const auto& pj = params[i];
      restore_param(m.params[i], pj.at("name").get<std::string>(),
                    pj.at("trainable").get<bool>(), pj.at("shape").get<std::vector<int>>(),
                    b64_to_floats(pj.at("data").get<std::string>(), "parameter"));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: missing or mistyped field: ") + e.what());
  }
}

Model load_model_file(const std::string& path) {
  const std::string head = read_file(path);
  if (head.size() >= 4 && std::memcmp(head.data(), kMagic, 4) == 0)
    return load_checkpoint(path);
  return load_checkpoint_json(path);
}

}  // namespace divqat
