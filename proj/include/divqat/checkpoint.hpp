// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "divqat/nn.hpp"

namespace divqat {

/// Versioned binary model file: architecture, shapes, quantization
/// state (spec, per-site grids and observers), and every parameter
/// tensor as little-endian float32 in declaration order. Loading
/// rebuilds the architecture and restores state bit-exactly; models
/// come back in eval mode. ParseError on any structural mismatch.
void save_checkpoint(const std::string& path, const Model& m);
Model load_checkpoint(const std::string& path);

/// Same content as the binary form, as a JSON document with parameter
/// payloads base64-encoded; round-trips bit-exactly.
void save_checkpoint_json(const std::string& path, const Model& m);
Model load_checkpoint_json(const std::string& path);

/// Sniffs the binary magic and dispatches to the right loader.
Model load_model_file(const std::string& path);

std::string encode_base64(const uint8_t* data, size_t n);
std::vector<uint8_t> decode_base64(const std::string& s);

}  // namespace divqat
