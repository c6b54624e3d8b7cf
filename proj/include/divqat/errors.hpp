// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace divqat {

/// Invalid configuration supplied by the caller (bad schema, bad field value,
/// mismatched architectures). CLI maps this to exit code 1.
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// API misuse by calling code (wrong shapes, backward on a non-scalar,
/// invalid label index).
class UsageError : public std::runtime_error {
public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Quantization calibration failure (uninitialized observer, empty
/// calibration set).
class CalibrationError : public std::runtime_error {
public:
  explicit CalibrationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised by the victim oracle when a prediction request would exceed the
/// configured query budget. Never truncates a batch silently.
class BudgetExhaustedError : public std::runtime_error {
public:
  explicit BudgetExhaustedError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed external file (dataset container, checkpoint, CSV/IDX import).
class ParseError : public std::runtime_error {
public:
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace divqat
