// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "divqat/autodiff.hpp"
#include "divqat/rng.hpp"

namespace divqat {

struct FdFailure {
  size_t param_index = 0;
  int64_t coord = 0;
  double autodiff = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct FdReport {
  int checked = 0;
  double max_rel_err = 0.0;
  std::vector<FdFailure> failures;
  bool ok() const { return failures.empty(); }
  std::string describe() const;
};

struct FdOptions {
  double epsilon = 1e-3;
  double tolerance = 1e-3;
  int samples = 50;  // coordinates drawn across all parameters
  /// Both gradients below this magnitude count as a consistent zero;
  /// float32 forward noise makes tiny slopes unmeasurable.
  double noise_floor = 1e-4;
};

/// Central-difference check of d(loss)/d(params) against autodiff.
/// `loss` must run a fresh forward from current parameter values and
/// return the scalar; `grad` must populate Parameter::grad (cleared
/// here before each call). Relative error uses max(|a|,|b|,1e-8).
FdReport fd_check(const std::vector<Parameter*>& params,
                  const std::function<double()>& loss,
                  const std::function<void()>& grad,
                  const FdOptions& opt, Rng& rng);

}  // namespace divqat
