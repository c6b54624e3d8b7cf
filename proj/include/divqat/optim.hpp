// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "divqat/autodiff.hpp"

namespace divqat {

/// lr(t) = initial_lr * (1 + cos(pi * t / total_steps)) / 2.
struct CosineSchedule {
  float initial_lr = 0.01f;
  int64_t total_steps = 1;
};

struct SgdConfig {
  float lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  bool nesterov = false;
  std::optional<CosineSchedule> cosine;

  void validate() const;  // ConfigError on lr<0, momentum outside [0,1), wd<0
};

/// SGD with momentum, L2 decay folded into the gradient before the
/// momentum update, optional Nesterov lookahead and cosine annealing.
class SgdOptimizer {
public:
  SgdOptimizer(std::vector<Parameter*> params, SgdConfig cfg);

  float lr_at(int64_t step) const;

  /// Applies one update at the internal step counter, then advances it.
  void step();

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  int64_t steps_taken() const { return step_; }

private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> velocity_;
  SgdConfig cfg_;
  int64_t step_ = 0;
};

}  // namespace divqat
