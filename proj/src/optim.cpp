// SPDX-License-Identifier: Apache-2.0
#include "divqat/optim.hpp"

#include <cmath>

#include "divqat/errors.hpp"

namespace divqat {

void SgdConfig::validate() const {
  if (!(lr >= 0.0f)) throw ConfigError("sgd: learning rate must be nonnegative");
  if (!(momentum >= 0.0f && momentum < 1.0f))
    throw ConfigError("sgd: momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0f)) throw ConfigError("sgd: weight decay must be nonnegative");
  if (cosine && cosine->total_steps < 1)
    throw ConfigError("sgd: cosine schedule needs at least one step");
}

SgdOptimizer::SgdOptimizer(std::vector<Parameter*> params, SgdConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  velocity_.reserve(params_.size());
  for (auto* p : params_) velocity_.emplace_back(p->value.shape());
}

float SgdOptimizer::lr_at(int64_t step) const {
  if (!cfg_.cosine) return cfg_.lr;
  const double t = static_cast<double>(step) / static_cast<double>(cfg_.cosine->total_steps);
  const double frac = 0.5 * (1.0 + std::cos(3.141592653589793 * std::min(t, 1.0)));
  return static_cast<float>(cfg_.cosine->initial_lr * frac);
}

void SgdOptimizer::step() {
  const float lr = lr_at(step_);
  for (size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable) continue;
    Tensor& vel = velocity_[i];
    const int64_t n = p.value.numel();
    for (int64_t j = 0; j < n; ++j) {
      float g = p.grad[j] + cfg_.weight_decay * p.value[j];
      if (cfg_.momentum != 0.0f) {
        vel[j] = cfg_.momentum * vel[j] + g;
        g = cfg_.nesterov ? g + cfg_.momentum * vel[j] : vel[j];
      }
      p.value[j] -= lr * g;
    }
  }
  ++step_;
}

}  // namespace divqat
