// SPDX-License-Identifier: Apache-2.0
#include "divqat/fdcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace divqat {

std::string FdReport::describe() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "fd_check: %d coords, max rel err %.3e, %zu failures",
                checked, max_rel_err, failures.size());
  std::string s = buf;
  for (size_t i = 0; i < failures.size() && i < 8; ++i) {
    const FdFailure& f = failures[i];
    std::snprintf(buf, sizeof buf,
                  "\n  param %zu coord %lld: autodiff %.6e vs numeric %.6e (rel %.3e)",
                  f.param_index, static_cast<long long>(f.coord), f.autodiff, f.numeric,
                  f.rel_err);
    s += buf;
  }
  return s;
}

FdReport fd_check(const std::vector<Parameter*>& params,
                  const std::function<double()>& loss,
                  const std::function<void()>& grad,
                  const FdOptions& opt, Rng& rng) {
  FdReport rep;
  int64_t total = 0;
  for (auto* p : params) total += p->value.numel();
  if (total == 0) return rep;

  for (auto* p : params) p->zero_grad();
  grad();
  std::vector<std::vector<float>> saved;
  saved.reserve(params.size());
  for (auto* p : params) saved.push_back(p->grad.values());

  for (int s = 0; s < opt.samples; ++s) {
    int64_t flat = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(total)));
    size_t pi = 0;
    while (flat >= params[pi]->value.numel()) {
      flat -= params[pi]->value.numel();
      ++pi;
    }
    Parameter& p = *params[pi];
    const float orig = p.value[flat];
    p.value[flat] = static_cast<float>(orig + opt.epsilon);
    const double up = loss();
    p.value[flat] = static_cast<float>(orig - opt.epsilon);
    const double down = loss();
    p.value[flat] = orig;

    const double numeric = (up - down) / (2.0 * opt.epsilon);
    const double autodiff = static_cast<double>(saved[pi][static_cast<size_t>(flat)]);
    ++rep.checked;
    if (std::fabs(numeric) < opt.noise_floor && std::fabs(autodiff) < opt.noise_floor)
      continue;
    const double denom = std::max({std::fabs(numeric), std::fabs(autodiff), 1e-8});
    const double rel = std::fabs(numeric - autodiff) / denom;
    rep.max_rel_err = std::max(rep.max_rel_err, rel);
    if (rel > opt.tolerance)
      rep.failures.push_back({pi, flat, autodiff, numeric, rel});
  }
  return rep;
}

}  // namespace divqat
