#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "gldr/autodiff.hpp"
#include "gldr/rng.hpp"

namespace gldr {

struct GradCheckOptions {
  double epsilon = 1e-5;
  // Coordinates sampled per parameter; smaller parameters are checked fully.
  std::size_t samples = 100;
  std::uint64_t seed = 0;
  // Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
  // coordinates whose true gradient is zero from dividing round-off by zero.
  double floor = 1e-6;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients against central differences
// (f(p + eps) - f(p - eps)) / (2 eps). `build` records a forward pass on the
// given graph and returns the scalar loss; it is called once with backward
// recording and twice per checked coordinate without.
template <typename Build>
GradCheckResult grad_check(const std::vector<Parameter<double>*>& params,
                           Build&& build, const GradCheckOptions& opt = {}) {
  for (auto* p : params) p->zero_grad();
  {
    Graph<double> g;
    auto loss = build(g);
    g.backward(loss);
  }
  auto eval = [&] {
    Graph<double> g(false);
    return build(g).value()[0];
  };

  GradCheckResult res;
  Rng rng(opt.seed);
  for (auto* p : params) {
    std::vector<std::size_t> idx(p->value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > opt.samples) {
      for (std::size_t i = 0; i < opt.samples; ++i)
        std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      idx.resize(opt.samples);
    }
    for (std::size_t i : idx) {
      const double orig = p->value[i];
      p->value[i] = orig + opt.epsilon;
      const double up = eval();
      p->value[i] = orig - opt.epsilon;
      const double down = eval();
      p->value[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.epsilon);
      const double analytic = p->grad[i];
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), opt.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++res.coordinates;
      if (rel > res.max_rel_error || res.worst_param.empty()) {
        res.max_rel_error = std::max(res.max_rel_error, rel);
        res.worst_param = p->name;
        res.worst_index = i;
        res.analytic = analytic;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace gldr
