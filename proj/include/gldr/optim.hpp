#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "gldr/autodiff.hpp"

namespace gldr {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moments are allocated on the first step and
// are matched to parameters by position in the list.
template <typename T>
struct AdamState {
  AdamHyper hyper;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t step = 0;

  AdamState() = default;
  explicit AdamState(AdamHyper h) : hyper(h) {}
};

template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& state) {
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->value.dims());
      state.v.emplace_back(p->value.dims());
    }
  }
  if (state.m.size() != params.size())
    throw ConfigError("adam_step: state tracks " +
                      std::to_string(state.m.size()) + " parameters, got " +
                      std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& d = params[i]->value.dims();
    if (state.m[i].dims() != d || params[i]->grad.dims() != d)
      throw ConfigError("adam_step: dims mismatch for parameter " +
                        params[i]->name);
  }
  ++state.step;
  const auto& h = state.hyper;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (!p.trainable) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      m[k] = static_cast<T>(h.beta1 * m[k] + (1.0 - h.beta1) * g);
      v[k] = static_cast<T>(h.beta2 * v[k] + (1.0 - h.beta2) * g * g);
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p.value[k] -= static_cast<T>(h.lr * mhat / (std::sqrt(vhat) + h.eps));
    }
  }
}

}  // namespace gldr
