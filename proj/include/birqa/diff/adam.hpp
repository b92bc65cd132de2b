#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "birqa/diff/tensor.hpp"

namespace birqa::ad {

template <class T>
struct AdamState {
  long step = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

/// Bias-corrected Adam update applied in place; gradients are zeroed after.
template <class T>
void adam_step(AdamState<T>& state, std::span<Parameter<T>* const> params) {
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->size(), T(0));
      state.v.emplace_back(p->size(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw Error("adam_step: parameter list changed size");
  for (const auto* p : params) {
    if (p->grad.size() != p->value.size()) {
      throw Error("adam_step: missing gradient for parameter '" + p->name + "'");
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<T>& p = *params[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.size()) throw Error("adam_step: moment shape mismatch for '" + p.name + "'");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      const double mi = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * g;
      const double vi = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = state.lr * (mi / c1) / (std::sqrt(vi / c2) + state.eps);
      p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - update);
    }
    std::fill(p.grad.begin(), p.grad.end(), T(0));
  }
}

}  // namespace birqa::ad
