#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "birqa/diff/tensor.hpp"

namespace birqa::ad {

/// Scalar-valued graph builder used by grad_check.
using GraphFn = std::function<Var<double>(Graph<double>&)>;

struct GradCheckOptions {
  double step = 1e-4;
  /// Coordinates checked per parameter; larger tensors are subsampled.
  std::size_t max_coords_per_param = std::numeric_limits<std::size_t>::max();
  std::uint64_t seed = 0;
};

/// Compares analytic gradients against central differences. Returns the max
/// over checked coordinates of |a - n| / max(1e-8, |a| + |n|).
inline double grad_check(const GraphFn& fn, std::span<Parameter<double>* const> params,
                         const GradCheckOptions& opt = {}) {
  for (auto* p : params) p->grad.assign(p->size(), 0.0);
  {
    Graph<double> g(true);
    Var<double> root = fn(g);
    if (root.size() != 1) throw Error("grad_check: function must return a scalar");
    g.backward(root);
    g.flush_param_grads();
  }
  auto eval = [&]() {
    Graph<double> g(false);
    return fn(g).item();
  };
  Rng rng = make_rng(opt.seed, 0x9c);
  double worst = 0.0;
  for (auto* p : params) {
    std::vector<std::size_t> coords(p->size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > opt.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_param);
    }
    for (std::size_t i : coords) {
      const double saved = p->value[i];
      p->value[i] = saved + opt.step;
      const double fp = eval();
      p->value[i] = saved - opt.step;
      const double fm = eval();
      p->value[i] = saved;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double analytic = p->grad[i];
      const double err = std::fabs(analytic - numeric) /
                         std::max(1e-8, std::fabs(analytic) + std::fabs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace birqa::ad
