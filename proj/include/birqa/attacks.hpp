#pragma once

// White-box l-inf attacks on the distorted image. The attack core works on
// planar float pixels in [0,1] against any score-with-gradient objective;
// the model objective differentiates through the feature pyramid.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "birqa/feature_graph.hpp"
#include "birqa/network.hpp"

namespace birqa {

enum class AttackKind { kFgsm, kPgd };
enum class AttackGoal { kMaximize, kMinimize };

struct AttackConfig {
  AttackKind kind = AttackKind::kPgd;
  double eps = 8.0 / 255.0;
  int steps = 10;
  double step_size = 2.0 / 255.0;
  AttackGoal goal = AttackGoal::kMaximize;
  bool random_start = true;
  /// Return the best iterate seen instead of the last one (evaluation mode).
  bool track_best = false;

  void validate() const {
    if (!(eps >= 0.0)) throw Error("AttackConfig: eps must be >= 0");
    if (kind == AttackKind::kPgd) {
      if (steps < 1) throw Error("AttackConfig: steps must be >= 1");
      if (!(step_size >= 0.0) || step_size > eps) {
        throw Error("AttackConfig: step_size must lie in [0, eps]");
      }
    }
  }
};

/// Score of planar pixels x; fills grad (same length) when non-empty.
using Objective = std::function<double(std::span<const float> x, std::span<float> grad)>;

/// Per-pixel feasible interval: the l-inf ball around x0 intersected with
/// [0,1], rounded inward so |x - x0| <= eps also holds in double.
inline void ball_bounds(std::span<const float> x0, double eps, std::vector<float>& lo,
                        std::vector<float>& hi) {
  lo.resize(x0.size());
  hi.resize(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double c = x0[i];
    float l = static_cast<float>(std::max(0.0, c - eps));
    float h = static_cast<float>(std::min(1.0, c + eps));
    while (c - static_cast<double>(l) > eps) l = std::nextafter(l, 2.0f);
    while (static_cast<double>(h) - c > eps) h = std::nextafter(h, -1.0f);
    lo[i] = std::min(l, x0[i]);
    hi[i] = std::max(h, x0[i]);
  }
}

inline void project(std::span<float> x, std::span<const float> lo, std::span<const float> hi) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], lo[i], hi[i]);
}

namespace detail {

inline float sign_of(float g) { return g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f); }

inline void signed_step(std::span<float> x, std::span<const float> grad, double size, AttackGoal goal) {
  const float s = static_cast<float>(goal == AttackGoal::kMaximize ? size : -size);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += s * sign_of(grad[i]);
}

inline bool better(double a, double b, AttackGoal goal) {
  return goal == AttackGoal::kMaximize ? a > b : a < b;
}

}  // namespace detail

/// Runs FGSM or PGD in float space. rng drives the PGD random start only.
inline std::vector<float> attack_pixels(const Objective& f, std::span<const float> x0,
                                        const AttackConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<float> x(x0.begin(), x0.end());
  if (cfg.eps == 0.0) return x;
  std::vector<float> lo, hi, grad(x.size());
  ball_bounds(x0, cfg.eps, lo, hi);

  if (cfg.kind == AttackKind::kFgsm) {
    f(x, grad);
    detail::signed_step(x, grad, cfg.eps, cfg.goal);
    project(x, lo, hi);
    return x;
  }

  if (cfg.random_start) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = static_cast<float>(x0[i] + uniform(rng, -cfg.eps, cfg.eps));
    }
    project(x, lo, hi);
  }
  std::vector<float> best;
  double best_score = 0.0;
  for (int t = 0; t < cfg.steps; ++t) {
    const double s = f(x, grad);
    if (cfg.track_best && (best.empty() || detail::better(s, best_score, cfg.goal))) {
      best = x;
      best_score = s;
    }
    detail::signed_step(x, grad, cfg.step_size, cfg.goal);
    project(x, lo, hi);
  }
  if (cfg.track_best) {
    const double s = f(x, {});
    if (detail::better(s, best_score, cfg.goal)) return x;
    return best;
  }
  return x;
}

// ---------------------------------------------------------------------------
// Model objective

/// Score of (ref, x) under the model, with the gradient w.r.t. x taken
/// through the differentiable feature pyramid.
template <class T>
Objective model_objective(const BirqaModel<T>& model, const PlanarImage& ref) {
  return [&model, &ref](std::span<const float> x, std::span<float> grad) -> double {
    ad::Graph<T> g(false);
    const ad::Shape shape{3, ref.height, ref.width};
    if (grad.empty()) {
      auto dist = g.constant(shape, std::vector<T>(x.begin(), x.end()));
      return static_cast<double>(
          model.forward(g, pyramid_graph(ref, dist, model.config().features)).score.item());
    }
    auto dist = g.leaf(shape, std::vector<T>(x.begin(), x.end()), true);
    auto score = model.forward(g, pyramid_graph(ref, dist, model.config().features)).score;
    g.backward(score);
    const auto gv = dist.grad();
    if (gv.size() != grad.size()) throw Error("attack: gradient unavailable");
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = static_cast<float>(gv[i]);
    return static_cast<double>(score.item());
  };
}

/// Quantizes planar float pixels to an 8-bit RGB image.
inline RgbImage quantize(std::span<const float> x, int width, int height) {
  PlanarImage p(3, width, height);
  std::copy(x.begin(), x.end(), p.data.begin());
  return to_rgb8(p);
}

template <class T>
std::vector<float> attack_float(const BirqaModel<T>& model, const PlanarImage& ref,
                                const PlanarImage& dist, const AttackConfig& cfg, Rng& rng) {
  if (!ref.same_dims(dist) || ref.channels != 3) {
    throw Error("attack: reference and distorted images must be same-size RGB");
  }
  return attack_pixels(model_objective(model, ref), dist.data, cfg, rng);
}

template <class T>
RgbImage fgsm(const BirqaModel<T>& model, const RgbImage& ref, const RgbImage& dist,
              AttackConfig cfg) {
  cfg.kind = AttackKind::kFgsm;
  Rng rng = make_rng(0);
  const PlanarImage r = to_float(ref), d = to_float(dist);
  return quantize(attack_float(model, r, d, cfg, rng), dist.width, dist.height);
}

template <class T>
RgbImage pgd(const BirqaModel<T>& model, const RgbImage& ref, const RgbImage& dist,
             AttackConfig cfg, std::uint64_t seed) {
  cfg.kind = AttackKind::kPgd;
  Rng rng = make_rng(seed, 0xa77ac);
  const PlanarImage r = to_float(ref), d = to_float(dist);
  return quantize(attack_float(model, r, d, cfg, rng), dist.width, dist.height);
}

}  // namespace birqa
