#pragma once

// Training objectives (MSE/PLCC base loss, anchored ranking loss and their
// AAT mix), MOS-band mini-batch construction and the pointwise error-bound
// certificate.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "birqa/diff.hpp"

namespace birqa {

inline constexpr double kBaseLossAlpha = 0.7;
inline constexpr double kAatMix = 0.5;

struct BatchConfig {
  int batch_size = 16;
  int anchors = 8;
  int top_k = 4;
  /// Band width R; defaults to (max MOS - min MOS) / 20.
  std::optional<double> band;
  int max_tries = 100;
};

/// A mini-batch: dataset rows sorted by MOS, with anchor flags per position.
struct BatchPlan {
  std::vector<int> rows;
  std::vector<char> is_anchor;
  double y_low = 0.0;
  double band = 0.0;  // R
  double eta = 0.0;   // realized max one-sided anchor gap
  int top_k = 4;

  std::size_t size() const { return rows.size(); }

  std::vector<int> anchor_positions() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (is_anchor[i]) out.push_back(static_cast<int>(i));
    }
    return out;
  }
  std::vector<int> non_anchor_positions() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!is_anchor[i]) out.push_back(static_cast<int>(i));
    }
    return out;
  }
};

struct AnchorPair {
  int lower = -1;
  int upper = -1;
};

/// Nearest bracketing anchors of batch position j. i- maximizes y over
/// anchors with y <= y_j, i+ minimizes y over anchors with y >= y_j; ties go
/// to the lowest position.
inline AnchorPair nearest_anchors(const BatchPlan& plan, std::span<const double> y, int j) {
  AnchorPair out;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    if (!plan.is_anchor[i]) continue;
    const int ii = static_cast<int>(i);
    if (y[i] <= y[j] && (out.lower < 0 || y[i] > y[out.lower])) out.lower = ii;
    if (y[i] >= y[j] && (out.upper < 0 || y[i] < y[out.upper])) out.upper = ii;
  }
  if (out.lower < 0 || out.upper < 0) {
    throw Error("nearest_anchors: coverage violated for batch position " + std::to_string(j));
  }
  return out;
}

namespace detail {

inline double realized_eta(const BatchPlan& plan, std::span<const double> y) {
  double eta = 0.0;
  for (int j : plan.non_anchor_positions()) {
    const AnchorPair a = nearest_anchors(plan, y, j);
    eta = std::max({eta, y[j] - y[a.lower], y[a.upper] - y[j]});
  }
  return eta;
}

}  // namespace detail

/// MOS values of a plan's rows, in batch order.
inline std::vector<double> plan_labels(const BatchPlan& plan, std::span<const double> mos) {
  std::vector<double> y;
  for (int r : plan.rows) y.push_back(mos[r]);
  return y;
}

/// Samples a contiguous MOS band [y_low, y_low + R] and builds a batch of
/// anchors (band endpoints plus uniform targets) and in-band non-anchors.
inline BatchPlan build_batch(std::span<const double> mos, const BatchConfig& cfg, Rng& rng) {
  if (cfg.anchors < 2 || cfg.batch_size < cfg.anchors) {
    throw Error("build_batch: need 2 <= anchors <= batch_size");
  }
  if (mos.size() < static_cast<std::size_t>(cfg.batch_size)) {
    throw Error("build_batch: dataset smaller than the batch size");
  }
  const auto [mn_it, mx_it] = std::minmax_element(mos.begin(), mos.end());
  const double lo = *mn_it, hi = *mx_it, range = hi - lo;
  const double band = cfg.band.value_or(range / 20.0);
  if (!(band > 0.0)) throw Error("build_batch: band width R must be positive");

  std::vector<int> sorted(mos.size());
  std::iota(sorted.begin(), sorted.end(), 0);
  std::stable_sort(sorted.begin(), sorted.end(), [&](int a, int b) { return mos[a] < mos[b]; });

  for (int attempt = 0; attempt < cfg.max_tries; ++attempt) {
    const double y_low = range > band ? uniform(rng, lo, hi - band) : lo;
    const double y_high = y_low + band;
    std::vector<int> members;
    for (int id : sorted) {
      if (mos[id] >= y_low && mos[id] <= y_high) members.push_back(id);
    }
    if (members.size() < static_cast<std::size_t>(cfg.batch_size)) continue;

    std::vector<char> used(members.size(), 0);
    std::vector<int> anchors;
    auto take_nearest = [&](double target) {
      int best = -1;
      for (std::size_t k = 0; k < members.size(); ++k) {
        if (used[k]) continue;
        if (best < 0 || std::fabs(mos[members[k]] - target) < std::fabs(mos[members[best]] - target)) {
          best = static_cast<int>(k);
        }
      }
      used[best] = 1;
      anchors.push_back(members[best]);
    };
    take_nearest(y_low);
    take_nearest(y_high);
    for (int k = 1; k + 1 < cfg.anchors; ++k) {
      take_nearest(y_low + band * k / (cfg.anchors - 1));
    }
    std::vector<int> rest;
    for (std::size_t k = 0; k < members.size(); ++k) {
      if (!used[k]) rest.push_back(members[k]);
    }
    const int n_free = cfg.batch_size - cfg.anchors;
    for (int k = 0; k < n_free; ++k) {
      const std::size_t pick = k + uniform_index(rng, rest.size() - k);
      std::swap(rest[k], rest[pick]);
    }
    rest.resize(n_free);

    std::vector<std::pair<int, char>> all;
    for (int a : anchors) all.emplace_back(a, 1);
    for (int r : rest) all.emplace_back(r, 0);
    std::sort(all.begin(), all.end(), [&](const auto& a, const auto& b) {
      if (mos[a.first] != mos[b.first]) return mos[a.first] < mos[b.first];
      return a.first < b.first;
    });
    BatchPlan plan;
    for (const auto& [row, anchor] : all) {
      plan.rows.push_back(row);
      plan.is_anchor.push_back(anchor);
    }
    plan.y_low = y_low;
    plan.band = band;
    plan.top_k = cfg.top_k;
    const auto y = plan_labels(plan, mos);
    plan.eta = detail::realized_eta(plan, y);
    return plan;
  }
  throw Error("build_batch: dataset too sparse for band width R = " + std::to_string(band));
}

// ---------------------------------------------------------------------------
// Losses

/// 0.7 * MSE(y, yhat) - 0.3 * PLCC(y, yhat).
template <class T>
ad::Var<T> base_loss(std::span<const double> y, const ad::Var<T>& yhat) {
  if (y.size() != yhat.size() || y.size() < 2) {
    throw Error("base_loss: need equal lengths >= 2");
  }
  const auto [mn, mx] = std::minmax_element(y.begin(), y.end());
  if (*mn == *mx) throw Error("base_loss: degenerate batch (constant MOS)");
  auto& g = yhat.graph();
  const int n = static_cast<int>(y.size());
  auto target = g.constant(ad::Shape{n}, std::vector<T>(y.begin(), y.end()));
  auto mse = ad::mean(ad::square(ad::sub(yhat, target)));
  auto plcc = ad::pearson(target, yhat);
  return ad::sub(ad::scale(mse, static_cast<T>(kBaseLossAlpha)),
                 ad::scale(plcc, static_cast<T>(1.0 - kBaseLossAlpha)));
}

template <class T>
struct AnchoredLoss {
  ad::Var<T> topk;     // mean of the k largest normalized hinges
  double delta_max = 0;  // exact max hinge
};

/// Normalized nearest-anchor hinges of every non-anchor (plain values).
inline std::vector<double> anchor_hinges(const BatchPlan& plan, std::span<const double> y,
                                         std::span<const double> pred) {
  if (!(plan.band > 0.0)) throw Error("anchored_loss: R must be positive");
  std::vector<double> out;
  for (int j : plan.non_anchor_positions()) {
    const AnchorPair a = nearest_anchors(plan, y, j);
    const double vp = std::max(0.0, pred[j] - pred[a.upper]);
    const double vm = std::max(0.0, pred[a.lower] - pred[j]);
    out.push_back(std::max(vp, vm) / plan.band);
  }
  return out;
}

template <class T>
AnchoredLoss<T> anchored_loss(const BatchPlan& plan, std::span<const double> y,
                              const ad::Var<T>& pred) {
  if (!(plan.band > 0.0)) throw Error("anchored_loss: R must be positive");
  if (y.size() != plan.size() || pred.size() != plan.size()) {
    throw Error("anchored_loss: label/prediction length does not match the plan");
  }
  std::vector<int> items, lo, hi;
  for (int j : plan.non_anchor_positions()) {
    const AnchorPair a = nearest_anchors(plan, y, j);
    items.push_back(j);
    lo.push_back(a.lower);
    hi.push_back(a.upper);
  }
  if (items.empty()) throw Error("anchored_loss: batch has no non-anchors");
  auto hinge = ad::anchor_hinge(pred, items, lo, hi, static_cast<T>(plan.band));
  const int k = std::min<int>(plan.top_k, static_cast<int>(items.size()));
  AnchoredLoss<T> out;
  out.topk = ad::topk_mean(hinge, k);
  for (T v : hinge.value()) out.delta_max = std::max(out.delta_max, static_cast<double>(v));
  return out;
}

/// 0.5 * base loss + 0.5 * top-k anchored loss.
template <class T>
ad::Var<T> aat_loss(std::span<const double> y, const ad::Var<T>& pred, const BatchPlan& plan) {
  auto base = base_loss(y, pred);
  auto anchor = anchored_loss(plan, y, pred).topk;
  return ad::add(ad::scale(base, static_cast<T>(1.0 - kAatMix)),
                 ad::scale(anchor, static_cast<T>(kAatMix)));
}

// ---------------------------------------------------------------------------
// Certificates

struct BoundCertificate {
  long step = 0;
  double eps = 0;    // max anchor error
  double eta = 0;    // max anchor gap
  double delta = 0;  // max normalized hinge
  double band = 0;   // R
  double bound = 0;  // eps + eta + R * delta
  double error = 0;  // observed max |pred - y|
  bool holds = true;
  std::vector<int> violating_anchors;  // anchors whose error exceeds the budget
};

/// bound = eps + eta + R * delta, summed in extended precision and rounded
/// once (so 0.1 + 0.25 + 10 * 0.01 gives the double nearest 0.45).
inline BoundCertificate theorem1_bound(double eps, double eta, double delta, double band) {
  if (eps < 0 || eta < 0 || delta < 0 || band < 0) {
    throw Error("theorem1_bound: inputs must be non-negative");
  }
  BoundCertificate c;
  c.eps = eps;
  c.eta = eta;
  c.delta = delta;
  c.band = band;
  c.bound = static_cast<double>(static_cast<long double>(eps) + static_cast<long double>(eta) +
                                static_cast<long double>(band) * static_cast<long double>(delta));
  return c;
}

inline constexpr double kDefaultEpsBudget = 0.1;

/// Measures eps over anchors, delta from the exact max hinge and eta from
/// the plan, then records the observed error against the bound.
inline BoundCertificate certify_batch(const BatchPlan& plan, std::span<const double> y,
                                      std::span<const double> pred,
                                      double eps_budget = kDefaultEpsBudget) {
  double eps = 0.0, err = 0.0;
  std::vector<int> bad;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const double e = std::fabs(pred[i] - y[i]);
    err = std::max(err, e);
    if (plan.is_anchor[i]) {
      eps = std::max(eps, e);
      if (e > eps_budget) bad.push_back(static_cast<int>(i));
    }
  }
  double delta = 0.0;
  for (double h : anchor_hinges(plan, y, pred)) delta = std::max(delta, h);
  BoundCertificate c = theorem1_bound(eps, plan.eta, delta, plan.band);
  c.error = err;
  c.holds = err <= c.bound;
  c.violating_anchors = std::move(bad);
  return c;
}

inline constexpr const char* kCertificateCsvHeader = "step,eps,eta,delta,R,bound,E,holds";

inline std::string certificate_csv_row(const BoundCertificate& c) {
  std::ostringstream out;
  out.precision(17);
  out << c.step << ',' << c.eps << ',' << c.eta << ',' << c.delta << ',' << c.band << ','
      << c.bound << ',' << c.error << ',' << (c.holds ? 1 : 0);
  return out.str();
}

}  // namespace birqa
