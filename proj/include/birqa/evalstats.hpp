#pragma once

// Correlation metrics and the paired bootstrap significance test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "birqa/common.hpp"

namespace birqa {

namespace detail {

inline void check_pair(std::span<const double> a, std::span<const double> b, std::size_t min_n,
                       const char* op) {
  if (a.size() != b.size()) throw Error(std::string(op) + ": length mismatch");
  if (a.size() < min_n) {
    throw Error(std::string(op) + ": need at least " + std::to_string(min_n) + " samples");
  }
}

inline bool is_constant(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; });
}

inline double pearson_raw(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw Error("undefined correlation: zero variance");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

}  // namespace detail

/// 1-based ranks; tied values share their mean rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double plcc_stat(std::span<const double> y, std::span<const double> pred) {
  detail::check_pair(y, pred, 3, "plcc");
  if (detail::is_constant(y) || detail::is_constant(pred)) {
    throw Error("plcc: undefined correlation (constant vector)");
  }
  return detail::pearson_raw(y, pred);
}

inline double srocc(std::span<const double> y, std::span<const double> pred) {
  detail::check_pair(y, pred, 3, "srocc");
  if (detail::is_constant(y) || detail::is_constant(pred)) {
    throw Error("srocc: undefined correlation (constant vector)");
  }
  const auto ry = average_ranks(y);
  const auto rp = average_ranks(pred);
  return detail::pearson_raw(ry, rp);
}

struct BootstrapResult {
  double median = 0;
  double lo = 0;   // 2.5th percentile
  double hi = 0;   // 97.5th percentile
  double point = 0;  // SROCC(A) - SROCC(B) on the full set
  bool significant = false;
  int redraws = 0;
  int resamples = 0;
};

inline constexpr double kMinSignificantDelta = 0.01;

/// Linear-interpolation percentile of sorted data, q in [0,1].
inline double percentile_sorted(std::span<const double> s, double q) {
  if (s.empty()) throw Error("percentile: empty input");
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  const std::size_t j = std::min(i + 1, s.size() - 1);
  const double t = pos - static_cast<double>(i);
  return s[i] + t * (s[j] - s[i]);
}

/// Paired bootstrap of SROCC(y, A) - SROCC(y, B). Each resample uses its own
/// counter-derived stream; degenerate resamples are redrawn on that stream.
inline BootstrapResult bootstrap_delta(std::span<const double> y, std::span<const double> a,
                                       std::span<const double> b, int resamples = 1000,
                                       std::uint64_t seed = 0) {
  detail::check_pair(y, a, 10, "bootstrap_delta");
  detail::check_pair(y, b, 10, "bootstrap_delta");
  if (resamples < 1) throw Error("bootstrap_delta: resamples must be >= 1");
  const std::size_t n = y.size();
  BootstrapResult out;
  out.resamples = resamples;
  out.point = srocc(y, a) - srocc(y, b);
  std::vector<double> deltas;
  deltas.reserve(resamples);
  std::vector<double> ry(n), ra(n), rb(n);
  constexpr int kMaxRedraws = 1000;
  for (int r = 0; r < resamples; ++r) {
    Rng rng = make_rng(seed, 0xb0075 + static_cast<std::uint64_t>(r));
    int tries = 0;
    for (;; ++tries) {
      if (tries > kMaxRedraws) throw Error("bootstrap_delta: too many degenerate resamples");
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = uniform_index(rng, n);
        ry[i] = y[k];
        ra[i] = a[k];
        rb[i] = b[k];
      }
      if (!detail::is_constant(ry) && !detail::is_constant(ra) && !detail::is_constant(rb)) break;
    }
    out.redraws += tries;
    deltas.push_back(srocc(ry, ra) - srocc(ry, rb));
  }
  std::sort(deltas.begin(), deltas.end());
  out.median = percentile_sorted(deltas, 0.5);
  out.lo = percentile_sorted(deltas, 0.025);
  out.hi = percentile_sorted(deltas, 0.975);
  out.significant = out.lo > 0.0 && out.median >= kMinSignificantDelta;
  return out;
}

struct BudgetRow {
  double eps = 0;  // pixel units
  double srocc = 0;
  double plcc = 0;
};

struct EvalReport {
  double srocc = 0;
  double plcc = 0;
  std::size_t n = 0;
  std::vector<BudgetRow> attacked;
};

inline EvalReport evaluate(std::span<const double> y, std::span<const double> pred) {
  EvalReport r;
  r.srocc = srocc(y, pred);
  r.plcc = plcc_stat(y, pred);
  r.n = y.size();
  return r;
}

inline void write_report_csv(std::ostream& os, const EvalReport& r) {
  os.precision(10);
  os << "eps,srocc,plcc,n\n";
  os << 0 << ',' << r.srocc << ',' << r.plcc << ',' << r.n << '\n';
  for (const auto& b : r.attacked) os << b.eps << ',' << b.srocc << ',' << b.plcc << ',' << r.n << '\n';
}

inline void print_report(std::ostream& os, const EvalReport& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-12s %8s %8s\n", "budget", "SROCC", "PLCC");
  os << buf;
  std::snprintf(buf, sizeof buf, "%-12s %8.4f %8.4f\n", "clean", r.srocc, r.plcc);
  os << buf;
  for (const auto& b : r.attacked) {
    std::snprintf(buf, sizeof buf, "eps=%-3.0f/255 %8.4f %8.4f\n", b.eps * 255.0, b.srocc, b.plcc);
    os << buf;
  }
  os << "n = " << r.n << "\n";
}

}  // namespace birqa
