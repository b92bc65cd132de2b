#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "batch_fuzz.hpp"
#include "birqa/anchorloss.hpp"

using namespace birqa;

namespace {

double base_value(std::vector<double> y, std::vector<double> p) {
  ad::Graph<double> g(false);
  return base_loss<double>(y, g.constant(ad::Shape{static_cast<int>(p.size())}, p)).item();
}

AnchoredLoss<double> anchored_value(const BatchPlan& plan, std::vector<double> y, std::vector<double> p,
                                    ad::Graph<double>& g) {
  return anchored_loss<double>(plan, y, g.constant(ad::Shape{static_cast<int>(p.size())}, p));
}

BatchPlan manual_plan(std::vector<char> anchors, double band, int k) {
  BatchPlan plan;
  plan.is_anchor = std::move(anchors);
  for (std::size_t i = 0; i < plan.is_anchor.size(); ++i) plan.rows.push_back(static_cast<int>(i));
  plan.band = band;
  plan.top_k = k;
  return plan;
}

std::vector<double> dense_grid() {
  std::vector<double> mos;
  for (int i = 0; i <= 4000; ++i) mos.push_back(10.0 * i / 4000);
  return mos;
}

}  // namespace

TEST(BaseLoss, HandValues) {
  EXPECT_NEAR(base_value({-1, 1}, {1, -1}), 3.1, 1e-8);
  EXPECT_NEAR(base_value({1, 2, 3}, {1, 2, 3}), -0.3, 1e-8);
}

TEST(BaseLoss, CorrelationTermIsAffineInvariant) {
  const std::vector<double> y{0.5, 2, 3.5, 1, 7}, p{1, 1.5, 4, 0, 6};
  auto mse = [&](const std::vector<double>& q) {
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += (q[i] - y[i]) * (q[i] - y[i]);
    return s / y.size();
  };
  std::vector<double> q;
  for (double v : p) q.push_back(2.5 * v - 3);
  EXPECT_NEAR(base_value(y, p) - 0.7 * mse(p), base_value(y, q) - 0.7 * mse(q), 1e-9);
}

TEST(BaseLoss, Errors) {
  EXPECT_THROW(base_value({1, 1, 1}, {1, 2, 3}), Error);
  EXPECT_THROW(base_value({1, 2}, {1, 2, 3}), Error);
}

TEST(NearestAnchors, Bracketing) {
  const BatchPlan plan = manual_plan({1, 0, 1, 1, 0}, 1.0, 1);
  const std::vector<double> y{1, 2.4, 2, 3, 2};
  AnchorPair a = nearest_anchors(plan, y, 1);
  EXPECT_EQ(a.lower, 2);
  EXPECT_EQ(a.upper, 3);
  a = nearest_anchors(plan, y, 4);  // equals anchor MOS 2
  EXPECT_EQ(a.lower, 2);
  EXPECT_EQ(a.upper, 2);
}

TEST(NearestAnchors, TiesTakeLowestPosition) {
  const BatchPlan plan = manual_plan({1, 1, 1, 0, 1}, 1.0, 1);
  const std::vector<double> y{0, 2, 2, 2, 3};
  const AnchorPair a = nearest_anchors(plan, y, 3);
  EXPECT_EQ(a.lower, 1);
  EXPECT_EQ(a.upper, 1);
}

TEST(NearestAnchors, MissingCoverageThrows) {
  const BatchPlan plan = manual_plan({0, 1, 1}, 1.0, 1);
  EXPECT_THROW(nearest_anchors(plan, std::vector<double>{0, 1, 2}, 0), Error);
}

TEST(AnchoredLoss, HandExample) {
  const BatchPlan plan = manual_plan({1, 0, 1}, 1.0, 1);
  ad::Graph<double> g(false);
  const auto l = anchored_value(plan, {1, 1.5, 2}, {1.0, 2.5, 2.0}, g);
  EXPECT_EQ(l.topk.item(), 0.5);
  EXPECT_EQ(l.delta_max, 0.5);
}

TEST(AnchoredLoss, ZeroUnderStrictlyMonotoneTransforms) {
  Rng rng = make_rng(11);
  for (int t = 0; t < 100; ++t) {
    const int n = 6 + static_cast<int>(uniform_index(rng, 11));
    std::vector<double> y;
    for (int i = 0; i < n; ++i) y.push_back(uniform(rng, 2, 3));
    std::sort(y.begin(), y.end());
    std::vector<char> anchors(n, 0);
    anchors.front() = anchors.back() = 1;
    anchors[n / 2] = 1;
    const BatchPlan plan = manual_plan(anchors, 1.0, 4);
    const double a = uniform(rng, 0.1, 5), b = uniform(rng, -3, 3);
    std::vector<double> p;
    for (double v : y) {
      switch (t % 4) {
        case 0: p.push_back(a * v + b); break;
        case 1: p.push_back(std::exp(a * v)); break;
        case 2: p.push_back(std::atan(a * (v - 2.5))); break;
        default: p.push_back(v * v * v + b); break;
      }
    }
    ad::Graph<double> g(false);
    const auto l = anchored_value(plan, y, p, g);
    EXPECT_EQ(l.topk.item(), 0.0) << t;
    EXPECT_EQ(l.delta_max, 0.0) << t;
  }
}

TEST(AnchoredLoss, ScalesExactlyWithInverseBand) {
  const std::vector<double> y{0, 0.1, 0.2, 0.3, 0.4, 0.5};
  const std::vector<double> p{0.25, 0.75, 0.125, 0.5, 0.0, 0.625};
  BatchPlan plan = manual_plan({1, 0, 1, 0, 0, 1}, 0.5, 2);
  ad::Graph<double> g(false);
  const double at_half = anchored_value(plan, y, p, g).topk.item();
  plan.band = 1.0;
  const double at_one = anchored_value(plan, y, p, g).topk.item();
  plan.band = 0.25;
  const double at_quarter = anchored_value(plan, y, p, g).topk.item();
  EXPECT_GT(at_one, 0.0);
  EXPECT_EQ(at_half, 2 * at_one);
  EXPECT_EQ(at_quarter, 4 * at_one);
}

TEST(AnchoredLoss, TopKAveragesWorstHinges) {
  // hinges: pos1 -> 0.5, pos3 -> 1.0, pos4 -> 0.25 (R = 1)
  const BatchPlan plan = manual_plan({1, 0, 1, 0, 0, 1}, 1.0, 2);
  const std::vector<double> y{0, 1, 2, 3, 4, 5};
  const std::vector<double> p{0, 2.5, 2, 1, 5.25, 5};
  ad::Graph<double> g(false);
  const auto l = anchored_value(plan, y, p, g);
  EXPECT_DOUBLE_EQ(l.topk.item(), 0.75);
  EXPECT_DOUBLE_EQ(l.delta_max, 1.0);
  EXPECT_EQ(anchor_hinges(plan, y, p), (std::vector<double>{0.5, 1.0, 0.25}));
}

TEST(AatLoss, IdentityPredictionsGiveHalfBaseLoss) {
  const BatchPlan plan = manual_plan({1, 0, 0, 1}, 1.0, 4);
  const std::vector<double> y{1, 1.2, 1.7, 2};
  ad::Graph<double> g(false);
  EXPECT_NEAR(aat_loss<double>(y, g.constant(ad::Shape{4}, y), plan).item(), -0.15, 1e-8);
  const std::vector<double> p{3, 4, 5, 6};
  EXPECT_NEAR(aat_loss<double>(y, g.constant(ad::Shape{4}, p), plan).item(),
              0.5 * base_value(y, p), 1e-12);
}

TEST(AatLoss, GradCheckOnRandomBatches) {
  Rng rng = make_rng(5);
  for (int t = 0; t < 20; ++t) {
    const int n = 16;
    std::vector<double> y;
    for (int i = 0; i < n; ++i) y.push_back(uniform(rng, 4, 4.5));
    std::sort(y.begin(), y.end());
    std::vector<char> anchors(n, 0);
    for (int i = 0; i < n; i += 2) anchors[i] = 1;
    anchors.back() = 1;
    const BatchPlan plan = manual_plan(anchors, 0.5, 4);
    ad::Parameter<double> pred("pred", ad::Shape{n});
    // redraw until hinge kinks and top-k ties are out of finite-difference reach
    auto smooth = [&]() {
      for (int j : plan.non_anchor_positions()) {
        const auto an = nearest_anchors(plan, y, j);
        for (int o : {an.lower, an.upper}) {
          if (std::fabs(pred.value[j] - pred.value[o]) < 1e-3) return false;
        }
      }
      auto h = anchor_hinges(plan, y, pred.value);
      std::sort(h.begin(), h.end());
      for (std::size_t i = 1; i < h.size(); ++i) {
        if (h[i] > 0 && h[i] - h[i - 1] < 1e-3) return false;
      }
      return true;
    };
    do {
      for (int i = 0; i < n; ++i) pred.value[i] = y[i] + uniform(rng, -0.3, 0.3);
    } while (!smooth());
    auto fn = [&](ad::Graph<double>& g) { return aat_loss<double>(y, g.param(pred), plan); };
    std::vector<ad::Parameter<double>*> ps{&pred};
    EXPECT_LT(ad::grad_check(fn, std::span<ad::Parameter<double>* const>(ps)), 1e-4) << t;
  }
}

TEST(BuildBatch, BandFollowsMosRange) {
  const auto mos = dense_grid();
  Rng rng = make_rng(1);
  const BatchPlan plan = build_batch(mos, BatchConfig{}, rng);
  EXPECT_DOUBLE_EQ(plan.band, 0.5);
  EXPECT_EQ(plan.size(), 16u);
  EXPECT_EQ(plan.anchor_positions().size(), 8u);
}

TEST(BuildBatch, ContractOverManyBuilds) {
  const auto mos = dense_grid();
  Rng rng = make_rng(2);
  double worst_eta = 0;
  for (int t = 0; t < 1000; ++t) {
    const BatchPlan plan = build_batch(mos, BatchConfig{}, rng);
    const auto y = plan_labels(plan, mos);
    ASSERT_TRUE(std::is_sorted(y.begin(), y.end()));
    std::set<int> distinct(plan.rows.begin(), plan.rows.end());
    ASSERT_EQ(distinct.size(), 16u);
    for (double v : y) {
      ASSERT_GE(v, plan.y_low);
      ASSERT_LE(v, plan.y_low + plan.band);
    }
    for (int j : plan.non_anchor_positions()) {
      const auto a = nearest_anchors(plan, y, j);
      ASSERT_LE(y[a.lower], y[j]);
      ASSERT_GE(y[a.upper], y[j]);
    }
    worst_eta = std::max(worst_eta, plan.eta);
  }
  EXPECT_LE(worst_eta, 0.5 / 7 * 1.05);
}

TEST(BuildBatch, Deterministic) {
  const auto mos = dense_grid();
  Rng a = make_rng(9), b = make_rng(9);
  for (int t = 0; t < 10; ++t) {
    const BatchPlan p = build_batch(mos, BatchConfig{}, a), q = build_batch(mos, BatchConfig{}, b);
    EXPECT_EQ(p.rows, q.rows);
    EXPECT_EQ(p.is_anchor, q.is_anchor);
  }
}

TEST(BuildBatch, SparseDatasetFails) {
  std::vector<double> mos;
  for (int i = 0; i < 40; ++i) mos.push_back(i * 0.25);  // ~2 samples per band
  Rng rng = make_rng(3);
  try {
    build_batch(mos, BatchConfig{}, rng);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("too sparse"), std::string::npos);
  }
}

TEST(BuildBatch, WholeDatasetInsideOneBand) {
  std::vector<double> mos;
  Rng gen = make_rng(4);
  for (int i = 0; i < 16; ++i) mos.push_back(uniform(gen, 3, 3.4));
  BatchConfig cfg;
  cfg.band = 0.5;
  Rng rng = make_rng(5);
  const BatchPlan plan = build_batch(mos, cfg, rng);
  std::set<int> used(plan.rows.begin(), plan.rows.end());
  EXPECT_EQ(used.size(), 16u);
  EXPECT_TRUE(plan.is_anchor.front());
  EXPECT_TRUE(plan.is_anchor.back());
  const auto [mn, mx] = std::minmax_element(mos.begin(), mos.end());
  EXPECT_EQ(plan.rows.front(), mn - mos.begin());
  EXPECT_EQ(plan.rows.back(), mx - mos.begin());
}

TEST(BuildBatch, ConfigErrors) {
  std::vector<double> mos(10, 1.0);
  Rng rng = make_rng(0);
  EXPECT_THROW(build_batch(mos, BatchConfig{}, rng), Error);  // fewer rows than the batch
  BatchConfig bad;
  bad.anchors = 1;
  EXPECT_THROW(build_batch(dense_grid(), bad, rng), Error);
}

TEST(Bound, ReferenceExample) {
  EXPECT_EQ(theorem1_bound(0.1, 0.25, 0.01, 10).bound, 0.45);
  EXPECT_EQ(theorem1_bound(0, 0, 0, 0.5).bound, 0.0);
  EXPECT_THROW(theorem1_bound(-0.1, 0, 0, 1), Error);
}

TEST(Bound, HoldsOnConstructedBatches) {
  Rng rng = make_rng(2024);
  int violations = 0;
  for (int t = 0; t < 10000; ++t) {
    const fuzz::Case c = fuzz::make_case(rng);
    const BoundCertificate cert = certify_batch(c.plan, c.y, c.pred, 1.0);
    EXPECT_LE(cert.eps, c.eps);
    if (!cert.holds || cert.error > cert.bound) ++violations;
  }
  EXPECT_EQ(violations, 0);
}

TEST(Certify, ExactPredictions) {
  BatchPlan plan = manual_plan({1, 0, 0, 1, 0, 1}, 1.0, 4);
  const std::vector<double> y{0, 0.125, 0.25, 0.5, 0.75, 1};
  plan.eta = detail::realized_eta(plan, y);
  EXPECT_EQ(plan.eta, 0.375);
  const auto c = certify_batch(plan, y, y);
  EXPECT_EQ(c.eps, 0.0);
  EXPECT_EQ(c.delta, 0.0);
  EXPECT_EQ(c.error, 0.0);
  EXPECT_EQ(c.bound, plan.eta);
  EXPECT_TRUE(c.holds);
  EXPECT_TRUE(c.violating_anchors.empty());
}

TEST(Certify, ReportsAnchorOutsideBudget) {
  BatchPlan plan = manual_plan({1, 0, 1, 0, 1}, 1.0, 4);
  const std::vector<double> y{0, 0.25, 0.5, 0.75, 1};
  plan.eta = detail::realized_eta(plan, y);
  std::vector<double> p = y;
  p[2] += 0.5;
  const auto c = certify_batch(plan, y, p, 0.1);
  EXPECT_EQ(c.violating_anchors, (std::vector<int>{2}));
  EXPECT_EQ(c.eps, 0.5);
}

TEST(Certify, CsvRow) {
  BoundCertificate c = theorem1_bound(0.1, 0.25, 0.01, 10);
  c.step = 7;
  c.error = 0.3;
  EXPECT_EQ(certificate_csv_row(c), "7,0.10000000000000001,0.25,0.01,10,0.45000000000000001,0.29999999999999999,1");
}
