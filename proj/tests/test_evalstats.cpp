#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "birqa/evalstats.hpp"

using namespace birqa;

namespace {

std::vector<double> noisy(const std::vector<double>& y, double sigma, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::vector<double> out;
  for (double v : y) out.push_back(v + uniform(rng, -sigma, sigma));
  return out;
}

std::vector<double> ramp(int n) {
  std::vector<double> y;
  for (int i = 0; i < n; ++i) y.push_back(0.1 * i + 0.03 * std::sin(i));
  return y;
}

}  // namespace

TEST(Srocc, HandCase) {
  EXPECT_DOUBLE_EQ(srocc(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 3, 2, 4}), 0.8);
}

TEST(Srocc, MonotoneAndReversed) {
  const std::vector<double> y{0.3, 1.5, -2, 7, 4.4, 0};
  std::vector<double> up, down;
  for (double v : y) {
    up.push_back(std::exp(v));
    down.push_back(-v * v * v);
  }
  EXPECT_DOUBLE_EQ(srocc(y, up), 1.0);
  EXPECT_DOUBLE_EQ(srocc(y, down), -1.0);
}

TEST(Srocc, TiesUseAverageRanks) {
  EXPECT_EQ(average_ranks(std::vector<double>{3, 1, 3, 2}), (std::vector<double>{3.5, 1, 3.5, 2}));
  // ranks (1,2,3,4) vs (1.5,1.5,3,4): covariance sum 4.5, variance sums 5 and 4.5
  const double r = srocc(std::vector<double>{1, 2, 3, 4}, std::vector<double>{5, 5, 6, 7});
  EXPECT_NEAR(r, 4.5 / std::sqrt(5.0 * 4.5), 1e-15);
}

TEST(Plcc, HandCases) {
  const std::vector<double> y{0, 1, 2};
  std::vector<double> lin, neg;
  for (double v : y) {
    lin.push_back(2 * v + 1);
    neg.push_back(-v);
  }
  EXPECT_DOUBLE_EQ(plcc_stat(y, lin), 1.0);
  EXPECT_DOUBLE_EQ(plcc_stat(y, neg), -1.0);
  EXPECT_NEAR(plcc_stat(y, std::vector<double>{0, 1, 4}), 4.0 / std::sqrt(2.0 * 78.0 / 9.0), 1e-12);
}

TEST(Correlation, Errors) {
  EXPECT_THROW(srocc(std::vector<double>{1, 2}, std::vector<double>{1, 2}), Error);
  EXPECT_THROW(srocc(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2}), Error);
  EXPECT_THROW(plcc_stat(std::vector<double>{1, 2, 3}, std::vector<double>{5, 5, 5}), Error);
  EXPECT_THROW(srocc(std::vector<double>{2, 2, 2}, std::vector<double>{1, 2, 3}), Error);
}

TEST(Percentile, LinearInterpolation) {
  const std::vector<double> s{0, 1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(percentile_sorted(s, 0.5), 2);
  EXPECT_DOUBLE_EQ(percentile_sorted(s, 0.025), 0.1);
  EXPECT_DOUBLE_EQ(percentile_sorted(s, 1.0), 4);
}

TEST(Bootstrap, IdenticalPredictionsGiveExactZero) {
  const auto y = ramp(40);
  const auto p = noisy(y, 0.5, 1);
  const auto r = bootstrap_delta(y, p, p, 1000, 3);
  EXPECT_EQ(r.median, 0.0);
  EXPECT_EQ(r.lo, 0.0);
  EXPECT_EQ(r.hi, 0.0);
  EXPECT_EQ(r.point, 0.0);
  EXPECT_FALSE(r.significant);
  EXPECT_EQ(r.resamples, 1000);
}

TEST(Bootstrap, SeededRunsAreBitwiseIdentical) {
  const auto y = ramp(30);
  const auto a = noisy(y, 0.4, 2), b = noisy(y, 0.8, 3);
  const auto r1 = bootstrap_delta(y, a, b, 500, 9), r2 = bootstrap_delta(y, a, b, 500, 9);
  EXPECT_EQ(std::memcmp(&r1.median, &r2.median, sizeof(double)), 0);
  EXPECT_EQ(std::memcmp(&r1.lo, &r2.lo, sizeof(double)), 0);
  EXPECT_EQ(std::memcmp(&r1.hi, &r2.hi, sizeof(double)), 0);
  const auto r3 = bootstrap_delta(y, a, b, 500, 10);
  EXPECT_FALSE(r3.lo == r1.lo && r3.hi == r1.hi);
}

TEST(Bootstrap, PerfectBeatsNoisy) {
  const auto y = ramp(60);
  const auto r = bootstrap_delta(y, y, noisy(y, 2.0, 4), 1000, 5);
  EXPECT_GT(r.lo, 0.0);
  EXPECT_GE(r.median, kMinSignificantDelta);
  EXPECT_TRUE(r.significant);
  EXPECT_LE(r.lo, r.median);
  EXPECT_LE(r.median, r.hi);
}

TEST(Bootstrap, RedrawsDegenerateResamples) {
  // Only two distinct labels among ten rows: some resamples are constant.
  std::vector<double> y(10, 1.0), a(10), b(10);
  y[0] = 2.0;
  for (int i = 0; i < 10; ++i) {
    a[i] = i;
    b[i] = 10 - i;
  }
  const auto r = bootstrap_delta(y, a, b, 200, 1);
  EXPECT_GT(r.redraws, 0);
  EXPECT_THROW(bootstrap_delta(std::vector<double>(5, 1.0), a, b), Error);
}

TEST(Report, CsvAndTable) {
  const std::vector<double> y{1, 2, 3, 4}, p{1, 3, 2, 4};
  EvalReport r = evaluate(y, p);
  r.attacked.push_back({8.0 / 255, 0.5, 0.6});
  std::ostringstream csv, table;
  write_report_csv(csv, r);
  EXPECT_EQ(csv.str().substr(0, 32), "eps,srocc,plcc,n\n0,0.8,0.8,4\n0.0");
  print_report(table, r);
  EXPECT_NE(table.str().find("eps=8  /255"), std::string::npos);
}
