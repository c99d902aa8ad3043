#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "loanrisk/errors.hpp"
#include "loanrisk/evalmetrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace loanrisk;

TEST(Auc, PerfectTiesAndComplement) {
  const std::vector<double> s = {0.9, 0.8, 0.3, 0.1};
  EXPECT_EQ(auc(s, {true, true, false, false}), 1.0);
  EXPECT_EQ(auc(s, {false, false, true, true}), 0.0);
  const std::vector<double> flat(6, 0.4);
  EXPECT_EQ(auc(flat, {true, false, true, false, false, true}), 0.5);
  EXPECT_THROW(auc(s, {true, true, true, true}), DataError);
  EXPECT_THROW(auc(s, {true, false}), DataError);
  const std::vector<double> nan = {0.1, std::nan("")};
  EXPECT_THROW(auc(nan, {true, false}), DataError);
}

TEST(Auc, MatchesBruteForceAndComplement) {
  std::mt19937_64 rng(1);
  for (int inst = 0; inst < 200; ++inst) {
    const std::size_t n = 2 + rng() % 60;
    std::vector<double> s(n);
    std::vector<bool> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % 7);
      y[i] = rng() % 3 == 0;
    }
    y[0] = true;
    y[1] = false;
    const double a = auc(s, y);
    EXPECT_NEAR(a, testutil::brute_force_auc(s, y), 1e-12);
    std::vector<bool> flip(n);
    for (std::size_t i = 0; i < n; ++i) flip[i] = !y[i];
    EXPECT_NEAR(a + auc(s, flip), 1.0, 1e-12);
  }
}

TEST(Auc, MonotoneTransformInvariance) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> normal;
  std::vector<double> s(500), t(500);
  std::vector<bool> y(500);
  for (std::size_t i = 0; i < 500; ++i) {
    s[i] = normal(rng);
    y[i] = normal(rng) + s[i] > 0;
    t[i] = std::exp(3 * s[i]) + 7;
  }
  EXPECT_EQ(auc(s, y), auc(t, y));
}

TEST(Roc, TrapezoidAreaEqualsAuc) {
  std::mt19937_64 rng(3);
  std::vector<double> s(300);
  std::vector<bool> y(300);
  for (std::size_t i = 0; i < 300; ++i) {
    s[i] = static_cast<double>(rng() % 20);
    y[i] = (rng() % 100) < 30 + s[i] * 2;
  }
  const RocCurve roc = roc_curve(s, y);
  double area = 0;
  for (std::size_t k = 1; k < roc.points.size(); ++k)
    area += (roc.points[k].first - roc.points[k - 1].first) * (roc.points[k].second + roc.points[k - 1].second) / 2;
  EXPECT_NEAR(area, roc.auc, 1e-12);
  EXPECT_EQ(roc.points.front(), std::make_pair(0.0, 0.0));
  EXPECT_EQ(roc.points.back(), std::make_pair(1.0, 1.0));
  std::ostringstream out;
  write_roc_csv(out, roc);
  EXPECT_EQ(out.str().substr(0, 8), "fpr,tpr\n");
}

TEST(Auc, RandomScoresNearHalf) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u;
  std::vector<double> s(20000);
  std::vector<bool> y(20000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = u(rng);
    y[i] = u(rng) < 0.2;
  }
  EXPECT_NEAR(auc(s, y), 0.5, 0.02);
}

TEST(TransitionAuc, MatrixCellsAndAbsorbingRows) {
  const FeatureSchema schema = testutil::numeric_schema(2);
  const MlpParams p = testutil::random_params(schema.dim(), {6}, Activation::kRelu, 5);
  const MlpModel m(p);
  const DesignSet d = testutil::random_design(2000, schema.dim(), 6);
  const AucMatrix mat = transition_auc_matrix(m, d);
  for (int v = 0; v < kNumStates; ++v) {
    EXPECT_FALSE(mat.cell[5][static_cast<std::size_t>(v)].has_value());
    EXPECT_FALSE(mat.cell[6][static_cast<std::size_t>(v)].has_value());
  }
  const auto one = transition_auc(m, d, State::kCurrent, State::kPaidOff);
  ASSERT_TRUE(one.has_value());
  EXPECT_EQ(*one, *mat.cell[0][6]);
  // Current -> DD60 never happens in legal data: a single class.
  EXPECT_FALSE(mat.cell[0][2].has_value());
  EXPECT_EQ(mat.samples[0], d.rows_in_state(State::kCurrent).size());
  EXPECT_FALSE(transition_auc(m, d, State::kREO, State::kREO).has_value());
  std::ostringstream out;
  mat.write_csv(out);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "from,Current,DD30,DD60,DD90Plus,Foreclosure,REO,PaidOff");
  EXPECT_TRUE(mat.to_json()["REO"]["REO"].is_null());
}

TEST(LikelihoodRatio, StatisticAndPValue) {
  EXPECT_NEAR(lr_statistic(0.5, 0.4, 100), 20.0, 1e-12);
  EXPECT_EQ(lr_statistic(0.5, 0.4, 100), -lr_statistic(0.4, 0.5, 100));
  const double n = 1.006e8 / lr_statistic(0.1840, 0.1680, 1.0);
  EXPECT_NEAR(n, 3.14e9, 0.01e9);
  EXPECT_NEAR(lr_statistic(0.1840, 0.1680, n), 1.006e8, 1e-6);
  const LrTest t = lr_test(0.5, 0.49, 1000, 10, 12);
  EXPECT_EQ(t.df, 2);
  ASSERT_TRUE(t.p_value.has_value());
  EXPECT_NEAR(*t.p_value, std::exp(-20.0 / 2), 1e-12);
  EXPECT_FALSE(lr_test(0.5, 0.49, 1000, 12, 12).p_value.has_value());
  EXPECT_EQ(*lr_test(0.4, 0.5, 1000, 1, 3).p_value, 1.0);
}

TEST(GapStats, AbsoluteAndStandardized) {
  const std::vector<double> mean = {12}, sd = {2}, actual = {10};
  const GapStats g = pool_gap_stats(mean, sd, actual);
  EXPECT_EQ(g.avg_absolute_gap, 2.0);
  EXPECT_EQ(g.avg_standardized_gap, 1.0);
  const std::vector<double> m2 = {12, 5}, s2 = {2, 0}, a2 = {10, 6};
  const GapStats inf = pool_gap_stats(m2, s2, a2);
  EXPECT_EQ(inf.infinite, 1u);
  EXPECT_TRUE(std::isinf(inf.avg_standardized_gap));
  EXPECT_THROW(pool_gap_stats(m2, sd, a2), DataError);
  PoolDistribution d;
  d.mean[6] = 12;
  d.variance[6] = 4;
  const std::vector<PoolDistribution> pools = {d};
  EXPECT_EQ(pool_gap_stats(pools, actual, State::kPaidOff).avg_standardized_gap, 1.0);
}
