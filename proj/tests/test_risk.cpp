#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "loanrisk/errors.hpp"
#include "loanrisk/risk.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace loanrisk;
using loanrisk::testutil::ConstantModel;
using loanrisk::testutil::random_params;

namespace {

FeatureSchema loan_schema() {
  std::vector<FieldSpec> fields;
  for (const char* n : {"age", "orig_rate", "balance_frac", "x"}) {
    FieldSpec f;
    f.name = n;
    fields.push_back(f);
  }
  FieldSpec s;
  s.name = "state";
  s.type = FieldType::kState;
  s.group = "state";
  fields.push_back(s);
  return FeatureSchema(std::move(fields));
}

MlpParams loan_params(std::uint64_t seed) {
  MlpParams p = random_params(loan_schema().dim(), {8}, Activation::kTanh, seed);
  p.layers[0].w.leftCols(1) *= 0.05;
  return p;
}

std::vector<double> loan_row(double age, double x) { return {age, 6.0, 0.95, x, 0, 0, 0, 0, 0, 0, 0}; }

std::vector<LoanSnapshot> make_pool(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<LoanSnapshot> pool;
  for (std::size_t i = 0; i < n; ++i) {
    LoanSnapshot s;
    s.loan_id = "P" + std::to_string(i);
    s.covariates = loan_row(static_cast<double>(i % 30), normal(rng));
    s.state = i % 5 == 0 ? State::kDD30 : State::kCurrent;
    s.notional = 100000;
    pool.push_back(s);
  }
  return pool;
}

double max_diff(const TransitionMatrix& a, const TransitionMatrix& b) {
  double m = 0;
  for (int i = 0; i < kNumStates; ++i)
    for (int j = 0; j < kNumStates; ++j) m = std::max(m, std::abs(a.at(i, j) - b.at(i, j)));
  return m;
}

}  // namespace

TEST(OneStep, RowsFollowStateAndAbsorbingAreUnit) {
  const FeatureSchema schema = loan_schema();
  const MlpParams p = loan_params(1);
  const MlpModel m(p);
  const auto row = loan_row(10, 0.3);
  const TransitionMatrix t = one_step_matrix(m, schema, row);
  for (State u : all_states()) {
    auto r = row;
    set_state(schema, r, u);
    const Probs expect = m.predict_one(r);
    for (State v : all_states())
      EXPECT_NEAR(t(u, v), is_absorbing(u) ? (u == v ? 1.0 : 0.0) : expect[static_cast<std::size_t>(index_of(v))],
                  1e-15);
  }
  const TransitionMatrix c = one_step_matrix(m, schema, row, true);
  EXPECT_EQ(c(State::kCurrent, State::kDD60), 0.0);
  EXPECT_TRUE(c.is_row_stochastic(1e-14));
}

TEST(OneStep, ZeroStateWeightsGiveIdenticalRows) {
  const FeatureSchema schema = loan_schema();
  MlpParams p = loan_params(2);
  for (std::size_t c : schema.state_columns()) p.layers[0].w.col(static_cast<Eigen::Index>(c)).setZero();
  const TransitionMatrix t = one_step_matrix(MlpModel(p), schema, loan_row(3, 1.0));
  for (int u = 1; u < 5; ++u)
    for (int v = 0; v < kNumStates; ++v) EXPECT_NEAR(t.at(u, v), t.at(0, v), 1e-15);
}

TEST(MultiPeriod, OneStepAndBruteForce) {
  const FeatureSchema schema = loan_schema();
  const MlpParams p = loan_params(3);
  const MlpModel m(p);
  const CovariateEvolver ev = CovariateEvolver::standard(schema);
  const auto row = loan_row(5, -0.4);
  EXPECT_EQ(multi_period_frozen(m, schema, row, ev, 1), one_step_matrix(m, schema, row));
  for (int t = 2; t <= 4; ++t)
    EXPECT_LE(max_diff(multi_period_frozen(m, schema, row, ev, t), testutil::brute_force_paths(m, schema, row, ev, t)),
              1e-10)
        << t;
  const TransitionMatrix long_run = multi_period_frozen(m, schema, row, ev, 60);
  EXPECT_LE(long_run.max_row_sum_error(), 1e-8);
  EXPECT_THROW(multi_period_frozen(m, schema, row, ev, 0), std::exception);
}

TEST(MultiPeriod, TwoStateToy) {
  const FeatureSchema schema = loan_schema();
  Probs p{};
  p[0] = 0.9;
  p[6] = 0.1;
  const ConstantModel m(schema.dim(), p);
  const TransitionMatrix t = multi_period_frozen(m, schema, loan_row(0, 0), CovariateEvolver{}, 2);
  EXPECT_NEAR(t(State::kCurrent, State::kCurrent), 0.81, 1e-15);
  EXPECT_NEAR(t(State::kCurrent, State::kPaidOff), 0.19, 1e-15);
}

TEST(MultiPeriod, AbsorptionIsMonotoneAndBatchMatches) {
  const FeatureSchema schema = loan_schema();
  const MlpParams params = loan_params(4);
  const MlpModel m(params);
  const CovariateEvolver ev = CovariateEvolver::standard(schema);
  const auto row = loan_row(0, 0.2);
  double prev = 0;
  for (int t = 1; t <= 24; ++t) {
    const TransitionMatrix mt = multi_period_frozen(m, schema, row, ev, t);
    const double absorbed = mt(State::kCurrent, State::kREO) + mt(State::kCurrent, State::kPaidOff);
    EXPECT_GE(absorbed, prev - 1e-15);
    prev = absorbed;
  }
  RowMatrix rows(2, static_cast<Eigen::Index>(schema.dim()));
  const auto r2 = loan_row(7, -1.0);
  for (Eigen::Index j = 0; j < rows.cols(); ++j) {
    rows(0, j) = row[static_cast<std::size_t>(j)];
    rows(1, j) = r2[static_cast<std::size_t>(j)];
  }
  const auto batch = multi_period_frozen(m, schema, rows, ev, 6);
  EXPECT_LE(max_diff(batch[0], multi_period_frozen(m, schema, row, ev, 6)), 1e-14);
  EXPECT_LE(max_diff(batch[1], multi_period_frozen(m, schema, r2, ev, 6)), 1e-14);
}

TEST(Evolver, AgesAndAmortizes) {
  const FeatureSchema schema = loan_schema();
  const CovariateEvolver ev = CovariateEvolver::standard(schema);
  auto row = loan_row(11, 0);
  ev.advance(row);
  EXPECT_EQ(row[0], 12.0);
  EXPECT_NEAR(row[2], 0.98772, 1e-5);
  EXPECT_TRUE(CovariateEvolver{}.frozen());
  EXPECT_THROW(CovariateEvolver::standard(schema, 0), ConfigError);
}

TEST(PoolMc, NoPrepaymentMeansNoPrepays) {
  const FeatureSchema schema = loan_schema();
  Probs p{};
  p[0] = 0.7;
  p[1] = 0.2;
  p[2] = 0.05;
  p[4] = 0.05;
  const ConstantModel m(schema.dim(), p);
  McConfig cfg;
  cfg.horizon = 12;
  cfg.num_paths = 200;
  const PoolDistribution d = simulate_pool_mc(m, schema, make_pool(40, 1), CovariateEvolver{}, cfg);
  ASSERT_EQ(d.paths.size(), 200u);
  for (const auto& path : d.paths) {
    EXPECT_EQ(path[6], 0u);
    EXPECT_EQ(std::accumulate(path.begin(), path.end(), 0u), 40u);
  }
}

TEST(PoolMc, DeterministicAndMatchesFrozenMean) {
  const FeatureSchema schema = loan_schema();
  const MlpParams params = loan_params(5);
  const MlpModel m(params);
  const CovariateEvolver ev = CovariateEvolver::standard(schema);
  const auto pool = make_pool(20, 2);
  McConfig cfg;
  cfg.horizon = 6;
  cfg.num_paths = 20000;
  cfg.update_counters = false;
  cfg.seed = 8;
  const PoolDistribution d = simulate_pool_mc(m, schema, pool, ev, cfg);
  Probs expect{};
  for (const auto& loan : pool) {
    const TransitionMatrix t = multi_period_frozen(m, schema, loan.covariates, ev, 6, true);
    for (int v = 0; v < kNumStates; ++v) expect[v] += t(loan.state, state_from_index(v));
  }
  for (int v = 0; v < kNumStates; ++v) {
    const double se = std::sqrt(d.variance[v] / 20000.0);
    EXPECT_LE(std::abs(d.mean[v] - expect[v]), 4 * se + 1e-12) << v;
  }
  cfg.num_paths = 300;
  const PoolDistribution a = simulate_pool_mc(m, schema, pool, ev, cfg), b = simulate_pool_mc(m, schema, pool, ev, cfg);
  EXPECT_EQ(a.paths, b.paths);
  std::ostringstream pa, pb;
  a.write_paths_csv(pa);
  b.write_paths_csv(pb);
  EXPECT_EQ(pa.str(), pb.str());
}

TEST(PoolMc, CountDistributionMatchesPoissonBinomial) {
  const FeatureSchema schema = loan_schema();
  const MlpParams params = loan_params(6);
  const MlpModel m(params);
  const auto pool = make_pool(100, 3);
  McConfig cfg;
  cfg.horizon = 3;
  cfg.num_paths = 100000;
  cfg.update_counters = false;
  const PoolDistribution d = simulate_pool_mc(m, schema, pool, CovariateEvolver{}, cfg);
  std::vector<double> p;
  for (const auto& loan : pool)
    p.push_back(multi_period_frozen(m, schema, loan.covariates, CovariateEvolver{}, 3, true)(loan.state, State::kDD30));
  const std::vector<double> pmf = poisson_binomial_pmf(p);
  std::vector<double> hist(pmf.size(), 0.0);
  for (const auto& path : d.paths) hist[path[1]] += 1.0 / 100000.0;
  double tv = 0;
  for (std::size_t k = 0; k < pmf.size(); ++k) tv += 0.5 * std::abs(hist[k] - pmf[k]);
  EXPECT_LT(tv, 0.05);
}

TEST(ClosedForm, PoissonAndNormal) {
  const std::vector<double> p(1000, 0.01);
  const PoolDistribution po = pool_poisson(p, State::kPaidOff);
  EXPECT_NEAR(po.mean[6], 10.0, 1e-12);
  EXPECT_NEAR(po.variance[6], 10.0, 1e-12);
  double cdf = 0, term = std::exp(-10.0);
  for (int k = 0; k <= 10; ++k) {
    cdf += term;
    term *= 10.0 / (k + 1);
  }
  EXPECT_NEAR(po.cdf(State::kPaidOff, 10), cdf, 1e-12);
  const PoolDistribution no = pool_normal(p, State::kPaidOff);
  EXPECT_NEAR(no.variance[6], 1000 * 0.01 * 0.99, 1e-12);
  EXPECT_NEAR(no.cdf(State::kPaidOff, 10), 0.5 * std::erfc(-(10.5 - 10.0) / std::sqrt(9.9) / std::sqrt(2.0)), 1e-12);

  std::vector<Probs> loans(3);
  loans[0] = {0.5, 0.5, 0, 0, 0, 0, 0};
  loans[1] = {0.2, 0, 0, 0, 0, 0, 0.8};
  loans[2] = {1, 0, 0, 0, 0, 0, 0};
  const PoolDistribution multi = pool_normal(loans);
  EXPECT_NEAR(multi.mean[0], 1.7, 1e-15);
  EXPECT_NEAR(multi.variance[0], 0.25 + 0.16, 1e-15);
  EXPECT_NEAR(pool_poisson(loans).mean[6], 0.8, 1e-15);
}

TEST(ClosedForm, PoissonBinomialPmf) {
  const std::vector<double> p(10, 0.3);
  const auto pmf = poisson_binomial_pmf(p);
  ASSERT_EQ(pmf.size(), 11u);
  double binom = std::pow(0.7, 10);
  for (int k = 0; k <= 10; ++k) {
    EXPECT_NEAR(pmf[static_cast<std::size_t>(k)], binom, 1e-15);
    binom *= (10.0 - k) / (k + 1) * 0.3 / 0.7;
  }
  EXPECT_NEAR(std::accumulate(pmf.begin(), pmf.end(), 0.0), 1.0, 1e-14);
}

TEST(Portfolio, TopNAndSelection) {
  const std::vector<double> s = {0.9, 0.5, 0.7};
  const std::vector<std::string> ids = {"a", "b", "c"};
  EXPECT_EQ(top_n_by_score(s, ids, 2), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(top_n_by_score(s, ids, 0), std::vector<std::size_t>{});
  const std::vector<double> tie = {0.5, 0.5, 0.5};
  const std::vector<std::string> tie_ids = {"z", "a", "m"};
  EXPECT_EQ(top_n_by_score(tie, tie_ids, 2), (std::vector<std::size_t>{1, 2}));

  const FeatureSchema schema = loan_schema();
  const MlpParams params = loan_params(7);
  const MlpModel m(params);
  const auto pool = make_pool(30, 4);
  const CovariateEvolver ev = CovariateEvolver::standard(schema);
  const auto pc = current_probability(m, schema, pool, 6, ev);
  std::vector<std::string> pid;
  for (const auto& l : pool) pid.push_back(l.loan_id);
  EXPECT_EQ(select_portfolio(m, schema, pool, 10, 6, ev), top_n_by_score(pc, pid, 10));
  EXPECT_EQ(select_portfolio(m, schema, pool, 30, 6, ev).size(), 30u);
  EXPECT_NEAR(pc[3], multi_period_frozen(m, schema, pool[3].covariates, ev, 6)(pool[3].state, State::kCurrent), 1e-14);
}

TEST(Portfolio, LossWeights) {
  EXPECT_NEAR(90000 * loss_weight(State::kDD90Plus, 3), 750.0, 1e-9);
  EXPECT_NEAR(loss_weight(State::kDD60), 2.0 / 360.0, 1e-15);
  EXPECT_EQ(loss_weight(State::kCurrent), 0.0);
  const std::vector<LoanOutcome> outs = {{State::kPaidOff, std::nullopt, 100000},
                                         {State::kForeclosure, std::nullopt, 100000},
                                         {State::kREO, std::nullopt, 100000},
                                         {State::kCurrent, std::nullopt, 100000}};
  EXPECT_NEAR(portfolio_loss(std::span(outs).first(1)), 5000.0, 1e-9);
  EXPECT_NEAR(portfolio_loss(std::span(outs).subspan(1, 1)), 40000.0, 1e-9);
  EXPECT_NEAR(portfolio_loss(outs), 85000.0, 1e-9);
}

TEST(Portfolio, RankedPools) {
  std::vector<double> key(2500);
  std::vector<std::string> ids(2500);
  for (std::size_t i = 0; i < key.size(); ++i) {
    key[i] = static_cast<double>((i * 37) % 101);
    ids[i] = "L" + std::to_string(i);
  }
  const RankedPools even = make_ranked_pools(std::span(key).first(2000), std::span(ids).first(2000), 1000);
  EXPECT_EQ(even.pools.size(), 2u);
  EXPECT_FALSE(even.last_short);
  const RankedPools odd = make_ranked_pools(key, ids, 1000);
  EXPECT_EQ(odd.pools.size(), 3u);
  EXPECT_TRUE(odd.last_short);
  EXPECT_GE(key[odd.pools[0].back()], key[odd.pools[1].front()]);
}

TEST(Portfolio, ComparisonCurve) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u;
  std::vector<double> a(200), b(200);
  std::vector<std::string> ids(200);
  std::vector<State> realized(200);
  for (std::size_t i = 0; i < 200; ++i) {
    a[i] = u(rng);
    b[i] = u(rng);
    ids[i] = "L" + std::to_string(i);
    realized[i] = u(rng) < 0.3 ? State::kDD30 : State::kCurrent;
  }
  const std::vector<std::size_t> grid = {10, 50, 100, 200};
  const auto same = portfolio_comparison_curve(a, a, ids, realized, grid);
  for (const auto& r : same) EXPECT_EQ(r.non_current_a, r.non_current_b);
  const auto diff = portfolio_comparison_curve(a, b, ids, realized, grid);
  const auto total = static_cast<std::size_t>(std::count(realized.begin(), realized.end(), State::kDD30));
  EXPECT_EQ(diff.back().non_current_a, total);
  EXPECT_EQ(diff.back().non_current_b, total);
  std::ostringstream out;
  write_comparison_csv(out, diff);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "n,non_current_a,non_current_b");
}
