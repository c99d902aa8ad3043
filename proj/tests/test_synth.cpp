#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "loanrisk/errors.hpp"
#include "loanrisk/synth.hpp"

using namespace loanrisk;

namespace {

SyntheticConfig small_config(int loans, std::uint64_t seed) {
  SyntheticConfig c;
  c.num_loans = loans;
  c.horizon = 24;
  c.origination_window = 12;
  c.seed = seed;
  c.macro.rate_ar = {0.05, 0.99, 0, 0, 0};
  c.macro.initial_rates = {5, 5, 5, 5};
  c.macro.rate_noise = 0.1;
  return c;
}

}  // namespace

TEST(Macro, NoiseFreeZeroPhiIsConstant) {
  MacroConfig m;
  m.rate_ar = {3.25, 0, 0, 0, 0};
  m.rate_noise = 0.0;
  const MacroPath p = simulate_macro(m, 40, 2, 1);
  ASSERT_EQ(p.national_rate.size(), 40u);
  for (double r : p.national_rate) EXPECT_EQ(r, 3.25);
}

TEST(Macro, SameSeedSamePath) {
  MacroConfig m;
  m.rate_ar = {0.05, 0.99, 0, 0, 0};
  m.rate_noise = 0.2;
  const MacroPath a = simulate_macro(m, 60, 3, 42), b = simulate_macro(m, 60, 3, 42), c = simulate_macro(m, 60, 3, 43);
  EXPECT_EQ(a.national_rate, b.national_rate);
  EXPECT_EQ(a.unemployment, b.unemployment);
  EXPECT_EQ(a.hpi, b.hpi);
  EXPECT_NE(a.national_rate, c.national_rate);
  for (const auto& region : a.hpi)
    for (double h : region) EXPECT_GT(h, 0.0);
}

TEST(Macro, FootnoteDefaultsStoredVerbatim) {
  const MacroConfig m;
  const std::array<double, 5> expected = {0.6687, 1.3514, -0.5131, 0.2410, -0.0838};
  EXPECT_EQ(m.rate_ar, expected);
  // Intercept-first reading: stationary but with an implausible mean.
  EXPECT_LT(ar_spectral_radius(m.rate_ar), 1.0);
  EXPECT_GT(ar_spectral_radius({0.0, 0.6687, 1.3514, -0.5131, 0.2410}), 1.0);
}

TEST(Macro, ExplosiveRejectedWhenFlagged) {
  MacroConfig m;
  m.rate_ar = {0.0, 1.2, 0, 0, 0};
  m.require_stationary = true;
  EXPECT_THROW(simulate_macro(m, 10, 1, 1), ConfigError);
  m.require_stationary = false;
  EXPECT_NO_THROW(simulate_macro(m, 10, 1, 1));
}

TEST(Macro, RatePathContinuesHistory) {
  MacroConfig m;
  m.rate_ar = {1.0, 0.5, 0, 0, 0};
  const std::vector<double> hist = {4, 4, 4, 4};
  const auto path = simulate_rate_path(m, hist, 3, 7);
  ASSERT_EQ(path.size(), 3u);
  EXPECT_DOUBLE_EQ(path[0], 3.0);
  EXPECT_DOUBLE_EQ(path[1], 2.5);
  EXPECT_DOUBLE_EQ(path[2], 2.25);
}

TEST(GroundTruth, ZeroCoefficientsUniformOverLegal) {
  const FeatureSchema schema = default_loan_schema(2);
  GroundTruthModel m;
  const GroundTruth gt(m, schema);
  std::vector<double> x(schema.dim(), 0.0);
  const Probs p = ground_truth_probs(gt, x, State::kCurrent);
  for (State s : all_states()) {
    if (is_legal_transition(State::kCurrent, s))
      EXPECT_NEAR(p[static_cast<std::size_t>(index_of(s))], 0.2, 1e-15);
    else
      EXPECT_EQ(p[static_cast<std::size_t>(index_of(s))], 0.0);
  }
}

TEST(GroundTruth, AbsorbingIsUnitVector) {
  const FeatureSchema schema = default_loan_schema(2);
  const GroundTruth gt(default_ground_truth(), schema);
  std::vector<double> x(schema.dim(), 1.0);
  const Probs p = gt.probs(x, State::kREO);
  for (State s : all_states()) EXPECT_EQ(p[static_cast<std::size_t>(index_of(s))], s == State::kREO ? 1.0 : 0.0);
}

TEST(GroundTruth, SoftmaxArithmetic) {
  const FeatureSchema schema = default_loan_schema(1);
  GroundTruthModel m;
  for (auto& row : m.intercept) row.fill(-800.0);
  m.intercept[0][0] = 0.0;
  m.intercept[0][6] = std::log(3.0);
  const GroundTruth gt(m, schema);
  std::vector<double> x(schema.dim(), 0.0);
  const Probs p = gt.probs(x, State::kCurrent);
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[6], 0.75, 1e-15);
}

TEST(GroundTruth, ProductTermsAndThreshold) {
  const FeatureSchema schema = default_loan_schema(1);
  GroundTruthModel m;
  m.terms.push_back({{"fico", "ltv"}, State::kPaidOff, 2.0, std::nullopt});
  m.thresholds.push_back({"incentive", 0.5, State::kPaidOff, 3.0, State::kCurrent});
  m.standardize["fico"] = {700.0, 50.0};
  const GroundTruth gt(m, schema);
  std::vector<double> x(schema.dim(), 0.0);
  x[schema.require_column("fico")] = 800.0;  // s = 2
  x[schema.require_column("ltv")] = 1.5;
  x[schema.require_column("incentive")] = 1.0;
  const Probs z = gt.logits(x, State::kCurrent);
  EXPECT_NEAR(z[6] - z[0], 2.0 * 2.0 * 1.5 + 3.0 * 0.5, 1e-12);
  EXPECT_TRUE(std::isinf(z[2]) && z[2] < 0);
  // The threshold is restricted to the Current row.
  const Probs z30 = gt.logits(x, State::kDD30);
  EXPECT_NEAR(z30[6] - z30[0], 6.0, 1e-12);
}

TEST(GroundTruth, DimensionMismatch) {
  const FeatureSchema schema = default_loan_schema(1);
  const GroundTruth gt(default_ground_truth(), schema);
  std::vector<double> x(schema.dim() - 1, 0.0);
  EXPECT_THROW(gt.probs(x, State::kCurrent), DataError);
}

TEST(GroundTruth, JsonRoundTrip) {
  const GroundTruthModel m = default_ground_truth();
  const GroundTruthModel back = GroundTruthModel::from_json(m.to_json());
  EXPECT_EQ(back.to_json(), m.to_json());
  ASSERT_EQ(back.terms.size(), m.terms.size());
  bool pair = false, triple = false;
  for (const auto& t : m.terms) {
    pair |= t.features.size() == 2;
    triple |= t.features.size() == 3;
  }
  EXPECT_TRUE(pair && triple);
}

TEST(Panel, ZeroLoansIsEmpty) {
  const Panel p = generate_panel(small_config(0, 1));
  EXPECT_TRUE(p.samples.empty());
  EXPECT_TRUE(p.loans.empty());
}

TEST(Panel, ForcedPayoffGivesOneRowPerLoan) {
  SyntheticConfig c = small_config(200, 3);
  GroundTruthModel m;
  for (auto& row : m.intercept) row.fill(-1000.0);
  for (auto& row : m.intercept) row[6] = 0.0;
  c.ground_truth = m;
  const Panel p = generate_panel(c);
  EXPECT_EQ(p.samples.size(), 200u);
  for (State s : p.samples.next_state) EXPECT_EQ(s, State::kPaidOff);
}

TEST(Panel, LegalityCountersAndNoRowsAfterAbsorption) {
  const Panel p = generate_panel(small_config(600, 5));
  const FeatureSchema& schema = p.schema;
  const std::size_t counters[] = {schema.require_column("times_current_12m"), schema.require_column("times_30dd_12m"),
                                  schema.require_column("times_60dd_12m"), schema.require_column("times_90dd_12m"),
                                  schema.require_column("times_fc_12m")};
  std::map<std::string, int> last_period;
  std::set<std::string> absorbed;
  for (std::size_t i = 0; i < p.samples.size(); ++i) {
    EXPECT_TRUE(is_legal_transition(p.samples.state[i], p.samples.next_state[i]));
    EXPECT_FALSE(is_absorbing(p.samples.state[i]));
    const std::string& id = p.samples.loan_id[i];
    EXPECT_FALSE(absorbed.count(id)) << id;
    if (is_absorbing(p.samples.next_state[i])) absorbed.insert(id);
    double total = 0.0;
    for (std::size_t c : counters) total += p.samples.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
    EXPECT_LE(total, 12.0);
    std::vector<double> row(p.samples.x.row(static_cast<Eigen::Index>(i)).begin(),
                            p.samples.x.row(static_cast<Eigen::Index>(i)).end());
    EXPECT_EQ(decode_state(schema, row), p.samples.state[i]);
    if (last_period.count(id)) {
      EXPECT_EQ(p.samples.period[i], last_period[id] + 1);
      EXPECT_EQ(p.samples.state[i], p.samples.next_state[i - 1]);
    }
    last_period[id] = p.samples.period[i];
  }
}

TEST(Panel, DeterministicAndByteIdenticalCsv) {
  const Panel a = generate_panel(small_config(300, 11)), b = generate_panel(small_config(300, 11));
  EXPECT_TRUE(a.samples.x == b.samples.x);
  EXPECT_EQ(a.samples.next_state, b.samples.next_state);
  std::ostringstream sa, sb, pa, pb;
  write_static_csv(sa, a);
  write_static_csv(sb, b);
  write_performance_csv(pa, a);
  write_performance_csv(pb, b);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(pa.str(), pb.str());
}

TEST(Panel, NoLookAheadInLaggedRates) {
  // A longer panel only appends months; everything before the shorter horizon is unchanged.
  SyntheticConfig c = small_config(400, 17);
  SyntheticConfig longer = c;
  longer.horizon = 36;
  const Panel a = generate_panel(c), b = generate_panel(longer);
  const int cutoff = c.start_period + c.horizon - 1;
  std::map<std::pair<std::string, int>, std::size_t> rows_b;
  for (std::size_t i = 0; i < b.samples.size(); ++i) rows_b[{b.samples.loan_id[i], b.samples.period[i]}] = i;
  std::size_t compared = 0;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    if (a.samples.period[i] >= cutoff) continue;
    const auto it = rows_b.find({a.samples.loan_id[i], a.samples.period[i]});
    ASSERT_NE(it, rows_b.end());
    EXPECT_TRUE(a.samples.x.row(static_cast<Eigen::Index>(i)) == b.samples.x.row(static_cast<Eigen::Index>(it->second)));
    EXPECT_EQ(a.samples.next_state[i], b.samples.next_state[it->second]);
    ++compared;
  }
  EXPECT_GT(compared, 1000u);
}

TEST(Panel, EmpiricalMatrixMatchesAveragedTruth) {
  SyntheticConfig c = small_config(3000, 23);
  c.missing_rate["dti"] = 0.0;
  const Panel p = generate_panel(c);
  const GroundTruth gt(p.truth, p.schema);
  std::array<Probs, kNumStates> avg{};
  std::array<double, kNumStates> n{};
  for (std::size_t i = 0; i < p.samples.size(); ++i) {
    std::vector<double> row(p.samples.x.row(static_cast<Eigen::Index>(i)).begin(),
                            p.samples.x.row(static_cast<Eigen::Index>(i)).end());
    const Probs q = gt.probs(row, p.samples.state[i]);
    const auto u = static_cast<std::size_t>(index_of(p.samples.state[i]));
    for (int k = 0; k < kNumStates; ++k) avg[u][static_cast<std::size_t>(k)] += q[static_cast<std::size_t>(k)];
    n[u] += 1.0;
  }
  const EmpiricalMatrix e = empirical_transition_matrix(p.samples.state, p.samples.next_state);
  for (int u = 0; u < 5; ++u) {
    const auto uu = static_cast<std::size_t>(u);
    if (n[uu] < 50) continue;
    for (int v = 0; v < kNumStates; ++v) {
      const double q = avg[uu][static_cast<std::size_t>(v)] / n[uu];
      const double se = std::sqrt(std::max(q * (1 - q), 1e-12) / n[uu]);
      EXPECT_LE(std::abs(e.matrix.at(u, v) - q), 3 * se + 1e-12) << state_name(state_from_index(u)) << "->"
                                                                   << state_name(state_from_index(v));
    }
  }
}

TEST(Panel, MissingDtiInjectedAtRate) {
  SyntheticConfig c = small_config(4000, 29);
  c.missing_rate["dti"] = 0.25;
  const Panel p = generate_panel(c);
  std::size_t missing = 0;
  for (const auto& l : p.loans) missing += !l.dti.has_value();
  EXPECT_NEAR(static_cast<double>(missing) / 4000.0, 0.25, 0.03);
  const auto dti = p.schema.require_column("dti"), ind = p.schema.require_column("dti_missing");
  for (std::size_t i = 0; i < p.samples.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (p.samples.x(r, static_cast<Eigen::Index>(ind)) == 1.0) {
      EXPECT_EQ(p.samples.x(r, static_cast<Eigen::Index>(dti)), 0.0);
    }
  }
}

TEST(Config, ValidationNamesKey) {
  nlohmann::json j = {{"num_loans", -1}};
  try {
    SyntheticConfig::from_json(j).validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "num_loans");
  }
  EXPECT_THROW(SyntheticConfig::from_json({{"bogus", 1}}), ConfigError);
  EXPECT_THROW(SyntheticConfig::from_json({{"macro", {{"rate_noise", -1.0}}}}).validate(), ConfigError);
  const SyntheticConfig c = small_config(10, 1);
  EXPECT_EQ(SyntheticConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(Amortization, ScheduleEndpoints) {
  EXPECT_DOUBLE_EQ(remaining_balance_fraction(6.0, 360, 0), 1.0);
  EXPECT_NEAR(remaining_balance_fraction(6.0, 360, 360), 0.0, 1e-12);
  EXPECT_NEAR(remaining_balance_fraction(0.0, 360, 180), 0.5, 1e-12);
  // 6% 30-year: after 12 payments about 98.77% remains.
  EXPECT_NEAR(remaining_balance_fraction(6.0, 360, 12), 0.98772, 1e-4);
}
