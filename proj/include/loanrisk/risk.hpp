#pragma once

// Multi-period transition matrices, pool-level count distributions (Monte Carlo and
// closed form), portfolio selection and loss accounting.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loanrisk/dataset.hpp"
#include "loanrisk/schema.hpp"
#include "loanrisk/synth.hpp"

namespace loanrisk {

/// A loan as seen at the start of a forecast: raw (unnormalized) covariates and state.
struct LoanSnapshot {
  std::string loan_id;
  std::vector<double> covariates;
  State state = State::kCurrent;
  double notional = 0.0;
};

/// Deterministic month-to-month covariate updates. Default-constructed: everything frozen.
class CovariateEvolver {
 public:
  CovariateEvolver() = default;

  /// age += 1 and balance_frac re-amortized from orig_rate over `term_months`, for whichever
  /// of those columns the schema has.
  static CovariateEvolver standard(const FeatureSchema& schema, int term_months = 360);

  /// Binds national_rate (and incentive = orig_rate - national_rate) to a simulated rate path.
  /// Throws DataError if the schema lacks national_rate.
  void bind_rate(const FeatureSchema& schema);
  bool rate_bound() const { return rate_col_.has_value(); }

  /// Moves a raw row forward one month.
  void advance(std::span<double> row) const;
  /// Overwrites the rate-bound columns for a new national rate.
  void apply_rate(std::span<double> row, double national_rate) const;
  double incentive(std::span<const double> row) const;

  bool frozen() const { return !age_col_ && !balance_col_; }
  /// Columns this evolver may write.
  std::vector<std::size_t> touched_columns() const;

 private:
  std::optional<std::size_t> age_col_, balance_col_, orig_rate_col_;
  std::optional<std::size_t> rate_col_, incentive_col_;
  int term_ = 360;
};

/// Zeroes illegal entries of non-absorbing rows and renormalizes them.
void clamp_to_legal(TransitionMatrix& m);

/// Row u = model probabilities with the state one-hot set to u; absorbing rows are unit vectors.
/// `model` consumes raw rows (wrap a normalized-space model in NormalizingModel).
TransitionMatrix one_step_matrix(const TransitionModel& model, const FeatureSchema& schema,
                                 std::span<const double> covariates, bool clamp = false);
/// One matrix per row of `covariates`, evaluated in a single batch.
std::vector<TransitionMatrix> one_step_matrices(const TransitionModel& model, const FeatureSchema& schema,
                                                const RowMatrix& covariates, bool clamp = false);

/// M(0) M(1) ... M(t-1), with covariates advanced by `evolver` between months. t >= 1.
TransitionMatrix multi_period_frozen(const TransitionModel& model, const FeatureSchema& schema,
                                     std::span<const double> covariates, const CovariateEvolver& evolver, int t,
                                     bool clamp = false);
/// Batched form: one product per row.
std::vector<TransitionMatrix> multi_period_frozen(const TransitionModel& model, const FeatureSchema& schema,
                                                  const RowMatrix& covariates, const CovariateEvolver& evolver, int t,
                                                  bool clamp = false);

struct PoolDistribution {
  enum class Kind { kMonteCarlo, kPoisson, kNormal };
  Kind kind = Kind::kMonteCarlo;
  std::size_t pool_size = 0;
  /// Monte Carlo: per-path state counts at the horizon.
  std::vector<std::array<std::uint32_t, kNumStates>> paths;
  Probs mean{};
  Probs variance{};

  /// P(count of state s <= k). Monte Carlo: empirical; Poisson: exact Poisson CDF;
  /// normal: Gaussian CDF at k + 0.5.
  double cdf(State s, double k) const;
  double stddev(State s) const;

  nlohmann::json to_json() const;  // closed-form parameters, or MC summary
  void write_paths_csv(std::ostream& out) const;
};

std::string_view to_string(PoolDistribution::Kind k);

struct McConfig {
  int horizon = 12;
  std::size_t num_paths = 1000;
  std::uint64_t seed = 1;
  /// Zero illegal transitions before sampling.
  bool clamp = true;
  /// Update the times_*_12m counters and burnout along each path.
  bool update_counters = true;
  /// Simulated national rate shared by all loans within a path; frozen when absent.
  std::optional<MacroConfig> macro;
  /// Rate history for the AR recursion (oldest first, at least four values).
  std::vector<double> rate_history;
  /// Incentive above which a non-prepaying month adds to burnout.
  double burnout_incentive = 0.5;
};

/// Simulates every loan month by month on each path and records state counts at the horizon.
/// Deterministic in (model, pool, config) for any thread count.
PoolDistribution simulate_pool_mc(const TransitionModel& model, const FeatureSchema& schema,
                                  const std::vector<LoanSnapshot>& pool, const CovariateEvolver& evolver,
                                  const McConfig& config);

/// Closed-form approximations from per-loan horizon distributions.
PoolDistribution pool_poisson(std::span<const Probs> per_loan);
PoolDistribution pool_normal(std::span<const Probs> per_loan);
/// Single-state forms: count of a target state with per-loan probabilities p.
PoolDistribution pool_poisson(std::span<const double> p, State target);
PoolDistribution pool_normal(std::span<const double> p, State target);

/// Exact distribution of a sum of independent Bernoulli(p_n), by dynamic programming.
std::vector<double> poisson_binomial_pmf(std::span<const double> p);

/// Ranks loans by `score` descending with a stable tie-break by loan id; first N indices.
std::vector<std::size_t> top_n_by_score(std::span<const double> score, std::span<const std::string> ids,
                                        std::size_t n);

/// The N loans with the highest probability of being Current at `horizon` months.
std::vector<std::size_t> select_portfolio(const TransitionModel& model, const FeatureSchema& schema,
                                          const std::vector<LoanSnapshot>& pool, std::size_t n, int horizon,
                                          const CovariateEvolver& evolver);
/// P(Current at horizon) from each loan's current state.
std::vector<double> current_probability(const TransitionModel& model, const FeatureSchema& schema,
                                        const std::vector<LoanSnapshot>& pool, int horizon,
                                        const CovariateEvolver& evolver);

struct LoanOutcome {
  State state = State::kCurrent;
  /// Months delinquent; when absent, DD30 -> 1, DD60 -> 2, DD90Plus -> 3.
  std::optional<int> months_delinquent;
  double notional = 0.0;
};

/// Loss fraction of notional: PaidOff 5%, Foreclosure and REO 40%, m months delinquent m/360.
double loss_weight(State s, std::optional<int> months_delinquent = std::nullopt);
double portfolio_loss(std::span<const LoanOutcome> outcomes);

struct RankedPools {
  std::vector<std::vector<std::size_t>> pools;
  bool last_short = false;
};

/// Sorts by key descending (stable by loan id) and chunks into pools of `pool_size`.
RankedPools make_ranked_pools(std::span<const double> key, std::span<const std::string> ids, std::size_t pool_size);

struct ComparisonRow {
  std::size_t n = 0;
  std::size_t non_current_a = 0;
  std::size_t non_current_b = 0;
};

/// For each N, the realized number of non-Current loans among the top N under each score.
std::vector<ComparisonRow> portfolio_comparison_curve(std::span<const double> score_a,
                                                      std::span<const double> score_b,
                                                      std::span<const std::string> ids,
                                                      std::span<const State> realized,
                                                      std::span<const std::size_t> n_grid);
void write_comparison_csv(std::ostream& out, const std::vector<ComparisonRow>& rows);

}  // namespace loanrisk
