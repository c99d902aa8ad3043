#pragma once

// Synthetic loan panels drawn from a known transition function, so that every
// estimator in the library has ground truth to be checked against.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loanrisk/core.hpp"
#include "loanrisk/dataset.hpp"
#include "loanrisk/schema.hpp"

namespace loanrisk {

struct MacroConfig {
  /// National mortgage rate: r_t = c + phi_1 r_{t-1} + ... + phi_4 r_{t-4} + eps_t,
  /// stored as [c, phi_1, phi_2, phi_3, phi_4].
  std::array<double, 5> rate_ar = {0.6687, 1.3514, -0.5131, 0.2410, -0.0838};
  double rate_noise = 0.0;
  /// r_{-4} .. r_{-1}, oldest first.
  std::array<double, 4> initial_rates = {4.5, 4.5, 4.5, 4.5};
  /// Reject AR polynomials whose companion matrix has spectral radius >= 1.
  bool require_stationary = false;

  /// Regional unemployment: u_t = mean + phi (u_{t-1} - mean) + sigma eps_t.
  double unemployment_mean = 7.0;
  double unemployment_phi = 0.95;
  double unemployment_sigma = 0.15;
  double unemployment_initial = 7.0;
  /// Regional house price index: log hpi_t = log hpi_{t-1} + drift + vol eps_t, hpi_0 = 1.
  double hpi_drift = 0.002;
  double hpi_vol = 0.01;

  nlohmann::json to_json() const;
  static MacroConfig from_json(const nlohmann::json& j);
};

struct MacroPath {
  int months = 0;
  std::vector<double> national_rate;              // [months]
  std::vector<std::vector<double>> unemployment;  // [region][months]
  std::vector<std::vector<double>> hpi;           // [region][months]
};

/// Largest modulus among the roots of the AR lag polynomial (companion matrix eigenvalues).
double ar_spectral_radius(const std::array<double, 5>& rate_ar);

/// Deterministic in (config, seed). Throws ConfigError for explosive AR coefficients when
/// `require_stationary` is set.
MacroPath simulate_macro(const MacroConfig& config, int months, int num_regions, std::uint64_t seed);

/// Continues the national rate AR recursion for `months` steps from the given history
/// (oldest first, at least four values).
std::vector<double> simulate_rate_path(const MacroConfig& config, std::span<const double> history, int months,
                                       std::uint64_t seed);

/// Term in the ground-truth logit of `next_state`: coef * prod_f s_f where s_f is the
/// standardized feature value. One feature = linear, two = pairwise, three = triple.
struct ProductTerm {
  std::vector<std::string> features;
  State next_state = State::kPaidOff;
  double coef = 0.0;
  /// Restricts the term to one source state; applies to every source when empty.
  std::optional<State> from_state;
};

/// coef * max(0, s_f - knot) in the logit of `next_state`.
struct ThresholdTerm {
  std::string feature;
  double knot = 0.0;
  State next_state = State::kPaidOff;
  double coef = 0.0;
  std::optional<State> from_state;
};

struct GroundTruthModel {
  /// Base logits [from][to]; illegal entries are ignored.
  std::array<std::array<double, kNumStates>, kNumStates> intercept{};
  /// Standardization applied before the terms, by feature name (absent = center 0, scale 1).
  std::map<std::string, std::pair<double, double>> standardize;
  std::vector<ProductTerm> terms;
  std::vector<ThresholdTerm> thresholds;

  nlohmann::json to_json() const;
  static GroundTruthModel from_json(const nlohmann::json& j);
};

/// Ground truth resolved against a schema for fast evaluation.
class GroundTruth {
 public:
  GroundTruth(GroundTruthModel model, const FeatureSchema& schema);

  /// Softmax over the legal successors of `state`; illegal successors get exactly 0 and
  /// absorbing states return their unit vector. Throws DataError on dimension mismatch.
  Probs probs(std::span<const double> covariates, State state) const;
  /// Logit vector (illegal entries -inf).
  Probs logits(std::span<const double> covariates, State state) const;

  const GroundTruthModel& model() const { return model_; }
  std::size_t dim() const { return dim_; }

 private:
  struct Resolved {
    std::vector<std::size_t> cols;
    int next;
    double coef;
    int from;  // -1 = any source
  };
  struct ResolvedThreshold {
    std::size_t col;
    double knot;
    int next;
    double coef;
    int from;
  };
  GroundTruthModel model_;
  std::size_t dim_;
  std::vector<double> center_, scale_;
  std::vector<Resolved> terms_;
  std::vector<ResolvedThreshold> thresholds_;
};

/// Free-function form of GroundTruth::probs.
Probs ground_truth_probs(const GroundTruth& model, std::span<const double> covariates, State state);

/// TransitionModel adapter over unnormalized covariates; the current state is read from
/// the schema's state columns.
class GroundTruthTransitionModel final : public TransitionModel {
 public:
  GroundTruthTransitionModel(const GroundTruth& truth, const FeatureSchema& schema)
      : truth_(&truth), schema_(&schema) {}
  std::size_t input_dim() const override { return truth_->dim(); }
  void predict(MatrixRef x, RowMatrix& probs) const override;
  void logits(MatrixRef x, RowMatrix& z) const override;

 private:
  const GroundTruth* truth_;
  const FeatureSchema* schema_;
};

struct StaticDistribution {
  double mean = 0.0;
  double sd = 1.0;
  double lo = -1e300;
  double hi = 1e300;
};

struct SyntheticConfig {
  int num_loans = 1000;
  int num_regions = 4;
  int horizon = 36;
  /// Loans originate uniformly in months [0, origination_window) of the panel.
  int origination_window = 24;
  /// Calendar month index of panel month 0.
  int start_period = month_index(2009, 1);
  std::uint64_t seed = 1;
  int term_months = 360;

  MacroConfig macro;

  StaticDistribution fico{718.0, 50.0, 300.0, 850.0};
  StaticDistribution ltv{75.0, 12.0, 20.0, 125.0};
  StaticDistribution dti{35.0, 10.0, 1.0, 70.0};
  StaticDistribution balance{200000.0, 60000.0, 30000.0, 600000.0};
  StaticDistribution reserves{6.0, 3.0, 0.0, 24.0};
  /// Origination rate = national rate at origination + spread.
  StaticDistribution rate_spread{0.5, 0.4, -0.5, 3.0};

  /// Incentive above which a non-prepaying month counts toward burnout.
  double burnout_incentive = 0.5;
  double initial_default_rate = 0.002;
  double initial_prepay_rate = 0.03;

  /// Missing-value injection rate per optional field (currently "dti").
  std::map<std::string, double> missing_rate = {{"dti", 0.05}};

  /// Ground truth; default_ground_truth() when absent.
  std::optional<GroundTruthModel> ground_truth;

  /// Throws ConfigError naming the first invalid key.
  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticConfig from_json(const nlohmann::json& j);
};

/// Scheduled balance of a level-payment fixed-rate loan as a fraction of the original.
double remaining_balance_fraction(double annual_rate_pct, int term, int age);

/// Layout produced by generate_panel and ingested by the pipeline.
FeatureSchema default_loan_schema(int num_regions);

/// Nonlinear ground truth with a dominant linear driver of Current->DD30 (fico), a
/// pairwise term (fico x ltv) and a triple term (orig_balance x dti x reserves_months)
/// in the PaidOff logit, and a threshold effect of the prepayment incentive.
GroundTruthModel default_ground_truth();

struct StaticLoan {
  std::string loan_id;
  int region = 0;
  int vintage = 0;  // calendar month index
  double fico = 0, ltv = 0, orig_rate = 0, orig_balance = 0, reserves_months = 0;
  std::optional<double> dti;
};

/// One row of the monthly performance table: the status at `period` and the dynamic
/// covariates observed at that month.
struct PerformanceRecord {
  std::string loan_id;
  int period = 0;
  State status = State::kCurrent;
  std::vector<double> dynamic;  // ordered as Panel::dynamic_fields
};

struct Panel {
  FeatureSchema schema;
  std::vector<StaticLoan> loans;
  std::vector<std::string> dynamic_fields;
  std::vector<PerformanceRecord> performance;
  /// Encoded samples (unnormalized), ordered by loan then period.
  DesignSet samples;
  MacroPath macro;
  GroundTruthModel truth;
};

Panel generate_panel(const SyntheticConfig& config);

/// CSV emission in the pipeline's input formats.
void write_static_csv(std::ostream& out, const Panel& panel);
void write_performance_csv(std::ostream& out, const Panel& panel);
void write_macro_csv(std::ostream& out, const MacroPath& path, int start_period);

}  // namespace loanrisk
