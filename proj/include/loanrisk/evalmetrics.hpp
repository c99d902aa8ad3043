#pragma once

// Out-of-sample evaluation: ROC/AUC, conditional transition AUC matrices,
// likelihood-ratio statistics and pool gap statistics.

#include <array>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "loanrisk/dataset.hpp"
#include "loanrisk/risk.hpp"

namespace loanrisk {

struct RocCurve {
  /// (false positive rate, true positive rate), from (0,0) to (1,1).
  std::vector<std::pair<double, double>> points;
  double auc = 0.5;
};

/// Rank-based AUC with ties counted 1/2 plus the ROC swept over distinct score values.
/// Throws DataError unless both classes are present.
RocCurve roc_curve(std::span<const double> scores, const std::vector<bool>& labels);
double auc(std::span<const double> scores, const std::vector<bool>& labels);
void write_roc_csv(std::ostream& out, const RocCurve& roc);

/// AUC matrix over (u, v); unavailable cells (absorbing u, or a single class) are empty.
struct AucMatrix {
  std::array<std::array<std::optional<double>, kNumStates>, kNumStates> cell{};
  std::array<std::array<std::size_t, kNumStates>, kNumStates> positives{};
  std::array<std::size_t, kNumStates> samples{};

  nlohmann::json to_json() const;
  void write_csv(std::ostream& out) const;
};

/// AUC of P(v | x) for predicting next_state == v among samples currently in u.
std::optional<double> transition_auc(const TransitionModel& model, const DesignSet& test, State u, State v);
AucMatrix transition_auc_matrix(const TransitionModel& model, const DesignSet& test);

struct LrTest {
  double statistic = 0.0;
  long long df = 0;
  std::optional<double> p_value;  // chi-square upper tail; only when df > 0
};

/// 2 n (loss_null - loss_alt). Negative when the alternative fits worse.
double lr_statistic(double loss_null, double loss_alt, double n_samples);
/// Adds the parameter-count difference as degrees of freedom and the Wilks p-value.
LrTest lr_test(double loss_null, double loss_alt, double n_samples, long long params_null, long long params_alt);

struct GapStats {
  double avg_absolute_gap = 0.0;
  double avg_standardized_gap = 0.0;
  /// Pools whose forecast had zero spread but missed the actual count.
  std::size_t infinite = 0;
};

/// Gap between forecast means and actual counts of `target` across pools; standardized
/// by the forecast standard deviation.
GapStats pool_gap_stats(std::span<const PoolDistribution> predicted, std::span<const double> actual, State target);
GapStats pool_gap_stats(std::span<const double> mean, std::span<const double> stddev, std::span<const double> actual);

}  // namespace loanrisk
