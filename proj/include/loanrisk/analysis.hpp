#pragma once

// Variable importance and nonlinearity analysis over fitted transition models:
// average absolute gradients, finite-difference interaction estimators,
// leave-one-out losses and partial-dependence grids.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loanrisk/dataset.hpp"
#include "loanrisk/pipeline.hpp"
#include "loanrisk/schema.hpp"

namespace loanrisk {

/// Samples whose current state is `u`, optionally subsampled without replacement.
struct ConditioningSet {
  State u = State::kCurrent;
  std::vector<std::size_t> rows;
  std::size_t population = 0;  // |M_u| before subsampling

  static ConditioningSet make(const DesignSet& data, State u, std::size_t cap = 100000, std::uint64_t seed = 0);
  /// Throws DataError when empty.
  RowMatrix gather(const DesignSet& data) const;
};

/// What the finite differences act on: P(v | x) or the pre-softmax score of v.
enum class Probe { kProbability, kLogit };
std::string_view to_string(Probe p);
Probe parse_probe(std::string_view name);

enum class ThirdOrderScheme { kEightPoint, kFivePoint };

/// Batched scalar function: out(i) = f(x row i).
using ScalarBatchFn = std::function<void(const RowMatrix& x, Eigen::VectorXd& out)>;

ScalarBatchFn make_probe(const TransitionModel& model, State v, Probe probe);

/// Per-sample input gradients averaged in absolute value: out[j] = mean_i |d h(v, x_i) / d x_j|.
std::vector<double> sensitivity_profile(const TransitionModel& model, const RowMatrix& x, State v);
double sensitivity(const TransitionModel& model, const DesignSet& data, const ConditioningSet& cond, State v,
                   std::size_t j);

/// mean_i |f(x + di e_i + dj e_j) - f(x + di e_i) - f(x + dj e_j) + f(x)|. Exactly symmetric in (i, j).
double interaction2(const ScalarBatchFn& f, const RowMatrix& x, std::size_t i, std::size_t j, double di, double dj);
/// Eight-point mixed third difference by default (invariant under permutations of i, j, k);
/// the five-point variant is f111 - f110 - f101 - f011 + 2 f000.
double interaction3(const ScalarBatchFn& f, const RowMatrix& x, std::size_t i, std::size_t j, std::size_t k,
                    double di, double dj, double dk, ThirdOrderScheme scheme = ThirdOrderScheme::kEightPoint);

double interaction2(const TransitionModel& model, const DesignSet& data, const ConditioningSet& cond, State v,
                    std::size_t i, std::size_t j, double di, double dj, Probe probe = Probe::kProbability);
double interaction3(const TransitionModel& model, const DesignSet& data, const ConditioningSet& cond, State v,
                    std::size_t i, std::size_t j, std::size_t k, double di, double dj, double dk,
                    Probe probe = Probe::kProbability, ThirdOrderScheme scheme = ThirdOrderScheme::kEightPoint);

struct RankedItem {
  std::vector<std::size_t> features;
  double value = 0.0;
};

struct SensitivityReport {
  std::vector<RankedItem> items;  // descending by value, stable in input order
  bool degenerate = false;        // every value is zero
  nlohmann::json metadata = nlohmann::json::object();
};

/// Sorts descending with a stable tie-break by input order; keeps the first `top_k`.
SensitivityReport rank_report(std::vector<RankedItem> items, std::optional<std::size_t> top_k = std::nullopt);
/// CSV with `# key: value` metadata rows, then rank,features,value.
void write_report_csv(std::ostream& out, const SensitivityReport& report, const FeatureSchema& schema);

/// Columns eligible for sensitivity and interaction scans (all but the state one-hot).
std::vector<std::size_t> analysis_columns(const FeatureSchema& schema);

struct ScanOptions {
  State v = State::kPaidOff;
  Probe probe = Probe::kProbability;
  ThirdOrderScheme scheme = ThirdOrderScheme::kEightPoint;
  /// Shift per column (normalized units).
  double delta = 0.1;
  /// Sensitivity prefilter size for the triple scan.
  std::size_t top_m = 20;
};

/// Full per-feature sensitivity ranking over `columns`.
SensitivityReport sensitivity_scan(const TransitionModel& model, const RowMatrix& x,
                                   const std::vector<std::size_t>& columns, const ScanOptions& opt);
/// All pairs of `columns`, each shifted point evaluated once and shared across pairs.
SensitivityReport pair_scan(const TransitionModel& model, const RowMatrix& x, const std::vector<std::size_t>& columns,
                            const ScanOptions& opt);
/// All triples of the top-m columns by sensitivity.
SensitivityReport triple_scan(const TransitionModel& model, const RowMatrix& x,
                              const std::vector<std::size_t>& columns, const ScanOptions& opt);

struct LooEntry {
  std::string name;
  std::vector<std::size_t> columns;
  double loss = 0.0;
  double increase = 0.0;  // loss - baseline
};

struct LooReport {
  double baseline = 0.0;
  std::vector<LooEntry> entries;  // in schema field order
};

/// Loss with the given columns overwritten by 0 (the training mean after z-scoring).
double leave_one_out_loss(const TransitionModel& model, const DesignSet& test, const std::vector<std::size_t>& columns);
/// One entry per schema field (all columns of a field dropped together), state field excluded.
LooReport leave_one_out_report(const TransitionModel& model, const DesignSet& test, const FeatureSchema& schema);
void write_loo_csv(std::ostream& out, const LooReport& report);

struct PdpAxis {
  std::size_t column = 0;
  std::vector<double> grid;  // raw units
};

struct PdpTable {
  std::vector<std::string> axis_names;
  /// One row per grid point: raw coordinates, then 7 probabilities.
  std::vector<std::vector<double>> coords;
  std::vector<Probs> probs;
  std::vector<bool> out_of_range;
};

/// Column means of normalized rows, with the state block set to `u`.
std::vector<double> average_row(const DesignSet& data, const FeatureSchema& schema, const NormalizationStats& stats,
                                 State u);
/// Evaluates h(., base with the varied columns overwritten) over the Cartesian grid of
/// 1-3 axes. `base` and the model are in normalized space; grids are raw values.
PdpTable partial_dependence(const TransitionModel& model, const std::vector<double>& base,
                            const std::vector<PdpAxis>& axes, const FeatureSchema& schema,
                            const NormalizationStats& stats);
void write_pdp_csv(std::ostream& out, const PdpTable& table);

}  // namespace loanrisk
