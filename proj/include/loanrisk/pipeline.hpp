#pragma once

// Raw loan tables to normalized design matrices: encoding, temporal splits,
// normalization, hash sharding and minibatch streaming.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loanrisk/csv.hpp"
#include "loanrisk/dataset.hpp"
#include "loanrisk/schema.hpp"

namespace loanrisk {

// ---------------------------------------------------------------- encoding

struct DropReport {
  /// Candidate rows: performance rows whose status is a known non-absorbing state.
  std::size_t raw = 0;
  std::size_t kept = 0;
  std::size_t no_successor = 0;
  std::size_t missing_required = 0;
  std::size_t illegal_transition = 0;
  /// At or after a row whose `exclude` flag is set.
  std::size_t excluded = 0;
  /// Loan id absent from the static table.
  std::size_t unknown_loan = 0;
  /// Rows whose status cell is not a state name (not counted in `raw`).
  std::size_t unknown_status = 0;
  /// Rows after the loan reached an absorbing state (not counted in `raw`).
  std::size_t after_absorption = 0;
  /// Unknown categorical levels, "field=level" -> occurrences.
  std::map<std::string, std::size_t> unknown_levels;

  std::size_t dropped() const {
    return no_successor + missing_required + illegal_transition + excluded + unknown_loan;
  }
  nlohmann::json to_json() const;
};

struct EncodeResult {
  DesignSet data;  // unnormalized, ordered by static-table loan order then period
  DropReport report;
};

/// Joins the static table (one row per loan_id) and the monthly performance table
/// (loan_id, period, status, dynamic fields, optional exclude flag) and encodes one
/// design row per (loan, month) with a legal observed successor in the next month.
EncodeResult encode(const FeatureSchema& schema, const CsvTable& static_table, const CsvTable& performance);

// ---------------------------------------------------------------- splits

struct SplitConfig {
  /// Half-open: train [.., train_end), validation [train_end, valid_end), test [valid_end, test_end).
  int train_end = month_index(2012, 5);
  int valid_end = month_index(2012, 11);
  std::optional<int> test_end = month_index(2014, 6);

  nlohmann::json to_json() const;
  static SplitConfig from_json(const nlohmann::json& j);
};

struct Splits {
  DesignSet train, valid, test;
  /// Samples at or after test_end.
  std::size_t out_of_range = 0;
  std::vector<std::string> warnings;
};

/// Throws ConfigError unless train_end < valid_end (< test_end). Empty splits are warnings.
Splits temporal_split(const DesignSet& samples, const SplitConfig& config);

/// Loan-level holdout: bucket = shard_assign(loan_id, buckets, seed); buckets below
/// `train_buckets` train, the next `valid_buckets` validate, the rest test.
Splits hash_split(const DesignSet& samples, std::uint64_t seed, std::uint32_t buckets = 10,
                  std::uint32_t train_buckets = 6, std::uint32_t valid_buckets = 2);

/// Month index from an integer cell or "YYYY-MM". Throws DataError.
int parse_period(const std::string& cell, std::string_view what = "period");
/// "YYYY-MM" for a month index.
std::string format_period(int period);

// ---------------------------------------------------------------- normalization

struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> scale;
  /// Columns left untouched (schema `normalize = false`).
  std::vector<bool> exempt;
  /// Columns whose standard deviation fell below 1e-12 and were given scale 1.
  std::vector<bool> guarded;
  /// Observed raw ranges on the training rows.
  std::vector<double> min, max;
  std::size_t count = 0;

  std::size_t dim() const { return mean.size(); }
  /// Nonzero digest of the statistics; stamped on normalized DesignSets.
  std::uint64_t fingerprint() const;

  double normalize(std::size_t col, double raw) const { return exempt[col] ? raw : (raw - mean[col]) / scale[col]; }
  double denormalize(std::size_t col, double z) const { return exempt[col] ? z : z * scale[col] + mean[col]; }

  nlohmann::json to_json() const;
  static NormalizationStats from_json(const nlohmann::json& j);

  friend bool operator==(const NormalizationStats&, const NormalizationStats&) = default;
};

/// Mean and population standard deviation per column of the unnormalized training rows.
NormalizationStats fit_normalization(const FeatureSchema& schema, const DesignSet& train);

/// Normalizes in place. Throws DataError if `data` is already normalized.
void apply_normalization(const NormalizationStats& stats, DesignSet& data);
DesignSet normalized(const NormalizationStats& stats, const DesignSet& data);
/// Writes the normalized image of the one-hot encoding of `s` into a normalized row.
void set_state_normalized(const FeatureSchema& schema, const NormalizationStats& stats, std::span<double> row, State s);
void normalize_rows(const NormalizationStats& stats, RowMatrix& x);
void denormalize_rows(const NormalizationStats& stats, RowMatrix& x);

/// Wraps a model trained on normalized inputs so it accepts raw rows.
class NormalizingModel final : public TransitionModel {
 public:
  NormalizingModel(const TransitionModel& inner, const NormalizationStats& stats) : inner_(&inner), stats_(&stats) {}
  std::size_t input_dim() const override { return inner_->input_dim(); }
  void predict(MatrixRef x, RowMatrix& probs) const override;
  void logits(MatrixRef x, RowMatrix& z) const override;
  bool has_input_gradient() const override { return inner_->has_input_gradient(); }
  /// Gradient with respect to the raw coordinates (chain rule through the z-score).
  void input_gradient(MatrixRef x, State v, RowMatrix& grad) const override;

 private:
  const TransitionModel* inner_;
  const NormalizationStats* stats_;
};

// ---------------------------------------------------------------- sharding

/// FNV-1a-64 over the 8 little-endian seed bytes followed by the loan id bytes,
/// SplitMix64 finalizer, modulo num_shards. num_shards must be >= 1.
std::uint32_t shard_assign(std::string_view loan_id, std::uint32_t num_shards, std::uint64_t seed);

struct ShardLayout {
  std::uint32_t num_shards = 1;
  std::uint64_t seed = 0;
  std::vector<std::filesystem::path> files;  // binary row files; sidecar is `<file>.json`
  std::vector<std::size_t> rows;             // rows per shard

  nlohmann::json to_json() const;
  static ShardLayout from_json(const nlohmann::json& j, const std::filesystem::path& base);
};

inline constexpr int kShardFormatVersion = 1;

/// Writes `data` as `shard-XXXX.bin` files plus JSON sidecars and `layout.json` under `dir`.
ShardLayout write_shards(const DesignSet& data, const FeatureSchema& schema, const NormalizationStats* stats,
                         const std::filesystem::path& dir, std::uint32_t num_shards, std::uint64_t seed);

/// Reads one shard back (covariates widened from float32).
DesignSet read_shard(const std::filesystem::path& file);
ShardLayout read_layout(const std::filesystem::path& dir);

// ---------------------------------------------------------------- streaming

struct Minibatch {
  RowMatrix x;
  std::vector<State> next_state;
  /// Row ids in the stream's global numbering (shard-major for file sources).
  std::vector<std::size_t> rows;
  std::size_t size() const { return next_state.size(); }
};

/// Epoch iterator over samples grouped into shards. Shard order is shuffled per epoch,
/// rows are shuffled within read buffers, and partial batches carry over shard
/// boundaries; only the final batch of an epoch may be short.
class MinibatchStream {
 public:
  /// In-memory source; shards formed by shard_assign on the loan ids.
  MinibatchStream(const DesignSet& data, std::size_t batch_size, std::uint32_t num_shards = 1,
                  std::uint64_t shard_seed = 0, std::size_t buffer_rows = 0);
  /// File source; at most two shards are resident at once.
  MinibatchStream(ShardLayout layout, std::size_t batch_size, std::size_t buffer_rows = 0);

  /// Begins a new pass. Throws DataError when the source is empty.
  void start_epoch(std::uint64_t epoch_seed);
  /// Fills `out` with the next batch; false at the end of the epoch.
  bool next(Minibatch& out);

  std::size_t total_rows() const { return total_; }
  std::size_t dim() const { return dim_; }
  std::size_t batch_size() const { return batch_size_; }

  /// Records every emitted row id when enabled.
  void enable_access_log(bool on) { log_on_ = on; }
  const std::vector<std::size_t>& access_log() const { return log_; }

 private:
  struct Resident {
    std::uint32_t shard = UINT32_MAX;
    DesignSet data;
  };
  const DesignSet& shard_data(std::uint32_t s);

  std::size_t batch_size_;
  std::size_t buffer_rows_;
  std::size_t total_ = 0;
  std::size_t dim_ = 0;
  const DesignSet* memory_ = nullptr;
  std::vector<std::vector<std::size_t>> shard_rows_;  // memory source: rows of each shard
  std::optional<ShardLayout> layout_;
  std::vector<std::size_t> shard_offset_;  // file source: global id of each shard's row 0
  Resident resident_[2];
  int resident_next_ = 0;

  std::vector<std::pair<std::uint32_t, std::size_t>> order_;  // (shard, local row)
  std::size_t cursor_ = 0;
  bool log_on_ = false;
  std::vector<std::size_t> log_;
};

}  // namespace loanrisk
