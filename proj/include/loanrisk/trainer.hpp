#pragma once

// Maximum-likelihood fitting of transition networks: momentum SGD with the
// LR0 / (1 + t / half_life) schedule, L2 and dropout, grid search and ensembles.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loanrisk/dataset.hpp"
#include "loanrisk/model_io.hpp"
#include "loanrisk/network.hpp"
#include "loanrisk/pipeline.hpp"

namespace loanrisk {

struct TrainConfig {
  /// Hidden widths and activation; input_dim is taken from the data.
  std::vector<std::size_t> hidden = {200, 140, 140, 140, 140};
  Activation activation = Activation::kRelu;
  /// Keep probability on every hidden layer, unless `hidden_keep` lists one per layer.
  double dropout_keep = 0.5;
  std::vector<double> hidden_keep;
  double input_keep = 1.0;

  double lr0 = 0.1;
  double half_life = 800.0;
  double momentum = 0.9;
  std::size_t batch_size = 4000;
  int epochs = 20;
  std::size_t samples_per_epoch = 50000;
  double l2_lambda = 1e-6;
  bool penalize_biases = false;
  std::uint64_t seed = 1;
  bool bootstrap = false;
  /// Return the parameters of the validation-best epoch instead of the last one.
  bool snapshot_best = true;
  /// Minibatch stream layout.
  std::uint32_t num_shards = 1;
  std::size_t buffer_rows = 0;
  /// Keep every streamed row id in TrainResult::accessed_rows.
  bool record_access = false;

  Architecture architecture(std::size_t input_dim) const;
  /// Throws ConfigError naming the first invalid key.
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// LR0 / (1 + t / half_life).
double learning_rate(double epoch, double lr0, double half_life);

struct LossReport {
  double loss = 0.0;
  std::size_t count = 0;
  /// Samples whose probability was floored at 1e-300.
  std::size_t underflows = 0;
};

/// Mean of -log p(next_state | x) over the samples. Throws DataError when empty.
LossReport nll_loss_report(const TransitionModel& model, const DesignSet& data);
double nll_loss(const TransitionModel& model, const DesignSet& data);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean minibatch data loss over the epoch
  double valid_loss = 0.0;  // NaN without a validation set
  double wall_time = 0.0;   // seconds since the run started
};

struct TrainResult {
  MlpParams params;
  std::vector<EpochLog> log;
  int best_epoch = -1;
  double best_valid_loss = 0.0;
  std::size_t steps = 0;
  std::vector<std::size_t> accessed_rows;
};

/// Training log CSV (epoch, lr, train_loss, valid_loss, wall_time). `deterministic`
/// writes 0 for wall_time so reruns are byte-identical.
void write_train_log_csv(std::ostream& out, const std::vector<EpochLog>& log, bool deterministic);

/// Momentum SGD on normalized rows. Throws DivergenceError on a non-finite loss or
/// parameters, naming the epoch and learning rate.
TrainResult sgd_train(const TrainConfig& config, const DesignSet& train, const DesignSet* valid = nullptr);
TrainResult sgd_train(const TrainConfig& config, MinibatchStream& stream, const DesignSet* valid = nullptr);

struct GridEntry {
  std::size_t index = 0;
  TrainConfig config;
  double valid_loss = 0.0;
  std::size_t num_parameters = 0;
  int best_epoch = -1;
  bool diverged = false;
  std::string message;
};

struct GridResult {
  std::size_t best_index = 0;
  TrainConfig best_config;
  TrainResult best;
  /// Ranked: valid loss, then fewer parameters, then grid index; diverged runs last.
  std::vector<GridEntry> leaderboard;
};

/// Trains one model per grid point and ranks them on the validation loss. Throws
/// DivergenceError listing every abort when all runs diverge.
GridResult grid_search(const std::vector<TrainConfig>& grid, const DesignSet& train, const DesignSet& valid);
void write_leaderboard_csv(std::ostream& out, const std::vector<GridEntry>& board);

/// Averages member probability vectors; logits are the mean of member logits.
class EnsembleModel final : public TransitionModel {
 public:
  explicit EnsembleModel(ModelBundle bundle);

  std::size_t input_dim() const override;
  void predict(MatrixRef x, RowMatrix& probs) const override;
  void logits(MatrixRef x, RowMatrix& z) const override;
  bool has_input_gradient() const override { return true; }
  void input_gradient(MatrixRef x, State v, RowMatrix& grad) const override;

  std::size_t size() const { return bundle_.members.size(); }
  const MlpParams& member(std::size_t i) const { return bundle_.members.at(i); }
  const ModelBundle& bundle() const { return bundle_; }

 private:
  ModelBundle bundle_;
};

struct EnsembleResult {
  std::vector<MlpParams> members;
  std::vector<std::uint64_t> seeds;
  std::vector<TrainResult> runs;
  /// Members that diverged, with their messages.
  std::vector<std::string> dropped;
};

/// Member m uses seed `seed` for m = 0 and derive_seed(seed, {m}) otherwise, plus a
/// bootstrap resample of `train` when config.bootstrap is set.
EnsembleResult train_ensemble(const TrainConfig& config, const DesignSet& train, const DesignSet* valid,
                              std::size_t members, std::uint64_t seed);

/// Same procedure as sgd_train on train + valid, with nothing held out.
TrainResult refit_on_train_plus_valid(const TrainConfig& config, const DesignSet& train, const DesignSet& valid);

}  // namespace loanrisk
