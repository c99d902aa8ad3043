#include "loanrisk/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>

#include "loanrisk/errors.hpp"
#include "loanrisk/hashing.hpp"
#include "loanrisk/json_util.hpp"
#include "loanrisk/kernels.hpp"

namespace loanrisk {
namespace {

std::size_t positive_size(const nlohmann::json& j, const char* key, std::size_t fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number_integer()) throw ConfigError(key, "must be an integer");
  const long long v = j[key].get<long long>();
  if (v < 1) throw ConfigError(key, "must be >= 1");
  return static_cast<std::size_t>(v);
}

bool uses_dropout(const Architecture& a) {
  if (a.input_keep < 1.0) return true;
  return std::any_of(a.keep_prob.begin(), a.keep_prob.end(), [](double k) { return k < 1.0; });
}

void add_penalty(Gradients& g, const MlpParams& p, double l2, bool biases) {
  if (l2 == 0.0) return;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    g.layers[l].w += 2.0 * l2 * p.layers[l].w;
    if (biases) g.layers[l].b += 2.0 * l2 * p.layers[l].b;
  }
}

}  // namespace

// ---------------------------------------------------------------- config

Architecture TrainConfig::architecture(std::size_t input_dim) const {
  Architecture a;
  a.input_dim = input_dim;
  a.hidden = hidden;
  a.activation = activation;
  a.keep_prob = hidden_keep.empty() ? std::vector<double>(hidden.size(), dropout_keep) : hidden_keep;
  a.input_keep = input_keep;
  return a;
}

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("lr0", "must be > 0");
  if (!(half_life > 0.0)) throw ConfigError("half_life", "must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum", "must lie in [0, 1)");
  if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (epochs < 1) throw ConfigError("epochs", "must be >= 1");
  if (samples_per_epoch < 1) throw ConfigError("samples_per_epoch", "must be >= 1");
  if (!(l2_lambda >= 0.0)) throw ConfigError("l2_lambda", "must be >= 0");
  if (!(dropout_keep > 0.0 && dropout_keep <= 1.0)) throw ConfigError("dropout_keep", "must lie in (0, 1]");
  if (!hidden_keep.empty() && hidden_keep.size() != hidden.size())
    throw ConfigError("hidden_keep", "needs one entry per hidden layer");
  if (num_shards < 1) throw ConfigError("num_shards", "must be >= 1");
  for (auto h : hidden)
    if (h < 1) throw ConfigError("hidden", "every hidden width must be >= 1");
  Architecture a = architecture(1);
  a.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"hidden", hidden},
          {"activation", std::string(to_string(activation))},
          {"dropout_keep", dropout_keep},
          {"hidden_keep", hidden_keep},
          {"input_keep", input_keep},
          {"lr0", lr0},
          {"half_life", half_life},
          {"momentum", momentum},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"samples_per_epoch", samples_per_epoch},
          {"l2_lambda", l2_lambda},
          {"penalize_biases", penalize_biases},
          {"seed", seed},
          {"bootstrap", bootstrap},
          {"snapshot_best", snapshot_best},
          {"num_shards", num_shards},
          {"buffer_rows", buffer_rows},
          {"record_access", record_access}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  json_check_keys(j, {"hidden", "activation", "dropout_keep", "hidden_keep", "input_keep", "lr0", "half_life",
                      "momentum", "batch_size", "epochs", "samples_per_epoch", "l2_lambda", "penalize_biases", "seed",
                      "bootstrap", "snapshot_best", "num_shards", "buffer_rows", "record_access"});
  TrainConfig c;
  if (j.contains("hidden")) {
    if (!j["hidden"].is_array()) throw ConfigError("hidden", "must be an array of widths");
    c.hidden.clear();
    for (const auto& h : j["hidden"]) {
      if (!h.is_number_integer() || h.get<long long>() < 1) throw ConfigError("hidden", "widths must be integers >= 1");
      c.hidden.push_back(h.get<std::size_t>());
    }
  }
  if (j.contains("activation")) c.activation = parse_activation(json_get<std::string>(j, "activation", "relu"));
  c.dropout_keep = json_get(j, "dropout_keep", c.dropout_keep);
  c.hidden_keep = json_get(j, "hidden_keep", c.hidden_keep);
  c.input_keep = json_get(j, "input_keep", c.input_keep);
  c.lr0 = json_get(j, "lr0", c.lr0);
  c.half_life = json_get(j, "half_life", c.half_life);
  c.momentum = json_get(j, "momentum", c.momentum);
  c.batch_size = positive_size(j, "batch_size", c.batch_size);
  c.epochs = static_cast<int>(positive_size(j, "epochs", static_cast<std::size_t>(c.epochs)));
  c.samples_per_epoch = positive_size(j, "samples_per_epoch", c.samples_per_epoch);
  c.l2_lambda = json_get(j, "l2_lambda", c.l2_lambda);
  c.penalize_biases = json_get(j, "penalize_biases", c.penalize_biases);
  c.seed = json_get(j, "seed", c.seed);
  c.bootstrap = json_get(j, "bootstrap", c.bootstrap);
  c.snapshot_best = json_get(j, "snapshot_best", c.snapshot_best);
  c.num_shards = static_cast<std::uint32_t>(positive_size(j, "num_shards", c.num_shards));
  if (j.contains("buffer_rows")) {
    if (!j["buffer_rows"].is_number_integer() || j["buffer_rows"].get<long long>() < 0)
      throw ConfigError("buffer_rows", "must be an integer >= 0");
    c.buffer_rows = j["buffer_rows"].get<std::size_t>();
  }
  c.record_access = json_get(j, "record_access", c.record_access);
  c.validate();
  return c;
}

double learning_rate(double epoch, double lr0, double half_life) { return lr0 / (1.0 + epoch / half_life); }

// ---------------------------------------------------------------- loss

LossReport nll_loss_report(const TransitionModel& model, const DesignSet& data) {
  if (data.empty()) throw DataError("nll_loss: no samples");
  RowMatrix probs;
  model.predict(data.x, probs);
  const kernels::LossSum s = kernels::nll_sum(probs, data.next_state);
  return {s.sum / static_cast<double>(data.size()), data.size(), s.underflows};
}

double nll_loss(const TransitionModel& model, const DesignSet& data) { return nll_loss_report(model, data).loss; }

void write_train_log_csv(std::ostream& out, const std::vector<EpochLog>& log, bool deterministic) {
  out << "epoch,lr,train_loss,valid_loss,wall_time\n";
  for (const auto& e : log) {
    out << e.epoch << ',' << format_double(e.lr) << ',' << format_double(e.train_loss) << ','
        << (std::isnan(e.valid_loss) ? std::string() : format_double(e.valid_loss)) << ','
        << (deterministic ? std::string("0") : format_double(e.wall_time)) << '\n';
  }
}

// ---------------------------------------------------------------- sgd

TrainResult sgd_train(const TrainConfig& config, const DesignSet& train, const DesignSet* valid) {
  MinibatchStream stream(train, config.batch_size, config.num_shards, derive_seed(config.seed, {0x54a2d}),
                         config.buffer_rows);
  return sgd_train(config, stream, valid);
}

TrainResult sgd_train(const TrainConfig& config, MinibatchStream& stream, const DesignSet* valid) {
  config.validate();
  if (stream.total_rows() == 0) throw DataError("sgd_train: empty training stream");
  const auto t0 = std::chrono::steady_clock::now();
  const Architecture arch = config.architecture(stream.dim());
  arch.validate();
  const bool dropout = uses_dropout(arch);
  const bool have_valid = valid && !valid->empty();
  if (have_valid && valid->dim() != stream.dim()) throw DataError("sgd_train: validation width differs from training");

  TrainResult result;
  MlpParams params = init_params(arch, derive_seed(config.seed, {0x1417}));
  Gradients velocity = Gradients::zeros_like(params);
  stream.enable_access_log(config.record_access);

  std::uint64_t pass = 0;
  stream.start_epoch(derive_seed(config.seed, {0xe90c, pass}));
  const std::size_t steps_per_epoch = (config.samples_per_epoch + config.batch_size - 1) / config.batch_size;
  Minibatch batch;
  double best = std::numeric_limits<double>::infinity();
  std::optional<MlpParams> best_params;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = learning_rate(epoch, config.lr0, config.half_life);
    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    for (std::size_t k = 0; k < steps_per_epoch; ++k) {
      if (!stream.next(batch)) {
        stream.start_epoch(derive_seed(config.seed, {0xe90c, ++pass}));
        stream.next(batch);
      }
      std::optional<std::uint64_t> dseed;
      if (dropout) dseed = derive_seed(config.seed, {0xd509, result.steps});
      kernels::BatchGradient g = kernels::batch_gradient(params, batch.x, batch.next_state, dseed);
      if (!std::isfinite(g.loss_sum))
        throw DivergenceError(epoch, lr,
                              "training diverged at epoch " + std::to_string(epoch) + " (learning rate " +
                                  format_double(lr) + "): non-finite minibatch loss");
      g.grad *= 1.0 / static_cast<double>(g.count);
      add_penalty(g.grad, params, config.l2_lambda, config.penalize_biases);
      for (std::size_t l = 0; l < params.layers.size(); ++l) {
        velocity.layers[l].w = config.momentum * velocity.layers[l].w - lr * g.grad.layers[l].w;
        velocity.layers[l].b = config.momentum * velocity.layers[l].b - lr * g.grad.layers[l].b;
        params.layers[l].w += velocity.layers[l].w;
        params.layers[l].b += velocity.layers[l].b;
      }
      loss_sum += g.loss_sum;
      loss_n += g.count;
      ++result.steps;
    }
    if (!params.all_finite())
      throw DivergenceError(epoch, lr,
                            "training diverged at epoch " + std::to_string(epoch) + " (learning rate " +
                                format_double(lr) + "): non-finite parameters");
    EpochLog e;
    e.epoch = epoch;
    e.lr = lr;
    e.train_loss = loss_sum / static_cast<double>(loss_n);
    e.valid_loss = std::numeric_limits<double>::quiet_NaN();
    if (have_valid) {
      e.valid_loss = nll_loss(MlpModel(params), *valid);
      if (!std::isfinite(e.valid_loss))
        throw DivergenceError(epoch, lr,
                              "training diverged at epoch " + std::to_string(epoch) + " (learning rate " +
                                  format_double(lr) + "): non-finite validation loss");
      if (e.valid_loss < best) {
        best = e.valid_loss;
        result.best_epoch = epoch;
        if (config.snapshot_best) best_params = params;
      }
    }
    e.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(e);
  }
  if (!have_valid || !config.snapshot_best) {
    result.best_epoch = config.epochs - 1;
    best = have_valid ? result.log.back().valid_loss : std::numeric_limits<double>::quiet_NaN();
    result.params = std::move(params);
  } else {
    result.params = std::move(*best_params);
  }
  result.best_valid_loss = best;
  if (config.record_access) result.accessed_rows = stream.access_log();
  return result;
}

// ---------------------------------------------------------------- grid search

GridResult grid_search(const std::vector<TrainConfig>& grid, const DesignSet& train, const DesignSet& valid) {
  if (grid.empty()) throw ConfigError("grid", "must contain at least one configuration");
  if (valid.empty()) throw DataError("grid_search: validation split is empty");
  GridResult out;
  std::vector<std::optional<TrainResult>> runs(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    GridEntry e;
    e.index = i;
    e.config = grid[i];
    e.num_parameters = init_params(grid[i].architecture(train.dim()), 0).num_parameters();
    try {
      TrainResult r = sgd_train(grid[i], train, &valid);
      e.valid_loss = r.best_valid_loss;
      e.best_epoch = r.best_epoch;
      runs[i] = std::move(r);
    } catch (const DivergenceError& err) {
      e.diverged = true;
      e.valid_loss = std::numeric_limits<double>::infinity();
      e.message = err.what();
    }
    out.leaderboard.push_back(std::move(e));
  }
  std::stable_sort(out.leaderboard.begin(), out.leaderboard.end(), [](const GridEntry& a, const GridEntry& b) {
    if (a.diverged != b.diverged) return !a.diverged;
    if (a.valid_loss != b.valid_loss) return a.valid_loss < b.valid_loss;
    if (a.num_parameters != b.num_parameters) return a.num_parameters < b.num_parameters;
    return a.index < b.index;
  });
  if (out.leaderboard.front().diverged) {
    std::string msg = "every grid configuration diverged:";
    for (const auto& e : out.leaderboard) msg += "\n  [" + std::to_string(e.index) + "] " + e.message;
    throw DivergenceError(-1, std::numeric_limits<double>::quiet_NaN(), msg);
  }
  out.best_index = out.leaderboard.front().index;
  out.best_config = grid[out.best_index];
  out.best = std::move(*runs[out.best_index]);
  return out;
}

void write_leaderboard_csv(std::ostream& out, const std::vector<GridEntry>& board) {
  out << "rank,index,valid_loss,num_parameters,best_epoch,hidden,activation,lr0,l2_lambda,dropout_keep,status\n";
  for (std::size_t r = 0; r < board.size(); ++r) {
    const auto& e = board[r];
    std::string hidden;
    for (std::size_t k = 0; k < e.config.hidden.size(); ++k)
      hidden += (k ? "x" : "") + std::to_string(e.config.hidden[k]);
    out << r + 1 << ',' << e.index << ',' << (e.diverged ? std::string() : format_double(e.valid_loss)) << ','
        << e.num_parameters << ',' << e.best_epoch << ',' << (hidden.empty() ? "0" : hidden) << ','
        << to_string(e.config.activation) << ',' << format_double(e.config.lr0) << ','
        << format_double(e.config.l2_lambda) << ',' << format_double(e.config.dropout_keep) << ','
        << (e.diverged ? "diverged" : "ok") << '\n';
  }
}

// ---------------------------------------------------------------- ensembles

EnsembleModel::EnsembleModel(ModelBundle bundle) : bundle_(std::move(bundle)) {
  if (bundle_.members.empty()) throw DataError("ensemble needs at least one member");
  for (const auto& m : bundle_.members)
    if (m.arch.input_dim != bundle_.members.front().arch.input_dim)
      throw DataError("ensemble members disagree on the input width");
}

std::size_t EnsembleModel::input_dim() const { return bundle_.members.front().arch.input_dim; }

void EnsembleModel::predict(MatrixRef x, RowMatrix& probs) const {
  RowMatrix p;
  probs.setZero(x.rows(), kNumStates);
  for (const auto& m : bundle_.members) {
    kernels::batch_probs(m, x, p);
    probs += p;
  }
  probs /= static_cast<double>(bundle_.members.size());
}

void EnsembleModel::logits(MatrixRef x, RowMatrix& z) const {
  RowMatrix zi;
  z.setZero(x.rows(), kNumStates);
  for (const auto& m : bundle_.members) {
    kernels::batch_logits(m, x, zi);
    z += zi;
  }
  z /= static_cast<double>(bundle_.members.size());
}

void EnsembleModel::input_gradient(MatrixRef x, State v, RowMatrix& grad) const {
  RowMatrix gi;
  grad.setZero(x.rows(), x.cols());
  for (const auto& m : bundle_.members) {
    kernels::batch_input_gradient(m, x, v, gi);
    grad += gi;
  }
  grad /= static_cast<double>(bundle_.members.size());
}

EnsembleResult train_ensemble(const TrainConfig& config, const DesignSet& train, const DesignSet* valid,
                              std::size_t members, std::uint64_t seed) {
  if (members < 1) throw ConfigError("ensemble_size", "must be >= 1");
  EnsembleResult out;
  for (std::size_t m = 0; m < members; ++m) {
    TrainConfig c = config;
    c.seed = m == 0 ? seed : derive_seed(seed, {m});
    try {
      TrainResult r;
      if (config.bootstrap) {
        std::mt19937_64 rng(derive_seed(c.seed, {0xb007}));
        std::vector<std::size_t> rows(train.size());
        for (auto& r_i : rows) r_i = static_cast<std::size_t>(bounded(rng(), train.size()));
        const DesignSet sample = train.subset(rows);
        r = sgd_train(c, sample, valid);
      } else {
        r = sgd_train(c, train, valid);
      }
      out.members.push_back(r.params);
      out.seeds.push_back(c.seed);
      out.runs.push_back(std::move(r));
    } catch (const DivergenceError& e) {
      out.dropped.push_back("member " + std::to_string(m) + ": " + e.what());
    }
  }
  if (out.members.empty()) {
    std::string msg = "every ensemble member diverged:";
    for (const auto& d : out.dropped) msg += "\n  " + d;
    throw DivergenceError(-1, std::numeric_limits<double>::quiet_NaN(), msg);
  }
  return out;
}

TrainResult refit_on_train_plus_valid(const TrainConfig& config, const DesignSet& train, const DesignSet& valid) {
  if (valid.empty()) return sgd_train(config, train, nullptr);
  const DesignSet both = DesignSet::concat(train, valid);
  return sgd_train(config, both, nullptr);
}

}  // namespace loanrisk
