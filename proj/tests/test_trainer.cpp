#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "loanrisk/errors.hpp"
#include "loanrisk/hashing.hpp"
#include "loanrisk/kernels.hpp"
#include "loanrisk/trainer.hpp"
#include "test_util.hpp"

using namespace loanrisk;
using loanrisk::testutil::ConstantModel;

namespace {

/// Three well separated Gaussian clusters labelled Current, DD30 and PaidOff.
DesignSet clusters(std::size_t n, std::uint64_t seed, double spread = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, spread);
  const double cx[3] = {3.0, -1.5, -1.5}, cy[3] = {0.0, 2.6, -2.6};
  const State label[3] = {State::kCurrent, State::kDD30, State::kPaidOff};
  DesignSetBuilder b(2);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % 3;
    const double row[2] = {cx[c] + noise(rng), cy[c] + noise(rng)};
    b.add(row, State::kCurrent, label[c], 0, "L" + std::to_string(i));
  }
  return std::move(b).build();
}

TrainConfig small_config() {
  TrainConfig c;
  c.hidden = {8};
  c.dropout_keep = 1.0;
  c.lr0 = 0.1;
  c.half_life = 100;
  c.momentum = 0.9;
  c.batch_size = 50;
  c.epochs = 5;
  c.samples_per_epoch = 300;
  c.l2_lambda = 0.0;
  c.seed = 4;
  return c;
}

bool same_params(const MlpParams& a, const MlpParams& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t l = 0; l < a.layers.size(); ++l)
    if (a.layers[l].w != b.layers[l].w || a.layers[l].b != b.layers[l].b) return false;
  return true;
}

}  // namespace

TEST(Schedule, HalvesAtHalfLife) {
  EXPECT_DOUBLE_EQ(learning_rate(0, 0.1, 800), 0.1);
  EXPECT_DOUBLE_EQ(learning_rate(800, 0.1, 800), 0.05);
  EXPECT_DOUBLE_EQ(learning_rate(2400, 0.1, 800), 0.025);
}

TEST(Loss, UniformPerfectAndHandComputed) {
  const DesignSet d = testutil::random_design(40, 3, 1);
  EXPECT_NEAR(nll_loss(ConstantModel(3, testutil::uniform_probs()), d), std::log(7.0), 1e-14);

  DesignSet all_paid = d;
  std::fill(all_paid.next_state.begin(), all_paid.next_state.end(), State::kPaidOff);
  Probs one{};
  one[6] = 1.0;
  EXPECT_EQ(nll_loss(ConstantModel(3, one), all_paid), 0.0);

  const Probs p = {0.5, 0.2, 0.1, 0.1, 0.05, 0.03, 0.02};
  DesignSet three = d.subset(std::vector<std::size_t>{0, 1, 2});
  three.next_state = {State::kCurrent, State::kDD30, State::kREO};
  EXPECT_NEAR(nll_loss(ConstantModel(3, p), three), -(std::log(0.5) + std::log(0.2) + std::log(0.03)) / 3.0, 1e-15);

  const LossReport r = nll_loss_report(ConstantModel(3, Probs{}), three);
  EXPECT_EQ(r.underflows, 3u);
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_THROW(nll_loss(ConstantModel(3, p), DesignSet{}), DataError);
}

TEST(Config, ValidationNamesKey) {
  TrainConfig c;
  c.batch_size = 0;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "batch_size");
  }
  EXPECT_THROW(TrainConfig::from_json({{"learning_rate", 0.1}}), ConfigError);
  EXPECT_THROW(TrainConfig::from_json({{"momentum", 1.0}}), ConfigError);
  const TrainConfig d = small_config();
  const TrainConfig r = TrainConfig::from_json(d.to_json());
  EXPECT_EQ(r.to_json(), d.to_json());
  EXPECT_EQ(d.architecture(5).input_dim, 5u);
}

TEST(Sgd, OneStepMatchesHandUpdate) {
  const DesignSet d = clusters(60, 2);
  TrainConfig c = small_config();
  c.momentum = 0.0;
  c.epochs = 1;
  c.batch_size = 60;
  c.samples_per_epoch = 60;
  c.l2_lambda = 0.01;
  c.snapshot_best = false;
  const MlpParams a = sgd_train(c, d).params;
  c.lr0 = 0.05;
  const MlpParams b = sgd_train(c, d).params;
  // The update is linear in the step size, so the start point is 2 b - a.
  MlpParams start = a;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    start.layers[l].w = 2 * b.layers[l].w - a.layers[l].w;
    start.layers[l].b = 2 * b.layers[l].b - a.layers[l].b;
  }
  const auto g = kernels::batch_gradient_serial(start, d.x, d.next_state);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const Eigen::MatrixXd gw = g.grad.layers[l].w / 60.0 + 2 * 0.01 * start.layers[l].w;
    const Eigen::VectorXd gb = g.grad.layers[l].b / 60.0;
    EXPECT_LE((a.layers[l].w - (start.layers[l].w - 0.1 * gw)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((a.layers[l].b - (start.layers[l].b - 0.1 * gb)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Sgd, BitReproducible) {
  const DesignSet d = clusters(300, 3), v = clusters(90, 4);
  TrainConfig c = small_config();
  c.dropout_keep = 0.8;
  const TrainResult a = sgd_train(c, d, &v), b = sgd_train(c, d, &v);
  EXPECT_TRUE(same_params(a.params, b.params));
  std::ostringstream la, lb;
  write_train_log_csv(la, a.log, true);
  write_train_log_csv(lb, b.log, true);
  EXPECT_EQ(la.str(), lb.str());
  EXPECT_EQ(a.best_epoch, b.best_epoch);
  c.seed = 5;
  EXPECT_FALSE(same_params(sgd_train(c, d, &v).params, a.params));
}

TEST(Sgd, LogFormat) {
  const DesignSet d = clusters(90, 5);
  const TrainResult r = sgd_train(small_config(), d);
  ASSERT_EQ(r.log.size(), 5u);
  EXPECT_TRUE(std::isnan(r.log[0].valid_loss));
  EXPECT_EQ(r.best_epoch, 4);
  EXPECT_DOUBLE_EQ(r.log[2].lr, learning_rate(2, 0.1, 100));
  std::ostringstream out;
  write_train_log_csv(out, r.log, true);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epoch,lr,train_loss,valid_loss,wall_time");
  while (std::getline(in, line)) EXPECT_EQ(line.substr(line.rfind(',') + 1), "0");
  EXPECT_EQ(r.steps, 5u * 6u);
}

TEST(Sgd, SeparableDataIsLearned) {
  const DesignSet d = clusters(500, 6);
  TrainConfig c = small_config();
  c.hidden = {16};
  c.epochs = 200;
  c.samples_per_epoch = 500;
  c.half_life = 1000;
  const TrainResult r = sgd_train(c, d);
  EXPECT_LT(nll_loss(MlpModel(r.params), d), 0.05);
}

TEST(Sgd, SnapshotKeepsBestValidationEpoch) {
  const DesignSet d = clusters(300, 7), v = clusters(90, 8, 1.5);
  TrainConfig c = small_config();
  c.epochs = 8;
  const TrainResult r = sgd_train(c, d, &v);
  double best = INFINITY;
  int arg = -1;
  for (const auto& e : r.log)
    if (e.valid_loss < best) best = e.valid_loss, arg = e.epoch;
  EXPECT_EQ(r.best_epoch, arg);
  EXPECT_EQ(r.best_valid_loss, best);
  EXPECT_NEAR(nll_loss(MlpModel(r.params), v), best, 1e-12);
}

TEST(Sgd, DivergenceNamesEpochAndRate) {
  const DesignSet d = clusters(90, 9);
  TrainConfig c = small_config();
  c.lr0 = 1e300;
  try {
    sgd_train(c, d);
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.epoch(), 0);
    EXPECT_EQ(e.learning_rate(), learning_rate(e.epoch(), 1e300, 100));
  }
}

TEST(Sgd, PenaltyShrinksWeights) {
  const DesignSet d = clusters(300, 10);
  TrainConfig c = small_config();
  c.epochs = 20;
  double prev = INFINITY;
  for (double lambda : {0.0, 1e-3, 1e-2, 1e-1}) {
    c.l2_lambda = lambda;
    const double norm = sgd_train(c, d).params.weight_sq_norm();
    EXPECT_LT(norm, prev) << lambda;
    prev = norm;
  }
}

TEST(Grid, SingletonStrictWinnerAndTies) {
  const DesignSet d = clusters(300, 11), v = clusters(90, 12);
  const TrainConfig good = small_config();
  TrainConfig bad = good;
  bad.lr0 = 1e-7;
  const GridResult one = grid_search({good}, d, v);
  EXPECT_EQ(one.best_index, 0u);
  EXPECT_TRUE(same_params(one.best.params, sgd_train(good, d, &v).params));

  const GridResult two = grid_search({bad, good}, d, v);
  EXPECT_EQ(two.best_index, 1u);
  EXPECT_LT(two.leaderboard[0].valid_loss, two.leaderboard[1].valid_loss);

  const GridResult tie = grid_search({good, good}, d, v);
  EXPECT_EQ(tie.best_index, 0u);
  EXPECT_EQ(tie.leaderboard[0].valid_loss, tie.leaderboard[1].valid_loss);

  TrainConfig boom = good;
  boom.lr0 = 1e300;
  const GridResult mixed = grid_search({boom, good}, d, v);
  EXPECT_EQ(mixed.best_index, 1u);
  EXPECT_TRUE(mixed.leaderboard.back().diverged);
  EXPECT_THROW(grid_search({boom, boom}, d, v), DivergenceError);
  EXPECT_THROW(grid_search({}, d, v), ConfigError);
  std::ostringstream out;
  write_leaderboard_csv(out, mixed.leaderboard);
  EXPECT_NE(out.str().find("diverged"), std::string::npos);
}

TEST(Ensemble, SingleMemberEqualsSgd) {
  const DesignSet d = clusters(300, 15), v = clusters(90, 16);
  const TrainConfig c = small_config();
  const EnsembleResult e = train_ensemble(c, d, &v, 1, c.seed);
  ASSERT_EQ(e.members.size(), 1u);
  EXPECT_TRUE(same_params(e.members[0], sgd_train(c, d, &v).params));
}

TEST(Ensemble, AveragesProbabilitiesAndSatisfiesJensen) {
  const DesignSet d = clusters(300, 17), v = clusters(150, 18, 1.2);
  const TrainConfig c = small_config();
  const EnsembleResult e = train_ensemble(c, d, &v, 4, 9);
  ASSERT_EQ(e.members.size(), 4u);
  EXPECT_EQ(e.seeds[0], 9u);
  EXPECT_EQ(e.seeds[2], derive_seed(9, {2}));
  ModelBundle bundle;
  bundle.members = e.members;
  bundle.seeds = e.seeds;
  const EnsembleModel model(bundle);
  RowMatrix avg, one;
  model.predict(v.x, avg);
  RowMatrix manual = RowMatrix::Zero(v.x.rows(), kNumStates);
  double mean_member_loss = 0.0;
  for (const auto& m : e.members) {
    MlpModel(m).predict(v.x, one);
    manual += one / 4.0;
    mean_member_loss += nll_loss(MlpModel(m), v) / 4.0;
  }
  EXPECT_LE((avg - manual).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE(nll_loss(model, v), mean_member_loss + 1e-15);

  RowMatrix grad;
  model.input_gradient(v.x, State::kDD30, grad);
  RowMatrix expect = RowMatrix::Zero(v.x.rows(), 2), gi;
  for (const auto& m : e.members) {
    MlpModel(m).input_gradient(v.x, State::kDD30, gi);
    expect += gi / 4.0;
  }
  EXPECT_LE((grad - expect).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Refit, ReadsOnlyTrainAndValid) {
  const DesignSet d = clusters(120, 19), v = clusters(60, 20);
  TrainConfig c = small_config();
  c.record_access = true;
  c.epochs = 10;
  const TrainResult r = refit_on_train_plus_valid(c, d, v);
  const std::set<std::size_t> seen(r.accessed_rows.begin(), r.accessed_rows.end());
  EXPECT_EQ(seen.size(), d.size() + v.size());
  EXPECT_EQ(*seen.rbegin(), d.size() + v.size() - 1);
  EXPECT_TRUE(std::isnan(r.log.back().valid_loss));
  EXPECT_TRUE(same_params(r.params, sgd_train(c, DesignSet::concat(d, v)).params));
}
