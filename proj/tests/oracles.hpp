#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "loanrisk/core.hpp"
#include "loanrisk/risk.hpp"

namespace loanrisk::testutil {

/// Sums path probabilities over every state sequence of length t, with month k using
/// the one-step matrix at the covariates advanced k times.
inline TransitionMatrix brute_force_paths(const TransitionModel& model, const FeatureSchema& schema,
                                          std::vector<double> covariates, const CovariateEvolver& evolver, int t) {
  std::vector<TransitionMatrix> month;
  for (int k = 0; k < t; ++k) {
    month.push_back(one_step_matrix(model, schema, covariates));
    evolver.advance(covariates);
  }
  TransitionMatrix out = TransitionMatrix::zeros();
  std::function<void(State, State, int, double)> walk = [&](State from, State at, int k, double prob) {
    if (k == t) {
      out(from, at) += prob;
      return;
    }
    for (State next : all_states()) {
      const double p = month[static_cast<std::size_t>(k)](at, next);
      if (p != 0.0) walk(from, next, k + 1, prob * p);
    }
  };
  for (State u : all_states()) walk(u, u, 0, 1.0);
  return out;
}

/// Fraction of (positive, negative) pairs ordered correctly, ties counted 1/2.
inline double brute_force_auc(std::span<const double> s, const std::vector<bool>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

}  // namespace loanrisk::testutil
