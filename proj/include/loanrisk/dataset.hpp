#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "loanrisk/core.hpp"

namespace loanrisk {

/// Samples as rows.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixRef = Eigen::Ref<const RowMatrix>;

/// Columnar batch of loan-month samples: one design row per (loan, period).
struct DesignSet {
  RowMatrix x;
  std::vector<State> state;
  std::vector<State> next_state;
  std::vector<int> period;
  std::vector<std::string> loan_id;
  /// Fingerprint of the normalization applied to `x`; 0 while unnormalized.
  std::uint64_t normalization = 0;

  std::size_t size() const { return state.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(x.cols()); }
  bool empty() const { return state.empty(); }

  LoanMonthSample sample(std::size_t i) const;
  DesignSet subset(std::span<const std::size_t> rows) const;
  /// Indices of rows whose state equals `u`.
  std::vector<std::size_t> rows_in_state(State u) const;

  static DesignSet concat(const DesignSet& a, const DesignSet& b);
  static DesignSet from_samples(std::span<const LoanMonthSample> samples);
};

/// Row-at-a-time construction of a DesignSet.
class DesignSetBuilder {
 public:
  explicit DesignSetBuilder(std::size_t dim) : dim_(dim) {}
  void add(std::span<const double> covariates, State s, State next, int period, std::string loan);
  void add(const LoanMonthSample& s) { add(s.covariates, s.state, s.next_state, s.period, s.loan_id); }
  std::size_t size() const { return state_.size(); }
  DesignSet build() &&;

 private:
  std::size_t dim_;
  std::vector<double> values_;
  std::vector<State> state_, next_;
  std::vector<int> period_;
  std::vector<std::string> loan_;
};

/// Anything that maps design rows to next-state probability vectors.
class TransitionModel {
 public:
  virtual ~TransitionModel() = default;

  virtual std::size_t input_dim() const = 0;

  /// probs(i, k) = P(next state k | row i). Resizes `probs` to n x 7.
  virtual void predict(MatrixRef x, RowMatrix& probs) const = 0;

  /// Pre-softmax scores. The default returns log-probabilities.
  virtual void logits(MatrixRef x, RowMatrix& z) const;

  virtual bool has_input_gradient() const { return false; }
  /// Row i = d P(v | x_i) / d x_i. Throws if unsupported.
  virtual void input_gradient(MatrixRef x, State v, RowMatrix& grad) const;

  Probs predict_one(std::span<const double> x) const;
};

}  // namespace loanrisk
