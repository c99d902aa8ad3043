#include "loanrisk/dataset.hpp"

#include <cmath>

#include "loanrisk/errors.hpp"

namespace loanrisk {

LoanMonthSample DesignSet::sample(std::size_t i) const {
  LoanMonthSample s;
  s.loan_id = loan_id[i];
  s.period = period[i];
  s.covariates.assign(x.row(i).data(), x.row(i).data() + x.cols());
  s.state = state[i];
  s.next_state = next_state[i];
  return s;
}

DesignSet DesignSet::subset(std::span<const std::size_t> rows) const {
  DesignSet out;
  out.normalization = normalization;
  out.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  out.state.reserve(rows.size());
  out.next_state.reserve(rows.size());
  out.period.reserve(rows.size());
  out.loan_id.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t i = rows[r];
    out.x.row(static_cast<Eigen::Index>(r)) = x.row(static_cast<Eigen::Index>(i));
    out.state.push_back(state[i]);
    out.next_state.push_back(next_state[i]);
    out.period.push_back(period[i]);
    out.loan_id.push_back(loan_id[i]);
  }
  return out;
}

std::vector<std::size_t> DesignSet::rows_in_state(State u) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < state.size(); ++i)
    if (state[i] == u) out.push_back(i);
  return out;
}

DesignSet DesignSet::concat(const DesignSet& a, const DesignSet& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.dim() != b.dim()) throw DataError("concat: dimension mismatch");
  if (a.normalization != b.normalization) throw DataError("concat: sets carry different normalizations");
  DesignSet out;
  out.normalization = a.normalization;
  out.x.resize(a.x.rows() + b.x.rows(), a.x.cols());
  out.x.topRows(a.x.rows()) = a.x;
  out.x.bottomRows(b.x.rows()) = b.x;
  auto join = [](auto& dst, const auto& p, const auto& q) {
    dst.reserve(p.size() + q.size());
    dst.insert(dst.end(), p.begin(), p.end());
    dst.insert(dst.end(), q.begin(), q.end());
  };
  join(out.state, a.state, b.state);
  join(out.next_state, a.next_state, b.next_state);
  join(out.period, a.period, b.period);
  join(out.loan_id, a.loan_id, b.loan_id);
  return out;
}

DesignSet DesignSet::from_samples(std::span<const LoanMonthSample> samples) {
  DesignSetBuilder builder(samples.empty() ? 0 : samples.front().covariates.size());
  for (const auto& s : samples) builder.add(s);
  return std::move(builder).build();
}

void DesignSetBuilder::add(std::span<const double> covariates, State s, State next, int period, std::string loan) {
  if (covariates.size() != dim_)
    throw DataError("design row has " + std::to_string(covariates.size()) + " columns, expected " +
                    std::to_string(dim_));
  values_.insert(values_.end(), covariates.begin(), covariates.end());
  state_.push_back(s);
  next_.push_back(next);
  period_.push_back(period);
  loan_.push_back(std::move(loan));
}

DesignSet DesignSetBuilder::build() && {
  DesignSet out;
  out.x = Eigen::Map<const RowMatrix>(values_.data(), static_cast<Eigen::Index>(state_.size()),
                                      static_cast<Eigen::Index>(dim_));
  out.state = std::move(state_);
  out.next_state = std::move(next_);
  out.period = std::move(period_);
  out.loan_id = std::move(loan_);
  return out;
}

void TransitionModel::logits(MatrixRef x, RowMatrix& z) const {
  predict(x, z);
  z = z.array().max(1e-300).log().matrix();
}

void TransitionModel::input_gradient(MatrixRef, State, RowMatrix&) const {
  throw DataError("this model does not provide input gradients");
}

Probs TransitionModel::predict_one(std::span<const double> x) const {
  RowMatrix row = Eigen::Map<const RowMatrix>(x.data(), 1, static_cast<Eigen::Index>(x.size()));
  RowMatrix p;
  predict(row, p);
  Probs out;
  for (int k = 0; k < kNumStates; ++k) out[k] = p(0, k);
  return out;
}

}  // namespace loanrisk
