#pragma once

// Mortgage state space, transition legality and transition matrices.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace loanrisk {

inline constexpr int kNumStates = 7;

/// Loan status. The numeric order is fixed and shared by every artifact.
enum class State : std::uint8_t {
  kCurrent = 0,
  kDD30 = 1,
  kDD60 = 2,
  kDD90Plus = 3,
  kForeclosure = 4,
  kREO = 5,
  kPaidOff = 6,
};

using Probs = std::array<double, kNumStates>;

constexpr int index_of(State s) { return static_cast<int>(s); }

/// Throws DataError when `i` is outside 0..6.
State state_from_index(int i);

std::string_view state_name(State s);
std::optional<State> parse_state(std::string_view name);

/// All states in canonical order.
const std::array<State, kNumStates>& all_states();

constexpr bool is_absorbing(State s) { return s == State::kREO || s == State::kPaidOff; }

/// Delinquency deepens at most one notch per month; absorbing states only self-loop.
/// Anything else (cures, payoff, deed-in-lieu to REO, foreclosure reversal) is legal.
constexpr bool is_legal_transition(State from, State to) {
  if (is_absorbing(from)) return from == to;
  switch (from) {
    case State::kCurrent:
      return to != State::kDD60 && to != State::kDD90Plus;
    case State::kDD30:
      return to != State::kDD90Plus;
    default:
      return true;
  }
}

/// Number of legal successor states of `from`.
int legal_successor_count(State from);

/// Row-stochastic 7x7 matrix; row = conditioning state, column = next state.
class TransitionMatrix {
 public:
  /// Identity matrix.
  TransitionMatrix();

  static TransitionMatrix zeros();

  double operator()(State from, State to) const { return m_[index_of(from) * kNumStates + index_of(to)]; }
  double& operator()(State from, State to) { return m_[index_of(from) * kNumStates + index_of(to)]; }
  double at(int row, int col) const { return m_[row * kNumStates + col]; }
  double& at(int row, int col) { return m_[row * kNumStates + col]; }

  Probs row(State from) const;
  void set_row(State from, const Probs& p);

  TransitionMatrix operator*(const TransitionMatrix& rhs) const;

  /// Largest |row sum - 1| over all rows.
  double max_row_sum_error() const;
  bool is_row_stochastic(double tol) const;

  friend bool operator==(const TransitionMatrix&, const TransitionMatrix&) = default;

 private:
  std::array<double, kNumStates * kNumStates> m_{};
};

/// Months since year 0: year * 12 + (month - 1). Periods in every artifact use this index.
constexpr int month_index(int year, int month) { return year * 12 + (month - 1); }

struct LoanMonthSample {
  std::string loan_id;
  int period = 0;
  std::vector<double> covariates;
  State state = State::kCurrent;
  State next_state = State::kCurrent;
};

/// Integer transition counts; partitions merge by addition.
class TransitionCounts {
 public:
  void add(State from, State to, std::uint64_t n = 1) { c_[index_of(from) * kNumStates + index_of(to)] += n; }
  void merge(const TransitionCounts& other);
  std::uint64_t count(State from, State to) const { return c_[index_of(from) * kNumStates + index_of(to)]; }
  std::uint64_t row_total(State from) const;
  std::uint64_t total() const;

  friend bool operator==(const TransitionCounts&, const TransitionCounts&) = default;

 private:
  std::array<std::uint64_t, kNumStates * kNumStates> c_{};
};

struct EmpiricalMatrix {
  TransitionMatrix matrix;
  TransitionCounts counts;
  /// Non-absorbing states with no observations; their rows hold the unit self-loop.
  std::vector<State> flagged_rows;
};

EmpiricalMatrix matrix_from_counts(const TransitionCounts& counts);
EmpiricalMatrix empirical_transition_matrix(std::span<const LoanMonthSample> samples);
EmpiricalMatrix empirical_transition_matrix(std::span<const State> from, std::span<const State> to);

/// CSV with a state-labeled header row and one labeled row per state, 10 significant digits.
void write_matrix_csv(std::ostream& out, const TransitionMatrix& m);
TransitionMatrix read_matrix_csv(std::istream& in);

/// Display helper: entries scaled to percent (internal values stay probabilities).
std::string format_matrix_percent(const TransitionMatrix& m, int decimals = 2);

}  // namespace loanrisk
