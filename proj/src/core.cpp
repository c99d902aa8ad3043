#include "loanrisk/core.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

#include "loanrisk/errors.hpp"

namespace loanrisk {
namespace {

constexpr std::array<std::string_view, kNumStates> kStateNames = {
    "Current", "DD30", "DD60", "DD90Plus", "Foreclosure", "REO", "PaidOff"};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

State state_from_index(int i) {
  if (i < 0 || i >= kNumStates) throw DataError("state index out of range: " + std::to_string(i));
  return static_cast<State>(i);
}

std::string_view state_name(State s) { return kStateNames[index_of(s)]; }

std::optional<State> parse_state(std::string_view name) {
  for (int i = 0; i < kNumStates; ++i)
    if (kStateNames[i] == name) return static_cast<State>(i);
  return std::nullopt;
}

const std::array<State, kNumStates>& all_states() {
  static const std::array<State, kNumStates> states = {State::kCurrent, State::kDD30,  State::kDD60,
                                                       State::kDD90Plus, State::kForeclosure,
                                                       State::kREO,      State::kPaidOff};
  return states;
}

int legal_successor_count(State from) {
  int n = 0;
  for (State to : all_states()) n += is_legal_transition(from, to) ? 1 : 0;
  return n;
}

TransitionMatrix::TransitionMatrix() {
  for (int i = 0; i < kNumStates; ++i) at(i, i) = 1.0;
}

TransitionMatrix TransitionMatrix::zeros() {
  TransitionMatrix m;
  m.m_.fill(0.0);
  return m;
}

Probs TransitionMatrix::row(State from) const {
  Probs p;
  for (int j = 0; j < kNumStates; ++j) p[j] = at(index_of(from), j);
  return p;
}

void TransitionMatrix::set_row(State from, const Probs& p) {
  for (int j = 0; j < kNumStates; ++j) at(index_of(from), j) = p[j];
}

TransitionMatrix TransitionMatrix::operator*(const TransitionMatrix& rhs) const {
  TransitionMatrix out = zeros();
  for (int i = 0; i < kNumStates; ++i)
    for (int k = 0; k < kNumStates; ++k) {
      const double a = at(i, k);
      if (a == 0.0) continue;
      for (int j = 0; j < kNumStates; ++j) out.at(i, j) += a * rhs.at(k, j);
    }
  return out;
}

double TransitionMatrix::max_row_sum_error() const {
  double worst = 0.0;
  for (int i = 0; i < kNumStates; ++i) {
    double s = 0.0;
    for (int j = 0; j < kNumStates; ++j) s += at(i, j);
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

bool TransitionMatrix::is_row_stochastic(double tol) const {
  for (double v : m_)
    if (!(v >= -tol && v <= 1.0 + tol)) return false;
  return max_row_sum_error() <= tol;
}

void TransitionCounts::merge(const TransitionCounts& other) {
  for (std::size_t i = 0; i < c_.size(); ++i) c_[i] += other.c_[i];
}

std::uint64_t TransitionCounts::row_total(State from) const {
  std::uint64_t n = 0;
  for (int j = 0; j < kNumStates; ++j) n += c_[index_of(from) * kNumStates + j];
  return n;
}

std::uint64_t TransitionCounts::total() const {
  std::uint64_t n = 0;
  for (auto c : c_) n += c;
  return n;
}

EmpiricalMatrix matrix_from_counts(const TransitionCounts& counts) {
  EmpiricalMatrix out;
  out.counts = counts;
  for (State from : all_states()) {
    if (is_absorbing(from)) continue;  // identity row already
    const std::uint64_t total = counts.row_total(from);
    if (total == 0) {
      out.flagged_rows.push_back(from);
      continue;
    }
    for (State to : all_states())
      out.matrix(from, to) = static_cast<double>(counts.count(from, to)) / static_cast<double>(total);
  }
  return out;
}

EmpiricalMatrix empirical_transition_matrix(std::span<const LoanMonthSample> samples) {
  TransitionCounts counts;
  for (const auto& s : samples) counts.add(s.state, s.next_state);
  return matrix_from_counts(counts);
}

EmpiricalMatrix empirical_transition_matrix(std::span<const State> from, std::span<const State> to) {
  if (from.size() != to.size()) throw DataError("state sequences differ in length");
  TransitionCounts counts;
  for (std::size_t i = 0; i < from.size(); ++i) counts.add(from[i], to[i]);
  return matrix_from_counts(counts);
}

void write_matrix_csv(std::ostream& out, const TransitionMatrix& m) {
  out << "from";
  for (State s : all_states()) out << ',' << state_name(s);
  out << '\n';
  const auto old_flags = out.flags();
  const auto old_precision = out.precision();
  out << std::setprecision(10);
  for (State from : all_states()) {
    out << state_name(from);
    for (State to : all_states()) out << ',' << m(from, to);
    out << '\n';
  }
  out.flags(old_flags);
  out.precision(old_precision);
}

TransitionMatrix read_matrix_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("transition matrix CSV: missing header");
  const auto header = split_csv_line(line);
  if (header.size() != kNumStates + 1) throw FormatError("transition matrix CSV: header must have 8 cells");
  for (int j = 0; j < kNumStates; ++j)
    if (header[j + 1] != state_name(static_cast<State>(j)))
      throw FormatError("transition matrix CSV: unexpected column '" + header[j + 1] + "'");
  TransitionMatrix m = TransitionMatrix::zeros();
  for (int i = 0; i < kNumStates; ++i) {
    if (!std::getline(in, line)) throw FormatError("transition matrix CSV: truncated at row " + std::to_string(i));
    const auto cells = split_csv_line(line);
    if (cells.size() != kNumStates + 1 || cells[0] != state_name(static_cast<State>(i)))
      throw FormatError("transition matrix CSV: malformed row " + std::to_string(i));
    for (int j = 0; j < kNumStates; ++j) {
      try {
        m.at(i, j) = std::stod(cells[j + 1]);
      } catch (const std::exception&) {
        throw FormatError("transition matrix CSV: bad number at row " + std::to_string(i));
      }
    }
  }
  return m;
}

std::string format_matrix_percent(const TransitionMatrix& m, int decimals) {
  std::ostringstream os;
  os << std::setw(12) << "";
  for (State s : all_states()) os << std::setw(12) << state_name(s);
  os << '\n' << std::fixed << std::setprecision(decimals);
  for (State from : all_states()) {
    os << std::setw(12) << state_name(from);
    for (State to : all_states()) os << std::setw(12) << 100.0 * m(from, to);
    os << '\n';
  }
  return os.str();
}

}  // namespace loanrisk
