#include "loanrisk/risk.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <ostream>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/poisson.hpp>

#include "loanrisk/errors.hpp"
#include "loanrisk/hashing.hpp"
#include "loanrisk/json_util.hpp"

namespace loanrisk {

// ---------------------------------------------------------------- evolver

CovariateEvolver CovariateEvolver::standard(const FeatureSchema& schema, int term_months) {
  if (term_months < 1) throw ConfigError("term_months", "must be >= 1");
  CovariateEvolver e;
  e.age_col_ = schema.column_index("age");
  e.balance_col_ = schema.column_index("balance_frac");
  e.orig_rate_col_ = schema.column_index("orig_rate");
  if (!e.orig_rate_col_) e.balance_col_.reset();
  e.term_ = term_months;
  return e;
}

void CovariateEvolver::bind_rate(const FeatureSchema& schema) {
  rate_col_ = schema.column_index("national_rate");
  if (!rate_col_) throw DataError("schema has no national_rate column to bind");
  if (!orig_rate_col_) orig_rate_col_ = schema.column_index("orig_rate");
  incentive_col_ = orig_rate_col_ ? schema.column_index("incentive") : std::nullopt;
}

void CovariateEvolver::advance(std::span<double> row) const {
  if (age_col_) {
    row[*age_col_] += 1.0;
    if (balance_col_)
      row[*balance_col_] =
          remaining_balance_fraction(row[*orig_rate_col_], term_, static_cast<int>(std::lround(row[*age_col_])));
  }
}

void CovariateEvolver::apply_rate(std::span<double> row, double national_rate) const {
  if (!rate_col_) return;
  row[*rate_col_] = national_rate;
  if (incentive_col_) row[*incentive_col_] = row[*orig_rate_col_] - national_rate;
}

double CovariateEvolver::incentive(std::span<const double> row) const {
  return incentive_col_ ? row[*incentive_col_] : 0.0;
}

std::vector<std::size_t> CovariateEvolver::touched_columns() const {
  std::vector<std::size_t> cols;
  if (age_col_) {
    cols.push_back(*age_col_);
    if (balance_col_) cols.push_back(*balance_col_);
  }
  if (rate_col_) cols.push_back(*rate_col_);
  if (incentive_col_) cols.push_back(*incentive_col_);
  return cols;
}

// ---------------------------------------------------------------- matrices

namespace {

constexpr std::array<State, 5> kTransient = {State::kCurrent, State::kDD30, State::kDD60, State::kDD90Plus,
                                             State::kForeclosure};

void clamp_row(Probs& p, State from) {
  double total = 0.0;
  for (int k = 0; k < kNumStates; ++k) {
    if (!is_legal_transition(from, static_cast<State>(k))) p[static_cast<std::size_t>(k)] = 0.0;
    total += p[static_cast<std::size_t>(k)];
  }
  if (total > 0.0)
    for (double& v : p) v /= total;
}

void check_dims(const TransitionModel& model, const FeatureSchema& schema, std::size_t d) {
  if (d != schema.dim() || d != model.input_dim())
    throw DataError("covariate row has " + std::to_string(d) + " columns, model expects " +
                    std::to_string(model.input_dim()));
}

}  // namespace

void clamp_to_legal(TransitionMatrix& m) {
  for (State u : kTransient) {
    Probs p = m.row(u);
    clamp_row(p, u);
    m.set_row(u, p);
  }
}

std::vector<TransitionMatrix> one_step_matrices(const TransitionModel& model, const FeatureSchema& schema,
                                                const RowMatrix& covariates, bool clamp) {
  const auto n = static_cast<std::size_t>(covariates.rows());
  check_dims(model, schema, static_cast<std::size_t>(covariates.cols()));
  RowMatrix x(static_cast<Eigen::Index>(n * kTransient.size()), covariates.cols());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < kTransient.size(); ++k) {
      const auto r = static_cast<Eigen::Index>(i * kTransient.size() + k);
      x.row(r) = covariates.row(static_cast<Eigen::Index>(i));
      set_state(schema, std::span<double>(x.row(r).data(), static_cast<std::size_t>(x.cols())), kTransient[k]);
    }
  RowMatrix probs;
  model.predict(x, probs);
  std::vector<TransitionMatrix> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    TransitionMatrix& m = out[i];  // identity, so absorbing rows are already unit vectors
    for (std::size_t k = 0; k < kTransient.size(); ++k) {
      Probs p{};
      for (int c = 0; c < kNumStates; ++c)
        p[static_cast<std::size_t>(c)] = probs(static_cast<Eigen::Index>(i * kTransient.size() + k), c);
      m.set_row(kTransient[k], p);
    }
    if (clamp) clamp_to_legal(m);
  }
  return out;
}

TransitionMatrix one_step_matrix(const TransitionModel& model, const FeatureSchema& schema,
                                 std::span<const double> covariates, bool clamp) {
  RowMatrix x = Eigen::Map<const RowMatrix>(covariates.data(), 1, static_cast<Eigen::Index>(covariates.size()));
  return one_step_matrices(model, schema, x, clamp)[0];
}

std::vector<TransitionMatrix> multi_period_frozen(const TransitionModel& model, const FeatureSchema& schema,
                                                  const RowMatrix& covariates, const CovariateEvolver& evolver, int t,
                                                  bool clamp) {
  if (t < 1) throw ConfigError("horizon", "must be >= 1");
  RowMatrix cur = covariates;
  std::vector<TransitionMatrix> out(static_cast<std::size_t>(cur.rows()));
  for (int s = 0; s < t; ++s) {
    const std::vector<TransitionMatrix> step = one_step_matrices(model, schema, cur, clamp);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * step[i];
    if (s + 1 < t)
      for (Eigen::Index i = 0; i < cur.rows(); ++i)
        evolver.advance(std::span<double>(cur.row(i).data(), static_cast<std::size_t>(cur.cols())));
  }
  return out;
}

TransitionMatrix multi_period_frozen(const TransitionModel& model, const FeatureSchema& schema,
                                     std::span<const double> covariates, const CovariateEvolver& evolver, int t,
                                     bool clamp) {
  RowMatrix x = Eigen::Map<const RowMatrix>(covariates.data(), 1, static_cast<Eigen::Index>(covariates.size()));
  return multi_period_frozen(model, schema, x, evolver, t, clamp)[0];
}

// ---------------------------------------------------------------- pool distributions

std::string_view to_string(PoolDistribution::Kind k) {
  switch (k) {
    case PoolDistribution::Kind::kMonteCarlo: return "monte_carlo";
    case PoolDistribution::Kind::kPoisson: return "poisson";
    case PoolDistribution::Kind::kNormal: return "normal";
  }
  return "?";
}

double PoolDistribution::stddev(State s) const { return std::sqrt(variance[static_cast<std::size_t>(index_of(s))]); }

double PoolDistribution::cdf(State s, double k) const {
  const auto si = static_cast<std::size_t>(index_of(s));
  const double mu = mean[si];
  switch (kind) {
    case Kind::kMonteCarlo: {
      if (paths.empty()) throw DataError("empty Monte Carlo distribution");
      std::size_t hit = 0;
      for (const auto& p : paths) hit += static_cast<double>(p[si]) <= k;
      return static_cast<double>(hit) / static_cast<double>(paths.size());
    }
    case Kind::kPoisson: {
      if (k < 0) return 0.0;
      if (mu <= 0.0) return 1.0;
      return boost::math::cdf(boost::math::poisson_distribution<double>(mu), std::floor(k));
    }
    case Kind::kNormal: {
      const double sd = std::sqrt(variance[si]);
      if (sd <= 0.0) return k + 0.5 >= mu ? 1.0 : 0.0;
      return boost::math::cdf(boost::math::normal_distribution<double>(mu, sd), k + 0.5);
    }
  }
  return 0.0;
}

nlohmann::json PoolDistribution::to_json() const {
  nlohmann::json j;
  j["kind"] = std::string(to_string(kind));
  j["pool_size"] = pool_size;
  nlohmann::json states = nlohmann::json::object();
  for (State s : all_states()) {
    const auto si = static_cast<std::size_t>(index_of(s));
    states[std::string(state_name(s))] = {{"mean", mean[si]}, {"variance", variance[si]}};
  }
  j["states"] = states;
  if (kind == Kind::kMonteCarlo) j["num_paths"] = paths.size();
  return j;
}

void PoolDistribution::write_paths_csv(std::ostream& out) const {
  out << "path";
  for (State s : all_states()) out << ',' << state_name(s);
  out << '\n';
  for (std::size_t p = 0; p < paths.size(); ++p) {
    out << p;
    for (std::uint32_t c : paths[p]) out << ',' << c;
    out << '\n';
  }
}

namespace {

struct CounterColumns {
  std::array<std::optional<std::size_t>, 5> times;  // Current..Foreclosure
  std::optional<std::size_t> burnout;

  explicit CounterColumns(const FeatureSchema& schema) {
    static const char* names[5] = {"times_current_12m", "times_30dd_12m", "times_60dd_12m", "times_90dd_12m",
                                   "times_fc_12m"};
    for (std::size_t k = 0; k < 5; ++k) times[k] = schema.column_index(names[k]);
    burnout = schema.column_index("burnout");
  }
  bool any() const {
    return burnout.has_value() || std::any_of(times.begin(), times.end(), [](const auto& c) { return c.has_value(); });
  }
};

constexpr std::size_t kWindow = 12;

// Rebuilds a 12-month history consistent with the starting counters. Their order within
// the window is unknown, so states are laid out oldest-first in state order.
std::deque<State> initial_window(const CounterColumns& cc, std::span<const double> row) {
  std::deque<State> w;
  for (std::size_t k = 0; k < 5; ++k) {
    if (!cc.times[k]) continue;
    const long n = std::lround(std::max(0.0, row[*cc.times[k]]));
    for (long i = 0; i < n; ++i) w.push_back(static_cast<State>(k));
  }
  while (w.size() > kWindow) w.pop_front();
  return w;
}

void write_window(const CounterColumns& cc, const std::deque<State>& w, std::span<double> row) {
  std::array<int, 5> counts{};
  for (State s : w)
    if (index_of(s) < 5) ++counts[static_cast<std::size_t>(index_of(s))];
  for (std::size_t k = 0; k < 5; ++k)
    if (cc.times[k]) row[*cc.times[k]] = counts[k];
}

State sample_state(const Probs& p, double u) {
  int k = 0;
  double acc = p[0];
  while (k + 1 < kNumStates && u >= acc) acc += p[static_cast<std::size_t>(++k)];
  while (k > 0 && p[static_cast<std::size_t>(k)] == 0.0) --k;
  return static_cast<State>(k);
}

void summarize(PoolDistribution& d) {
  const double n = static_cast<double>(d.paths.size());
  d.mean.fill(0.0);
  d.variance.fill(0.0);
  for (const auto& p : d.paths)
    for (std::size_t k = 0; k < kNumStates; ++k) d.mean[k] += p[k];
  for (double& m : d.mean) m /= n;
  if (d.paths.size() < 2) return;
  for (const auto& p : d.paths)
    for (std::size_t k = 0; k < kNumStates; ++k) d.variance[k] += (p[k] - d.mean[k]) * (p[k] - d.mean[k]);
  for (double& v : d.variance) v /= n - 1.0;
}

}  // namespace

PoolDistribution simulate_pool_mc(const TransitionModel& model, const FeatureSchema& schema,
                                  const std::vector<LoanSnapshot>& pool, const CovariateEvolver& evolver,
                                  const McConfig& config) {
  if (config.num_paths < 1) throw ConfigError("num_paths", "must be >= 1");
  if (config.horizon < 1) throw ConfigError("horizon", "must be >= 1");
  if (config.macro && config.rate_history.size() < 4)
    throw ConfigError("rate_history", "a simulated rate needs at least four months of history");
  CovariateEvolver ev = evolver;
  if (config.macro && !ev.rate_bound()) ev.bind_rate(schema);

  const std::size_t n = pool.size();
  const std::size_t d = schema.dim();
  RowMatrix base(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    if (pool[i].covariates.size() != d) throw DataError("loan " + pool[i].loan_id + " has the wrong covariate count");
    for (std::size_t c = 0; c < d; ++c) base(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = pool[i].covariates[c];
  }
  check_dims(model, schema, d);

  const CounterColumns cc(schema);
  const bool path_dependent = config.macro.has_value() || (config.update_counters && cc.any());

  PoolDistribution out;
  out.kind = PoolDistribution::Kind::kMonteCarlo;
  out.pool_size = n;
  out.paths.assign(config.num_paths, {});

  // Path-independent covariates: one matrix per loan per month, shared by every path.
  std::vector<std::vector<TransitionMatrix>> frozen;
  if (!path_dependent) {
    RowMatrix cur = base;
    for (int m = 0; m < config.horizon; ++m) {
      frozen.push_back(one_step_matrices(model, schema, cur, config.clamp));
      for (Eigen::Index i = 0; i < cur.rows(); ++i) ev.advance(std::span<double>(cur.row(i).data(), d));
    }
  }

#pragma omp parallel for schedule(dynamic, 1)
  for (std::size_t p = 0; p < config.num_paths; ++p) {
    const std::uint64_t path_seed = derive_seed(config.seed, {0x3c0a, p});
    std::vector<State> state(n);
    for (std::size_t i = 0; i < n; ++i) state[i] = pool[i].state;

    if (!path_dependent) {
      for (int m = 0; m < config.horizon; ++m)
        for (std::size_t i = 0; i < n; ++i) {
          if (is_absorbing(state[i])) continue;
          const double u = counter_uniform(path_seed, i, static_cast<std::uint64_t>(m), 0);
          state[i] = sample_state(frozen[static_cast<std::size_t>(m)][i].row(state[i]), u);
        }
    } else {
      RowMatrix cur = base;
      std::vector<std::deque<State>> window(n);
      if (config.update_counters)
        for (std::size_t i = 0; i < n; ++i) window[i] = initial_window(cc, std::span<const double>(cur.row(static_cast<Eigen::Index>(i)).data(), d));
      std::vector<double> rates;
      if (config.macro)
        rates = simulate_rate_path(*config.macro, config.rate_history, config.horizon, derive_seed(path_seed, {0x4a7e}));

      std::vector<std::size_t> alive;
      RowMatrix x, probs;
      for (int m = 0; m < config.horizon; ++m) {
        alive.clear();
        for (std::size_t i = 0; i < n; ++i)
          if (!is_absorbing(state[i])) alive.push_back(i);
        if (alive.empty()) break;
        x.resize(static_cast<Eigen::Index>(alive.size()), static_cast<Eigen::Index>(d));
        for (std::size_t a = 0; a < alive.size(); ++a) {
          const auto r = static_cast<Eigen::Index>(a);
          x.row(r) = cur.row(static_cast<Eigen::Index>(alive[a]));
          set_state(schema, std::span<double>(x.row(r).data(), d), state[alive[a]]);
        }
        model.predict(x, probs);
        for (std::size_t a = 0; a < alive.size(); ++a) {
          const std::size_t i = alive[a];
          Probs pr{};
          for (int k = 0; k < kNumStates; ++k) pr[static_cast<std::size_t>(k)] = probs(static_cast<Eigen::Index>(a), k);
          if (config.clamp) clamp_row(pr, state[i]);
          const double u = counter_uniform(path_seed, i, static_cast<std::uint64_t>(m), 0);
          const State next = sample_state(pr, u);
          std::span<double> row(cur.row(static_cast<Eigen::Index>(i)).data(), d);
          if (config.update_counters) {
            window[i].push_back(state[i]);
            while (window[i].size() > kWindow) window[i].pop_front();
            write_window(cc, window[i], row);
            if (cc.burnout && ev.incentive(row) > config.burnout_incentive && next != State::kPaidOff)
              row[*cc.burnout] += 1.0;
          }
          ev.advance(row);
          if (config.macro) ev.apply_rate(row, rates[static_cast<std::size_t>(m)]);
          state[i] = next;
        }
      }
    }
    auto& counts = out.paths[p];
    for (State s : state) ++counts[static_cast<std::size_t>(index_of(s))];
  }
  summarize(out);
  return out;
}

namespace {

PoolDistribution closed_form(std::span<const Probs> per_loan, PoolDistribution::Kind kind) {
  PoolDistribution d;
  d.kind = kind;
  d.pool_size = per_loan.size();
  for (const Probs& p : per_loan)
    for (std::size_t k = 0; k < kNumStates; ++k) {
      if (!(p[k] >= 0.0 && p[k] <= 1.0)) throw DataError("probability outside [0, 1]");
      d.mean[k] += p[k];
      d.variance[k] += kind == PoolDistribution::Kind::kPoisson ? p[k] : p[k] * (1.0 - p[k]);
    }
  return d;
}

std::vector<Probs> single_state(std::span<const double> p, State target) {
  std::vector<Probs> out(p.size());
  const auto t = static_cast<std::size_t>(index_of(target));
  const std::size_t other = t == 0 ? 1 : 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    out[i][t] = p[i];
    out[i][other] = 1.0 - p[i];
  }
  return out;
}

}  // namespace

PoolDistribution pool_poisson(std::span<const Probs> per_loan) {
  return closed_form(per_loan, PoolDistribution::Kind::kPoisson);
}
PoolDistribution pool_normal(std::span<const Probs> per_loan) {
  return closed_form(per_loan, PoolDistribution::Kind::kNormal);
}
PoolDistribution pool_poisson(std::span<const double> p, State target) {
  const auto v = single_state(p, target);
  return pool_poisson(v);
}
PoolDistribution pool_normal(std::span<const double> p, State target) {
  const auto v = single_state(p, target);
  return pool_normal(v);
}

std::vector<double> poisson_binomial_pmf(std::span<const double> p) {
  std::vector<double> pmf(p.size() + 1, 0.0);
  pmf[0] = 1.0;
  for (std::size_t n = 0; n < p.size(); ++n) {
    if (!(p[n] >= 0.0 && p[n] <= 1.0)) throw DataError("probability outside [0, 1]");
    for (std::size_t k = n + 1; k > 0; --k) pmf[k] = pmf[k] * (1.0 - p[n]) + pmf[k - 1] * p[n];
    pmf[0] *= 1.0 - p[n];
  }
  return pmf;
}

// ---------------------------------------------------------------- portfolios

namespace {

std::vector<std::size_t> order_by_score(std::span<const double> score, std::span<const std::string> ids) {
  if (score.size() != ids.size()) throw DataError("scores and loan ids differ in length");
  std::vector<std::size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (score[a] != score[b]) return score[a] > score[b];
    return ids[a] < ids[b];
  });
  return idx;
}

}  // namespace

std::vector<std::size_t> top_n_by_score(std::span<const double> score, std::span<const std::string> ids,
                                        std::size_t n) {
  if (n > score.size()) throw ConfigError("N", "portfolio size exceeds the pool");
  std::vector<std::size_t> idx = order_by_score(score, ids);
  idx.resize(n);
  return idx;
}

std::vector<double> current_probability(const TransitionModel& model, const FeatureSchema& schema,
                                        const std::vector<LoanSnapshot>& pool, int horizon,
                                        const CovariateEvolver& evolver) {
  RowMatrix x(static_cast<Eigen::Index>(pool.size()), static_cast<Eigen::Index>(schema.dim()));
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].covariates.size() != schema.dim()) throw DataError("loan " + pool[i].loan_id + " has the wrong covariate count");
    for (std::size_t c = 0; c < schema.dim(); ++c) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = pool[i].covariates[c];
  }
  const auto mats = multi_period_frozen(model, schema, x, evolver, horizon);
  std::vector<double> out(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) out[i] = mats[i](pool[i].state, State::kCurrent);
  return out;
}

std::vector<std::size_t> select_portfolio(const TransitionModel& model, const FeatureSchema& schema,
                                          const std::vector<LoanSnapshot>& pool, std::size_t n, int horizon,
                                          const CovariateEvolver& evolver) {
  if (n > pool.size()) throw ConfigError("N", "portfolio size exceeds the pool");
  if (n == 0) return {};
  const std::vector<double> score = current_probability(model, schema, pool, horizon, evolver);
  std::vector<std::string> ids;
  for (const auto& l : pool) ids.push_back(l.loan_id);
  return top_n_by_score(score, ids, n);
}

double loss_weight(State s, std::optional<int> months_delinquent) {
  switch (s) {
    case State::kCurrent: return 0.0;
    case State::kPaidOff: return 0.05;
    case State::kForeclosure:
    case State::kREO: return 0.40;
    case State::kDD30: return months_delinquent.value_or(1) / 360.0;
    case State::kDD60: return months_delinquent.value_or(2) / 360.0;
    case State::kDD90Plus: return months_delinquent.value_or(3) / 360.0;
  }
  return 0.0;
}

double portfolio_loss(std::span<const LoanOutcome> outcomes) {
  double total = 0.0;
  for (const LoanOutcome& o : outcomes) total += o.notional * loss_weight(o.state, o.months_delinquent);
  return total;
}

RankedPools make_ranked_pools(std::span<const double> key, std::span<const std::string> ids, std::size_t pool_size) {
  if (pool_size < 1) throw ConfigError("pool_size", "must be >= 1");
  const std::vector<std::size_t> idx = order_by_score(key, ids);
  RankedPools out;
  for (std::size_t start = 0; start < idx.size(); start += pool_size) {
    const std::size_t end = std::min(idx.size(), start + pool_size);
    out.pools.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(start), idx.begin() + static_cast<std::ptrdiff_t>(end));
  }
  out.last_short = !out.pools.empty() && out.pools.back().size() < pool_size;
  return out;
}

std::vector<ComparisonRow> portfolio_comparison_curve(std::span<const double> score_a,
                                                      std::span<const double> score_b,
                                                      std::span<const std::string> ids,
                                                      std::span<const State> realized,
                                                      std::span<const std::size_t> n_grid) {
  if (realized.size() != ids.size()) throw DataError("realized outcomes and loan ids differ in length");
  const std::vector<std::size_t> oa = order_by_score(score_a, ids);
  const std::vector<std::size_t> ob = order_by_score(score_b, ids);
  // prefix counts of non-Current outcomes along each ordering
  std::vector<std::size_t> ca(ids.size() + 1, 0), cb(ids.size() + 1, 0);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    ca[k + 1] = ca[k] + (realized[oa[k]] != State::kCurrent);
    cb[k + 1] = cb[k] + (realized[ob[k]] != State::kCurrent);
  }
  std::vector<ComparisonRow> rows;
  for (std::size_t n : n_grid) {
    if (n > ids.size()) throw ConfigError("n_grid", "portfolio size exceeds the pool");
    rows.push_back({n, ca[n], cb[n]});
  }
  return rows;
}

void write_comparison_csv(std::ostream& out, const std::vector<ComparisonRow>& rows) {
  out << "n,non_current_a,non_current_b\n";
  for (const auto& r : rows) out << r.n << ',' << r.non_current_a << ',' << r.non_current_b << '\n';
}

}  // namespace loanrisk
