#include "loanrisk/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <random>

#include <Eigen/Eigenvalues>

#include "loanrisk/errors.hpp"
#include "loanrisk/hashing.hpp"
#include "loanrisk/json_util.hpp"

namespace loanrisk {
namespace {

constexpr int kCounterWindow = 12;

const std::vector<std::string>& dynamic_field_names() {
  static const std::vector<std::string> names = {
      "age",           "balance_frac",    "incentive",       "national_rate",  "unemployment",
      "hpi_change",    "lag_default_rate", "lag_prepay_rate", "times_current_12m", "times_30dd_12m",
      "times_60dd_12m", "times_90dd_12m",  "times_fc_12m",    "burnout",        "noise"};
  return names;
}

double draw(std::mt19937_64& rng, const StaticDistribution& d) {
  std::normal_distribution<double> normal(d.mean, d.sd);
  return std::clamp(normal(rng), d.lo, d.hi);
}


nlohmann::json dist_to_json(const StaticDistribution& d) {
  return {{"mean", d.mean}, {"sd", d.sd}, {"lo", d.lo}, {"hi", d.hi}};
}

StaticDistribution dist_from_json(const nlohmann::json& j, StaticDistribution d, const std::string& prefix) {
  json_check_keys(j, {"mean", "sd", "lo", "hi"}, prefix);
  d.mean = json_get(j, "mean", d.mean, prefix);
  d.sd = json_get(j, "sd", d.sd, prefix);
  d.lo = json_get(j, "lo", d.lo, prefix);
  d.hi = json_get(j, "hi", d.hi, prefix);
  return d;
}

State state_from_json(const nlohmann::json& j, const std::string& key) {
  const auto s = parse_state(j.get<std::string>());
  if (!s) throw ConfigError(key, "unknown state '" + j.get<std::string>() + "'");
  return *s;
}

int parse_period(const nlohmann::json& j, const std::string& key) {
  if (j.is_number_integer()) return j.get<int>();
  if (j.is_string()) {
    int y = 0, m = 0;
    if (std::sscanf(j.get<std::string>().c_str(), "%d-%d", &y, &m) == 2 && m >= 1 && m <= 12) return month_index(y, m);
  }
  throw ConfigError(key, "expected a month index or \"YYYY-MM\"");
}

}  // namespace

double remaining_balance_fraction(double annual_rate_pct, int term, int age) {
  if (age <= 0) return 1.0;
  if (age >= term) return 0.0;
  const double r = annual_rate_pct / 1200.0;
  if (std::abs(r) < 1e-12) return 1.0 - static_cast<double>(age) / term;
  const double gn = std::pow(1.0 + r, term);
  const double ga = std::pow(1.0 + r, age);
  return (gn - ga) / (gn - 1.0);
}

// ---------------------------------------------------------------- macro

nlohmann::json MacroConfig::to_json() const {
  return {{"rate_ar", rate_ar},
          {"rate_noise", rate_noise},
          {"initial_rates", initial_rates},
          {"require_stationary", require_stationary},
          {"unemployment_mean", unemployment_mean},
          {"unemployment_phi", unemployment_phi},
          {"unemployment_sigma", unemployment_sigma},
          {"unemployment_initial", unemployment_initial},
          {"hpi_drift", hpi_drift},
          {"hpi_vol", hpi_vol}};
}

MacroConfig MacroConfig::from_json(const nlohmann::json& j) {
  const std::string p = "macro.";
  json_check_keys(j,
                  {"rate_ar", "rate_noise", "initial_rates", "require_stationary", "unemployment_mean",
                   "unemployment_phi", "unemployment_sigma", "unemployment_initial", "hpi_drift", "hpi_vol"},
                  p);
  MacroConfig c;
  c.rate_ar = json_get(j, "rate_ar", c.rate_ar, p);
  c.rate_noise = json_get(j, "rate_noise", c.rate_noise, p);
  c.initial_rates = json_get(j, "initial_rates", c.initial_rates, p);
  c.require_stationary = json_get(j, "require_stationary", c.require_stationary, p);
  c.unemployment_mean = json_get(j, "unemployment_mean", c.unemployment_mean, p);
  c.unemployment_phi = json_get(j, "unemployment_phi", c.unemployment_phi, p);
  c.unemployment_sigma = json_get(j, "unemployment_sigma", c.unemployment_sigma, p);
  c.unemployment_initial = json_get(j, "unemployment_initial", c.unemployment_initial, p);
  c.hpi_drift = json_get(j, "hpi_drift", c.hpi_drift, p);
  c.hpi_vol = json_get(j, "hpi_vol", c.hpi_vol, p);
  if (c.rate_noise < 0) throw ConfigError(p + "rate_noise", "must be >= 0");
  if (c.unemployment_sigma < 0) throw ConfigError(p + "unemployment_sigma", "must be >= 0");
  if (c.hpi_vol < 0) throw ConfigError(p + "hpi_vol", "must be >= 0");
  return c;
}

double ar_spectral_radius(const std::array<double, 5>& rate_ar) {
  Eigen::Matrix4d companion = Eigen::Matrix4d::Zero();
  for (int i = 0; i < 4; ++i) companion(0, i) = rate_ar[i + 1];
  for (int i = 1; i < 4; ++i) companion(i, i - 1) = 1.0;
  return Eigen::EigenSolver<Eigen::Matrix4d>(companion, false).eigenvalues().cwiseAbs().maxCoeff();
}

std::vector<double> simulate_rate_path(const MacroConfig& config, std::span<const double> history, int months,
                                       std::uint64_t seed) {
  if (history.size() < 4) throw DataError("rate path needs four lags of history");
  std::vector<double> lags(history.end() - 4, history.end());
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(std::max(months, 0)));
  std::mt19937_64 rng(derive_seed(seed, {0x7a7e}));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int t = 0; t < months; ++t) {
    const std::size_t n = lags.size();
    double r = config.rate_ar[0];
    for (int k = 1; k <= 4; ++k) r += config.rate_ar[k] * lags[n - k];
    if (config.rate_noise > 0) r += config.rate_noise * normal(rng);
    out.push_back(r);
    lags.push_back(r);
  }
  return out;
}

MacroPath simulate_macro(const MacroConfig& config, int months, int num_regions, std::uint64_t seed) {
  if (months < 0) throw ConfigError("horizon", "must be >= 0");
  if (config.require_stationary && ar_spectral_radius(config.rate_ar) >= 1.0)
    throw ConfigError("macro.rate_ar", "AR coefficients are not stationary (spectral radius >= 1)");
  MacroPath path;
  path.months = months;
  path.national_rate = simulate_rate_path(config, config.initial_rates, months, derive_seed(seed, {1}));
  path.unemployment.resize(static_cast<std::size_t>(num_regions));
  path.hpi.resize(static_cast<std::size_t>(num_regions));
  for (int r = 0; r < num_regions; ++r) {
    std::mt19937_64 urng(derive_seed(seed, {2, static_cast<std::uint64_t>(r)}));
    std::mt19937_64 hrng(derive_seed(seed, {3, static_cast<std::uint64_t>(r)}));
    std::normal_distribution<double> normal(0.0, 1.0);
    double u = config.unemployment_initial;
    double log_hpi = 0.0;
    for (int t = 0; t < months; ++t) {
      u = config.unemployment_mean + config.unemployment_phi * (u - config.unemployment_mean) +
          config.unemployment_sigma * normal(urng);
      if (t > 0) log_hpi += config.hpi_drift + config.hpi_vol * normal(hrng);
      path.unemployment[r].push_back(u);
      path.hpi[r].push_back(std::exp(log_hpi));
    }
  }
  return path;
}

// ---------------------------------------------------------------- ground truth

nlohmann::json GroundTruthModel::to_json() const {
  nlohmann::json ic = nlohmann::json::object();
  for (State from : all_states()) {
    nlohmann::json row = nlohmann::json::object();
    for (State to : all_states())
      if (is_legal_transition(from, to)) row[std::string(state_name(to))] = intercept[index_of(from)][index_of(to)];
    ic[std::string(state_name(from))] = row;
  }
  nlohmann::json std_j = nlohmann::json::object();
  for (const auto& [name, cs] : standardize) std_j[name] = {cs.first, cs.second};
  nlohmann::json terms_j = nlohmann::json::array();
  for (const auto& t : terms) {
    nlohmann::json tj = {{"features", t.features}, {"next_state", std::string(state_name(t.next_state))}, {"coef", t.coef}};
    if (t.from_state) tj["from_state"] = std::string(state_name(*t.from_state));
    terms_j.push_back(std::move(tj));
  }
  nlohmann::json thr_j = nlohmann::json::array();
  for (const auto& t : thresholds) {
    nlohmann::json tj = {{"feature", t.feature},
                         {"knot", t.knot},
                         {"next_state", std::string(state_name(t.next_state))},
                         {"coef", t.coef}};
    if (t.from_state) tj["from_state"] = std::string(state_name(*t.from_state));
    thr_j.push_back(std::move(tj));
  }
  return {{"intercept", ic}, {"standardize", std_j}, {"terms", terms_j}, {"thresholds", thr_j}};
}

GroundTruthModel GroundTruthModel::from_json(const nlohmann::json& j) {
  const std::string p = "ground_truth.";
  json_check_keys(j, {"intercept", "standardize", "terms", "thresholds"}, "ground_truth.");
  GroundTruthModel m;
  try {
    if (j.contains("intercept")) {
      for (const auto& [from_name, row] : j["intercept"].items()) {
        const auto from = parse_state(from_name);
        if (!from) throw ConfigError(p + "intercept", "unknown state '" + from_name + "'");
        for (const auto& [to_name, v] : row.items()) {
          const auto to = parse_state(to_name);
          if (!to) throw ConfigError(p + "intercept", "unknown state '" + to_name + "'");
          m.intercept[index_of(*from)][index_of(*to)] = v.get<double>();
        }
      }
    }
    if (j.contains("standardize"))
      for (const auto& [name, cs] : j["standardize"].items()) {
        const double scale = cs.at(1).get<double>();
        if (!(scale > 0)) throw ConfigError(p + "standardize." + name, "scale must be > 0");
        m.standardize[name] = {cs.at(0).get<double>(), scale};
      }
    if (j.contains("terms"))
      for (const auto& t : j["terms"]) {
        ProductTerm term;
        term.features = t.at("features").get<std::vector<std::string>>();
        if (term.features.empty()) throw ConfigError(p + "terms", "term without features");
        term.next_state = state_from_json(t.at("next_state"), p + "terms.next_state");
        term.coef = t.at("coef").get<double>();
        if (t.contains("from_state")) term.from_state = state_from_json(t["from_state"], p + "terms.from_state");
        m.terms.push_back(std::move(term));
      }
    if (j.contains("thresholds"))
      for (const auto& t : j["thresholds"]) {
        ThresholdTerm term;
        term.feature = t.at("feature").get<std::string>();
        term.knot = t.at("knot").get<double>();
        term.next_state = state_from_json(t.at("next_state"), p + "thresholds.next_state");
        term.coef = t.at("coef").get<double>();
        if (t.contains("from_state"))
          term.from_state = state_from_json(t["from_state"], p + "thresholds.from_state");
        m.thresholds.push_back(std::move(term));
      }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("ground_truth", e.what());
  }
  return m;
}

GroundTruth::GroundTruth(GroundTruthModel model, const FeatureSchema& schema)
    : model_(std::move(model)), dim_(schema.dim()), center_(dim_, 0.0), scale_(dim_, 1.0) {
  for (const auto& [name, cs] : model_.standardize) {
    if (auto c = schema.column_index(name)) {
      center_[*c] = cs.first;
      scale_[*c] = cs.second;
    }
  }
  auto resolve = [&](const std::string& name) {
    const auto c = schema.column_index(name);
    if (!c) throw ConfigError("ground_truth", "feature '" + name + "' is not a schema column");
    return *c;
  };
  for (const auto& t : model_.terms) {
    Resolved r{{}, index_of(t.next_state), t.coef, t.from_state ? index_of(*t.from_state) : -1};
    for (const auto& f : t.features) r.cols.push_back(resolve(f));
    terms_.push_back(std::move(r));
  }
  for (const auto& t : model_.thresholds)
    thresholds_.push_back(
        {resolve(t.feature), t.knot, index_of(t.next_state), t.coef, t.from_state ? index_of(*t.from_state) : -1});
}

Probs GroundTruth::logits(std::span<const double> x, State state) const {
  if (x.size() != dim_) throw DataError("ground truth expects " + std::to_string(dim_) + " covariates");
  const double ninf = -std::numeric_limits<double>::infinity();
  Probs z;
  for (int k = 0; k < kNumStates; ++k)
    z[k] = is_legal_transition(state, static_cast<State>(k)) ? model_.intercept[index_of(state)][k] : ninf;
  if (is_absorbing(state)) return z;
  auto s = [&](std::size_t c) { return (x[c] - center_[c]) / scale_[c]; };
  const int from = index_of(state);
  for (const auto& t : terms_) {
    if (z[t.next] == ninf || (t.from >= 0 && t.from != from)) continue;
    double prod = t.coef;
    for (auto c : t.cols) prod *= s(c);
    z[t.next] += prod;
  }
  for (const auto& t : thresholds_) {
    if (z[t.next] == ninf || (t.from >= 0 && t.from != from)) continue;
    z[t.next] += t.coef * std::max(0.0, s(t.col) - t.knot);
  }
  return z;
}

Probs GroundTruth::probs(std::span<const double> x, State state) const {
  Probs p{};
  if (is_absorbing(state)) {
    if (x.size() != dim_) throw DataError("ground truth expects " + std::to_string(dim_) + " covariates");
    p[index_of(state)] = 1.0;
    return p;
  }
  const Probs z = logits(x, state);
  double m = -std::numeric_limits<double>::infinity();
  for (double v : z) m = std::max(m, v);
  double sum = 0.0;
  for (int k = 0; k < kNumStates; ++k) {
    p[k] = std::isinf(z[k]) ? 0.0 : std::exp(z[k] - m);
    sum += p[k];
  }
  for (auto& v : p) v /= sum;
  return p;
}

Probs ground_truth_probs(const GroundTruth& model, std::span<const double> covariates, State state) {
  return model.probs(covariates, state);
}

void GroundTruthTransitionModel::predict(MatrixRef x, RowMatrix& probs) const {
  probs.resize(x.rows(), kNumStates);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const RowMatrix row = x.row(i);
    const std::span<const double> xs(row.data(), static_cast<std::size_t>(row.cols()));
    const Probs p = truth_->probs(xs, decode_state(*schema_, xs));
    for (int k = 0; k < kNumStates; ++k) probs(i, k) = p[k];
  }
}

void GroundTruthTransitionModel::logits(MatrixRef x, RowMatrix& z) const {
  z.resize(x.rows(), kNumStates);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const RowMatrix row = x.row(i);
    const std::span<const double> xs(row.data(), static_cast<std::size_t>(row.cols()));
    const Probs l = truth_->logits(xs, decode_state(*schema_, xs));
    for (int k = 0; k < kNumStates; ++k) z(i, k) = l[k];
  }
}

// ---------------------------------------------------------------- config

void SyntheticConfig::validate() const {
  if (num_loans < 0) throw ConfigError("num_loans", "must be >= 0");
  if (num_regions < 1) throw ConfigError("num_regions", "must be >= 1");
  if (horizon < 1) throw ConfigError("horizon", "must be >= 1");
  if (origination_window < 1 || origination_window > horizon)
    throw ConfigError("origination_window", "must lie in [1, horizon]");
  if (term_months < 1) throw ConfigError("term_months", "must be >= 1");
  if (macro.rate_noise < 0) throw ConfigError("macro.rate_noise", "must be >= 0");
  if (macro.unemployment_sigma < 0) throw ConfigError("macro.unemployment_sigma", "must be >= 0");
  if (macro.hpi_vol < 0) throw ConfigError("macro.hpi_vol", "must be >= 0");
  for (const auto& [name, d] : {std::pair{"static.fico", fico}, {"static.ltv", ltv}, {"static.dti", dti},
                                {"static.balance", balance}, {"static.reserves", reserves},
                                {"static.rate_spread", rate_spread}}) {
    if (d.sd < 0) throw ConfigError(std::string(name) + ".sd", "must be >= 0");
    if (d.lo > d.hi) throw ConfigError(std::string(name) + ".lo", "must not exceed hi");
  }
  for (const auto& [field, rate] : missing_rate) {
    if (field != "dti") throw ConfigError("missing_rate." + field, "only optional fields accept missing values");
    if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("missing_rate." + field, "must lie in [0, 1]");
  }
}

nlohmann::json SyntheticConfig::to_json() const {
  nlohmann::json j = {{"num_loans", num_loans},
                      {"num_regions", num_regions},
                      {"horizon", horizon},
                      {"origination_window", origination_window},
                      {"start_period", start_period},
                      {"seed", seed},
                      {"term_months", term_months},
                      {"macro", macro.to_json()},
                      {"static",
                       {{"fico", dist_to_json(fico)},
                        {"ltv", dist_to_json(ltv)},
                        {"dti", dist_to_json(dti)},
                        {"balance", dist_to_json(balance)},
                        {"reserves", dist_to_json(reserves)},
                        {"rate_spread", dist_to_json(rate_spread)}}},
                      {"burnout_incentive", burnout_incentive},
                      {"initial_default_rate", initial_default_rate},
                      {"initial_prepay_rate", initial_prepay_rate},
                      {"missing_rate", missing_rate}};
  if (ground_truth) j["ground_truth"] = ground_truth->to_json();
  return j;
}

SyntheticConfig SyntheticConfig::from_json(const nlohmann::json& j) {
  json_check_keys(j, {"num_loans", "num_regions", "horizon", "origination_window", "start_period", "seed",
                      "term_months", "macro", "static", "burnout_incentive", "initial_default_rate",
                      "initial_prepay_rate", "missing_rate", "ground_truth"});
  SyntheticConfig c;
  c.num_loans = json_get(j, "num_loans", c.num_loans);
  c.num_regions = json_get(j, "num_regions", c.num_regions);
  c.horizon = json_get(j, "horizon", c.horizon);
  c.origination_window = json_get(j, "origination_window", std::min(c.origination_window, c.horizon));
  if (j.contains("start_period")) c.start_period = parse_period(j["start_period"], "start_period");
  c.seed = json_get(j, "seed", c.seed);
  c.term_months = json_get(j, "term_months", c.term_months);
  if (j.contains("macro")) c.macro = MacroConfig::from_json(j["macro"]);
  if (j.contains("static")) {
    const auto& s = j["static"];
    json_check_keys(s, {"fico", "ltv", "dti", "balance", "reserves", "rate_spread"}, "static.");
    if (s.contains("fico")) c.fico = dist_from_json(s["fico"], c.fico, "static.fico.");
    if (s.contains("ltv")) c.ltv = dist_from_json(s["ltv"], c.ltv, "static.ltv.");
    if (s.contains("dti")) c.dti = dist_from_json(s["dti"], c.dti, "static.dti.");
    if (s.contains("balance")) c.balance = dist_from_json(s["balance"], c.balance, "static.balance.");
    if (s.contains("reserves")) c.reserves = dist_from_json(s["reserves"], c.reserves, "static.reserves.");
    if (s.contains("rate_spread"))
      c.rate_spread = dist_from_json(s["rate_spread"], c.rate_spread, "static.rate_spread.");
  }
  c.burnout_incentive = json_get(j, "burnout_incentive", c.burnout_incentive);
  c.initial_default_rate = json_get(j, "initial_default_rate", c.initial_default_rate);
  c.initial_prepay_rate = json_get(j, "initial_prepay_rate", c.initial_prepay_rate);
  c.missing_rate = json_get(j, "missing_rate", c.missing_rate);
  if (j.contains("ground_truth")) c.ground_truth = GroundTruthModel::from_json(j["ground_truth"]);
  c.validate();
  return c;
}

FeatureSchema default_loan_schema(int num_regions) {
  auto numeric = [](std::string name, std::string group, bool required = false) {
    FieldSpec f;
    f.name = std::move(name);
    f.group = std::move(group);
    f.required = required;
    return f;
  };
  std::vector<FieldSpec> fields;
  fields.push_back(numeric("fico", "origination", true));
  fields.push_back(numeric("ltv", "origination", true));
  fields.push_back(numeric("orig_rate", "origination", true));
  fields.push_back(numeric("orig_balance", "origination", true));
  FieldSpec dti = numeric("dti", "origination");
  dti.missing_indicator = true;
  fields.push_back(dti);
  fields.push_back(numeric("reserves_months", "origination"));
  fields.push_back(numeric("vintage", "origination"));
  FieldSpec region;
  region.name = "region";
  region.type = FieldType::kCategorical;
  region.group = "origination";
  for (int r = 0; r < num_regions; ++r) region.levels.push_back("R" + std::to_string(r));
  fields.push_back(region);
  for (const auto& name : dynamic_field_names()) {
    std::string group = "performance";
    if (name == "national_rate" || name == "incentive") group = "national";
    if (name == "unemployment" || name == "hpi_change") group = "regional";
    if (name == "lag_default_rate" || name == "lag_prepay_rate") group = "regional_lagged";
    if (name == "noise") group = "noise";
    fields.push_back(numeric(name, group));
  }
  FieldSpec state;
  state.name = "state";
  state.type = FieldType::kState;
  state.group = "state";
  fields.push_back(state);
  return FeatureSchema(std::move(fields));
}

GroundTruthModel default_ground_truth() {
  GroundTruthModel m;
  const double lo = -30.0;  // effectively impossible but legal
  for (auto& row : m.intercept) row.fill(lo);
  auto set_row = [&](State from, std::initializer_list<std::pair<State, double>> probs) {
    for (const auto& [to, p] : probs) m.intercept[index_of(from)][index_of(to)] = std::log(p);
  };
  using S = State;
  set_row(S::kCurrent, {{S::kCurrent, 0.945}, {S::kDD30, 0.02}, {S::kForeclosure, 0.001}, {S::kREO, 0.0005},
                        {S::kPaidOff, 0.03}});
  set_row(S::kDD30, {{S::kCurrent, 0.35}, {S::kDD30, 0.35}, {S::kDD60, 0.25}, {S::kForeclosure, 0.01},
                     {S::kREO, 0.002}, {S::kPaidOff, 0.02}});
  set_row(S::kDD60, {{S::kCurrent, 0.15}, {S::kDD30, 0.15}, {S::kDD60, 0.3}, {S::kDD90Plus, 0.35},
                     {S::kForeclosure, 0.03}, {S::kREO, 0.003}, {S::kPaidOff, 0.01}});
  set_row(S::kDD90Plus, {{S::kCurrent, 0.05}, {S::kDD30, 0.03}, {S::kDD60, 0.05}, {S::kDD90Plus, 0.6},
                         {S::kForeclosure, 0.2}, {S::kREO, 0.01}, {S::kPaidOff, 0.01}});
  set_row(S::kForeclosure, {{S::kCurrent, 0.03}, {S::kDD30, 0.01}, {S::kDD60, 0.01}, {S::kDD90Plus, 0.05},
                            {S::kForeclosure, 0.8}, {S::kREO, 0.08}, {S::kPaidOff, 0.02}});

  m.standardize = {{"fico", {718.0, 50.0}},        {"ltv", {75.0, 12.0}},
                   {"dti", {35.0, 10.0}},          {"orig_balance", {200000.0, 60000.0}},
                   {"reserves_months", {6.0, 3.0}}, {"incentive", {0.5, 0.5}},
                   {"unemployment", {7.0, 1.0}},   {"hpi_change", {0.0, 0.05}},
                   {"burnout", {2.0, 3.0}},        {"times_30dd_12m", {0.3, 1.0}},
                   {"age", {12.0, 8.0}}};
  const std::optional<State> any;
  const std::optional<State> cur = S::kCurrent;
  auto linear = [&](const char* f, State to, double c, std::optional<State> from) {
    m.terms.push_back({{f}, to, c, from});
  };
  linear("fico", S::kDD30, -1.0, cur);
  linear("ltv", S::kDD30, 0.3, cur);
  linear("dti", S::kDD30, 0.2, cur);
  linear("unemployment", S::kDD30, 0.3, cur);
  linear("times_30dd_12m", S::kDD30, 0.4, cur);
  linear("fico", S::kDD60, -0.5, S::kDD30);
  linear("fico", S::kDD90Plus, -0.5, S::kDD60);
  linear("ltv", S::kForeclosure, 0.3, any);
  linear("hpi_change", S::kForeclosure, -0.3, any);
  linear("incentive", S::kPaidOff, 0.4, any);
  linear("burnout", S::kPaidOff, -0.2, any);
  linear("hpi_change", S::kPaidOff, 0.2, any);
  linear("age", S::kPaidOff, 0.1, any);
  m.terms.push_back({{"fico", "ltv"}, S::kPaidOff, 1.5, cur});
  m.terms.push_back({{"orig_balance", "dti", "reserves_months"}, S::kPaidOff, 1.5, cur});
  m.thresholds.push_back({"incentive", 1.0, S::kPaidOff, 1.0, cur});
  return m;
}

// ---------------------------------------------------------------- panel

namespace {

struct LoanRun {
  State state = State::kCurrent;
  bool done = false;
  std::vector<State> history;  // states of previous months, oldest first
  int burnout = 0;
  std::mt19937_64 rng;
  bool dti_missing = false;
  std::vector<double> rows;            // encoded sample rows
  std::vector<State> from, to;
  std::vector<int> periods;
  std::vector<PerformanceRecord> perf;
};

struct Columns {
  std::size_t fico, ltv, orig_rate, orig_balance, dti, dti_missing, reserves, vintage;
  std::vector<std::size_t> region;
  std::vector<std::size_t> dynamic;
};

}  // namespace

Panel generate_panel(const SyntheticConfig& config) {
  config.validate();
  Panel panel;
  panel.schema = default_loan_schema(config.num_regions);
  panel.truth = config.ground_truth.value_or(default_ground_truth());
  panel.dynamic_fields = dynamic_field_names();
  const FeatureSchema& schema = panel.schema;
  const GroundTruth truth(panel.truth, schema);
  const std::size_t d = schema.dim();
  const int H = config.horizon;

  panel.macro = simulate_macro(config.macro, H + 1, config.num_regions, derive_seed(config.seed, {0x3ac7}));
  const MacroPath& macro = panel.macro;

  Columns col{};
  col.fico = schema.require_column("fico");
  col.ltv = schema.require_column("ltv");
  col.orig_rate = schema.require_column("orig_rate");
  col.orig_balance = schema.require_column("orig_balance");
  col.dti = schema.require_column("dti");
  col.dti_missing = schema.require_column("dti_missing");
  col.reserves = schema.require_column("reserves_months");
  col.vintage = schema.require_column("vintage");
  for (int r = 0; r < config.num_regions; ++r) col.region.push_back(schema.require_column("region=R" + std::to_string(r)));
  for (const auto& name : panel.dynamic_fields) col.dynamic.push_back(schema.require_column(name));

  const std::size_t N = static_cast<std::size_t>(config.num_loans);
  panel.loans.resize(N);
  std::vector<LoanRun> runs(N);
  const double dti_missing_rate = config.missing_rate.count("dti") ? config.missing_rate.at("dti") : 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    char id[32];
    std::snprintf(id, sizeof id, "L%07zu", n);
    StaticLoan& loan = panel.loans[n];
    loan.loan_id = id;
    const std::uint64_t key = fnv1a64(loan.loan_id);
    std::mt19937_64 srng(derive_seed(config.seed, {key, 1}));
    loan.region = std::uniform_int_distribution<int>(0, config.num_regions - 1)(srng);
    const int start = std::uniform_int_distribution<int>(0, config.origination_window - 1)(srng);
    loan.vintage = config.start_period + start;
    loan.fico = draw(srng, config.fico);
    loan.ltv = draw(srng, config.ltv);
    loan.orig_balance = draw(srng, config.balance);
    loan.reserves_months = draw(srng, config.reserves);
    const double dti = draw(srng, config.dti);
    loan.orig_rate = macro.national_rate[static_cast<std::size_t>(start)] + draw(srng, config.rate_spread);
    runs[n].dti_missing = std::uniform_real_distribution<double>(0.0, 1.0)(srng) < dti_missing_rate;
    loan.dti = dti;  // true value; masked below for emission
    runs[n].rng.seed(derive_seed(config.seed, {key, 2}));
  }

  std::vector<double> lag_default(static_cast<std::size_t>(config.num_regions), config.initial_default_rate);
  std::vector<double> lag_prepay(static_cast<std::size_t>(config.num_regions), config.initial_prepay_rate);

  // Fills the true (unmasked) encoded row of loan n at panel month t.
  auto fill_row = [&](std::size_t n, int t, std::vector<double>& row, std::vector<double>& dyn, double noise) {
    const StaticLoan& loan = panel.loans[n];
    const LoanRun& run = runs[n];
    const int start = loan.vintage - config.start_period;
    std::fill(row.begin(), row.end(), 0.0);
    row[col.fico] = loan.fico;
    row[col.ltv] = loan.ltv;
    row[col.orig_rate] = loan.orig_rate;
    row[col.orig_balance] = loan.orig_balance;
    row[col.dti] = *loan.dti;
    row[col.reserves] = loan.reserves_months;
    row[col.vintage] = loan.vintage;
    row[col.region[static_cast<std::size_t>(loan.region)]] = 1.0;
    const auto r = static_cast<std::size_t>(loan.region);
    const auto tt = static_cast<std::size_t>(t);
    const int age = t - start;
    std::array<int, 5> counts{};
    const std::size_t window = std::min<std::size_t>(run.history.size(), kCounterWindow);
    for (std::size_t k = run.history.size() - window; k < run.history.size(); ++k) {
      const int s = index_of(run.history[k]);
      if (s < 5) ++counts[static_cast<std::size_t>(s)];
    }
    dyn = {static_cast<double>(age),
           remaining_balance_fraction(loan.orig_rate, config.term_months, age),
           loan.orig_rate - macro.national_rate[tt],
           macro.national_rate[tt],
           macro.unemployment[r][tt],
           macro.hpi[r][tt] / macro.hpi[r][static_cast<std::size_t>(start)] - 1.0,
           lag_default[r],
           lag_prepay[r],
           static_cast<double>(counts[0]),
           static_cast<double>(counts[1]),
           static_cast<double>(counts[2]),
           static_cast<double>(counts[3]),
           static_cast<double>(counts[4]),
           static_cast<double>(run.burnout),
           noise};
    for (std::size_t k = 0; k < dyn.size(); ++k) row[col.dynamic[k]] = dyn[k];
    set_state(schema, row, run.state);
  };

  auto mask_row = [&](std::size_t n, std::vector<double>& row) {
    if (runs[n].dti_missing) {
      row[col.dti] = 0.0;
      row[col.dti_missing] = 1.0;
    }
  };

  auto perf_record = [&](std::size_t n, int t, std::vector<double> dyn) {
    return PerformanceRecord{panel.loans[n].loan_id, config.start_period + t, runs[n].state, std::move(dyn)};
  };

  const std::size_t incentive_slot = 2;
  std::vector<State> next(N, State::kCurrent);
  std::vector<char> active(N, 0);
  for (int t = 0; t < H; ++t) {
    for (std::size_t n = 0; n < N; ++n)
      active[n] = !runs[n].done && (panel.loans[n].vintage - config.start_period) <= t;

#pragma omp parallel
    {
      std::vector<double> row(d), dyn;
#pragma omp for schedule(dynamic, 64)
      for (std::size_t n = 0; n < N; ++n) {
        if (!active[n]) continue;
        LoanRun& run = runs[n];
        std::normal_distribution<double> normal(0.0, 1.0);
        const double noise = normal(run.rng);
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(run.rng);
        fill_row(n, t, row, dyn, noise);
        const Probs p = truth.probs(row, run.state);
        int k = 0;
        double acc = p[0];
        while (k + 1 < kNumStates && u >= acc) acc += p[static_cast<std::size_t>(++k)];
        while (p[static_cast<std::size_t>(k)] == 0.0) --k;  // guards u at the rounding edge
        next[n] = static_cast<State>(k);
        const double incentive = dyn[incentive_slot];
        mask_row(n, row);
        run.rows.insert(run.rows.end(), row.begin(), row.end());
        run.from.push_back(run.state);
        run.to.push_back(next[n]);
        run.periods.push_back(config.start_period + t);
        run.perf.push_back(perf_record(n, t, dyn));

        run.history.push_back(run.state);
        if (incentive > config.burnout_incentive && next[n] != State::kPaidOff) ++run.burnout;
        run.state = next[n];
        const bool terminal = is_absorbing(run.state) || t + 1 == H;
        if (terminal) {
          // Final status row; carries month t+1 covariates but yields no sample.
          const double tail_noise = normal(run.rng);
          fill_row(n, t + 1, row, dyn, tail_noise);
          run.perf.push_back(perf_record(n, t + 1, dyn));
          run.done = true;
        }
      }
    }

    // Sequential regional reduction feeding month t+1's lagged rates.
    std::vector<double> active_count(lag_default.size(), 0.0), defaults(lag_default.size(), 0.0),
        prepays(lag_default.size(), 0.0);
    for (std::size_t n = 0; n < N; ++n) {
      if (!active[n]) continue;
      const auto r = static_cast<std::size_t>(panel.loans[n].region);
      active_count[r] += 1.0;
      if (next[n] == State::kForeclosure || next[n] == State::kREO) defaults[r] += 1.0;
      if (next[n] == State::kPaidOff) prepays[r] += 1.0;
    }
    for (std::size_t r = 0; r < lag_default.size(); ++r) {
      if (active_count[r] == 0.0) continue;
      lag_default[r] = defaults[r] / active_count[r];
      lag_prepay[r] = prepays[r] / active_count[r];
    }
  }

  DesignSetBuilder builder(d);
  for (std::size_t n = 0; n < N; ++n) {
    LoanRun& run = runs[n];
    for (std::size_t i = 0; i < run.from.size(); ++i)
      builder.add(std::span<const double>(run.rows.data() + i * d, d), run.from[i], run.to[i], run.periods[i],
                  panel.loans[n].loan_id);
    for (auto& rec : run.perf) panel.performance.push_back(std::move(rec));
    if (run.dti_missing) panel.loans[n].dti.reset();
  }
  panel.samples = std::move(builder).build();
  return panel;
}

void write_static_csv(std::ostream& out, const Panel& panel) {
  out << "loan_id,region,vintage,fico,ltv,orig_rate,orig_balance,dti,reserves_months\n";
  for (const auto& l : panel.loans) {
    out << l.loan_id << ",R" << l.region << ',' << l.vintage << ',' << format_double(l.fico) << ','
        << format_double(l.ltv) << ',' << format_double(l.orig_rate) << ',' << format_double(l.orig_balance) << ','
        << (l.dti ? format_double(*l.dti) : std::string()) << ',' << format_double(l.reserves_months) << '\n';
  }
}

void write_performance_csv(std::ostream& out, const Panel& panel) {
  out << "loan_id,period,status";
  for (const auto& f : panel.dynamic_fields) out << ',' << f;
  out << '\n';
  for (const auto& r : panel.performance) {
    out << r.loan_id << ',' << r.period << ',' << state_name(r.status);
    for (double v : r.dynamic) out << ',' << format_double(v);
    out << '\n';
  }
}

void write_macro_csv(std::ostream& out, const MacroPath& path, int start_period) {
  out << "period,national_rate";
  for (std::size_t r = 0; r < path.unemployment.size(); ++r) out << ",unemployment_R" << r << ",hpi_R" << r;
  out << '\n';
  for (int t = 0; t < path.months; ++t) {
    const auto tt = static_cast<std::size_t>(t);
    out << start_period + t << ',' << format_double(path.national_rate[tt]);
    for (std::size_t r = 0; r < path.unemployment.size(); ++r)
      out << ',' << format_double(path.unemployment[r][tt]) << ',' << format_double(path.hpi[r][tt]);
    out << '\n';
  }
}

}  // namespace loanrisk
