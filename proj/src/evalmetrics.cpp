#include "loanrisk/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include <boost/math/distributions/chi_squared.hpp>

#include "loanrisk/errors.hpp"
#include "loanrisk/json_util.hpp"

namespace loanrisk {

RocCurve roc_curve(std::span<const double> scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw DataError("scores and labels differ in length");
  const std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw DataError("AUC needs at least one positive and one negative label");
  for (double s : scores)
    if (std::isnan(s)) throw DataError("NaN score");

  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve roc;
  roc.points.emplace_back(0.0, 0.0);
  // Pairs (positive, negative) with the positive scored higher; ties count 1/2.
  double wins = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i, gp = 0, gn = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      labels[idx[j]] ? ++gp : ++gn;
      ++j;
    }
    wins += static_cast<double>(gn) * static_cast<double>(tp) + 0.5 * static_cast<double>(gp) * static_cast<double>(gn);
    tp += gp;
    fp += gn;
    roc.points.emplace_back(static_cast<double>(fp) / static_cast<double>(neg),
                            static_cast<double>(tp) / static_cast<double>(pos));
    i = j;
  }
  roc.auc = wins / (static_cast<double>(pos) * static_cast<double>(neg));
  return roc;
}

double auc(std::span<const double> scores, const std::vector<bool>& labels) { return roc_curve(scores, labels).auc; }

void write_roc_csv(std::ostream& out, const RocCurve& roc) {
  out << "fpr,tpr\n";
  for (const auto& [f, t] : roc.points) out << format_double(f) << ',' << format_double(t) << '\n';
}

std::optional<double> transition_auc(const TransitionModel& model, const DesignSet& test, State u, State v) {
  if (is_absorbing(u)) return std::nullopt;
  const std::vector<std::size_t> rows = test.rows_in_state(u);
  if (rows.empty()) return std::nullopt;
  const DesignSet sub = test.subset(rows);
  RowMatrix probs;
  model.predict(sub.x, probs);
  std::vector<double> s(sub.size());
  std::vector<bool> l(sub.size());
  std::size_t pos = 0;
  for (std::size_t i = 0; i < sub.size(); ++i) {
    s[i] = probs(static_cast<Eigen::Index>(i), index_of(v));
    l[i] = sub.next_state[i] == v;
    pos += l[i] ? 1 : 0;
  }
  if (pos == 0 || pos == sub.size()) return std::nullopt;
  return auc(s, l);
}

AucMatrix transition_auc_matrix(const TransitionModel& model, const DesignSet& test) {
  AucMatrix m;
  for (State u : all_states()) {
    const auto ui = static_cast<std::size_t>(index_of(u));
    if (is_absorbing(u)) continue;
    const std::vector<std::size_t> rows = test.rows_in_state(u);
    m.samples[ui] = rows.size();
    if (rows.empty()) continue;
    const DesignSet sub = test.subset(rows);
    RowMatrix probs;
    model.predict(sub.x, probs);
    for (State v : all_states()) {
      const auto vi = static_cast<std::size_t>(index_of(v));
      std::vector<double> s(sub.size());
      std::vector<bool> l(sub.size());
      std::size_t pos = 0;
      for (std::size_t i = 0; i < sub.size(); ++i) {
        s[i] = probs(static_cast<Eigen::Index>(i), index_of(v));
        l[i] = sub.next_state[i] == v;
        pos += l[i] ? 1 : 0;
      }
      m.positives[ui][vi] = pos;
      if (pos == 0 || pos == sub.size()) continue;
      m.cell[ui][vi] = auc(s, l);
    }
  }
  return m;
}

nlohmann::json AucMatrix::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (State u : all_states()) {
    const auto ui = static_cast<std::size_t>(index_of(u));
    nlohmann::json row = nlohmann::json::object();
    for (State v : all_states()) {
      const auto vi = static_cast<std::size_t>(index_of(v));
      row[std::string(state_name(v))] = cell[ui][vi] ? nlohmann::json(*cell[ui][vi]) : nlohmann::json(nullptr);
    }
    j[std::string(state_name(u))] = row;
  }
  return j;
}

void AucMatrix::write_csv(std::ostream& out) const {
  out << "from";
  for (State v : all_states()) out << ',' << state_name(v);
  out << '\n';
  for (State u : all_states()) {
    const auto ui = static_cast<std::size_t>(index_of(u));
    out << state_name(u);
    for (State v : all_states()) {
      out << ',';
      if (const auto& c = cell[ui][static_cast<std::size_t>(index_of(v))]) out << format_double(*c);
    }
    out << '\n';
  }
}

double lr_statistic(double loss_null, double loss_alt, double n_samples) {
  return 2.0 * n_samples * (loss_null - loss_alt);
}

LrTest lr_test(double loss_null, double loss_alt, double n_samples, long long params_null, long long params_alt) {
  LrTest t;
  t.statistic = lr_statistic(loss_null, loss_alt, n_samples);
  t.df = params_alt - params_null;
  if (t.df > 0) {
    const boost::math::chi_squared_distribution<double> chi(static_cast<double>(t.df));
    t.p_value = t.statistic <= 0.0 ? 1.0 : boost::math::cdf(boost::math::complement(chi, t.statistic));
  }
  return t;
}

GapStats pool_gap_stats(std::span<const double> mean, std::span<const double> stddev, std::span<const double> actual) {
  if (mean.size() != actual.size() || stddev.size() != actual.size())
    throw DataError("one forecast per pool is required");
  GapStats g;
  if (actual.empty()) return g;
  double abs_sum = 0.0, std_sum = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const double gap = std::abs(mean[i] - actual[i]);
    abs_sum += gap;
    if (stddev[i] > 0.0) {
      std_sum += gap / stddev[i];
    } else if (gap > 0.0) {
      ++g.infinite;
    }
  }
  const double n = static_cast<double>(actual.size());
  g.avg_absolute_gap = abs_sum / n;
  g.avg_standardized_gap = g.infinite > 0 ? std::numeric_limits<double>::infinity() : std_sum / n;
  return g;
}

GapStats pool_gap_stats(std::span<const PoolDistribution> predicted, std::span<const double> actual, State target) {
  std::vector<double> mean, sd;
  for (const PoolDistribution& d : predicted) {
    mean.push_back(d.mean[static_cast<std::size_t>(index_of(target))]);
    sd.push_back(d.stddev(target));
  }
  return pool_gap_stats(mean, sd, actual);
}

}  // namespace loanrisk
