#include "loanrisk/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <random>

#include "loanrisk/errors.hpp"
#include "loanrisk/hashing.hpp"
#include "loanrisk/json_util.hpp"
#include "loanrisk/trainer.hpp"

namespace loanrisk {

ConditioningSet ConditioningSet::make(const DesignSet& data, State u, std::size_t cap, std::uint64_t seed) {
  ConditioningSet c;
  c.u = u;
  c.rows = data.rows_in_state(u);
  c.population = c.rows.size();
  if (cap > 0 && c.rows.size() > cap) {
    std::mt19937_64 rng(derive_seed(seed, {0xc0d5, static_cast<std::uint64_t>(index_of(u))}));
    portable_shuffle(c.rows, rng);
    c.rows.resize(cap);
    std::sort(c.rows.begin(), c.rows.end());
  }
  return c;
}

RowMatrix ConditioningSet::gather(const DesignSet& data) const {
  if (rows.empty()) throw DataError("no samples in state " + std::string(state_name(u)));
  RowMatrix x(static_cast<Eigen::Index>(rows.size()), data.x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) x.row(static_cast<Eigen::Index>(r)) = data.x.row(static_cast<Eigen::Index>(rows[r]));
  return x;
}

std::string_view to_string(Probe p) { return p == Probe::kLogit ? "logit" : "probability"; }

Probe parse_probe(std::string_view name) {
  if (name == "probability" || name == "prob") return Probe::kProbability;
  if (name == "logit") return Probe::kLogit;
  throw ConfigError("probe", "expected probability or logit, got '" + std::string(name) + "'");
}

ScalarBatchFn make_probe(const TransitionModel& model, State v, Probe probe) {
  const Eigen::Index col = index_of(v);
  if (probe == Probe::kLogit) {
    return [&model, col](const RowMatrix& x, Eigen::VectorXd& out) {
      RowMatrix z;
      model.logits(x, z);
      out = z.col(col);
    };
  }
  return [&model, col](const RowMatrix& x, Eigen::VectorXd& out) {
    RowMatrix p;
    model.predict(x, p);
    out = p.col(col);
  };
}

namespace {

void require_rows(const RowMatrix& x) {
  if (x.rows() == 0) throw DataError("empty conditioning set");
}

void check_column(const RowMatrix& x, std::size_t c) {
  if (static_cast<Eigen::Index>(c) >= x.cols()) throw DataError("feature index " + std::to_string(c) + " out of range");
}

struct Shift {
  std::size_t col;
  double delta;
};

Eigen::VectorXd eval_shifted(const ScalarBatchFn& f, const RowMatrix& x, std::initializer_list<Shift> shifts) {
  RowMatrix xs = x;
  for (const Shift& s : shifts) xs.col(static_cast<Eigen::Index>(s.col)).array() += s.delta;
  Eigen::VectorXd out;
  f(xs, out);
  return out;
}

Eigen::VectorXd eval_base(const ScalarBatchFn& f, const RowMatrix& x) {
  Eigen::VectorXd out;
  f(x, out);
  return out;
}

double mean_abs_second(const Eigen::VectorXd& f00, const Eigen::VectorXd& f10, const Eigen::VectorXd& f01,
                       const Eigen::VectorXd& f11) {
  double sum = 0.0;
  for (Eigen::Index r = 0; r < f00.size(); ++r) sum += std::abs((f11[r] + f00[r]) - (f10[r] + f01[r]));
  return sum / static_cast<double>(f00.size());
}

double sum3(double a, double b, double c) {
  if (a > b) std::swap(a, b);
  if (b > c) std::swap(b, c);
  if (a > b) std::swap(a, b);
  return (a + b) + c;
}

double mean_abs_third(ThirdOrderScheme scheme, const Eigen::VectorXd& f000, const Eigen::VectorXd& f100,
                      const Eigen::VectorXd& f010, const Eigen::VectorXd& f001, const Eigen::VectorXd& f110,
                      const Eigen::VectorXd& f101, const Eigen::VectorXd& f011, const Eigen::VectorXd& f111) {
  double sum = 0.0;
  for (Eigen::Index r = 0; r < f000.size(); ++r) {
    double d;
    if (scheme == ThirdOrderScheme::kEightPoint) {
      d = (f111[r] + sum3(f100[r], f010[r], f001[r])) - (f000[r] + sum3(f110[r], f101[r], f011[r]));
    } else {
      d = (f111[r] + 2.0 * f000[r]) - sum3(f110[r], f101[r], f011[r]);
    }
    sum += std::abs(d);
  }
  return sum / static_cast<double>(f000.size());
}

}  // namespace

std::vector<double> sensitivity_profile(const TransitionModel& model, const RowMatrix& x, State v) {
  require_rows(x);
  const auto p = static_cast<std::size_t>(x.cols());
  std::vector<double> out(p, 0.0);
  if (model.has_input_gradient()) {
    RowMatrix g;
    model.input_gradient(x, v, g);
    for (Eigen::Index r = 0; r < g.rows(); ++r)
      for (std::size_t j = 0; j < p; ++j) out[j] += std::abs(g(r, static_cast<Eigen::Index>(j)));
  } else {
    // Central differences for models without an analytic input gradient.
    const double h = 1e-5;
    const ScalarBatchFn f = make_probe(model, v, Probe::kProbability);
    for (std::size_t j = 0; j < p; ++j) {
      const Eigen::VectorXd up = eval_shifted(f, x, {{j, h}});
      const Eigen::VectorXd dn = eval_shifted(f, x, {{j, -h}});
      for (Eigen::Index r = 0; r < x.rows(); ++r) out[j] += std::abs((up[r] - dn[r]) / (2 * h));
    }
  }
  for (double& o : out) o /= static_cast<double>(x.rows());
  return out;
}

double sensitivity(const TransitionModel& model, const DesignSet& data, const ConditioningSet& cond, State v,
                   std::size_t j) {
  const RowMatrix x = cond.gather(data);
  check_column(x, j);
  return sensitivity_profile(model, x, v)[j];
}

double interaction2(const ScalarBatchFn& f, const RowMatrix& x, std::size_t i, std::size_t j, double di, double dj) {
  require_rows(x);
  check_column(x, i);
  check_column(x, j);
  if (i == j) throw DataError("interaction2 needs two distinct features");
  const Eigen::VectorXd f00 = eval_base(f, x);
  const Eigen::VectorXd f10 = eval_shifted(f, x, {{i, di}});
  const Eigen::VectorXd f01 = eval_shifted(f, x, {{j, dj}});
  const Eigen::VectorXd f11 = eval_shifted(f, x, {{i, di}, {j, dj}});
  return mean_abs_second(f00, f10, f01, f11);
}

double interaction3(const ScalarBatchFn& f, const RowMatrix& x, std::size_t i, std::size_t j, std::size_t k,
                    double di, double dj, double dk, ThirdOrderScheme scheme) {
  require_rows(x);
  check_column(x, i);
  check_column(x, j);
  check_column(x, k);
  if (i == j || i == k || j == k) throw DataError("interaction3 needs three distinct features");
  const Eigen::VectorXd f000 = eval_base(f, x);
  const Eigen::VectorXd f100 = eval_shifted(f, x, {{i, di}});
  const Eigen::VectorXd f010 = eval_shifted(f, x, {{j, dj}});
  const Eigen::VectorXd f001 = eval_shifted(f, x, {{k, dk}});
  const Eigen::VectorXd f110 = eval_shifted(f, x, {{i, di}, {j, dj}});
  const Eigen::VectorXd f101 = eval_shifted(f, x, {{i, di}, {k, dk}});
  const Eigen::VectorXd f011 = eval_shifted(f, x, {{j, dj}, {k, dk}});
  const Eigen::VectorXd f111 = eval_shifted(f, x, {{i, di}, {j, dj}, {k, dk}});
  return mean_abs_third(scheme, f000, f100, f010, f001, f110, f101, f011, f111);
}

double interaction2(const TransitionModel& model, const DesignSet& data, const ConditioningSet& cond, State v,
                    std::size_t i, std::size_t j, double di, double dj, Probe probe) {
  return interaction2(make_probe(model, v, probe), cond.gather(data), i, j, di, dj);
}

double interaction3(const TransitionModel& model, const DesignSet& data, const ConditioningSet& cond, State v,
                    std::size_t i, std::size_t j, std::size_t k, double di, double dj, double dk, Probe probe,
                    ThirdOrderScheme scheme) {
  return interaction3(make_probe(model, v, probe), cond.gather(data), i, j, k, di, dj, dk, scheme);
}

SensitivityReport rank_report(std::vector<RankedItem> items, std::optional<std::size_t> top_k) {
  SensitivityReport rep;
  rep.degenerate = std::all_of(items.begin(), items.end(), [](const RankedItem& it) { return it.value == 0.0; });
  std::stable_sort(items.begin(), items.end(),
                   [](const RankedItem& a, const RankedItem& b) { return a.value > b.value; });
  if (top_k && *top_k < items.size()) items.resize(*top_k);
  rep.items = std::move(items);
  return rep;
}

void write_report_csv(std::ostream& out, const SensitivityReport& report, const FeatureSchema& schema) {
  for (const auto& [key, value] : report.metadata.items())
    out << "# " << key << ": " << (value.is_string() ? value.get<std::string>() : value.dump()) << '\n';
  out << "# degenerate: " << (report.degenerate ? "true" : "false") << '\n';
  out << "rank,features,value\n";
  for (std::size_t r = 0; r < report.items.size(); ++r) {
    std::string names;
    for (std::size_t f : report.items[r].features) {
      if (!names.empty()) names += " x ";
      names += f < schema.dim() ? schema.columns()[f].name : std::to_string(f);
    }
    out << r + 1 << ',' << csv_escape(names) << ',' << format_double(report.items[r].value) << '\n';
  }
}

std::vector<std::size_t> analysis_columns(const FeatureSchema& schema) {
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < schema.dim(); ++c)
    if (!schema.is_state_column(c)) cols.push_back(c);
  return cols;
}

namespace {

nlohmann::json scan_metadata(const ScanOptions& opt, std::size_t n, const char* kind) {
  nlohmann::json m;
  m["analysis"] = kind;
  m["v"] = std::string(state_name(opt.v));
  m["probe"] = std::string(to_string(opt.probe));
  m["delta"] = opt.delta;
  m["samples"] = n;
  return m;
}

}  // namespace

SensitivityReport sensitivity_scan(const TransitionModel& model, const RowMatrix& x,
                                   const std::vector<std::size_t>& columns, const ScanOptions& opt) {
  const std::vector<double> prof = sensitivity_profile(model, x, opt.v);
  std::vector<RankedItem> items;
  for (std::size_t c : columns) {
    check_column(x, c);
    items.push_back({{c}, prof[c]});
  }
  SensitivityReport rep = rank_report(std::move(items));
  rep.metadata = scan_metadata(opt, static_cast<std::size_t>(x.rows()), "sensitivity");
  return rep;
}

SensitivityReport pair_scan(const TransitionModel& model, const RowMatrix& x, const std::vector<std::size_t>& columns,
                            const ScanOptions& opt) {
  require_rows(x);
  const ScalarBatchFn f = make_probe(model, opt.v, opt.probe);
  const double d = opt.delta;
  const Eigen::VectorXd f00 = eval_base(f, x);
  std::vector<Eigen::VectorXd> single;
  for (std::size_t c : columns) {
    check_column(x, c);
    single.push_back(eval_shifted(f, x, {{c, d}}));
  }
  std::vector<RankedItem> items;
  for (std::size_t a = 0; a < columns.size(); ++a)
    for (std::size_t b = a + 1; b < columns.size(); ++b) {
      const Eigen::VectorXd f11 = eval_shifted(f, x, {{columns[a], d}, {columns[b], d}});
      items.push_back({{columns[a], columns[b]}, mean_abs_second(f00, single[a], single[b], f11)});
    }
  SensitivityReport rep = rank_report(std::move(items));
  rep.metadata = scan_metadata(opt, static_cast<std::size_t>(x.rows()), "pair");
  return rep;
}

SensitivityReport triple_scan(const TransitionModel& model, const RowMatrix& x,
                              const std::vector<std::size_t>& columns, const ScanOptions& opt) {
  require_rows(x);
  const SensitivityReport sens = sensitivity_scan(model, x, columns, opt);
  std::vector<std::size_t> top;
  for (std::size_t r = 0; r < sens.items.size() && top.size() < opt.top_m; ++r) top.push_back(sens.items[r].features[0]);
  std::sort(top.begin(), top.end());

  const ScalarBatchFn f = make_probe(model, opt.v, opt.probe);
  const double d = opt.delta;
  const std::size_t m = top.size();
  const Eigen::VectorXd f000 = eval_base(f, x);
  std::vector<Eigen::VectorXd> single(m);
  for (std::size_t a = 0; a < m; ++a) single[a] = eval_shifted(f, x, {{top[a], d}});
  std::map<std::pair<std::size_t, std::size_t>, Eigen::VectorXd> pair;
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = a + 1; b < m; ++b) pair[{a, b}] = eval_shifted(f, x, {{top[a], d}, {top[b], d}});

  std::vector<RankedItem> items;
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = a + 1; b < m; ++b)
      for (std::size_t c = b + 1; c < m; ++c) {
        const Eigen::VectorXd f111 = eval_shifted(f, x, {{top[a], d}, {top[b], d}, {top[c], d}});
        const double value = mean_abs_third(opt.scheme, f000, single[a], single[b], single[c], pair.at({a, b}),
                                            pair.at({a, c}), pair.at({b, c}), f111);
        items.push_back({{top[a], top[b], top[c]}, value});
      }
  SensitivityReport rep = rank_report(std::move(items));
  rep.metadata = scan_metadata(opt, static_cast<std::size_t>(x.rows()), "triple");
  rep.metadata["scheme"] = opt.scheme == ThirdOrderScheme::kEightPoint ? "8-point" : "5-point";
  rep.metadata["top_m"] = opt.top_m;
  return rep;
}

double leave_one_out_loss(const TransitionModel& model, const DesignSet& test, const std::vector<std::size_t>& columns) {
  DesignSet dropped = test;
  for (std::size_t c : columns) {
    if (c >= dropped.dim()) throw DataError("feature index " + std::to_string(c) + " out of range");
    dropped.x.col(static_cast<Eigen::Index>(c)).setZero();
  }
  return nll_loss(model, dropped);
}

LooReport leave_one_out_report(const TransitionModel& model, const DesignSet& test, const FeatureSchema& schema) {
  LooReport rep;
  rep.baseline = nll_loss(model, test);
  for (const FieldSpec& field : schema.fields()) {
    if (field.type == FieldType::kState) continue;
    LooEntry e;
    e.name = field.name;
    e.columns = schema.columns_of_field(field.name);
    e.loss = leave_one_out_loss(model, test, e.columns);
    e.increase = e.loss - rep.baseline;
    rep.entries.push_back(std::move(e));
  }
  return rep;
}

void write_loo_csv(std::ostream& out, const LooReport& report) {
  out << "dropped,loss,increase\n";
  out << "(none)," << format_double(report.baseline) << ",0\n";
  for (const LooEntry& e : report.entries)
    out << csv_escape(e.name) << ',' << format_double(e.loss) << ',' << format_double(e.increase) << '\n';
}

std::vector<double> average_row(const DesignSet& data, const FeatureSchema& schema, const NormalizationStats& stats,
                                 State u) {
  if (data.empty()) throw DataError("average_row: no samples");
  std::vector<double> row(data.dim());
  for (std::size_t c = 0; c < row.size(); ++c) row[c] = data.x.col(static_cast<Eigen::Index>(c)).mean();
  set_state_normalized(schema, stats, row, u);
  return row;
}

PdpTable partial_dependence(const TransitionModel& model, const std::vector<double>& base,
                            const std::vector<PdpAxis>& axes, const FeatureSchema& schema,
                            const NormalizationStats& stats) {
  if (axes.empty() || axes.size() > 3) throw ConfigError("pdp.features", "partial dependence takes 1 to 3 features");
  if (base.size() != model.input_dim()) throw DataError("partial_dependence: base vector has the wrong dimension");
  PdpTable t;
  std::size_t points = 1;
  for (const PdpAxis& a : axes) {
    if (a.column >= base.size()) throw DataError("partial_dependence: column out of range");
    if (a.grid.empty()) throw ConfigError("pdp.grid", "empty grid for " + schema.columns()[a.column].name);
    t.axis_names.push_back(schema.columns()[a.column].name);
    points *= a.grid.size();
  }
  RowMatrix x(static_cast<Eigen::Index>(points), static_cast<Eigen::Index>(base.size()));
  std::vector<std::size_t> idx(axes.size(), 0);
  for (std::size_t p = 0; p < points; ++p) {
    std::vector<double> coord;
    bool oor = false;
    for (std::size_t c = 0; c < base.size(); ++c) x(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(c)) = base[c];
    for (std::size_t a = 0; a < axes.size(); ++a) {
      const double raw = axes[a].grid[idx[a]];
      const std::size_t col = axes[a].column;
      coord.push_back(raw);
      x(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(col)) = stats.normalize(col, raw);
      if (col < stats.min.size() && (raw < stats.min[col] || raw > stats.max[col])) oor = true;
    }
    t.coords.push_back(std::move(coord));
    t.out_of_range.push_back(oor);
    // last axis varies fastest
    for (std::size_t a = axes.size(); a-- > 0;) {
      if (++idx[a] < axes[a].grid.size()) break;
      idx[a] = 0;
    }
  }
  RowMatrix probs;
  model.predict(x, probs);
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    Probs pr{};
    for (int k = 0; k < kNumStates; ++k) pr[static_cast<std::size_t>(k)] = probs(r, k);
    t.probs.push_back(pr);
  }
  return t;
}

void write_pdp_csv(std::ostream& out, const PdpTable& table) {
  for (const std::string& n : table.axis_names) out << csv_escape(n) << ',';
  for (State s : all_states()) out << "p_" << state_name(s) << ',';
  out << "out_of_range\n";
  for (std::size_t r = 0; r < table.coords.size(); ++r) {
    for (double c : table.coords[r]) out << format_double(c) << ',';
    for (double p : table.probs[r]) out << format_double(p) << ',';
    out << (table.out_of_range[r] ? 1 : 0) << '\n';
  }
}

}  // namespace loanrisk
