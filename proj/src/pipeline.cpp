#include "loanrisk/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <fstream>
#include <numeric>
#include <random>
#include <unordered_map>

#include "loanrisk/errors.hpp"
#include "loanrisk/hashing.hpp"
#include "loanrisk/json_util.hpp"

namespace loanrisk {
namespace {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

bool is_missing(const std::string& cell) { return cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan"; }

double parse_number(const std::string& cell, std::string_view what) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  while (first < last && *first == ' ') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw DataError(std::string(what) + ": cannot parse '" + cell + "' as a number");
  return v;
}

int parse_period_cell(const std::string& cell, std::string_view what) {
  int y = 0, m = 0;
  char dash = 0;
  if (cell.size() == 7 && std::sscanf(cell.c_str(), "%d%c%d", &y, &dash, &m) == 3 && dash == '-' && m >= 1 && m <= 12)
    return month_index(y, m);
  const double v = parse_number(cell, what);
  if (v != std::floor(v)) throw DataError(std::string(what) + ": period '" + cell + "' is not an integer");
  return static_cast<int>(v);
}

enum class Source { kStatic, kPerformance };

struct FieldPlan {
  const FieldSpec* spec;
  Source source;
  std::size_t cell;
  std::vector<std::size_t> cols;  // schema columns of the field
  std::optional<std::size_t> missing_col;
  std::optional<std::size_t> other_col;
};

enum class Verdict { kKept, kNoSuccessor, kMissingRequired, kIllegal, kExcluded };

struct LoanOutput {
  std::vector<double> rows;
  std::vector<State> from, to;
  std::vector<int> period;
  DropReport report;
};

}  // namespace

nlohmann::json DropReport::to_json() const {
  return {{"raw", raw},
          {"kept", kept},
          {"dropped", dropped()},
          {"no_successor", no_successor},
          {"missing_required", missing_required},
          {"illegal_transition", illegal_transition},
          {"excluded", excluded},
          {"unknown_loan", unknown_loan},
          {"unknown_status", unknown_status},
          {"after_absorption", after_absorption},
          {"unknown_levels", unknown_levels}};
}

EncodeResult encode(const FeatureSchema& schema, const CsvTable& static_table, const CsvTable& performance) {
  const std::size_t d = schema.dim();
  const std::size_t s_id = static_table.require_column("loan_id", "static table");
  const std::size_t p_id = performance.require_column("loan_id", "performance table");
  const std::size_t p_period = performance.require_column("period", "performance table");
  const std::size_t p_status = performance.require_column("status", "performance table");
  const std::optional<std::size_t> p_exclude = performance.column("exclude");

  std::vector<FieldPlan> plans;
  for (const auto& f : schema.fields()) {
    if (f.type == FieldType::kState) continue;
    FieldPlan plan{&f, Source::kStatic, 0, schema.columns_of_field(f.name), std::nullopt, std::nullopt};
    if (auto c = static_table.column(f.name)) {
      plan.cell = *c;
    } else if (auto c2 = performance.column(f.name)) {
      plan.source = Source::kPerformance;
      plan.cell = *c2;
    } else {
      throw DataError("field '" + f.name + "' is in neither the static nor the performance table");
    }
    if (f.missing_indicator) plan.missing_col = schema.require_column(f.name + "_missing");
    if (f.type == FieldType::kCategorical && f.allow_other) plan.other_col = schema.require_column(f.name + "=__other__");
    plans.push_back(std::move(plan));
  }

  std::unordered_map<std::string, std::size_t> loan_index;
  for (std::size_t i = 0; i < static_table.rows.size(); ++i)
    if (!loan_index.emplace(static_table.rows[i][s_id], i).second)
      throw DataError("static table: duplicate loan_id '" + static_table.rows[i][s_id] + "'");

  EncodeResult result;
  DropReport& total = result.report;
  std::vector<std::vector<std::size_t>> perf_rows(static_table.rows.size());
  for (std::size_t r = 0; r < performance.rows.size(); ++r) {
    const auto& row = performance.rows[r];
    auto it = loan_index.find(row[p_id]);
    if (it != loan_index.end()) {
      perf_rows[it->second].push_back(r);
      continue;
    }
    const auto st = parse_state(row[p_status]);
    if (!st) {
      ++total.unknown_status;
    } else if (!is_absorbing(*st)) {
      ++total.raw;
      ++total.unknown_loan;
    }
  }

  std::vector<LoanOutput> outputs(static_table.rows.size());
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 16)
  for (std::size_t li = 0; li < static_table.rows.size(); ++li) {
    try {
      LoanOutput& out = outputs[li];
      const auto& srow = static_table.rows[li];
      std::vector<std::size_t>& idx = perf_rows[li];
      std::vector<int> periods(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k)
        periods[k] = parse_period_cell(performance.rows[idx[k]][p_period], "performance period");
      std::vector<std::size_t> order(idx.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return periods[a] < periods[b]; });

      std::vector<std::optional<State>> status(idx.size());
      std::vector<bool> flagged(idx.size(), false);
      for (std::size_t k = 0; k < order.size(); ++k) {
        const auto& prow = performance.rows[idx[order[k]]];
        status[k] = parse_state(prow[p_status]);
        if (p_exclude && !is_missing(prow[*p_exclude]))
          flagged[k] = parse_number(prow[*p_exclude], "exclude") != 0.0;
      }

      std::vector<double> row(d);
      bool absorbed = false, excluded = false;
      for (std::size_t k = 0; k < order.size(); ++k) {
        if (absorbed) {
          ++out.report.after_absorption;
          continue;
        }
        excluded = excluded || flagged[k];
        if (!status[k]) {
          ++out.report.unknown_status;
          continue;
        }
        const State s = *status[k];
        if (is_absorbing(s)) {
          absorbed = true;
          continue;
        }
        ++out.report.raw;
        const int period = periods[order[k]];
        Verdict verdict = Verdict::kKept;
        State next = s;
        if (excluded) {
          verdict = Verdict::kExcluded;
        } else if (k + 1 == order.size() || periods[order[k + 1]] != period + 1 || !status[k + 1]) {
          verdict = Verdict::kNoSuccessor;
        } else if (flagged[k + 1]) {
          verdict = Verdict::kExcluded;
        } else {
          next = *status[k + 1];
        }

        if (verdict == Verdict::kKept) {
          const auto& prow = performance.rows[idx[order[k]]];
          std::fill(row.begin(), row.end(), 0.0);
          for (const auto& plan : plans) {
            const std::string& cell = plan.source == Source::kStatic ? srow[plan.cell] : prow[plan.cell];
            const FieldSpec& f = *plan.spec;
            if (is_missing(cell)) {
              if (f.required) {
                verdict = Verdict::kMissingRequired;
                break;
              }
              if (plan.missing_col) row[*plan.missing_col] = 1.0;
              continue;
            }
            if (f.type == FieldType::kCategorical) {
              const auto lvl = std::find(f.levels.begin(), f.levels.end(), cell);
              if (lvl != f.levels.end()) {
                row[plan.cols[static_cast<std::size_t>(lvl - f.levels.begin())]] = 1.0;
              } else {
                ++out.report.unknown_levels[f.name + "=" + cell];
                if (plan.other_col) row[*plan.other_col] = 1.0;
              }
            } else {
              row[plan.cols.front()] = parse_number(cell, f.name);
            }
          }
          if (verdict == Verdict::kKept && !is_legal_transition(s, next)) verdict = Verdict::kIllegal;
        }

        switch (verdict) {
          case Verdict::kKept:
            set_state(schema, row, s);
            out.rows.insert(out.rows.end(), row.begin(), row.end());
            out.from.push_back(s);
            out.to.push_back(next);
            out.period.push_back(period);
            ++out.report.kept;
            break;
          case Verdict::kNoSuccessor: ++out.report.no_successor; break;
          case Verdict::kMissingRequired: ++out.report.missing_required; break;
          case Verdict::kIllegal: ++out.report.illegal_transition; break;
          case Verdict::kExcluded: ++out.report.excluded; break;
        }
      }
    } catch (...) {
#pragma omp critical(loanrisk_encode_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  DesignSetBuilder builder(d);
  for (std::size_t li = 0; li < outputs.size(); ++li) {
    const LoanOutput& out = outputs[li];
    for (std::size_t i = 0; i < out.from.size(); ++i)
      builder.add(std::span<const double>(out.rows.data() + i * d, d), out.from[i], out.to[i], out.period[i],
                  static_table.rows[li][s_id]);
    const DropReport& r = out.report;
    total.raw += r.raw;
    total.kept += r.kept;
    total.no_successor += r.no_successor;
    total.missing_required += r.missing_required;
    total.illegal_transition += r.illegal_transition;
    total.excluded += r.excluded;
    total.unknown_status += r.unknown_status;
    total.after_absorption += r.after_absorption;
    for (const auto& [k, v] : r.unknown_levels) total.unknown_levels[k] += v;
  }
  result.data = std::move(builder).build();
  return result;
}

// ---------------------------------------------------------------- splits

nlohmann::json SplitConfig::to_json() const {
  nlohmann::json j = {{"train_end", train_end}, {"valid_end", valid_end}};
  j["test_end"] = test_end ? nlohmann::json(*test_end) : nlohmann::json(nullptr);
  return j;
}

SplitConfig SplitConfig::from_json(const nlohmann::json& j) {
  json_check_keys(j, {"train_end", "valid_end", "test_end"}, "split.");
  SplitConfig c;
  auto period = [&](const char* key, int fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j[key];
    if (v.is_number_integer()) return v.get<int>();
    if (v.is_string()) {
      try {
        return parse_period_cell(v.get<std::string>(), key);
      } catch (const DataError&) {
      }
    }
    throw ConfigError(std::string("split.") + key, "expected a month index or \"YYYY-MM\"");
  };
  c.train_end = period("train_end", c.train_end);
  c.valid_end = period("valid_end", c.valid_end);
  if (j.contains("test_end")) {
    if (j["test_end"].is_null())
      c.test_end.reset();
    else
      c.test_end = period("test_end", 0);
  }
  if (!(c.train_end < c.valid_end)) throw ConfigError("split.valid_end", "must be later than train_end");
  if (c.test_end && !(c.valid_end < *c.test_end)) throw ConfigError("split.test_end", "must be later than valid_end");
  return c;
}

Splits temporal_split(const DesignSet& samples, const SplitConfig& config) {
  if (!(config.train_end < config.valid_end)) throw ConfigError("split.valid_end", "must be later than train_end");
  if (config.test_end && !(config.valid_end < *config.test_end))
    throw ConfigError("split.test_end", "must be later than valid_end");
  std::vector<std::size_t> tr, va, te;
  Splits out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int p = samples.period[i];
    if (p < config.train_end)
      tr.push_back(i);
    else if (p < config.valid_end)
      va.push_back(i);
    else if (!config.test_end || p < *config.test_end)
      te.push_back(i);
    else
      ++out.out_of_range;
  }
  out.train = samples.subset(tr);
  out.valid = samples.subset(va);
  out.test = samples.subset(te);
  if (out.train.empty()) out.warnings.push_back("training split is empty");
  if (out.valid.empty()) out.warnings.push_back("validation split is empty");
  if (out.test.empty()) out.warnings.push_back("test split is empty");
  return out;
}

Splits hash_split(const DesignSet& samples, std::uint64_t seed, std::uint32_t buckets, std::uint32_t train_buckets,
                  std::uint32_t valid_buckets) {
  if (buckets < 1) throw ConfigError("hash.buckets", "must be >= 1");
  if (train_buckets + valid_buckets > buckets)
    throw ConfigError("hash.valid_buckets", "train and validation buckets exceed the bucket count");
  std::vector<std::size_t> tr, va, te;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::uint32_t b = shard_assign(samples.loan_id[i], buckets, seed);
    (b < train_buckets ? tr : b < train_buckets + valid_buckets ? va : te).push_back(i);
  }
  Splits out;
  out.train = samples.subset(tr);
  out.valid = samples.subset(va);
  out.test = samples.subset(te);
  if (out.train.empty()) out.warnings.push_back("training split is empty");
  if (out.valid.empty()) out.warnings.push_back("validation split is empty");
  if (out.test.empty()) out.warnings.push_back("test split is empty");
  return out;
}

int parse_period(const std::string& cell, std::string_view what) { return parse_period_cell(cell, what); }

std::string format_period(int period) {
  const int y = period >= 0 ? period / 12 : -((-period + 11) / 12);
  const int m = period - y * 12 + 1;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02d", y, m);
  return buf;
}

// ---------------------------------------------------------------- normalization

std::uint64_t NormalizationStats::fingerprint() const {
  std::uint64_t h = kFnvOffset;
  for (std::size_t c = 0; c < dim(); ++c) {
    h = fnv1a64_u64(std::bit_cast<std::uint64_t>(mean[c]), h);
    h = fnv1a64_u64(std::bit_cast<std::uint64_t>(scale[c]), h);
    h = fnv1a64_u64(exempt[c] ? 1 : 0, h);
  }
  return h == 0 ? 1 : h;
}

nlohmann::json NormalizationStats::to_json() const {
  return {{"mean", mean}, {"scale", scale}, {"exempt", exempt}, {"guarded", guarded},
          {"min", min},   {"max", max},     {"count", count}};
}

NormalizationStats NormalizationStats::from_json(const nlohmann::json& j) {
  NormalizationStats s;
  try {
    s.mean = j.at("mean").get<std::vector<double>>();
    s.scale = j.at("scale").get<std::vector<double>>();
    s.exempt = j.at("exempt").get<std::vector<bool>>();
    s.guarded = j.at("guarded").get<std::vector<bool>>();
    s.min = j.at("min").get<std::vector<double>>();
    s.max = j.at("max").get<std::vector<double>>();
    s.count = j.at("count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("normalization stats: ") + e.what());
  }
  const std::size_t n = s.mean.size();
  if (s.scale.size() != n || s.exempt.size() != n || s.guarded.size() != n || s.min.size() != n || s.max.size() != n)
    throw FormatError("normalization stats: column vectors differ in length");
  return s;
}

NormalizationStats fit_normalization(const FeatureSchema& schema, const DesignSet& train) {
  if (train.empty()) throw DataError("fit_normalization: training split is empty");
  if (train.normalization != 0) throw DataError("fit_normalization: rows are already normalized");
  if (train.dim() != schema.dim()) throw DataError("fit_normalization: design width does not match the schema");
  const std::size_t d = train.dim();
  const auto n = static_cast<double>(train.size());
  NormalizationStats s;
  s.count = train.size();
  s.mean.resize(d);
  s.scale.resize(d);
  s.exempt.resize(d);
  s.guarded.resize(d);
  s.min.resize(d);
  s.max.resize(d);
  for (std::size_t c = 0; c < d; ++c) {
    const auto col = train.x.col(static_cast<Eigen::Index>(c));
    double mean = col.sum() / n;
    mean += (col.array() - mean).sum() / n;
    const double var = (col.array() - mean).square().sum() / n;
    const double sd = std::sqrt(var);
    s.mean[c] = mean;
    s.exempt[c] = !schema.columns()[c].normalize;
    s.guarded[c] = sd < 1e-12;
    s.scale[c] = s.guarded[c] ? 1.0 : sd;
    s.min[c] = col.minCoeff();
    s.max[c] = col.maxCoeff();
  }
  return s;
}

void normalize_rows(const NormalizationStats& stats, RowMatrix& x) {
  if (static_cast<std::size_t>(x.cols()) != stats.dim()) throw DataError("normalize: width mismatch");
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const auto k = static_cast<std::size_t>(c);
    if (stats.exempt[k]) continue;
    x.col(c) = (x.col(c).array() - stats.mean[k]) / stats.scale[k];
  }
}

void denormalize_rows(const NormalizationStats& stats, RowMatrix& x) {
  if (static_cast<std::size_t>(x.cols()) != stats.dim()) throw DataError("denormalize: width mismatch");
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const auto k = static_cast<std::size_t>(c);
    if (stats.exempt[k]) continue;
    x.col(c) = x.col(c).array() * stats.scale[k] + stats.mean[k];
  }
}

void apply_normalization(const NormalizationStats& stats, DesignSet& data) {
  if (data.normalization != 0)
    throw DataError(data.normalization == stats.fingerprint() ? "rows are already normalized with these statistics"
                                                              : "rows are already normalized with other statistics");
  normalize_rows(stats, data.x);
  data.normalization = stats.fingerprint();
}

DesignSet normalized(const NormalizationStats& stats, const DesignSet& data) {
  DesignSet out = data;
  apply_normalization(stats, out);
  return out;
}

void set_state_normalized(const FeatureSchema& schema, const NormalizationStats& stats, std::span<double> row,
                          State s) {
  if (row.size() != stats.dim()) throw DataError("set_state_normalized: width mismatch");
  const auto& cols = schema.state_columns();
  for (int k = 0; k < kNumStates; ++k) {
    const std::size_t c = cols[static_cast<std::size_t>(k)];
    row[c] = stats.normalize(c, k == index_of(s) ? 1.0 : 0.0);
  }
}

void NormalizingModel::predict(MatrixRef x, RowMatrix& probs) const {
  RowMatrix z = x;
  normalize_rows(*stats_, z);
  inner_->predict(z, probs);
}

void NormalizingModel::logits(MatrixRef x, RowMatrix& out) const {
  RowMatrix z = x;
  normalize_rows(*stats_, z);
  inner_->logits(z, out);
}

void NormalizingModel::input_gradient(MatrixRef x, State v, RowMatrix& grad) const {
  RowMatrix z = x;
  normalize_rows(*stats_, z);
  inner_->input_gradient(z, v, grad);
  for (Eigen::Index c = 0; c < grad.cols(); ++c) {
    const auto k = static_cast<std::size_t>(c);
    if (!stats_->exempt[k]) grad.col(c) /= stats_->scale[k];
  }
}

// ---------------------------------------------------------------- sharding

std::uint32_t shard_assign(std::string_view loan_id, std::uint32_t num_shards, std::uint64_t seed) {
  if (num_shards < 1) throw ConfigError("num_shards", "must be >= 1");
  const std::uint64_t h = mix64(fnv1a64(loan_id, fnv1a64_u64(seed)));
  return static_cast<std::uint32_t>(h % num_shards);
}

nlohmann::json ShardLayout::to_json() const {
  nlohmann::json names = nlohmann::json::array();
  for (const auto& f : files) names.push_back(f.filename().string());
  return {{"format", "loanrisk-shards"}, {"version", kShardFormatVersion}, {"num_shards", num_shards},
          {"seed", seed},                {"files", names},                  {"rows", rows}};
}

ShardLayout ShardLayout::from_json(const nlohmann::json& j, const std::filesystem::path& base) {
  ShardLayout l;
  try {
    if (j.at("format").get<std::string>() != "loanrisk-shards") throw FormatError("layout: not a shard layout");
    if (j.at("version").get<int>() != kShardFormatVersion)
      throw FormatError("layout: version " + std::to_string(j.at("version").get<int>()) + " is not supported");
    l.num_shards = j.at("num_shards").get<std::uint32_t>();
    l.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& f : j.at("files")) l.files.push_back(base / f.get<std::string>());
    l.rows = j.at("rows").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("layout: ") + e.what());
  }
  if (l.files.size() != l.num_shards || l.rows.size() != l.num_shards)
    throw FormatError("layout: file list does not match num_shards");
  return l;
}

ShardLayout write_shards(const DesignSet& data, const FeatureSchema& schema, const NormalizationStats* stats,
                         const std::filesystem::path& dir, std::uint32_t num_shards, std::uint64_t seed) {
  if (data.dim() != schema.dim()) throw DataError("write_shards: design width does not match the schema");
  std::filesystem::create_directories(dir);
  std::vector<std::vector<std::size_t>> members(num_shards);
  for (std::size_t i = 0; i < data.size(); ++i) members[shard_assign(data.loan_id[i], num_shards, seed)].push_back(i);

  ShardLayout layout;
  layout.num_shards = num_shards;
  layout.seed = seed;
  const std::size_t d = data.dim();
  for (std::uint32_t s = 0; s < num_shards; ++s) {
    char name[32];
    std::snprintf(name, sizeof name, "shard-%04u.bin", s);
    const auto path = dir / name;
    std::vector<std::string> loans;
    std::unordered_map<std::string, std::size_t> ordinal;
    std::vector<float> buf;
    buf.reserve(members[s].size() * (d + 4));
    for (std::size_t i : members[s]) {
      auto [it, inserted] = ordinal.emplace(data.loan_id[i], loans.size());
      if (inserted) loans.push_back(data.loan_id[i]);
      if (it->second >= (std::size_t{1} << 24)) throw DataError("write_shards: more than 2^24 loans in one shard");
      buf.push_back(static_cast<float>(data.period[i]));
      buf.push_back(static_cast<float>(index_of(data.state[i])));
      buf.push_back(static_cast<float>(index_of(data.next_state[i])));
      buf.push_back(static_cast<float>(it->second));
      for (std::size_t c = 0; c < d; ++c)
        buf.push_back(static_cast<float>(data.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c))));
    }
    {
      std::ofstream out(path, std::ios::binary);
      if (!out) throw DataError("cannot write " + path.string());
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    nlohmann::json side = {{"format", "loanrisk-shard"},
                           {"version", kShardFormatVersion},
                           {"shard", s},
                           {"num_shards", num_shards},
                           {"seed", seed},
                           {"hash_algorithm", "fnv1a64(le64(seed) || loan_id) -> splitmix64 -> mod"},
                           {"rows", members[s].size()},
                           {"cols", d + 4},
                           {"row_layout", {"period", "state", "next_state", "loan_ordinal", "covariates..."}},
                           {"dtype", "float32-le"},
                           {"normalization", data.normalization},
                           {"schema_hash", schema.hash_hex()},
                           {"schema", schema.to_json()},
                           {"loan_ids", loans}};
    side["stats"] = stats ? stats->to_json() : nlohmann::json(nullptr);
    std::ofstream js(path.string() + ".json");
    js << side.dump(1) << '\n';
    layout.files.push_back(path);
    layout.rows.push_back(members[s].size());
  }
  std::ofstream lj(dir / "layout.json");
  lj << layout.to_json().dump(1) << '\n';
  return layout;
}

ShardLayout read_layout(const std::filesystem::path& dir) {
  std::ifstream in(dir / "layout.json");
  if (!in) throw DataError("cannot open " + (dir / "layout.json").string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "layout.json").string() + ": " + e.what());
  }
  return ShardLayout::from_json(j, dir);
}

DesignSet read_shard(const std::filesystem::path& file) {
  std::ifstream js(file.string() + ".json");
  if (!js) throw DataError("cannot open " + file.string() + ".json");
  nlohmann::json side;
  std::size_t rows = 0, cols = 0;
  std::vector<std::string> loans;
  std::uint64_t norm = 0;
  try {
    js >> side;
    if (side.at("version").get<int>() != kShardFormatVersion)
      throw FormatError(file.string() + ": shard version " + std::to_string(side.at("version").get<int>()) +
                        " is not supported");
    rows = side.at("rows").get<std::size_t>();
    cols = side.at("cols").get<std::size_t>();
    loans = side.at("loan_ids").get<std::vector<std::string>>();
    norm = side.at("normalization").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(file.string() + ".json: " + e.what());
  }
  if (cols < 4) throw FormatError(file.string() + ": row width below 4");
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open " + file.string());
  std::vector<float> buf(rows * cols);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != buf.size() * sizeof(float))
    throw FormatError(file.string() + ": truncated at byte " + std::to_string(in.gcount()) + " of " +
                      std::to_string(buf.size() * sizeof(float)));
  const std::size_t d = cols - 4;
  DesignSetBuilder b(d);
  std::vector<double> row(d);
  for (std::size_t i = 0; i < rows; ++i) {
    const float* r = buf.data() + i * cols;
    const auto ord = static_cast<std::size_t>(r[3]);
    if (ord >= loans.size()) throw FormatError(file.string() + ": loan ordinal out of range in row " + std::to_string(i));
    for (std::size_t c = 0; c < d; ++c) row[c] = r[4 + c];
    b.add(row, state_from_index(static_cast<int>(r[1])), state_from_index(static_cast<int>(r[2])),
          static_cast<int>(r[0]), loans[ord]);
  }
  DesignSet out = std::move(b).build();
  out.normalization = norm;
  return out;
}

// ---------------------------------------------------------------- streaming

MinibatchStream::MinibatchStream(const DesignSet& data, std::size_t batch_size, std::uint32_t num_shards,
                                 std::uint64_t shard_seed, std::size_t buffer_rows)
    : batch_size_(batch_size), buffer_rows_(buffer_rows), total_(data.size()), dim_(data.dim()), memory_(&data) {
  if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  shard_rows_.resize(num_shards == 0 ? 1 : num_shards);
  for (std::size_t i = 0; i < data.size(); ++i)
    shard_rows_[num_shards <= 1 ? 0 : shard_assign(data.loan_id[i], num_shards, shard_seed)].push_back(i);
}

MinibatchStream::MinibatchStream(ShardLayout layout, std::size_t batch_size, std::size_t buffer_rows)
    : batch_size_(batch_size), buffer_rows_(buffer_rows), layout_(std::move(layout)) {
  if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  for (std::size_t s = 0; s < layout_->rows.size(); ++s) {
    shard_offset_.push_back(total_);
    total_ += layout_->rows[s];
  }
  for (std::uint32_t s = 0; s < layout_->num_shards; ++s)
    if (layout_->rows[s] > 0) {
      dim_ = shard_data(s).dim();
      break;
    }
}

const DesignSet& MinibatchStream::shard_data(std::uint32_t s) {
  for (auto& r : resident_)
    if (r.shard == s) return r.data;
  Resident& slot = resident_[resident_next_];
  resident_next_ ^= 1;
  slot.data = read_shard(layout_->files[s]);
  if (slot.data.size() != layout_->rows[s])
    throw FormatError(layout_->files[s].string() + ": row count disagrees with layout.json");
  slot.shard = s;
  return slot.data;
}

void MinibatchStream::start_epoch(std::uint64_t epoch_seed) {
  if (total_ == 0) throw DataError("minibatch stream has no rows");
  std::mt19937_64 rng(derive_seed(epoch_seed, {0x5708a}));
  const std::size_t nshards = memory_ ? shard_rows_.size() : layout_->num_shards;
  std::vector<std::uint32_t> shards(nshards);
  std::iota(shards.begin(), shards.end(), 0U);
  portable_shuffle(shards, rng);
  order_.clear();
  order_.reserve(total_);
  for (std::uint32_t s : shards) {
    const std::size_t n = memory_ ? shard_rows_[s].size() : layout_->rows[s];
    const std::size_t buf = buffer_rows_ == 0 ? std::max<std::size_t>(n, 1) : buffer_rows_;
    for (std::size_t start = 0; start < n; start += buf) {
      std::vector<std::size_t> local(std::min(buf, n - start));
      std::iota(local.begin(), local.end(), start);
      portable_shuffle(local, rng);
      for (std::size_t r : local) order_.emplace_back(s, r);
    }
  }
  cursor_ = 0;
}

bool MinibatchStream::next(Minibatch& out) {
  if (cursor_ >= order_.size()) return false;
  const std::size_t b = std::min(batch_size_, order_.size() - cursor_);
  out.x.resize(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(dim_));
  out.next_state.resize(b);
  out.rows.resize(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto [s, local] = order_[cursor_ + i];
    std::size_t row_id = 0;
    const DesignSet* src = nullptr;
    std::size_t src_row = 0;
    if (memory_) {
      src = memory_;
      src_row = shard_rows_[s][local];
      row_id = src_row;
    } else {
      src = &shard_data(s);
      src_row = local;
      row_id = shard_offset_[s] + local;
    }
    out.x.row(static_cast<Eigen::Index>(i)) = src->x.row(static_cast<Eigen::Index>(src_row));
    out.next_state[i] = src->next_state[src_row];
    out.rows[i] = row_id;
  }
  if (log_on_) log_.insert(log_.end(), out.rows.begin(), out.rows.end());
  cursor_ += b;
  return true;
}

}  // namespace loanrisk
