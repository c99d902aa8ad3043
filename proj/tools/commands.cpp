#include "commands.hpp"

#include <chrono>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>

#include "loanrisk/analysis.hpp"
#include "loanrisk/csv.hpp"
#include "loanrisk/errors.hpp"
#include "loanrisk/evalmetrics.hpp"
#include "loanrisk/hashing.hpp"
#include "loanrisk/json_util.hpp"
#include "loanrisk/model_io.hpp"
#include "loanrisk/pipeline.hpp"
#include "loanrisk/risk.hpp"
#include "loanrisk/synth.hpp"
#include "loanrisk/trainer.hpp"

namespace loanrisk::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

constexpr int kManifestVersion = 1;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::uint64_t h = kFnvOffset;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h = fnv1a64(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
  }
  return h;
}

fs::path resolve(const RunOptions& opt, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() ? q : opt.out / q;
}

void write_file(const fs::path& p, const std::function<void(std::ostream&)>& body) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  body(out);
  if (!out) throw DataError("write failed: " + p.string());
}

void write_json(const fs::path& p, const json& j) {
  write_file(p, [&](std::ostream& out) { out << j.dump(2) << '\n'; });
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

State state_key(const json& c, const char* key, State fallback) {
  if (!c.contains(key)) return fallback;
  const auto name = json_get<std::string>(c, key, "");
  const auto s = parse_state(name);
  if (!s) throw ConfigError(key, "unknown state '" + name + "'");
  return *s;
}

class Manifest {
 public:
  Manifest(const RunOptions& opt, json config) : opt_(opt), start_(std::chrono::steady_clock::now()) {
    j_["format"] = "loanrisk-manifest";
    j_["version"] = kManifestVersion;
    j_["command"] = opt.command;
    config_hash_ = hex64(fnv1a64(config.dump()));
    j_["config_hash"] = config_hash_;
    j_["config"] = std::move(config);
    j_["inputs"] = json::array();
    j_["outputs"] = json::array();
    j_["seeds"] = json::object();
    j_["summary"] = json::object();
    j_["deterministic"] = opt.deterministic;
  }
  void input(const fs::path& p) { j_["inputs"].push_back({{"path", rel(p)}, {"fnv1a64", hex64(file_hash(p))}}); }
  void output(const fs::path& p) { j_["outputs"].push_back({{"path", rel(p)}, {"fnv1a64", hex64(file_hash(p))}}); }
  json& seeds() { return j_["seeds"]; }
  json& summary() { return j_["summary"]; }
  void write() {
    const double wall =
        opt_.deterministic ? 0.0 : std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    j_["wall_time"] = wall;
    write_json(opt_.out / (opt_.command + "-" + config_hash_.substr(0, 8) + ".manifest.json"), j_);
  }

 private:
  std::string rel(const fs::path& p) const { return fs::relative(p, opt_.out).generic_string(); }
  RunOptions opt_;
  std::chrono::steady_clock::time_point start_;
  std::string config_hash_;
  json j_;
};

// ---------------------------------------------------------------- prepared data

struct Prepared {
  FeatureSchema schema;
  NormalizationStats stats;
  DesignSet data;
  std::vector<fs::path> files;
};

Prepared load_prepared(const fs::path& dir, const std::string& split) {
  if (split != "train" && split != "valid" && split != "test")
    throw ConfigError("split", "expected train, valid or test");
  Prepared p;
  p.schema = FeatureSchema::from_json(read_json(dir / "schema.json"));
  p.stats = NormalizationStats::from_json(read_json(dir / "stats.json"));
  const ShardLayout layout = read_layout(dir / split);
  bool first = true;
  for (const fs::path& f : layout.files) {
    DesignSet s = read_shard(f);
    p.files.push_back(f);
    p.data = first ? std::move(s) : DesignSet::concat(p.data, s);
    first = false;
  }
  if (first) p.data.x.resize(0, static_cast<Eigen::Index>(p.schema.dim()));
  if (p.data.dim() != p.schema.dim()) throw DataError(split + ": shard width does not match schema.json");
  if (!p.data.empty() && p.data.normalization != p.stats.fingerprint())
    throw DataError(split + ": shards were normalized with statistics other than stats.json");
  return p;
}

struct LoadedModel {
  std::unique_ptr<EnsembleModel> model;
  fs::path path;
  std::string hash;
};

LoadedModel load_ensemble(const fs::path& path, const Prepared& data) {
  ModelBundle b = load_model_file(path, &data.schema);
  if (!(b.stats == data.stats)) throw DataError(path.string() + ": model normalization differs from the prepared data");
  LoadedModel m;
  m.model = std::make_unique<EnsembleModel>(std::move(b));
  m.path = path;
  m.hash = hex64(file_hash(path));
  return m;
}

std::string data_dir_key(const json& c) { return json_get<std::string>(c, "data", "prepared"); }

ConditioningSet conditioning(const json& c, const DesignSet& data, State u, std::uint64_t seed) {
  const auto cap = json_get<std::size_t>(c, "cap", 100000);
  ConditioningSet cond = ConditioningSet::make(data, u, cap, seed);
  if (cond.rows.empty()) throw DataError("no samples in state " + std::string(state_name(u)));
  return cond;
}

// Raw covariates and realized outcomes of the loans active at one period.
struct PoolData {
  std::vector<LoanSnapshot> loans;
  std::vector<std::optional<State>> realized;  // state at period + horizon when observed
};

PoolData build_pool(const Prepared& p, int period, int horizon) {
  std::map<std::string, std::vector<std::size_t>> by_loan;
  for (std::size_t i = 0; i < p.data.size(); ++i) by_loan[p.data.loan_id[i]].push_back(i);
  PoolData out;
  const auto notional_col = p.schema.column_index("orig_balance");
  const auto frac_col = p.schema.column_index("balance_frac");
  for (const auto& [id, rows] : by_loan) {
    std::optional<std::size_t> at;
    for (std::size_t r : rows)
      if (p.data.period[r] == period) at = r;
    if (!at) continue;
    LoanSnapshot s;
    s.loan_id = id;
    s.state = p.data.state[*at];
    s.covariates.resize(p.schema.dim());
    for (std::size_t c = 0; c < p.schema.dim(); ++c)
      s.covariates[c] = p.stats.denormalize(c, p.data.x(static_cast<Eigen::Index>(*at), static_cast<Eigen::Index>(c)));
    s.notional = notional_col ? s.covariates[*notional_col] : 1.0;
    if (notional_col && frac_col) s.notional *= s.covariates[*frac_col];
    std::optional<State> realized;
    for (std::size_t r : rows) {
      if (p.data.period[r] == period + horizon) realized = p.data.state[r];
      if (p.data.period[r] == period + horizon - 1) realized = p.data.next_state[r];
      if (p.data.period[r] < period + horizon && p.data.period[r] >= period && is_absorbing(p.data.next_state[r]))
        realized = p.data.next_state[r];
    }
    out.loans.push_back(std::move(s));
    out.realized.push_back(realized);
  }
  return out;
}

int pool_period(const json& c, const DesignSet& data) {
  if (c.contains("period")) {
    const auto& v = c["period"];
    if (v.is_number_integer()) return v.get<int>();
    if (v.is_string()) {
      try {
        return parse_period(v.get<std::string>());
      } catch (const DataError&) {
      }
    }
    throw ConfigError("period", "expected a month index or \"YYYY-MM\"");
  }
  if (data.empty()) throw DataError("no samples to form a pool");
  return *std::min_element(data.period.begin(), data.period.end());
}

}  // namespace

json load_config(const RunOptions& opt) {
  if (opt.config_path.empty()) return json::object();
  std::ifstream in(opt.config_path);
  if (!in) throw ConfigError("--config", "cannot open " + opt.config_path.string());
  try {
    json j = json::parse(in);
    if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw ConfigError("--config", std::string("invalid JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------- synth

void run_synth(const RunOptions& opt, const json& config) {
  SyntheticConfig c = SyntheticConfig::from_json(config);
  if (opt.seed) c.seed = *opt.seed;
  c.validate();
  Manifest m(opt, c.to_json());
  m.seeds()["synth"] = c.seed;
  const Panel panel = generate_panel(c);
  const fs::path st = opt.out / "static.csv", perf = opt.out / "performance.csv", macro = opt.out / "macro.csv",
                 schema = opt.out / "schema.json", truth = opt.out / "ground_truth.json";
  write_file(st, [&](std::ostream& o) { write_static_csv(o, panel); });
  write_file(perf, [&](std::ostream& o) { write_performance_csv(o, panel); });
  write_file(macro, [&](std::ostream& o) { write_macro_csv(o, panel.macro, c.start_period); });
  write_json(schema, panel.schema.to_json());
  write_json(truth, panel.truth.to_json());
  for (const auto& p : {st, perf, macro, schema, truth}) m.output(p);
  m.summary()["loans"] = panel.loans.size();
  m.summary()["samples"] = panel.samples.size();
  m.summary()["performance_rows"] = panel.performance.size();
  m.write();
}

// ---------------------------------------------------------------- prepare

void run_prepare(const RunOptions& opt, const json& config) {
  json_check_keys(config, {"static", "performance", "schema", "num_regions", "holdout", "split", "hash", "num_shards",
                           "shard_seed", "output"});
  json eff = config;
  const fs::path st = resolve(opt, json_get<std::string>(config, "static", "static.csv"));
  const fs::path perf = resolve(opt, json_get<std::string>(config, "performance", "performance.csv"));
  const fs::path outdir = resolve(opt, json_get<std::string>(config, "output", "prepared"));
  const auto holdout = json_get<std::string>(config, "holdout", "temporal");
  if (holdout != "temporal" && holdout != "hash") throw ConfigError("holdout", "expected temporal or hash");
  const auto num_shards = json_get<std::uint32_t>(config, "num_shards", 1);
  if (num_shards < 1) throw ConfigError("num_shards", "must be >= 1");
  std::uint64_t shard_seed = json_get<std::uint64_t>(config, "shard_seed", 0);

  FeatureSchema schema;
  std::optional<fs::path> schema_path;
  if (config.contains("schema")) {
    schema_path = resolve(opt, json_get<std::string>(config, "schema", ""));
    schema = FeatureSchema::from_json(read_json(*schema_path));
  } else {
    const int regions = json_get<int>(config, "num_regions", 4);
    if (regions < 1) throw ConfigError("num_regions", "must be >= 1");
    schema = default_loan_schema(regions);
  }

  Splits splits;
  json split_info;
  if (holdout == "temporal") {
    const SplitConfig sc = SplitConfig::from_json(config.value("split", json::object()));
    split_info = sc.to_json();
    split_info["holdout"] = "temporal";
  } else {
    const json h = config.value("hash", json::object());
    json_check_keys(h, {"seed", "buckets", "train_buckets", "valid_buckets"}, "hash.");
    split_info = {{"holdout", "hash"},
                  {"seed", json_get<std::uint64_t>(h, "seed", opt.seed.value_or(0), "hash.")},
                  {"buckets", json_get<std::uint32_t>(h, "buckets", 10, "hash.")},
                  {"train_buckets", json_get<std::uint32_t>(h, "train_buckets", 6, "hash.")},
                  {"valid_buckets", json_get<std::uint32_t>(h, "valid_buckets", 2, "hash.")}};
  }
  if (opt.seed) shard_seed = *opt.seed;
  eff["shard_seed"] = shard_seed;
  Manifest m(opt, eff);
  m.seeds()["shard"] = shard_seed;

  const CsvTable static_table = read_csv_file(st.string());
  const CsvTable perf_table = read_csv_file(perf.string());
  m.input(st);
  m.input(perf);
  if (schema_path) m.input(*schema_path);

  EncodeResult enc = encode(schema, static_table, perf_table);
  if (holdout == "temporal") {
    splits = temporal_split(enc.data, SplitConfig::from_json(config.value("split", json::object())));
  } else {
    splits = hash_split(enc.data, split_info["seed"].get<std::uint64_t>(), split_info["buckets"].get<std::uint32_t>(),
                        split_info["train_buckets"].get<std::uint32_t>(), split_info["valid_buckets"].get<std::uint32_t>());
  }
  if (splits.train.empty()) throw DataError("training split is empty; check the split dates");
  const NormalizationStats stats = fit_normalization(schema, splits.train);
  apply_normalization(stats, splits.train);
  if (!splits.valid.empty()) apply_normalization(stats, splits.valid);
  if (!splits.test.empty()) apply_normalization(stats, splits.test);

  fs::create_directories(outdir);
  write_json(outdir / "schema.json", schema.to_json());
  write_json(outdir / "stats.json", stats.to_json());
  json report = enc.report.to_json();
  report["out_of_range"] = splits.out_of_range;
  report["warnings"] = splits.warnings;
  write_json(outdir / "drop_report.json", report);
  write_json(outdir / "split.json", split_info);
  for (const char* f : {"schema.json", "stats.json", "drop_report.json", "split.json"}) m.output(outdir / f);
  const std::pair<const char*, DesignSet*> parts[] = {
      {"train", &splits.train}, {"valid", &splits.valid}, {"test", &splits.test}};
  for (const auto& [name, data] : parts) {
    const ShardLayout layout = write_shards(*data, schema, &stats, outdir / name, num_shards, shard_seed);
    for (const fs::path& f : layout.files) {
      m.output(f);
      m.output(f.string() + ".json");
    }
    m.output(outdir / name / "layout.json");
    m.summary()[std::string(name) + "_samples"] = data->size();
  }
  m.summary()["dropped"] = enc.report.dropped();
  m.summary()["warnings"] = splits.warnings;
  m.write();
}

// ---------------------------------------------------------------- train

void run_train(const RunOptions& opt, const json& config) {
  json_check_keys(config, {"data", "model", "train", "grid", "ensemble", "refit", "weights", "log"});
  json eff = config;
  json base = config.value("train", json::object());
  if (opt.seed) base["seed"] = *opt.seed;
  eff["train"] = base;
  const TrainConfig tc = TrainConfig::from_json(base);
  tc.validate();
  const auto members = json_get<std::size_t>(config, "ensemble", 1);
  if (members < 1) throw ConfigError("ensemble", "must be >= 1");
  const bool refit = json_get<bool>(config, "refit", false);
  if (refit && members > 1) throw ConfigError("refit", "refit is only supported for a single model");
  const auto weights = json_get<std::string>(config, "weights", "float64");
  if (weights != "float64" && weights != "float32") throw ConfigError("weights", "expected float64 or float32");
  std::vector<TrainConfig> grid;
  if (config.contains("grid")) {
    if (!config["grid"].is_array() || config["grid"].empty()) throw ConfigError("grid", "must be a non-empty array");
    for (std::size_t g = 0; g < config["grid"].size(); ++g) {
      json point = base;
      point.merge_patch(config["grid"][g]);
      try {
        grid.push_back(TrainConfig::from_json(point));
        grid.back().validate();
      } catch (const ConfigError& e) {
        throw ConfigError("grid[" + std::to_string(g) + "]." + e.key(), std::string(e.what()).substr(e.key().size() + 2));
      }
    }
  }

  const fs::path dir = resolve(opt, data_dir_key(config));
  const fs::path model_path = resolve(opt, json_get<std::string>(config, "model", "model.bin"));
  const fs::path log_path = resolve(opt, json_get<std::string>(config, "log", "train_log.csv"));
  Manifest m(opt, eff);
  const Prepared train = load_prepared(dir, "train");
  const Prepared valid = load_prepared(dir, "valid");
  for (const auto& f : train.files) m.input(f);
  for (const auto& f : valid.files) m.input(f);
  const DesignSet* vptr = valid.data.empty() ? nullptr : &valid.data;

  ModelBundle bundle;
  bundle.schema = train.schema;
  bundle.stats = train.stats;
  TrainConfig chosen = tc;
  std::vector<TrainResult> runs;
  if (!grid.empty()) {
    if (!vptr) throw DataError("grid search needs a non-empty validation split");
    GridResult gr = grid_search(grid, train.data, valid.data);
    const fs::path board = opt.out / (model_path.stem().string() + "_leaderboard.csv");
    write_file(board, [&](std::ostream& o) { write_leaderboard_csv(o, gr.leaderboard); });
    m.output(board);
    chosen = gr.best_config;
    m.summary()["grid_best_index"] = gr.best_index;
    if (members == 1 && !refit) runs.push_back(std::move(gr.best));
  }
  m.seeds()["train"] = chosen.seed;
  if (runs.empty()) {
    if (members > 1) {
      EnsembleResult er = train_ensemble(chosen, train.data, vptr, members, chosen.seed);
      if (er.members.empty()) throw DivergenceError(-1, chosen.lr0, "every ensemble member diverged");
      for (std::size_t i = 0; i < er.runs.size(); ++i) runs.push_back(std::move(er.runs[i]));
      bundle.seeds = er.seeds;
      m.summary()["dropped_members"] = er.dropped;
      m.seeds()["members"] = er.seeds;
    } else if (refit) {
      if (!vptr) throw DataError("refit needs a validation split");
      runs.push_back(refit_on_train_plus_valid(chosen, train.data, valid.data));
    } else {
      runs.push_back(sgd_train(chosen, train.data, vptr));
    }
  }
  if (bundle.seeds.empty()) bundle.seeds = {chosen.seed};
  for (const TrainResult& r : runs) bundle.members.push_back(r.params);
  bundle.metadata = {{"train", chosen.to_json()}, {"ensemble", members}, {"refit", refit}};
  json member_info = json::array();
  for (const TrainResult& r : runs)
    member_info.push_back({{"best_epoch", r.best_epoch}, {"best_valid_loss", r.best_valid_loss}, {"steps", r.steps}});
  bundle.metadata["members"] = member_info;

  save_model_file(bundle, model_path, weights == "float32" ? WeightType::kFloat32 : WeightType::kFloat64);
  m.output(model_path);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    fs::path lp = log_path;
    if (runs.size() > 1) lp.replace_filename(log_path.stem().string() + "_" + std::to_string(i) + log_path.extension().string());
    write_file(lp, [&](std::ostream& o) { write_train_log_csv(o, runs[i].log, opt.deterministic); });
    m.output(lp);
  }
  double best = 0.0;
  for (const TrainResult& r : runs) best += r.best_valid_loss / static_cast<double>(runs.size());
  m.summary()["best_valid_loss"] = vptr && !refit ? json(best) : json(nullptr);
  m.summary()["members"] = runs.size();
  m.summary()["parameters"] = bundle.members[0].num_parameters();
  m.summary()["model"] = fs::relative(model_path, opt.out).generic_string();
  m.write();
}

// ---------------------------------------------------------------- eval

void run_eval(const RunOptions& opt, const json& config) {
  json_check_keys(config, {"data", "split", "models", "roc"});
  if (!config.contains("models") || !config["models"].is_array() || config["models"].empty())
    throw ConfigError("models", "list at least one model file");
  const auto split = json_get<std::string>(config, "split", "test");
  Manifest m(opt, config);
  const Prepared p = load_prepared(resolve(opt, data_dir_key(config)), split);
  for (const auto& f : p.files) m.input(f);
  if (p.data.empty()) throw DataError("evaluation split '" + split + "' is empty");

  struct Entry {
    std::string name;
    LoadedModel model;
    LossReport loss;
    std::size_t params = 0;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < config["models"].size(); ++i) {
    const json& spec = config["models"][i];
    std::string name, path;
    if (spec.is_string()) {
      path = spec.get<std::string>();
      name = fs::path(path).stem().string();
    } else if (spec.is_object()) {
      path = json_require<std::string>(spec, "path", "models[" + std::to_string(i) + "].");
      name = json_get<std::string>(spec, "name", fs::path(path).stem().string());
    } else {
      throw ConfigError("models[" + std::to_string(i) + "]", "expected a path or {name, path}");
    }
    Entry e{name, load_ensemble(resolve(opt, path), p), {}, 0};
    m.input(e.model.path);
    e.loss = nll_loss_report(*e.model.model, p.data);
    for (std::size_t k = 0; k < e.model.model->size(); ++k) e.params += e.model.model->member(k).num_parameters();
    entries.push_back(std::move(e));
  }

  json models = json::array();
  for (const Entry& e : entries) {
    const AucMatrix am = transition_auc_matrix(*e.model.model, p.data);
    const fs::path auc_path = opt.out / ("auc_" + e.name + ".csv");
    write_file(auc_path, [&](std::ostream& o) { am.write_csv(o); });
    m.output(auc_path);
    if (json_get<bool>(config, "roc", true)) {
      const auto rows = p.data.rows_in_state(State::kCurrent);
      const DesignSet sub = p.data.subset(rows);
      RowMatrix probs;
      e.model.model->predict(sub.x, probs);
      std::vector<double> s(sub.size());
      std::vector<bool> l(sub.size());
      for (std::size_t i = 0; i < sub.size(); ++i) {
        s[i] = probs(static_cast<Eigen::Index>(i), index_of(State::kPaidOff));
        l[i] = sub.next_state[i] == State::kPaidOff;
      }
      if (std::count(l.begin(), l.end(), true) > 0 && std::count(l.begin(), l.end(), false) > 0) {
        const fs::path roc_path = opt.out / ("roc_" + e.name + "_Current_PaidOff.csv");
        write_file(roc_path, [&](std::ostream& o) { write_roc_csv(o, roc_curve(s, l)); });
        m.output(roc_path);
      }
    }
    models.push_back({{"name", e.name},
                      {"model_hash", e.model.hash},
                      {"loss", e.loss.loss},
                      {"samples", e.loss.count},
                      {"underflows", e.loss.underflows},
                      {"parameters", e.params},
                      {"auc", am.to_json()}});
  }
  json tests = json::array();
  for (std::size_t i = 1; i < entries.size(); ++i) {
    const LrTest t = lr_test(entries[0].loss.loss, entries[i].loss.loss, static_cast<double>(p.data.size()),
                             static_cast<long long>(entries[0].params), static_cast<long long>(entries[i].params));
    tests.push_back({{"null", entries[0].name},
                     {"alt", entries[i].name},
                     {"statistic", t.statistic},
                     {"df", t.df},
                     {"p_value", t.p_value ? json(*t.p_value) : json(nullptr)},
                     {"note", "Wilks approximation, nested-model caveat applies"}});
  }
  const json report = {{"split", split}, {"samples", p.data.size()}, {"models", models}, {"lr_tests", tests}};
  write_json(opt.out / "eval.json", report);
  m.output(opt.out / "eval.json");
  for (const json& e : models) {
    m.summary()["loss"][e["name"].get<std::string>()] = e["loss"];
    m.summary()["auc_current_paidoff"][e["name"].get<std::string>()] = e["auc"]["Current"]["PaidOff"];
  }
  m.write();
}

// ---------------------------------------------------------------- analysis commands

void run_sensitivity(const RunOptions& opt, const json& config) {
  json_check_keys(config, {"data", "split", "model", "u", "v", "cap", "seed", "top_k", "loo"});
  json eff = config;
  const std::uint64_t seed = opt.seed.value_or(json_get<std::uint64_t>(config, "seed", 1));
  eff["seed"] = seed;
  const State u = state_key(config, "u", State::kCurrent), v = state_key(config, "v", State::kPaidOff);
  const auto split = json_get<std::string>(config, "split", "test");
  Manifest m(opt, eff);
  m.seeds()["subsample"] = seed;
  const Prepared p = load_prepared(resolve(opt, data_dir_key(config)), split);
  for (const auto& f : p.files) m.input(f);
  const LoadedModel lm = load_ensemble(resolve(opt, json_get<std::string>(config, "model", "model.bin")), p);
  m.input(lm.path);

  const ConditioningSet cond = conditioning(config, p.data, u, seed);
  const RowMatrix x = cond.gather(p.data);
  ScanOptions so;
  so.v = v;
  SensitivityReport rep = sensitivity_scan(*lm.model, x, analysis_columns(p.schema), so);
  if (config.contains("top_k")) rep = [&] {
    SensitivityReport r = rank_report(rep.items, json_get<std::size_t>(config, "top_k", 0));
    r.metadata = rep.metadata;
    return r;
  }();
  rep.metadata["model_hash"] = lm.hash;
  rep.metadata["u"] = std::string(state_name(u));
  rep.metadata["population"] = cond.population;
  const fs::path out = opt.out / "sensitivity.csv";
  write_file(out, [&](std::ostream& o) { write_report_csv(o, rep, p.schema); });
  m.output(out);
  json top = json::array();
  for (std::size_t i = 0; i < std::min<std::size_t>(5, rep.items.size()); ++i)
    top.push_back({{"feature", p.schema.columns()[rep.items[i].features[0]].name}, {"value", rep.items[i].value}});
  m.summary()["top"] = top;

  if (json_get<bool>(config, "loo", true)) {
    const LooReport loo = leave_one_out_report(*lm.model, p.data, p.schema);
    const fs::path lo = opt.out / "loo.csv";
    write_file(lo, [&](std::ostream& o) { write_loo_csv(o, loo); });
    m.output(lo);
    m.summary()["loo_baseline"] = loo.baseline;
  }
  m.write();
}

void run_interact(const RunOptions& opt, const json& config) {
  json_check_keys(config, {"data", "split", "model", "u", "v", "probe", "scheme", "delta", "top_m", "cap", "seed",
                           "top_k", "orders"});
  json eff = config;
  const std::uint64_t seed = opt.seed.value_or(json_get<std::uint64_t>(config, "seed", 1));
  eff["seed"] = seed;
  ScanOptions so;
  const State u = state_key(config, "u", State::kCurrent);
  so.v = state_key(config, "v", State::kPaidOff);
  so.probe = parse_probe(json_get<std::string>(config, "probe", "probability"));
  const auto scheme = json_get<std::string>(config, "scheme", "8-point");
  if (scheme == "8-point")
    so.scheme = ThirdOrderScheme::kEightPoint;
  else if (scheme == "5-point")
    so.scheme = ThirdOrderScheme::kFivePoint;
  else
    throw ConfigError("scheme", "expected 8-point or 5-point");
  so.delta = json_get<double>(config, "delta", so.delta);
  if (!(so.delta > 0)) throw ConfigError("delta", "must be > 0");
  so.top_m = json_get<std::size_t>(config, "top_m", so.top_m);
  if (so.top_m < 3) throw ConfigError("top_m", "must be >= 3");
  const auto orders = json_get<std::vector<int>>(config, "orders", {2, 3});
  for (int o : orders)
    if (o != 2 && o != 3) throw ConfigError("orders", "entries must be 2 or 3");
  std::optional<std::size_t> top_k;
  if (config.contains("top_k")) top_k = json_get<std::size_t>(config, "top_k", 0);

  const auto split = json_get<std::string>(config, "split", "test");
  Manifest m(opt, eff);
  m.seeds()["subsample"] = seed;
  const Prepared p = load_prepared(resolve(opt, data_dir_key(config)), split);
  for (const auto& f : p.files) m.input(f);
  const LoadedModel lm = load_ensemble(resolve(opt, json_get<std::string>(config, "model", "model.bin")), p);
  m.input(lm.path);
  const ConditioningSet cond = conditioning(config, p.data, u, seed);
  const RowMatrix x = cond.gather(p.data);
  const auto cols = analysis_columns(p.schema);

  auto emit = [&](SensitivityReport rep, const char* file, const char* key) {
    SensitivityReport r = rank_report(rep.items, top_k);
    r.metadata = rep.metadata;
    r.degenerate = rep.degenerate;
    r.metadata["model_hash"] = lm.hash;
    r.metadata["u"] = std::string(state_name(u));
    r.metadata["population"] = cond.population;
    const fs::path out = opt.out / file;
    write_file(out, [&](std::ostream& o) { write_report_csv(o, r, p.schema); });
    m.output(out);
    if (!r.items.empty()) {
      std::string names;
      for (std::size_t f : r.items[0].features) names += (names.empty() ? "" : " x ") + p.schema.columns()[f].name;
      m.summary()[key] = {{"features", names}, {"value", r.items[0].value}};
    }
  };
  for (int o : orders) {
    if (o == 2) emit(pair_scan(*lm.model, x, cols, so), "pairs.csv", "top_pair");
    if (o == 3) emit(triple_scan(*lm.model, x, cols, so), "triples.csv", "top_triple");
  }
  m.write();
}

void run_pdp(const RunOptions& opt, const json& config) {
  json_check_keys(config, {"data", "split", "model", "u", "curves"});
  if (!config.contains("curves") || !config["curves"].is_array() || config["curves"].empty())
    throw ConfigError("curves", "list at least one curve");
  const State u = state_key(config, "u", State::kCurrent);
  const auto split = json_get<std::string>(config, "split", "train");
  Manifest m(opt, config);
  const Prepared p = load_prepared(resolve(opt, data_dir_key(config)), split);
  for (const auto& f : p.files) m.input(f);
  const LoadedModel lm = load_ensemble(resolve(opt, json_get<std::string>(config, "model", "model.bin")), p);
  m.input(lm.path);
  const std::vector<double> base = average_row(p.data, p.schema, p.stats, u);

  for (std::size_t k = 0; k < config["curves"].size(); ++k) {
    const json& curve = config["curves"][k];
    const std::string prefix = "curves[" + std::to_string(k) + "].";
    json_check_keys(curve, {"features", "grid", "points", "name"}, prefix);
    const auto features = json_require<std::vector<std::string>>(curve, "features", prefix);
    if (features.empty() || features.size() > 3) throw ConfigError(prefix + "features", "1 to 3 features");
    const auto points = json_get<std::size_t>(curve, "points", 11, prefix);
    if (points < 1) throw ConfigError(prefix + "points", "must be >= 1");
    std::vector<PdpAxis> axes;
    for (const std::string& f : features) {
      const auto col = p.schema.column_index(f);
      if (!col) throw ConfigError(prefix + "features", "unknown column '" + f + "'");
      PdpAxis a;
      a.column = *col;
      if (curve.contains("grid") && curve["grid"].contains(f)) {
        a.grid = json_get<std::vector<double>>(curve["grid"], f, {}, prefix + "grid.");
      } else {
        const double lo = p.stats.min[*col], hi = p.stats.max[*col];
        for (std::size_t i = 0; i < points; ++i)
          a.grid.push_back(points == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1));
      }
      axes.push_back(std::move(a));
    }
    const PdpTable t = partial_dependence(*lm.model, base, axes, p.schema, p.stats);
    const std::string name = json_get<std::string>(curve, "name", "pdp_" + std::to_string(k), prefix);
    const fs::path out = opt.out / (name + ".csv");
    write_file(out, [&](std::ostream& o) { write_pdp_csv(o, t); });
    m.output(out);
    m.summary()["curves"].push_back({{"name", name}, {"points", t.coords.size()},
                                     {"out_of_range", std::count(t.out_of_range.begin(), t.out_of_range.end(), true)}});
  }
  m.write();
}

// ---------------------------------------------------------------- risk commands

void run_simulate(const RunOptions& opt, const json& config) {
  json_check_keys(config, {"data", "split", "model", "period", "horizon", "num_paths", "seed", "clamp",
                           "update_counters", "macro", "rate_history", "target", "rank_by", "pool_size", "max_pools",
                           "term_months"});
  json eff = config;
  McConfig mc;
  mc.seed = opt.seed.value_or(json_get<std::uint64_t>(config, "seed", 1));
  eff["seed"] = mc.seed;
  mc.horizon = json_get<int>(config, "horizon", 12);
  if (mc.horizon < 1) throw ConfigError("horizon", "must be >= 1");
  mc.num_paths = json_get<std::size_t>(config, "num_paths", 1000);
  if (mc.num_paths < 1) throw ConfigError("num_paths", "must be >= 1");
  mc.clamp = json_get<bool>(config, "clamp", true);
  mc.update_counters = json_get<bool>(config, "update_counters", true);
  if (config.contains("macro")) {
    mc.macro = MacroConfig::from_json(config["macro"]);
    mc.rate_history = json_get<std::vector<double>>(config, "rate_history", {});
  }
  const State target = state_key(config, "target", State::kPaidOff);
  const auto rank_by = json_get<std::string>(config, "rank_by", "orig_rate");
  const auto pool_size = json_get<std::size_t>(config, "pool_size", 1000);
  if (pool_size < 1) throw ConfigError("pool_size", "must be >= 1");
  const auto max_pools = json_get<std::size_t>(config, "max_pools", 0);
  const int term = json_get<int>(config, "term_months", 360);

  const auto split = json_get<std::string>(config, "split", "test");
  Manifest m(opt, eff);
  m.seeds()["simulate"] = mc.seed;
  const Prepared p = load_prepared(resolve(opt, data_dir_key(config)), split);
  for (const auto& f : p.files) m.input(f);
  const LoadedModel lm = load_ensemble(resolve(opt, json_get<std::string>(config, "model", "model.bin")), p);
  m.input(lm.path);
  const auto key_col = p.schema.column_index(rank_by);
  if (!key_col) throw ConfigError("rank_by", "unknown column '" + rank_by + "'");

  const int period = pool_period(config, p.data);
  PoolData pd = build_pool(p, period, mc.horizon);
  if (pd.loans.empty()) throw DataError("no loans observed at period " + format_period(period));
  if (mc.macro && mc.rate_history.size() < 4) {
    // Four months of national rate ending at the pool period, taken from the data.
    const auto rate_col = p.schema.column_index("national_rate");
    if (!rate_col) throw ConfigError("rate_history", "required when the schema has no national_rate column");
    std::map<int, double> rate;
    for (std::size_t i = 0; i < p.data.size(); ++i)
      rate[p.data.period[i]] = p.stats.denormalize(*rate_col, p.data.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(*rate_col)));
    for (int t = period - 3; t <= period; ++t) {
      if (!rate.count(t)) throw ConfigError("rate_history", "data does not cover the four months before the pool period");
      mc.rate_history.push_back(rate[t]);
    }
  }

  const NormalizingModel raw_model(*lm.model, p.stats);
  const CovariateEvolver evolver = CovariateEvolver::standard(p.schema, term);
  std::vector<double> key;
  std::vector<std::string> ids;
  for (const LoanSnapshot& l : pd.loans) {
    key.push_back(l.covariates[*key_col]);
    ids.push_back(l.loan_id);
  }
  RankedPools pools = make_ranked_pools(key, ids, pool_size);
  if (max_pools > 0 && pools.pools.size() > max_pools) pools.pools.resize(max_pools);

  std::vector<PoolDistribution> mc_d, normal_d;
  std::vector<double> actual, mc_actual;
  const fs::path pools_csv = opt.out / "pools.csv";
  std::ostringstream rows;
  rows << "pool,loans,mc_mean,mc_sd,poisson_mean,normal_mean,normal_sd,actual,observed\n";
  for (std::size_t k = 0; k < pools.pools.size(); ++k) {
    std::vector<LoanSnapshot> pool;
    std::size_t observed = 0;
    double count = 0.0;
    for (std::size_t i : pools.pools[k]) {
      pool.push_back(pd.loans[i]);
      if (pd.realized[i]) {
        ++observed;
        count += *pd.realized[i] == target;
      }
    }
    McConfig pc = mc;
    pc.seed = derive_seed(mc.seed, {k});
    const PoolDistribution sim = simulate_pool_mc(raw_model, p.schema, pool, evolver, pc);
    RowMatrix x(static_cast<Eigen::Index>(pool.size()), static_cast<Eigen::Index>(p.schema.dim()));
    for (std::size_t i = 0; i < pool.size(); ++i)
      for (std::size_t c = 0; c < p.schema.dim(); ++c)
        x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = pool[i].covariates[c];
    const auto mats = multi_period_frozen(raw_model, p.schema, x, evolver, mc.horizon, mc.clamp);
    std::vector<Probs> per_loan;
    for (std::size_t i = 0; i < pool.size(); ++i) per_loan.push_back(mats[i].row(pool[i].state));
    const PoolDistribution poi = pool_poisson(per_loan), nor = pool_normal(per_loan);
    if (k == 0) {
      const fs::path paths = opt.out / "mc_paths_pool0.csv";
      write_file(paths, [&](std::ostream& o) { sim.write_paths_csv(o); });
      m.output(paths);
    }
    const auto ti = static_cast<std::size_t>(index_of(target));
    const bool complete = observed == pool.size();
    rows << k << ',' << pool.size() << ',' << format_double(sim.mean[ti]) << ',' << format_double(sim.stddev(target))
         << ',' << format_double(poi.mean[ti]) << ',' << format_double(nor.mean[ti]) << ','
         << format_double(nor.stddev(target)) << ',' << (complete ? format_double(count) : std::string()) << ','
         << observed << '\n';
    if (complete) {
      mc_d.push_back(sim);
      normal_d.push_back(nor);
      actual.push_back(count);
    }
  }
  write_file(pools_csv, [&](std::ostream& o) { o << rows.str(); });
  m.output(pools_csv);

  json report = {{"period", format_period(period)},
                 {"horizon", mc.horizon},
                 {"target", std::string(state_name(target))},
                 {"pools", pools.pools.size()},
                 {"last_pool_short", pools.last_short},
                 {"pools_with_outcomes", actual.size()}};
  if (!actual.empty()) {
    const GapStats gm = pool_gap_stats(mc_d, actual, target), gn = pool_gap_stats(normal_d, actual, target);
    report["monte_carlo_gap"] = {{"avg_absolute_gap", gm.avg_absolute_gap},
                                 {"avg_standardized_gap", gm.avg_standardized_gap}, {"infinite", gm.infinite}};
    report["normal_gap"] = {{"avg_absolute_gap", gn.avg_absolute_gap},
                            {"avg_standardized_gap", gn.avg_standardized_gap}, {"infinite", gn.infinite}};
  }
  write_json(opt.out / "simulate.json", report);
  m.output(opt.out / "simulate.json");
  m.summary() = report;
  m.write();
}

void run_portfolio(const RunOptions& opt, const json& config) {
  json_check_keys(config, {"data", "split", "model", "compare", "period", "horizon", "n_grid", "n_steps", "seed",
                           "term_months"});
  json eff = config;
  const std::uint64_t seed = opt.seed.value_or(json_get<std::uint64_t>(config, "seed", 1));
  eff["seed"] = seed;
  const int horizon = json_get<int>(config, "horizon", 1);
  if (horizon < 1) throw ConfigError("horizon", "must be >= 1");
  const int term = json_get<int>(config, "term_months", 360);
  const auto compare = json_get<std::string>(config, "compare", "random");
  const auto split = json_get<std::string>(config, "split", "test");
  Manifest m(opt, eff);
  m.seeds()["random"] = seed;
  const Prepared p = load_prepared(resolve(opt, data_dir_key(config)), split);
  for (const auto& f : p.files) m.input(f);
  const LoadedModel lm = load_ensemble(resolve(opt, json_get<std::string>(config, "model", "model.bin")), p);
  m.input(lm.path);

  const int period = pool_period(config, p.data);
  PoolData all = build_pool(p, period, horizon);
  std::vector<LoanSnapshot> pool;
  std::vector<State> realized;
  for (std::size_t i = 0; i < all.loans.size(); ++i)
    if (all.realized[i]) {
      pool.push_back(all.loans[i]);
      realized.push_back(*all.realized[i]);
    }
  if (pool.empty()) throw DataError("no loans with observed outcomes at " + format_period(period) + " + horizon");
  std::vector<std::string> ids;
  for (const auto& l : pool) ids.push_back(l.loan_id);

  const CovariateEvolver evolver = CovariateEvolver::standard(p.schema, term);
  const NormalizingModel raw_a(*lm.model, p.stats);
  const std::vector<double> score_a = current_probability(raw_a, p.schema, pool, horizon, evolver);
  std::vector<double> score_b;
  if (compare == "random") {
    for (std::size_t i = 0; i < pool.size(); ++i) score_b.push_back(counter_uniform(seed, fnv1a64(ids[i]), 0, 0));
  } else if (compare.rfind("truth:", 0) == 0) {
    const fs::path tp = resolve(opt, compare.substr(6));
    const GroundTruthModel gtm = GroundTruthModel::from_json(read_json(tp));
    m.input(tp);
    const GroundTruth gt(gtm, p.schema);
    const GroundTruthTransitionModel gmodel(gt, p.schema);
    score_b = current_probability(gmodel, p.schema, pool, horizon, evolver);
  } else {
    const LoadedModel lb = load_ensemble(resolve(opt, compare), p);
    m.input(lb.path);
    const NormalizingModel raw_b(*lb.model, p.stats);
    score_b = current_probability(raw_b, p.schema, pool, horizon, evolver);
  }

  std::vector<std::size_t> grid;
  if (config.contains("n_grid")) {
    grid = json_get<std::vector<std::size_t>>(config, "n_grid", {});
  } else {
    const auto steps = json_get<std::size_t>(config, "n_steps", 20);
    if (steps < 1) throw ConfigError("n_steps", "must be >= 1");
    for (std::size_t s = 0; s <= steps; ++s) grid.push_back(pool.size() * s / steps);
  }
  for (std::size_t n : grid)
    if (n > pool.size()) throw ConfigError("n_grid", "portfolio size " + std::to_string(n) + " exceeds the pool");
  const auto curve = portfolio_comparison_curve(score_a, score_b, ids, realized, grid);

  auto losses = [&](const std::vector<double>& score) {
    const std::vector<std::size_t> order = top_n_by_score(score, ids, pool.size());
    std::vector<double> prefix(pool.size() + 1, 0.0);
    for (std::size_t k = 0; k < order.size(); ++k) {
      const LoanOutcome o{realized[order[k]], std::nullopt, pool[order[k]].notional};
      prefix[k + 1] = prefix[k] + portfolio_loss(std::span<const LoanOutcome>(&o, 1));
    }
    return prefix;
  };
  const auto la = losses(score_a), lb = losses(score_b);
  const fs::path out = opt.out / "portfolio.csv";
  write_file(out, [&](std::ostream& o) {
    o << "n,non_current_a,non_current_b,loss_a,loss_b\n";
    for (const ComparisonRow& r : curve)
      o << r.n << ',' << r.non_current_a << ',' << r.non_current_b << ',' << format_double(la[r.n]) << ','
        << format_double(lb[r.n]) << '\n';
  });
  m.output(out);
  m.summary() = {{"period", format_period(period)}, {"horizon", horizon}, {"pool", pool.size()},
                 {"compare", compare}};
  m.write();
}

// ---------------------------------------------------------------- report

void run_report(const RunOptions& opt, const json& config) {
  json_check_keys(config, {"expect"});
  const auto expect = json_get<std::vector<std::string>>(
      config, "expect", {"synth", "prepare", "train", "eval", "sensitivity", "interact", "simulate"});
  std::vector<fs::path> files;
  if (fs::exists(opt.out))
    for (const auto& e : fs::directory_iterator(opt.out)) {
      const std::string n = e.path().filename().string();
      if (e.is_regular_file() && n.size() > 14 && n.ends_with(".manifest.json")) files.push_back(e.path());
    }
  std::sort(files.begin(), files.end());
  json runs = json::array();
  std::set<std::string> seen;
  std::vector<std::string> unreadable;
  for (const fs::path& f : files) {
    try {
      const json j = read_json(f);
      if (j.value("format", "") != "loanrisk-manifest" || j.value("command", "") == "report") continue;
      seen.insert(j.value("command", ""));
      runs.push_back({{"manifest", f.filename().string()},
                      {"command", j.value("command", "")},
                      {"config_hash", j.value("config_hash", "")},
                      {"summary", j.value("summary", json::object())}});
    } catch (const std::exception& e) {
      unreadable.push_back(f.filename().string() + ": " + e.what());
    }
  }
  std::vector<std::string> missing;
  if (!runs.empty())
    for (const std::string& c : expect)
      if (!seen.count(c)) missing.push_back(c);
  const json report = {{"runs", runs}, {"missing", missing}, {"unreadable", unreadable}};
  fs::create_directories(opt.out);
  write_json(opt.out / "report.json", report);
  write_file(opt.out / "report.txt", [&](std::ostream& o) {
    o << "loanrisk report: " << runs.size() << " run(s)\n";
    for (const json& r : runs) {
      o << "\n[" << r["command"].get<std::string>() << "] config " << r["config_hash"].get<std::string>().substr(0, 8)
        << "  (" << r["manifest"].get<std::string>() << ")\n";
      for (const auto& [k, v] : r["summary"].items()) o << "  " << k << ": " << v.dump() << '\n';
    }
    if (!missing.empty()) {
      o << "\nmissing manifests:";
      for (const auto& c : missing) o << ' ' << c;
      o << '\n';
    }
    for (const auto& u : unreadable) o << "unreadable: " << u << '\n';
  });
  Manifest m(opt, config);
  m.output(opt.out / "report.json");
  m.output(opt.out / "report.txt");
  m.summary() = {{"runs", runs.size()}, {"missing", missing}};
  m.write();
}

}  // namespace loanrisk::cli
