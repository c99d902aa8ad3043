#include "loanrisk/schema.hpp"

#include <cstdio>
#include <set>

#include "loanrisk/errors.hpp"
#include "loanrisk/hashing.hpp"

namespace loanrisk {
namespace {

FieldType parse_field_type(const std::string& s) {
  if (s == "numeric") return FieldType::kNumeric;
  if (s == "indicator") return FieldType::kIndicator;
  if (s == "categorical") return FieldType::kCategorical;
  if (s == "state") return FieldType::kState;
  throw ConfigError("type", "unknown field type '" + s + "'");
}

}  // namespace

std::string_view to_string(FieldType t) {
  switch (t) {
    case FieldType::kNumeric: return "numeric";
    case FieldType::kIndicator: return "indicator";
    case FieldType::kCategorical: return "categorical";
    case FieldType::kState: return "state";
  }
  return "?";
}

std::string_view to_string(ColumnKind k) {
  switch (k) {
    case ColumnKind::kNumeric: return "numeric";
    case ColumnKind::kIndicator: return "indicator";
    case ColumnKind::kCategoricalLevel: return "categorical-level";
  }
  return "?";
}

FeatureSchema::FeatureSchema(std::vector<FieldSpec> fields) : fields_(std::move(fields)) {
  std::set<std::string> names;
  int state_fields = 0;
  auto add_column = [&](std::string name, ColumnKind kind, int field) {
    if (!names.insert(name).second) throw ConfigError("schema", "duplicate column name '" + name + "'");
    const auto& f = fields_[field];
    columns_.push_back({std::move(name), kind, f.group, field, f.normalize});
  };
  for (int fi = 0; fi < static_cast<int>(fields_.size()); ++fi) {
    const FieldSpec& f = fields_[fi];
    if (f.name.empty()) throw ConfigError("schema", "field with empty name");
    switch (f.type) {
      case FieldType::kNumeric:
        add_column(f.name, ColumnKind::kNumeric, fi);
        if (f.missing_indicator) {
          if (f.required) throw ConfigError("schema", "required field '" + f.name + "' cannot have a missing indicator");
          add_column(f.name + "_missing", ColumnKind::kIndicator, fi);
        }
        break;
      case FieldType::kIndicator:
        add_column(f.name, ColumnKind::kIndicator, fi);
        break;
      case FieldType::kCategorical: {
        if (f.levels.empty()) throw ConfigError("schema", "categorical field '" + f.name + "' has no levels");
        std::set<std::string> levels(f.levels.begin(), f.levels.end());
        if (levels.size() != f.levels.size())
          throw ConfigError("schema", "categorical field '" + f.name + "' repeats a level");
        for (const auto& level : f.levels) add_column(f.name + "=" + level, ColumnKind::kCategoricalLevel, fi);
        if (f.allow_other) add_column(f.name + "=__other__", ColumnKind::kCategoricalLevel, fi);
        break;
      }
      case FieldType::kState:
        ++state_fields;
        for (State s : all_states()) {
          state_columns_[index_of(s)] = columns_.size();
          add_column(f.name + "=" + std::string(state_name(s)), ColumnKind::kIndicator, fi);
        }
        break;
    }
  }
  if (state_fields != 1) throw ConfigError("schema", "exactly one state field is required");
}

std::optional<std::size_t> FeatureSchema::column_index(std::string_view name) const {
  for (std::size_t i = 0; i < columns_.size(); ++i)
    if (columns_[i].name == name) return i;
  return std::nullopt;
}

std::size_t FeatureSchema::require_column(std::string_view name) const {
  auto i = column_index(name);
  if (!i) throw DataError("schema has no column '" + std::string(name) + "'");
  return *i;
}

std::optional<std::size_t> FeatureSchema::field_index(std::string_view name) const {
  for (std::size_t i = 0; i < fields_.size(); ++i)
    if (fields_[i].name == name) return i;
  return std::nullopt;
}

std::vector<std::size_t> FeatureSchema::columns_of_field(std::string_view name) const {
  std::vector<std::size_t> out;
  const auto fi = field_index(name);
  if (!fi) return out;
  for (std::size_t i = 0; i < columns_.size(); ++i)
    if (columns_[i].field == static_cast<int>(*fi)) out.push_back(i);
  return out;
}

bool FeatureSchema::is_state_column(std::size_t col) const {
  for (auto c : state_columns_)
    if (c == col) return true;
  return false;
}

std::vector<std::string> FeatureSchema::required_fields() const {
  std::vector<std::string> out;
  for (const auto& f : fields_)
    if (f.required) out.push_back(f.name);
  return out;
}

nlohmann::json FeatureSchema::to_json() const {
  nlohmann::json fields = nlohmann::json::array();
  for (const auto& f : fields_) {
    nlohmann::json j = {{"name", f.name},
                        {"type", std::string(to_string(f.type))},
                        {"group", f.group},
                        {"required", f.required},
                        {"missing_indicator", f.missing_indicator},
                        {"normalize", f.normalize}};
    if (f.type == FieldType::kCategorical) {
      j["levels"] = f.levels;
      j["allow_other"] = f.allow_other;
    }
    fields.push_back(std::move(j));
  }
  nlohmann::json states = nlohmann::json::array();
  for (State s : all_states()) states.push_back(std::string(state_name(s)));
  return {{"version", 1}, {"state_order", states}, {"fields", fields}};
}

FeatureSchema FeatureSchema::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("fields") || !j["fields"].is_array())
    throw ConfigError("schema.fields", "missing or not an array");
  if (j.contains("state_order")) {
    const auto& order = j["state_order"];
    for (int i = 0; i < kNumStates; ++i)
      if (!order.is_array() || order.size() != kNumStates ||
          order[i].get<std::string>() != state_name(static_cast<State>(i)))
        throw ConfigError("schema.state_order", "does not match the canonical state order");
  }
  std::vector<FieldSpec> fields;
  for (const auto& fj : j["fields"]) {
    FieldSpec f;
    try {
      f.name = fj.at("name").get<std::string>();
      f.type = parse_field_type(fj.at("type").get<std::string>());
      f.group = fj.value("group", std::string("static"));
      f.required = fj.value("required", false);
      f.missing_indicator = fj.value("missing_indicator", false);
      f.normalize = fj.value("normalize", true);
      if (fj.contains("levels")) f.levels = fj["levels"].get<std::vector<std::string>>();
      f.allow_other = fj.value("allow_other", false);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("schema.fields", e.what());
    }
    fields.push_back(std::move(f));
  }
  return FeatureSchema(std::move(fields));
}

std::uint64_t FeatureSchema::hash() const { return fnv1a64(to_json().dump()); }

std::string FeatureSchema::hash_hex() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
  return buf;
}

void set_state(const FeatureSchema& schema, std::span<double> row, State s) {
  for (State t : all_states()) row[schema.state_columns()[index_of(t)]] = (t == s) ? 1.0 : 0.0;
}

State decode_state(const FeatureSchema& schema, std::span<const double> row) {
  int best = 0;
  for (int i = 1; i < kNumStates; ++i)
    if (row[schema.state_columns()[i]] > row[schema.state_columns()[best]]) best = i;
  return static_cast<State>(best);
}

}  // namespace loanrisk
