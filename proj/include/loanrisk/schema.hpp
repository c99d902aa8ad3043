#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loanrisk/core.hpp"

namespace loanrisk {

enum class FieldType { kNumeric, kIndicator, kCategorical, kState };
enum class ColumnKind { kNumeric, kIndicator, kCategoricalLevel };

/// One raw input field and how it expands into design columns.
struct FieldSpec {
  std::string name;
  FieldType type = FieldType::kNumeric;
  /// Free-form source group ("static", "dynamic", "macro", ...).
  std::string group = "static";
  /// Missing value drops the record.
  bool required = false;
  /// Optional numeric field: missing encodes as (value 0, `<name>_missing` = 1).
  bool missing_indicator = false;
  /// Categorical levels, in column order.
  std::vector<std::string> levels;
  /// Categorical only: append a reserved `<name>=__other__` column for unseen levels.
  bool allow_other = false;
  /// Whether the columns of this field are z-scored.
  bool normalize = true;
};

struct FeatureColumn {
  std::string name;
  ColumnKind kind = ColumnKind::kNumeric;
  std::string group;
  int field = -1;
  bool normalize = true;
};

/// Ordered design-matrix layout. Immutable once constructed.
class FeatureSchema {
 public:
  FeatureSchema() = default;
  /// Validates field names and expands columns. Exactly one state field is required.
  explicit FeatureSchema(std::vector<FieldSpec> fields);

  const std::vector<FieldSpec>& fields() const { return fields_; }
  const std::vector<FeatureColumn>& columns() const { return columns_; }
  std::size_t dim() const { return columns_.size(); }

  std::optional<std::size_t> column_index(std::string_view name) const;
  /// Throws DataError if absent.
  std::size_t require_column(std::string_view name) const;
  std::optional<std::size_t> field_index(std::string_view name) const;
  /// Column indices produced by field `name`.
  std::vector<std::size_t> columns_of_field(std::string_view name) const;

  /// Column index of the one-hot entry for each state.
  const std::array<std::size_t, kNumStates>& state_columns() const { return state_columns_; }
  bool is_state_column(std::size_t col) const;

  std::vector<std::string> required_fields() const;

  /// FNV-1a of the canonical JSON form.
  std::uint64_t hash() const;
  std::string hash_hex() const;

  nlohmann::json to_json() const;
  static FeatureSchema from_json(const nlohmann::json& j);

  friend bool operator==(const FeatureSchema& a, const FeatureSchema& b) { return a.hash() == b.hash(); }

 private:
  std::vector<FieldSpec> fields_;
  std::vector<FeatureColumn> columns_;
  std::array<std::size_t, kNumStates> state_columns_{};
};

/// Writes the one-hot state encoding into an unnormalized row.
void set_state(const FeatureSchema& schema, std::span<double> row, State s);
/// Inverse of set_state on an unnormalized row: the state whose column is largest.
State decode_state(const FeatureSchema& schema, std::span<const double> row);

std::string_view to_string(FieldType t);
std::string_view to_string(ColumnKind k);

}  // namespace loanrisk
