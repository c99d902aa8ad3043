#pragma once

// Model files: a magic line, an 8-byte little-endian header length, a JSON header,
// raw little-endian weight blocks and an FNV-1a-64 checksum of the block bytes.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include <nlohmann/json.hpp>

#include "loanrisk/network.hpp"
#include "loanrisk/pipeline.hpp"
#include "loanrisk/schema.hpp"

namespace loanrisk {

inline constexpr int kModelFormatVersion = 1;
inline constexpr std::string_view kModelMagic = "LOANRISK-MODEL\n";

enum class WeightType { kFloat64, kFloat32 };

/// One or more networks sharing a schema and normalization (an ensemble when M > 1).
struct ModelBundle {
  std::vector<MlpParams> members;
  std::vector<std::uint64_t> seeds;  // one per member
  FeatureSchema schema;
  NormalizationStats stats;
  /// Free-form provenance (training config, split, timings).
  nlohmann::json metadata = nlohmann::json::object();
};

/// Throws DataError when the bundle is inconsistent (no members, width mismatch).
void save_model(const ModelBundle& bundle, std::ostream& out, WeightType type = WeightType::kFloat64);
void save_model_file(const ModelBundle& bundle, const std::filesystem::path& path,
                     WeightType type = WeightType::kFloat64);

/// Throws FormatError (with a byte offset) on bad magic, version mismatch, truncation,
/// block shape or checksum errors, and when `expected` is given and its hash differs.
ModelBundle load_model(std::istream& in, const FeatureSchema* expected = nullptr);
ModelBundle load_model_file(const std::filesystem::path& path, const FeatureSchema* expected = nullptr);

}  // namespace loanrisk
