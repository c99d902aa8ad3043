#include "loanrisk/model_io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "loanrisk/errors.hpp"
#include "loanrisk/hashing.hpp"

namespace loanrisk {
namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64(const std::string& s, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}

template <class T>
void append_values(std::string& out, const double* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const T v = static_cast<T>(data[i]);
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    out.append(bytes, sizeof(T));
  }
}

template <class T>
void read_values(const std::string& s, std::size_t at, double* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, s.data() + at + i * sizeof(T), sizeof(T));
    data[i] = static_cast<double>(v);
  }
}

}  // namespace

void save_model(const ModelBundle& bundle, std::ostream& out, WeightType type) {
  if (bundle.members.empty()) throw DataError("model bundle has no members");
  if (bundle.seeds.size() != bundle.members.size()) throw DataError("model bundle needs one seed per member");
  for (const auto& m : bundle.members) {
    if (m.arch.input_dim != bundle.schema.dim())
      throw DataError("member input width " + std::to_string(m.arch.input_dim) + " differs from schema width " +
                      std::to_string(bundle.schema.dim()));
    if (m.layers.size() != m.arch.num_layers()) throw DataError("member layer count disagrees with its architecture");
  }
  if (bundle.stats.dim() != bundle.schema.dim()) throw DataError("normalization width differs from schema width");

  const std::size_t elem = type == WeightType::kFloat64 ? 8 : 4;
  std::string blocks;
  nlohmann::json members = nlohmann::json::array();
  for (std::size_t mi = 0; mi < bundle.members.size(); ++mi) {
    const MlpParams& p = bundle.members[mi];
    nlohmann::json desc = nlohmann::json::array();
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      // Row-major W, then b.
      const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w = p.layers[l].w;
      for (int kind = 0; kind < 2; ++kind) {
        const std::size_t rows = static_cast<std::size_t>(kind == 0 ? w.rows() : p.layers[l].b.size());
        const std::size_t cols = kind == 0 ? static_cast<std::size_t>(w.cols()) : 1;
        desc.push_back({{"layer", l + 1},
                        {"kind", kind == 0 ? "W" : "b"},
                        {"rows", rows},
                        {"cols", cols},
                        {"offset", blocks.size()},
                        {"bytes", rows * cols * elem}});
        const double* src = kind == 0 ? w.data() : p.layers[l].b.data();
        if (type == WeightType::kFloat64)
          append_values<double>(blocks, src, rows * cols);
        else
          append_values<float>(blocks, src, rows * cols);
      }
    }
    members.push_back({{"architecture", p.arch.to_json()}, {"seed", bundle.seeds[mi]}, {"blocks", desc}});
  }

  nlohmann::json state_order = nlohmann::json::array();
  for (State s : all_states()) state_order.push_back(std::string(state_name(s)));
  const nlohmann::json header = {{"format", "loanrisk-model"},
                                 {"version", kModelFormatVersion},
                                 {"state_order", state_order},
                                 {"dtype", type == WeightType::kFloat64 ? "float64-le" : "float32-le"},
                                 {"schema_hash", bundle.schema.hash_hex()},
                                 {"schema", bundle.schema.to_json()},
                                 {"stats", bundle.stats.to_json()},
                                 {"members", members},
                                 {"weights_bytes", blocks.size()},
                                 {"checksum", "fnv1a64 of weight bytes, 8 bytes little-endian after the blocks"},
                                 {"metadata", bundle.metadata}};
  const std::string hjson = header.dump();
  std::string file(kModelMagic);
  append_u64(file, hjson.size());
  file += hjson;
  file += blocks;
  append_u64(file, fnv1a64(blocks));
  out.write(file.data(), static_cast<std::streamsize>(file.size()));
  if (!out) throw DataError("model write failed");
}

void save_model_file(const ModelBundle& bundle, const std::filesystem::path& path, WeightType type) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  save_model(bundle, out, type);
}

ModelBundle load_model(std::istream& in, const FeatureSchema* expected) {
  const std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto need = [&](std::size_t at, std::size_t n, const char* what) {
    if (s.size() < at + n)
      throw FormatError(std::string("model file truncated in ") + what + " at offset " + std::to_string(s.size()) +
                        " (needs " + std::to_string(at + n) + " bytes)");
  };
  need(0, kModelMagic.size(), "magic");
  if (s.compare(0, kModelMagic.size(), kModelMagic) != 0) throw FormatError("not a model file: bad magic at offset 0");
  std::size_t at = kModelMagic.size();
  need(at, 8, "header length");
  const std::uint64_t hlen = read_u64(s, at);
  at += 8;
  need(at, hlen, "header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(s.substr(at, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("model header at offset " + std::to_string(at) + " is not valid JSON: " + e.what());
  }
  const std::size_t header_at = at;
  at += hlen;

  ModelBundle b;
  std::size_t elem = 8;
  std::size_t weights_bytes = 0;
  try {
    if (header.at("format").get<std::string>() != "loanrisk-model")
      throw FormatError("model header at offset " + std::to_string(header_at) + " has the wrong format tag");
    const int version = header.at("version").get<int>();
    if (version != kModelFormatVersion)
      throw FormatError("model version " + std::to_string(version) + " at offset " + std::to_string(header_at) +
                        " is not supported (expected " + std::to_string(kModelFormatVersion) + ")");
    const auto order = header.at("state_order").get<std::vector<std::string>>();
    bool same_order = order.size() == kNumStates;
    for (std::size_t k = 0; same_order && k < order.size(); ++k)
      same_order = order[k] == state_name(state_from_index(static_cast<int>(k)));
    if (!same_order) throw FormatError("model state order differs from this build's state order");
    const std::string dtype = header.at("dtype").get<std::string>();
    if (dtype == "float32-le")
      elem = 4;
    else if (dtype != "float64-le")
      throw FormatError("model dtype '" + dtype + "' is not supported");
    b.schema = FeatureSchema::from_json(header.at("schema"));
    const std::string file_hash = header.at("schema_hash").get<std::string>();
    if (b.schema.hash_hex() != file_hash)
      throw FormatError("model schema at offset " + std::to_string(header_at) + " does not match its recorded hash");
    if (expected && expected->hash_hex() != file_hash)
      throw FormatError("model was trained on schema " + file_hash + ", expected schema " + expected->hash_hex());
    b.stats = NormalizationStats::from_json(header.at("stats"));
    b.metadata = header.value("metadata", nlohmann::json::object());
    weights_bytes = header.at("weights_bytes").get<std::size_t>();
    need(at, weights_bytes + 8, "weight blocks");
    for (const auto& m : header.at("members")) {
      MlpParams p;
      p.arch = Architecture::from_json(m.at("architecture"), b.schema.dim());
      const auto widths = p.arch.widths();
      const auto& blocks = m.at("blocks");
      if (blocks.size() != 2 * p.arch.num_layers())
        throw FormatError("model member has " + std::to_string(blocks.size()) + " blocks, architecture needs " +
                          std::to_string(2 * p.arch.num_layers()));
      for (std::size_t l = 0; l < p.arch.num_layers(); ++l) {
        Layer layer;
        for (int kind = 0; kind < 2; ++kind) {
          const auto& blk = blocks[2 * l + static_cast<std::size_t>(kind)];
          const std::size_t rows = blk.at("rows").get<std::size_t>();
          const std::size_t cols = blk.at("cols").get<std::size_t>();
          const std::size_t off = blk.at("offset").get<std::size_t>();
          const std::size_t want_rows = widths[l + 1];
          const std::size_t want_cols = kind == 0 ? widths[l] : 1;
          if (rows != want_rows || cols != want_cols || blk.at("bytes").get<std::size_t>() != rows * cols * elem)
            throw FormatError("shape corruption in layer " + std::to_string(l + 1) + (kind == 0 ? " W" : " b") +
                              " block at offset " + std::to_string(at + off));
          if (off + rows * cols * elem > weights_bytes)
            throw FormatError("weight block at offset " + std::to_string(at + off) + " runs past the weight section");
          std::vector<double> vals(rows * cols);
          if (elem == 8)
            read_values<double>(s, at + off, vals.data(), vals.size());
          else
            read_values<float>(s, at + off, vals.data(), vals.size());
          if (kind == 0) {
            layer.w.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < cols; ++c)
                layer.w(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = vals[r * cols + c];
          } else {
            layer.b = Eigen::Map<const Eigen::VectorXd>(vals.data(), static_cast<Eigen::Index>(rows));
          }
        }
        p.layers.push_back(std::move(layer));
      }
      b.members.push_back(std::move(p));
      b.seeds.push_back(m.at("seed").get<std::uint64_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("model header at offset " + std::to_string(header_at) + ": " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError("model header at offset " + std::to_string(header_at) + ": " + e.what());
  }
  if (b.members.empty()) throw FormatError("model file has no members");
  const std::uint64_t stored = read_u64(s, at + weights_bytes);
  const std::uint64_t actual = fnv1a64(std::string_view(s).substr(at, weights_bytes));
  if (stored != actual)
    throw FormatError("weight checksum mismatch at offset " + std::to_string(at + weights_bytes) + ": stored " +
                      hex64(stored) + ", computed " + hex64(actual));
  if (s.size() != at + weights_bytes + 8)
    throw FormatError("trailing bytes after offset " + std::to_string(at + weights_bytes + 8));
  return b;
}

ModelBundle load_model_file(const std::filesystem::path& path, const FeatureSchema* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return load_model(in, expected);
}

}  // namespace loanrisk
