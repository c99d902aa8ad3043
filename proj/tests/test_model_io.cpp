#include <gtest/gtest.h>

#include <sstream>

#include "loanrisk/errors.hpp"
#include "loanrisk/model_io.hpp"
#include "test_util.hpp"

using namespace loanrisk;
using loanrisk::testutil::random_params;

namespace {

ModelBundle make_bundle(std::size_t members) {
  ModelBundle b;
  b.schema = testutil::numeric_schema(3);
  const std::size_t d = b.schema.dim();
  for (std::size_t m = 0; m < members; ++m) {
    b.members.push_back(random_params(d, {5, 4}, Activation::kTanh, 10 + m));
    b.seeds.push_back(10 + m);
  }
  b.stats.mean.assign(d, 0.5);
  b.stats.scale.assign(d, 2.0);
  b.stats.exempt.assign(d, false);
  b.stats.guarded.assign(d, false);
  b.stats.min.assign(d, -1.0);
  b.stats.max.assign(d, 1.0);
  b.stats.count = 42;
  b.metadata["note"] = "x";
  return b;
}

std::string save(const ModelBundle& b, WeightType t = WeightType::kFloat64) {
  std::ostringstream out;
  save_model(b, out, t);
  return out.str();
}

ModelBundle load(const std::string& bytes, const FeatureSchema* expected = nullptr) {
  std::istringstream in(bytes);
  return load_model(in, expected);
}

}  // namespace

TEST(ModelIo, RoundTripIsBitIdentical) {
  const ModelBundle b = make_bundle(3);
  const std::string bytes = save(b);
  const ModelBundle r = load(bytes);
  ASSERT_EQ(r.members.size(), 3u);
  for (std::size_t m = 0; m < 3; ++m) {
    EXPECT_EQ(r.members[m].arch, b.members[m].arch);
    for (std::size_t l = 0; l < b.members[m].layers.size(); ++l) {
      EXPECT_TRUE(r.members[m].layers[l].w == b.members[m].layers[l].w);
      EXPECT_TRUE(r.members[m].layers[l].b == b.members[m].layers[l].b);
    }
  }
  EXPECT_EQ(r.seeds, b.seeds);
  EXPECT_EQ(r.schema, b.schema);
  EXPECT_EQ(r.stats, b.stats);
  EXPECT_EQ(r.metadata["note"], "x");
  EXPECT_EQ(save(r), bytes);
  EXPECT_EQ(bytes.substr(0, kModelMagic.size()), kModelMagic);
}

TEST(ModelIo, Float32StoresRoundedWeights) {
  const ModelBundle b = make_bundle(1);
  const ModelBundle r = load(save(b, WeightType::kFloat32));
  const auto& w = b.members[0].layers[0].w;
  const auto& rw = r.members[0].layers[0].w;
  for (Eigen::Index i = 0; i < w.size(); ++i)
    EXPECT_EQ(rw.data()[i], static_cast<double>(static_cast<float>(w.data()[i])));
  EXPECT_LT(save(b, WeightType::kFloat32).size(), save(b).size());
}

TEST(ModelIo, TruncationAndCorruptionRaiseFormatError) {
  const std::string bytes = save(make_bundle(2));
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(load(bytes.substr(0, cut)), FormatError) << cut;
  std::string flipped = bytes;
  flipped[bytes.size() - 20] ^= 0x40;
  EXPECT_THROW(load(flipped), FormatError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(load(bad_magic), FormatError);
}

TEST(ModelIo, SchemaMismatchIsRefused) {
  const std::string bytes = save(make_bundle(1));
  const FeatureSchema same = testutil::numeric_schema(3);
  EXPECT_NO_THROW(load(bytes, &same));
  const FeatureSchema other = testutil::numeric_schema(4);
  EXPECT_THROW(load(bytes, &other), FormatError);
}

TEST(ModelIo, InconsistentBundleRejected) {
  ModelBundle empty = make_bundle(1);
  empty.members.clear();
  empty.seeds.clear();
  EXPECT_THROW(save(empty), DataError);
  ModelBundle wide = make_bundle(1);
  wide.members[0] = random_params(3, {2}, Activation::kRelu, 1);
  EXPECT_THROW(save(wide), DataError);
}

TEST(ModelIo, FileVariant) {
  const auto path = std::filesystem::temp_directory_path() / "loanrisk_model_io_test.bin";
  const ModelBundle b = make_bundle(2);
  save_model_file(b, path);
  const ModelBundle r = load_model_file(path);
  EXPECT_EQ(r.members.size(), 2u);
  std::filesystem::remove(path);
  EXPECT_ANY_THROW(load_model_file(path));
}
