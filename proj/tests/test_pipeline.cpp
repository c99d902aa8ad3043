#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "loanrisk/csv.hpp"
#include "loanrisk/errors.hpp"
#include "loanrisk/pipeline.hpp"
#include "loanrisk/synth.hpp"
#include "test_util.hpp"

using namespace loanrisk;
namespace fs = std::filesystem;

namespace {

FeatureSchema toy_schema(bool allow_other = false) {
  std::vector<FieldSpec> fields(5);
  fields[0].name = "score";
  fields[0].required = true;
  fields[1].name = "dti";
  fields[1].missing_indicator = true;
  fields[2].name = "color";
  fields[2].type = FieldType::kCategorical;
  fields[2].levels = {"a", "b", "c"};
  fields[2].allow_other = allow_other;
  fields[3].name = "bal";
  fields[3].group = "dynamic";
  fields[4].name = "state";
  fields[4].type = FieldType::kState;
  return FeatureSchema(fields);
}

CsvTable csv(const std::string& text) {
  std::istringstream in(text);
  return read_csv(in);
}

const char* kStatic =
    "loan_id,score,dti,color\n"
    "A,700,30,a\n"
    "B,,25,b\n"
    "C,650,,c\n"
    "D,720,40,z\n";

const char* kPerf =
    "loan_id,period,status,bal\n"
    "A,2010-01,Current,100\n"
    "A,2010-02,DD30,99\n"
    "A,2010-03,Current,98\n"
    "A,2010-04,PaidOff,0\n"
    "A,2010-05,Current,0\n"
    "B,2010-01,Current,50\n"
    "B,2010-02,Current,49\n"
    "C,2010-01,Current,70\n"
    "C,2010-02,DD60,69\n"
    "C,2010-03,DD60,68\n"
    "C,2010-04,DD90Plus,67\n"
    "D,2010-01,Current,10\n"
    "D,2010-02,Current,9\n"
    "E,2010-01,Current,5\n";

}  // namespace

TEST(Encode, DropRulesAndEncodings) {
  const FeatureSchema schema = toy_schema();
  const EncodeResult r = encode(schema, csv(kStatic), csv(kPerf));
  const DropReport& d = r.report;
  // A: 3 kept (Current->DD30, DD30->Current, Current->PaidOff); one row after absorption.
  // B: 1 missing required + 1 no successor. C: 1 illegal (Current->DD60), 2 kept, 1 no successor.
  // D: 1 kept (unknown level) + 1 no successor. E: unknown loan.
  EXPECT_EQ(d.kept, 6u);
  EXPECT_EQ(d.missing_required, 1u);
  EXPECT_EQ(d.illegal_transition, 1u);
  EXPECT_EQ(d.no_successor, 3u);
  EXPECT_EQ(d.unknown_loan, 1u);
  EXPECT_EQ(d.after_absorption, 1u);
  EXPECT_EQ(d.raw, d.kept + d.dropped());
  EXPECT_EQ(d.unknown_levels.at("color=z"), 1u);
  ASSERT_EQ(r.data.size(), 6u);

  const auto dti = schema.require_column("dti"), miss = schema.require_column("dti_missing");
  const auto colors = schema.columns_of_field("color");
  ASSERT_EQ(colors.size(), 3u);
  for (std::size_t i = 0; i < r.data.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    double ones = 0;
    for (auto c : colors) ones += r.data.x(row, static_cast<Eigen::Index>(c));
    if (r.data.loan_id[i] == "D")
      EXPECT_EQ(ones, 0.0);
    else
      EXPECT_EQ(ones, 1.0);
    if (r.data.loan_id[i] == "C") {
      EXPECT_EQ(r.data.x(row, static_cast<Eigen::Index>(dti)), 0.0);
      EXPECT_EQ(r.data.x(row, static_cast<Eigen::Index>(miss)), 1.0);
    } else {
      EXPECT_EQ(r.data.x(row, static_cast<Eigen::Index>(miss)), 0.0);
    }
    std::vector<double> v(r.data.x.row(row).begin(), r.data.x.row(row).end());
    EXPECT_EQ(decode_state(schema, v), r.data.state[i]);
    EXPECT_TRUE(is_legal_transition(r.data.state[i], r.data.next_state[i]));
  }
  EXPECT_EQ(r.data.next_state[2], State::kPaidOff);
  EXPECT_EQ(r.data.period[0], month_index(2010, 1));
}

TEST(Encode, AllowOtherRoutesUnknownLevel) {
  const FeatureSchema schema = toy_schema(true);
  const EncodeResult r = encode(schema, csv(kStatic), csv(kPerf));
  const auto other = schema.require_column("color=__other__");
  for (std::size_t i = 0; i < r.data.size(); ++i)
    EXPECT_EQ(r.data.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(other)), r.data.loan_id[i] == "D" ? 1.0 : 0.0);
}

TEST(Encode, ExcludeFlagDropsFromRowOnward) {
  const char* perf =
      "loan_id,period,status,bal,exclude\n"
      "A,2010-01,Current,1,0\n"
      "A,2010-02,Current,1,0\n"
      "A,2010-03,Current,1,1\n"
      "A,2010-04,Current,1,0\n"
      "A,2010-05,Current,1,0\n";
  const EncodeResult r = encode(toy_schema(), csv("loan_id,score,dti,color\nA,700,30,a\n"), csv(perf));
  EXPECT_EQ(r.report.kept, 1u);
  EXPECT_EQ(r.report.excluded, 4u);
  EXPECT_EQ(r.report.raw, r.report.kept + r.report.dropped());
}

TEST(Encode, MatchesGeneratorEncoding) {
  SyntheticConfig c;
  c.num_loans = 150;
  c.horizon = 18;
  c.origination_window = 6;
  c.seed = 4;
  c.missing_rate["dti"] = 0.2;
  const Panel p = generate_panel(c);
  std::stringstream st, perf;
  write_static_csv(st, p);
  write_performance_csv(perf, p);
  const EncodeResult r = encode(p.schema, read_csv(st), read_csv(perf));
  ASSERT_EQ(r.data.size(), p.samples.size());
  EXPECT_EQ(r.data.state, p.samples.state);
  EXPECT_EQ(r.data.next_state, p.samples.next_state);
  EXPECT_EQ(r.data.period, p.samples.period);
  EXPECT_LE((r.data.x - p.samples.x).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_EQ(r.report.dropped(), r.report.no_successor);
}

TEST(Split, HalfOpenBoundaries) {
  DesignSet s = testutil::random_design(6, 3, 1);
  s.period = {10, 19, 20, 29, 30, 40};
  SplitConfig c;
  c.train_end = 20;
  c.valid_end = 30;
  c.test_end = 40;
  const Splits sp = temporal_split(s, c);
  EXPECT_EQ(sp.train.period, (std::vector<int>{10, 19}));
  EXPECT_EQ(sp.valid.period, (std::vector<int>{20, 29}));
  EXPECT_EQ(sp.test.period, (std::vector<int>{30}));
  EXPECT_EQ(sp.out_of_range, 1u);
  EXPECT_EQ(sp.train.size() + sp.valid.size() + sp.test.size() + sp.out_of_range, s.size());
}

TEST(Split, EmptySplitsWarn) {
  DesignSet s = testutil::random_design(5, 2, 2);
  s.period.assign(5, month_index(2010, 1));
  const Splits sp = temporal_split(s, SplitConfig{});
  EXPECT_EQ(sp.train.size(), 5u);
  EXPECT_TRUE(sp.valid.empty() && sp.test.empty());
  EXPECT_EQ(sp.warnings.size(), 2u);
}

TEST(Split, PaperDefaultsAndValidation) {
  const SplitConfig d;
  EXPECT_EQ(d.train_end, month_index(2012, 5));
  EXPECT_EQ(d.valid_end, month_index(2012, 11));
  EXPECT_EQ(*d.test_end, month_index(2014, 6));
  const SplitConfig parsed =
      SplitConfig::from_json({{"train_end", "2012-05"}, {"valid_end", "2012-11"}, {"test_end", "2014-06"}});
  EXPECT_EQ(parsed.to_json(), d.to_json());
  SplitConfig bad;
  bad.valid_end = bad.train_end;
  EXPECT_THROW(temporal_split(testutil::random_design(3, 2, 1), bad), ConfigError);
}

TEST(Split, HashHoldoutKeepsLoansTogether) {
  const DesignSet s = testutil::random_design(600, 2, 3);
  const Splits sp = hash_split(s, 7);
  EXPECT_EQ(sp.train.size() + sp.valid.size() + sp.test.size(), s.size());
  std::set<std::string> a(sp.train.loan_id.begin(), sp.train.loan_id.end());
  for (const auto& id : sp.valid.loan_id) EXPECT_FALSE(a.count(id));
  for (const auto& id : sp.test.loan_id) EXPECT_FALSE(a.count(id));
  EXPECT_THROW(hash_split(s, 7, 10, 9, 2), ConfigError);
}

TEST(Period, ParseAndFormat) {
  EXPECT_EQ(parse_period("2012-05"), month_index(2012, 5));
  EXPECT_EQ(parse_period(std::to_string(month_index(2001, 12))), month_index(2001, 12));
  EXPECT_EQ(format_period(month_index(2014, 6)), "2014-06");
  EXPECT_THROW(parse_period("2012-13"), DataError);
  EXPECT_THROW(parse_period("May 2012"), DataError);
}

TEST(Normalization, ZScoreConstantAndReuse) {
  const FeatureSchema schema = testutil::numeric_schema(3);
  DesignSet train = testutil::random_design(400, schema.dim(), 5);
  for (Eigen::Index i = 0; i < train.x.rows(); ++i) {
    train.x(i, 1) = 4.2;
    train.x(i, 2) = 3.0 * train.x(i, 2) + 10.0;
  }
  DesignSet test = testutil::random_design(100, schema.dim(), 6);
  const NormalizationStats st = fit_normalization(schema, train);
  EXPECT_TRUE(st.guarded[1]);
  EXPECT_EQ(st.scale[1], 1.0);
  EXPECT_EQ(st.min[2], train.x.col(2).minCoeff());
  apply_normalization(st, train);
  apply_normalization(st, test);
  EXPECT_EQ(train.normalization, st.fingerprint());
  for (Eigen::Index i = 0; i < train.x.rows(); ++i) EXPECT_EQ(train.x(i, 1), 0.0);
  for (Eigen::Index c : {0, 2}) {
    const double mean = train.x.col(c).mean();
    const double var = (train.x.col(c).array() - mean).square().mean();
    EXPECT_NEAR(mean, 0.0, 1e-9);
    EXPECT_NEAR(var, 1.0, 1e-9);
  }
  // Test rows reuse training statistics: column 2 was drawn unshifted, so its mean is far from 0.
  EXPECT_GT(std::abs(test.x.col(2).mean()), 1.0);
  EXPECT_THROW(apply_normalization(st, train), DataError);
  EXPECT_EQ(NormalizationStats::from_json(st.to_json()), st);
}

TEST(Normalization, ExemptColumnsPassThrough) {
  std::vector<FieldSpec> f(2);
  f[0].name = "flag";
  f[0].type = FieldType::kIndicator;
  f[0].normalize = false;
  f[1].name = "state";
  f[1].type = FieldType::kState;
  const FeatureSchema schema(f);
  DesignSet d = testutil::random_design(50, schema.dim(), 8);
  const RowMatrix before = d.x;
  const NormalizationStats st = fit_normalization(schema, d);
  apply_normalization(st, d);
  EXPECT_TRUE(d.x.col(0) == before.col(0));
  RowMatrix back = d.x;
  denormalize_rows(st, back);
  EXPECT_LE((back - before).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Normalization, StateOneHotInNormalizedSpace) {
  const FeatureSchema schema = testutil::numeric_schema(2);
  DesignSet d = testutil::random_design(300, schema.dim(), 9);
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::span<double> row(d.x.row(static_cast<Eigen::Index>(i)).data(), d.dim());
    set_state(schema, row, d.state[i]);
  }
  const NormalizationStats st = fit_normalization(schema, d);
  std::vector<double> raw(schema.dim(), 0.0), z(schema.dim(), 0.0);
  set_state(schema, raw, State::kDD60);
  set_state_normalized(schema, st, z, State::kDD60);
  for (std::size_t c : schema.state_columns()) EXPECT_NEAR(z[c], st.normalize(c, raw[c]), 1e-15);
}

TEST(Sharding, AssignmentProperties) {
  EXPECT_EQ(shard_assign("loan-1", 1, 99), 0u);
  EXPECT_EQ(shard_assign("loan-1", 16, 3), shard_assign("loan-1", 16, 3));
  std::vector<double> counts(16, 0.0);
  for (int i = 0; i < 100000; ++i) ++counts[shard_assign("L" + std::to_string(i), 16, 12345)];
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - 6250.0) * (c - 6250.0) / 6250.0;
  EXPECT_LT(chi2, 37.697);  // chi-square(15) 0.999 quantile
}

TEST(Sharding, WriteReadRoundTrip) {
  const FeatureSchema schema = testutil::numeric_schema(4);
  DesignSet d = testutil::random_design(500, schema.dim(), 10);
  const NormalizationStats st = fit_normalization(schema, d);
  apply_normalization(st, d);
  const fs::path dir = fs::temp_directory_path() / "loanrisk_shard_test";
  fs::remove_all(dir);
  const ShardLayout layout = write_shards(d, schema, &st, dir, 4, 77);
  ASSERT_EQ(layout.files.size(), 4u);
  const ShardLayout back = read_layout(dir);
  EXPECT_EQ(back.files, layout.files);
  std::size_t total = 0;
  std::map<std::string, std::uint32_t> shard_of;
  for (std::uint32_t s = 0; s < 4; ++s) {
    const DesignSet part = read_shard(layout.files[s]);
    EXPECT_EQ(part.size(), layout.rows[s]);
    EXPECT_EQ(part.normalization, st.fingerprint());
    total += part.size();
    for (std::size_t i = 0; i < part.size(); ++i) {
      EXPECT_EQ(shard_assign(part.loan_id[i], 4, 77), s);
      shard_of[part.loan_id[i]] = s;
    }
  }
  EXPECT_EQ(total, d.size());
  const DesignSet first = read_shard(layout.files[shard_assign(d.loan_id[0], 4, 77)]);
  for (std::size_t i = 0; i < first.size(); ++i) {
    if (first.loan_id[i] != d.loan_id[0] || first.period[i] != d.period[0]) continue;
    for (Eigen::Index c = 0; c < d.x.cols(); ++c)
      EXPECT_EQ(first.x(static_cast<Eigen::Index>(i), c), static_cast<double>(static_cast<float>(d.x(0, c))));
  }
  fs::remove_all(dir);
}

TEST(Sharding, TruncatedShardRejected) {
  const FeatureSchema schema = testutil::numeric_schema(2);
  const DesignSet d = testutil::random_design(50, schema.dim(), 11);
  const fs::path dir = fs::temp_directory_path() / "loanrisk_shard_trunc";
  fs::remove_all(dir);
  const ShardLayout layout = write_shards(d, schema, nullptr, dir, 1, 0);
  fs::resize_file(layout.files[0], fs::file_size(layout.files[0]) - 3);
  EXPECT_THROW(read_shard(layout.files[0]), FormatError);
  fs::remove_all(dir);
}

TEST(Stream, BatchSizesAndCoverage) {
  DesignSet d = testutil::random_design(10, 2, 12);
  MinibatchStream s(d, 4);
  s.start_epoch(1);
  std::vector<std::size_t> sizes, seen;
  Minibatch b;
  while (s.next(b)) {
    sizes.push_back(b.size());
    seen.insert(seen.end(), b.rows.begin(), b.rows.end());
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{4, 4, 2}));
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seen[i], i);
  EXPECT_THROW(MinibatchStream(d, 0), ConfigError);
}

TEST(Stream, EpochSeedsShuffleSameMultiset) {
  DesignSet d = testutil::random_design(300, 2, 13);
  MinibatchStream s(d, 32, 4, 9);
  auto epoch = [&](std::uint64_t seed) {
    std::vector<std::size_t> order;
    s.start_epoch(seed);
    Minibatch b;
    while (s.next(b)) order.insert(order.end(), b.rows.begin(), b.rows.end());
    return order;
  };
  const auto a = epoch(1), b = epoch(2), a2 = epoch(1);
  EXPECT_NE(a, b);
  EXPECT_EQ(a, a2);
  auto sa = a, sb = b;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  EXPECT_EQ(sa, sb);
  EXPECT_EQ(sa.size(), 300u);
}

TEST(Stream, EpochSumsAndStateFrequenciesExact) {
  DesignSet d = testutil::random_design(480, 3, 14);
  for (Eigen::Index i = 0; i < d.x.rows(); ++i)
    for (Eigen::Index j = 0; j < d.x.cols(); ++j) d.x(i, j) = std::round(d.x(i, j) * 8.0);
  MinibatchStream s(d, 48, 3, 5, 100);
  s.start_epoch(3);
  Minibatch b;
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(3), batch_mean_sum = Eigen::RowVectorXd::Zero(3);
  std::array<std::size_t, kNumStates> freq{}, global{};
  std::size_t batches = 0;
  while (s.next(b)) {
    sum += b.x.colwise().sum();
    batch_mean_sum += b.x.colwise().mean();
    ++batches;
    for (State t : b.next_state) ++freq[static_cast<std::size_t>(index_of(t))];
  }
  for (State t : d.next_state) ++global[static_cast<std::size_t>(index_of(t))];
  EXPECT_EQ(freq, global);
  EXPECT_TRUE(sum == d.x.colwise().sum());
  EXPECT_LE((batch_mean_sum / static_cast<double>(batches) - d.x.colwise().mean()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Stream, FileSourceMatchesMemoryRows) {
  const FeatureSchema schema = testutil::numeric_schema(2);
  const DesignSet d = testutil::random_design(200, schema.dim(), 15);
  const fs::path dir = fs::temp_directory_path() / "loanrisk_stream_file";
  fs::remove_all(dir);
  const ShardLayout layout = write_shards(d, schema, nullptr, dir, 3, 4);
  MinibatchStream s(layout, 16);
  s.start_epoch(8);
  Minibatch b;
  std::size_t n = 0;
  std::set<std::size_t> ids;
  while (s.next(b)) {
    n += b.size();
    ids.insert(b.rows.begin(), b.rows.end());
  }
  EXPECT_EQ(n, 200u);
  EXPECT_EQ(ids.size(), 200u);
  fs::remove_all(dir);
}

TEST(NormalizingModel, RawInputsAndChainRule) {
  const FeatureSchema schema = testutil::numeric_schema(3);
  DesignSet d = testutil::random_design(200, schema.dim(), 16);
  d.x *= 5.0;
  d.x.array() += 2.0;
  const NormalizationStats st = fit_normalization(schema, d);
  const MlpParams p = testutil::random_params(schema.dim(), {6}, Activation::kTanh, 3);
  const MlpModel inner(p);
  const NormalizingModel outer(inner, st);
  RowMatrix raw = d.x.topRows(5), z = raw, pa, pb;
  normalize_rows(st, z);
  outer.predict(raw, pa);
  inner.predict(z, pb);
  EXPECT_LE((pa - pb).cwiseAbs().maxCoeff(), 1e-15);
  RowMatrix g;
  outer.input_gradient(raw, State::kPaidOff, g);
  const double h = 1e-5;
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    RowMatrix up = raw.topRows(1), dn = raw.topRows(1), pu, pd;
    up(0, j) += h;
    dn(0, j) -= h;
    outer.predict(up, pu);
    outer.predict(dn, pd);
    EXPECT_NEAR(g(0, j), (pu(0, 6) - pd(0, 6)) / (2 * h), 1e-8);
  }
}
