// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "test_support.hpp"

using namespace sdrm;
namespace fs = std::filesystem;

namespace {

fs::path write_file(const fs::path& dir, const std::string& name, const std::string& body) {
  std::ofstream(dir / name) << body;
  return dir / name;
}

InteractionMatrix from_rows(std::size_t items, std::vector<std::vector<std::int32_t>> rows) {
  return InteractionMatrix(items, std::move(rows));
}

bool ml100k_available() { return fs::exists(SDRM_ML100K_PATH); }

}  // namespace

TEST(LoadInteractions, ThreeLineCsv) {
  const auto dir = sdrm::testing::scratch_dir("load_csv");
  LoadOptions opt;
  opt.format = InputFormat::Csv;
  opt.timestamp_column = -1;
  const auto raw = load_interactions(write_file(dir, "r.csv", "u1,i1,4\nu1,i2,2\nu2,i1,5\n"), opt);
  ASSERT_EQ(raw.triples.size(), 3u);
  EXPECT_EQ(raw.triples[2].user, "u2");
  EXPECT_EQ(raw.triples[2].rating, 5.0);
}

TEST(LoadInteractions, HeaderIsSkipped) {
  const auto dir = sdrm::testing::scratch_dir("load_header");
  LoadOptions opt;
  opt.format = InputFormat::Csv;
  opt.timestamp_column = -1;
  const auto raw = load_interactions(write_file(dir, "r.csv", "user,item,rating\nu1,i1,4\n"), opt);
  EXPECT_EQ(raw.triples.size(), 1u);
}

TEST(LoadInteractions, DuplicateLastWins) {
  const auto dir = sdrm::testing::scratch_dir("load_dup");
  LoadOptions opt;
  opt.format = InputFormat::Csv;
  opt.timestamp_column = -1;
  const auto raw = load_interactions(write_file(dir, "r.csv", "u1,i1,4\nu2,i1,1\nu1,i1,2\n"), opt);
  ASSERT_EQ(raw.triples.size(), 2u);
  EXPECT_EQ(raw.triples[0].rating, 2.0);
}

TEST(LoadInteractions, MovieLensDatAndColumnOrder) {
  const auto dir = sdrm::testing::scratch_dir("load_dat");
  LoadOptions opt;
  opt.format = InputFormat::MovieLensDat;
  const auto raw = load_interactions(write_file(dir, "r.dat", "1::10::5::978300760\n2::10::3::978300761\n"), opt);
  ASSERT_EQ(raw.triples.size(), 2u);
  EXPECT_EQ(raw.triples[0].item, "10");
  EXPECT_EQ(*raw.triples[1].timestamp, 978300761);

  LoadOptions swapped;
  swapped.format = InputFormat::Csv;
  swapped.user_column = 1;
  swapped.item_column = 0;
  swapped.rating_column = 2;
  swapped.timestamp_column = -1;
  const auto r2 = load_interactions(write_file(dir, "s.csv", "itemA,userB,4\n"), swapped);
  EXPECT_EQ(r2.triples[0].user, "userB");
}

TEST(LoadInteractions, MalformedRowsReportLineNumbers) {
  const auto dir = sdrm::testing::scratch_dir("load_bad");
  LoadOptions opt;
  opt.format = InputFormat::Csv;
  opt.timestamp_column = -1;
  try {
    load_interactions(write_file(dir, "r.csv", "u1,i1,4\nu2,i2\nu3,i3,9\n"), opt);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(" 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find(" 3"), std::string::npos) << msg;
  }
}

TEST(LoadInteractions, EmptyAndUnreadable) {
  const auto dir = sdrm::testing::scratch_dir("load_empty");
  EXPECT_THROW(load_interactions(write_file(dir, "e.tsv", "")), DataError);
  EXPECT_THROW(load_interactions(dir / "missing.tsv"), IoError);
}

TEST(LoadInteractions, MovieLens100kLineCount) {
  if (!ml100k_available()) GTEST_SKIP() << "ML-100k not present";
  EXPECT_EQ(load_interactions(SDRM_ML100K_PATH).triples.size(), 100000u);
}

TEST(Binarize, ThresholdAtThree) {
  RawRatings raw;
  raw.triples = {{"a", "x", 4, {}}, {"a", "y", 3, {}}, {"b", "x", 5, {}}, {"b", "z", 1, {}}};
  const auto pos = binarize(raw);
  ASSERT_EQ(pos.size(), 2u);
  EXPECT_EQ(pos[0].item, "x");
  RawRatings threes;
  threes.triples = {{"a", "x", 3, {}}, {"b", "y", 3, {}}};
  EXPECT_TRUE(binarize(threes).empty());
}

TEST(KCore, UserWithFourPositivesRemoved) {
  // 6 users over 5 items: users 0-4 hold every item, user 5 holds four.
  std::vector<std::vector<std::int32_t>> rows(5, {0, 1, 2, 3, 4});
  rows.push_back({0, 1, 2, 3});
  const auto out = kcore_filter(from_rows(5, rows));
  EXPECT_EQ(out.users(), 5u);
  EXPECT_EQ(out.items(), 5u);
}

TEST(KCore, RemovalCascades) {
  // Item 5 is held by users 0-4 only; user 4 has 4 items in total, so
  // dropping it pushes item 5 below five users.
  std::vector<std::vector<std::int32_t>> rows;
  for (int u = 0; u < 4; ++u) rows.push_back({0, 1, 2, 3, 4, 5});
  rows.push_back({0, 1, 2, 5});
  rows.push_back({0, 1, 2, 3, 4});
  const auto out = kcore_filter(from_rows(6, rows));
  EXPECT_EQ(out.items(), 5u);
  EXPECT_EQ(out.users(), 5u);
  for (std::size_t u = 0; u < out.users(); ++u) EXPECT_EQ(out.row(u).size(), 5u);
}

TEST(KCore, EmptyFixedPointIsDataError) {
  EXPECT_THROW(kcore_filter(from_rows(3, {{0, 1}, {1, 2}})), DataError);
}

TEST(KCore, RandomMatricesSatisfyThresholdsAndFixedPoint) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto m = sdrm::testing::random_interactions(80, 60, 0.08, rng);
    InteractionMatrix out;
    try {
      out = kcore_filter(m, 5, 5);
    } catch (const DataError&) {
      continue;
    }
    std::vector<std::size_t> ideg(out.items(), 0);
    for (std::size_t u = 0; u < out.users(); ++u) {
      EXPECT_GE(out.row(u).size(), 5u);
      for (auto i : out.row(u)) ++ideg[static_cast<std::size_t>(i)];
    }
    for (auto d : ideg) EXPECT_GE(d, 5u);
    EXPECT_EQ(kcore_filter(out, 5, 5), out);  // fixed point
  }
}

TEST(SplitUsers, SizesFor938And10) {
  Rng rng(1);
  const auto big = sdrm::testing::random_interactions(938, 40, 0.2, rng);
  const auto s = split_users(big, 7);
  EXPECT_EQ(s.train.users(), 658u);
  EXPECT_EQ(s.test.users(), 187u);
  EXPECT_EQ(s.validation.users(), 93u);
  const auto small = sdrm::testing::random_interactions(10, 40, 0.2, rng);
  const auto t = split_users(small, 7);
  EXPECT_EQ(t.train.users(), 7u);
  EXPECT_EQ(t.test.users(), 2u);
  EXPECT_EQ(t.validation.users(), 1u);
  const auto tiny = sdrm::testing::random_interactions(9, 40, 0.2, rng);
  EXPECT_THROW(split_users(tiny, 7), DataError);
}

TEST(SplitUsers, PartitionAndDeterminism) {
  Rng rng(2);
  const auto m = sdrm::testing::random_interactions(123, 30, 0.2, rng);
  const auto a = split_users(m, 99);
  const auto b = split_users(m, 99);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test_eval.heldout, b.test_eval.heldout);
  std::set<std::size_t> all;
  for (const auto* v : {&a.train_users, &a.test_users, &a.validation_users}) all.insert(v->begin(), v->end());
  EXPECT_EQ(all.size(), 123u);
  EXPECT_EQ(a.train_users.size() + a.test_users.size() + a.validation_users.size(), 123u);
  EXPECT_EQ(a.train.items(), m.items());
  EXPECT_EQ(a.test.items(), m.items());
}

TEST(SplitUsers, EvalMasksPartitionEachTestRow) {
  Rng rng(3);
  const auto m = sdrm::testing::random_interactions(50, 40, 0.25, rng, 2);
  const auto s = split_users(m, 5);
  for (std::size_t u = 0; u < s.test.users(); ++u) {
    std::vector<std::int32_t> merged = s.test_eval.visible.row(u);
    const auto& h = s.test_eval.heldout.row(u);
    merged.insert(merged.end(), h.begin(), h.end());
    std::sort(merged.begin(), merged.end());
    EXPECT_EQ(merged, s.test.row(u));
    EXPECT_GE(h.size(), 1u);
    for (auto i : h) EXPECT_FALSE(s.test_eval.visible.contains(u, i));
  }
}

TEST(InjectGroundTruth, CountsAndMaskRows) {
  Rng rng(4);
  const auto train = sdrm::testing::random_interactions(20, 30, 0.2, rng);
  const auto test = sdrm::testing::random_interactions(187, 30, 0.2, rng, 2);
  const auto eval = partition_for_eval(test, 0.2, 1);
  const auto inj = inject_ground_truth(train, eval, 0.2, 9);
  EXPECT_EQ(inj.injected_users.size(), 37u);
  EXPECT_EQ(inj.matrix.users(), 20u + 37u);
  for (std::size_t j = 0; j < inj.injected_users.size(); ++j)
    EXPECT_EQ(inj.matrix.row(inj.first_injected_row + j), eval.visible.row(inj.injected_users[j]));
  const auto all = inject_ground_truth(train, eval, 1.0, 9);
  EXPECT_EQ(all.injected_users.size(), 187u);
  EXPECT_THROW(inject_ground_truth(train, eval, 0.0, 9), ConfigError);
  EXPECT_THROW(inject_ground_truth(train, eval, 1.5, 9), ConfigError);
}

TEST(DatasetStats, SparsityAndEmpty) {
  const auto m = from_rows(4, {{0, 1}, {2}, {}});
  const auto s = dataset_stats(m);
  EXPECT_EQ(s.ratings, 3u);
  EXPECT_NEAR(s.sparsity, 1.0 - 3.0 / 12.0, 1e-12);
  EXPECT_EQ(dataset_stats(InteractionMatrix{}).sparsity, 1.0);
  Rng rng(5);
  const auto r = sdrm::testing::random_interactions(31, 17, 0.3, rng);
  std::size_t cells = 0;
  for (std::size_t u = 0; u < r.users(); ++u)
    for (std::int32_t i = 0; i < 17; ++i) cells += r.contains(u, i) ? 1 : 0;
  EXPECT_NEAR(dataset_stats(r).sparsity, 1.0 - static_cast<double>(cells) / (31.0 * 17.0), 1e-12);
}

TEST(Serialization, SplitsRoundTripAndByteIdentical) {
  Rng rng(6);
  auto m = sdrm::testing::random_interactions(40, 25, 0.2, rng, 2);
  std::vector<std::string> ut, it;
  for (std::size_t u = 0; u < 40; ++u) ut.push_back("u" + std::to_string(u));
  for (std::size_t i = 0; i < 25; ++i) it.push_back("i" + std::to_string(i));
  m.set_user_tokens(ut);
  m.set_item_tokens(it);
  const auto s = split_users(m, 3);
  const auto d1 = sdrm::testing::scratch_dir("splits_a");
  const auto d2 = sdrm::testing::scratch_dir("splits_b");
  save_splits(d1, s);
  save_splits(d2, split_users(m, 3));
  for (const char* f : {"train.csv", "test.csv", "validation.csv", "test_heldout.csv", "splits.json"})
    EXPECT_EQ(sha256_file(d1 / f), sha256_file(d2 / f)) << f;
  const auto back = load_splits(d1);
  EXPECT_EQ(back.train, s.train);
  EXPECT_EQ(back.validation_eval.visible, s.validation_eval.visible);
  EXPECT_EQ(back.test.user_tokens(), s.test.user_tokens());
  EXPECT_EQ(back.train.item_tokens(), it);
}

TEST(Serialization, CsvIsSortedWithHeader) {
  const auto dir = sdrm::testing::scratch_dir("csv");
  write_matrix_csv(dir / "m.csv", from_rows(5, {{4, 1}, {}, {0}}));
  std::ifstream is(dir / "m.csv");
  std::stringstream ss;
  ss << is.rdbuf();
  EXPECT_EQ(ss.str(), "user_idx,item_idx\n0,1\n0,4\n2,0\n");
}

TEST(MovieLens100k, PreprocessingStatistics) {
  if (!ml100k_available()) GTEST_SKIP() << "ML-100k not present";
  const auto raw = load_interactions(SDRM_ML100K_PATH);
  const auto m = kcore_filter(InteractionMatrix::from_interactions(binarize(raw)));
  const auto t = rating_stats(raw, m);
  EXPECT_EQ(t.users, 938u);
  EXPECT_EQ(t.items, 1008u);
  EXPECT_EQ(t.ratings, 95215u);
  EXPECT_NEAR(t.sparsity, 0.8993, 5e-5);
}
