// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>

#include "test_support.hpp"

using namespace sdrm;
using sdrm::testing::random_matrix;

namespace {

double sorted_oracle(const Matrix& scores, double q) {
  std::vector<double> v(scores.data(), scores.data() + scores.size());
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::floor(q * static_cast<double>(v.size()) + 1e-9));
  return v[std::min(rank, v.size() - 1)];
}

}  // namespace

TEST(SparsityThreshold, FourCellExample) {
  Matrix s(1, 4);
  s << 1, 2, 3, 4;
  const auto t = sparsity_threshold(s, 0.75);
  EXPECT_EQ(t.lambda, 4.0);
  ASSERT_EQ(t.matrix.nnz(), 1u);
  EXPECT_TRUE(t.matrix.contains(0, 3));
}

TEST(SparsityThreshold, MatchesSortOracle) {
  Rng rng(1);
  std::uniform_real_distribution<double> q(0.01, 0.99);
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix s = random_matrix(1 + trial % 13, 1 + trial % 17, rng);
    const double target = q(rng);
    if (s.maxCoeff() == s.minCoeff()) continue;
    EXPECT_EQ(sparsity_threshold(s, target).lambda, sorted_oracle(s, target));
  }
}

TEST(SparsityThreshold, HitsTargetForDistinctScores) {
  Rng rng(2);
  const Matrix s = random_matrix(50, 80, rng);
  for (double target : {0.5, 0.9, 0.95, 0.99}) {
    const auto t = sparsity_threshold(s, target);
    EXPECT_NEAR(t.matrix.sparsity(), target, 1.0 / 4000.0 + 1e-12);
  }
}

TEST(SparsityThreshold, MonotoneInTarget) {
  Rng rng(3);
  const Matrix s = random_matrix(20, 30, rng);
  std::size_t prev = s.size() + 1;
  for (double target = 0.05; target < 1.0; target += 0.05) {
    const auto t = sparsity_threshold(s, target);
    EXPECT_LE(t.matrix.nnz(), prev);
    prev = t.matrix.nnz();
  }
}

TEST(SparsityThreshold, LambdaReproducesMatrix) {
  Rng rng(4);
  const Matrix s = random_matrix(15, 25, rng);
  const auto t = sparsity_threshold(s, 0.9);
  EXPECT_EQ(apply_threshold(s, t.lambda), t.matrix);
  for (Eigen::Index u = 0; u < s.rows(); ++u)
    for (Eigen::Index i = 0; i < s.cols(); ++i)
      EXPECT_EQ(t.matrix.contains(static_cast<std::size_t>(u), static_cast<std::int32_t>(i)), s(u, i) >= t.lambda);
}

TEST(SparsityThreshold, Errors) {
  EXPECT_THROW(sparsity_threshold(Matrix::Constant(3, 3, 0.5), 0.5), DataError);
  EXPECT_THROW(sparsity_threshold(Matrix(0, 0), 0.5), DataError);
  EXPECT_THROW(sparsity_threshold(Matrix::Identity(2, 2), 0.0), ConfigError);
  EXPECT_THROW(sparsity_threshold(Matrix::Identity(2, 2), 1.0), ConfigError);
}

TEST(ExportSynthetic, RoundTrip) {
  const auto dir = sdrm::testing::scratch_dir("export_syn");
  Rng rng(5);
  SyntheticDataset ds;
  ds.matrix = sparsity_threshold(random_matrix(12, 9, rng), 0.8).matrix;
  ds.provenance = {{"sampler_mode", "multi"}, {"seed", 17}, {"lambda", 0.25}};
  export_synthetic(ds, dir);
  const auto back = load_synthetic(dir);
  EXPECT_EQ(back.matrix, ds.matrix);
  EXPECT_EQ(back.provenance, ds.provenance);
}

TEST(ExportSynthetic, EmptyMatrixIsHeaderOnly) {
  const auto dir = sdrm::testing::scratch_dir("export_empty");
  SyntheticDataset ds;
  ds.matrix = InteractionMatrix(4, std::vector<std::vector<std::int32_t>>(3));
  const auto csv = export_synthetic(ds, dir);
  std::ifstream is(csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 1u);
  EXPECT_EQ(lines[0], "user_idx,item_idx");
  EXPECT_EQ(load_synthetic(dir).matrix.users(), 3u);
}

TEST(DecodeLatents, MatchesDecoder) {
  Rng rng(6);
  VaeHyper h;
  h.latent = 3;
  h.hidden = {5};
  const auto vae = make_vae(10, h, rng);
  const Matrix z = random_matrix(4, 3, rng);
  EXPECT_EQ(decode_latents(vae, z), decode(vae, z));
}
