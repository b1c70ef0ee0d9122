// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace sdrm;
using sdrm::testing::random_matrix;

namespace {

VaeModel small_vae(std::size_t items, std::size_t latent, std::size_t hidden, Rng& rng) {
  VaeHyper h;
  h.latent = latent;
  h.hidden = {hidden};
  return make_vae(items, h, rng);
}

Matrix random_binary(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::bernoulli_distribution on(0.3);
  Matrix x = Matrix::Zero(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) x(r, c) = on(rng) ? 1.0 : 0.0;
    x(r, r % cols) = 1.0;
  }
  return x;
}

}  // namespace

TEST(Encode, ZeroInputZeroBiasGivesUnitGaussian) {
  Rng rng(1);
  const auto m = small_vae(12, 3, 8, rng);
  const auto g = encode(m, Matrix::Zero(2, 12));
  EXPECT_EQ(g.mu.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.logvar.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Encode, LayoutAndShapeRoundTrip) {
  Rng rng(2);
  const auto m = small_vae(20, 4, 10, rng);
  EXPECT_EQ(m.encoder.output_width(), 8u);
  EXPECT_EQ(m.decoder.input_width(), 4u);
  const Matrix x = l2_normalize_rows(random_binary(5, 20, rng));
  const Matrix enc = mlp_predict(m.encoder, x);
  const auto g = encode(m, x);
  EXPECT_EQ(g.mu, enc.leftCols(4));
  EXPECT_EQ(g.logvar, enc.rightCols(4));
  EXPECT_EQ(decode(m, g.mu).cols(), 20);
  EXPECT_THROW(decode(m, Matrix::Zero(1, 5)), ConfigError);
}

TEST(Reparameterize, ZeroSigmaIsMean) {
  Rng rng(3);
  const Matrix mu = random_matrix(4, 3, rng);
  const Matrix logvar = Matrix::Constant(4, 3, -std::numeric_limits<double>::infinity());
  EXPECT_EQ(reparameterize(mu, logvar, rng), mu);
}

TEST(Reparameterize, MonteCarloMoments) {
  Rng rng(4);
  const Matrix z = reparameterize(Matrix::Zero(10000, 3), Matrix::Zero(10000, 3), rng);
  for (Eigen::Index c = 0; c < 3; ++c) {
    const double mean = z.col(c).mean();
    const double var = (z.col(c).array() - mean).square().sum() / 9999.0;
    EXPECT_NEAR(mean, 0.0, 0.05);
    EXPECT_NEAR(var, 1.0, 0.05);
  }
}

TEST(Reparameterize, SeedReproducible) {
  Rng a(5), b(5);
  const Matrix mu = Matrix::Ones(3, 2);
  EXPECT_EQ(reparameterize(mu, Matrix::Zero(3, 2), a), reparameterize(mu, Matrix::Zero(3, 2), b));
}

TEST(Decode, ZeroWeightDecoderReturnsBias) {
  Rng rng(6);
  auto m = small_vae(6, 2, 4, rng);
  for (auto& l : m.decoder.layers()) l.weight.setZero();
  m.decoder.layers().back().bias << 1, 2, 3, 4, 5, 6;
  const Matrix out = decode(m, random_matrix(3, 2, rng));
  for (Eigen::Index r = 0; r < 3; ++r) EXPECT_EQ(out.row(r), m.decoder.layers().back().bias);
}

TEST(MultiVaeLoss, KlClosedForms) {
  const Matrix logits = Matrix::Zero(1, 4);
  Matrix x = Matrix::Zero(1, 4);
  x(0, 1) = 1;
  EXPECT_EQ(multivae_loss(logits, x, Matrix::Zero(1, 3), Matrix::Zero(1, 3), 1.0).kl, 0.0);
  EXPECT_DOUBLE_EQ(multivae_loss(logits, x, Matrix::Ones(1, 1), Matrix::Zero(1, 1), 1.0).kl, 0.5);
}

TEST(MultiVaeLoss, UniformLogitsGiveNLogI) {
  const int items = 50;
  Matrix x = Matrix::Zero(1, items);
  for (int i = 0; i < 7; ++i) x(0, i * 3) = 1.0;
  const auto l = multivae_loss(Matrix::Constant(1, items, 0.37), x, Matrix::Zero(1, 2), Matrix::Zero(1, 2), 1.0);
  EXPECT_NEAR(l.nll, 7.0 * std::log(50.0), 1e-12);
}

TEST(MultiVaeLoss, KlNonNegativeAndZeroOnlyAtPrior) {
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    const Matrix mu = random_matrix(3, 4, rng);
    const Matrix lv = random_matrix(3, 4, rng);
    EXPECT_GT(multivae_loss(Matrix::Zero(3, 2), Matrix::Zero(3, 2), mu, lv, 1.0).kl, 0.0);
  }
}

TEST(MultiVaeLoss, NllNonNegativeAndShiftInvariant) {
  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    const Matrix logits = random_matrix(4, 15, rng, 3.0);
    const Matrix x = random_binary(4, 15, rng);
    const auto a = multivae_loss(logits, x, Matrix::Zero(4, 2), Matrix::Zero(4, 2), 0.0);
    Matrix shifted = logits;
    for (Eigen::Index r = 0; r < 4; ++r) shifted.row(r).array() += 10.0 * static_cast<double>(r) - 7.3;
    const auto b = multivae_loss(shifted, x, Matrix::Zero(4, 2), Matrix::Zero(4, 2), 0.0);
    EXPECT_GE(a.nll, 0.0);
    EXPECT_NEAR(a.nll, b.nll, 1e-9);
  }
}

TEST(MultiVaeLoss, NonFiniteIsTrainingError) {
  Matrix logits = Matrix::Zero(1, 3);
  logits(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(multivae_loss(logits, Matrix::Ones(1, 3), Matrix::Zero(1, 1), Matrix::Zero(1, 1), 1.0),
               TrainingError);
}

TEST(MultiVaeLoss, GradientCheckFrozenNoise) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto m = small_vae(16, 3, 16, rng);
    const Matrix x = random_binary(5, 16, rng);
    const Matrix xn = l2_normalize_rows(x);
    const Matrix eps = random_matrix(5, 3, rng);
    const double beta = 0.3 + 0.035 * static_cast<double>(seed);
    const auto g = vae_loss_and_grads(m, xn, x, eps, beta);
    auto loss = [&] { return vae_loss_and_grads(m, xn, x, eps, beta).loss; };
    auto params = parameter_pointers(m.encoder);
    auto dp = parameter_pointers(m.decoder);
    params.insert(params.end(), dp.begin(), dp.end());
    auto analytic = flatten(g.encoder);
    const auto da = flatten(g.decoder);
    analytic.insert(analytic.end(), da.begin(), da.end());
    EXPECT_LT(gradient_check(loss, params, analytic), 1e-4) << "seed " << seed;
  }
}

TEST(TrainMultiVae, PatienceZeroStopsAfterFirstNonImprovingEpoch) {
  Rng rng(9);
  const auto data = sdrm::testing::random_interactions(60, 30, 0.2, rng, 3);
  const auto splits = split_users(data, 1);
  VaeHyper h;
  h.latent = 4;
  h.hidden = {8};
  h.patience = 0;
  h.max_epochs = 50;
  h.batch_size = 16;
  Rng train_rng(3);
  const auto r = train_multivae(splits.train, splits.validation_eval, h, train_rng);
  ASSERT_FALSE(r.curve.empty());
  if (r.curve.size() < h.max_epochs) {
    // Last epoch did not improve; every earlier epoch did.
    EXPECT_LE(r.curve.back().val_recall, r.best_recall);
    for (std::size_t e = 1; e + 1 < r.curve.size(); ++e) EXPECT_GT(r.curve[e].val_recall, r.curve[e - 1].val_recall);
  }
}

TEST(TrainMultiVae, ReturnsBestCheckpointNotLast) {
  Rng rng(10);
  const auto data = sdrm::testing::random_interactions(80, 40, 0.15, rng, 3);
  const auto splits = split_users(data, 2);
  VaeHyper h;
  h.latent = 4;
  h.hidden = {16};
  h.patience = 3;
  h.max_epochs = 30;
  h.batch_size = 20;
  Rng train_rng(4);
  const auto r = train_multivae(splits.train, splits.validation_eval, h, train_rng);
  for (const auto& e : r.curve) EXPECT_LE(e.val_recall, r.best_recall);
  EXPECT_DOUBLE_EQ(vae_recall(r.model, splits.validation_eval, 10), r.best_recall);
  EXPECT_EQ(r.curve[r.best_epoch - 1].val_recall, r.best_recall);
}

TEST(TrainMultiVae, BetaAnnealsLinearly) {
  Rng rng(11);
  const auto data = sdrm::testing::random_interactions(40, 20, 0.2, rng, 3);
  const auto splits = split_users(data, 2);
  VaeHyper h;
  h.latent = 2;
  h.hidden = {4};
  h.max_epochs = 6;
  h.patience = 100;
  h.batch_size = 1000;  // one step per epoch
  h.beta_max = 0.6;
  Rng train_rng(4);
  const auto r = train_multivae(splits.train, splits.validation_eval, h, train_rng);
  ASSERT_EQ(r.curve.size(), 6u);
  // anneal over 3 steps: beta at step s is 0.6 * min(1, s / 3)
  EXPECT_DOUBLE_EQ(r.curve[0].beta, 0.0);
  EXPECT_DOUBLE_EQ(r.curve[1].beta, 0.2);
  EXPECT_DOUBLE_EQ(r.curve[3].beta, 0.6);
  EXPECT_DOUBLE_EQ(r.curve[5].beta, 0.6);
}

TEST(TrainMultiVae, DivergenceNamesEpoch) {
  Rng rng(12);
  const auto data = sdrm::testing::random_interactions(40, 20, 0.2, rng, 3);
  const auto splits = split_users(data, 2);
  VaeHyper h;
  h.latent = 2;
  h.hidden = {4};
  h.learning_rate = std::numeric_limits<double>::infinity();
  h.max_epochs = 3;
  Rng train_rng(4);
  try {
    train_multivae(splits.train, splits.validation_eval, h, train_rng);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos) << e.what();
  }
}
