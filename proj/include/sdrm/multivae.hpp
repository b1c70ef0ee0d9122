// SPDX-License-Identifier: Apache-2.0
//
// Multinomial-likelihood VAE for implicit feedback: encoder to a diagonal
// Gaussian latent, decoder to item logits, beta-weighted KL, and training with
// early stopping on validation Recall@10.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sdrm/common.hpp"
#include "sdrm/dataset.hpp"
#include "sdrm/metrics.hpp"
#include "sdrm/tensor_nn.hpp"

namespace sdrm {

struct VaeHyper {
  std::size_t latent = 200;
  std::vector<std::size_t> hidden{600};
  double learning_rate = 1e-3;
  std::size_t batch_size = 100;
  double beta_max = 1.0;
  /// Optimiser steps over which beta ramps 0 -> beta_max; 0 means half of
  /// max_epochs worth of steps.
  std::size_t anneal_steps = 0;
  std::size_t patience = 10;
  std::size_t max_epochs = 200;
  std::size_t eval_k = 10;
};

struct VaeModel {
  MlpNet encoder;  // I -> hidden... -> 2K  (mu | log sigma^2)
  MlpNet decoder;  // K -> hidden...(reversed) -> I logits
  std::size_t latent = 0;

  std::size_t items() const { return decoder.output_width(); }
};

inline VaeModel make_vae(std::size_t items, const VaeHyper& h, Rng& rng) {
  if (h.latent == 0) throw ConfigError("VAE latent dimension must be >= 1");
  if (h.beta_max < 0.0 || h.beta_max > 1.0) throw ConfigError("beta_max must lie in [0, 1]");
  std::vector<std::size_t> enc{items};
  enc.insert(enc.end(), h.hidden.begin(), h.hidden.end());
  enc.push_back(2 * h.latent);
  std::vector<std::size_t> dec{h.latent};
  dec.insert(dec.end(), h.hidden.rbegin(), h.hidden.rend());
  dec.push_back(items);
  VaeModel m;
  m.encoder = MlpNet::glorot(enc, Activation::Tanh, Activation::Identity, rng);
  m.decoder = MlpNet::glorot(dec, Activation::Tanh, Activation::Identity, rng);
  m.latent = h.latent;
  return m;
}

/// Dense 0/1 rows of `m` for the given row indices.
inline Matrix dense_rows(const InteractionMatrix& m, std::span<const std::size_t> rows) {
  Matrix x = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(m.items()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (auto i : m.row(rows[r])) x(static_cast<Eigen::Index>(r), i) = 1.0;
  return x;
}

inline Matrix dense_rows(const InteractionMatrix& m) {
  std::vector<std::size_t> all(m.users());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return dense_rows(m, all);
}

/// Scales every non-zero row to unit L2 norm.
inline Matrix l2_normalize_rows(const Matrix& x) {
  Matrix out = x;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double n = out.row(r).norm();
    if (n > 0.0) out.row(r) /= n;
  }
  return out;
}

struct GaussianParams {
  Matrix mu;
  Matrix logvar;
};

inline GaussianParams split_gaussian(const Matrix& enc_out, std::size_t latent) {
  const auto K = static_cast<Eigen::Index>(latent);
  if (enc_out.cols() != 2 * K) throw ConfigError("encoder output width must be 2K");
  return {enc_out.leftCols(K), enc_out.rightCols(K)};
}

/// Encoder pass on L2-normalised rows. First K outputs are mu, last K log sigma^2.
inline GaussianParams encode(const VaeModel& model, const Matrix& x_normalized) {
  return split_gaussian(mlp_predict(model.encoder, x_normalized), model.latent);
}

inline Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// z = mu + eps * sigma with caller-supplied eps.
inline Matrix reparameterize(const Matrix& mu, const Matrix& logvar, const Matrix& eps) {
  if (mu.rows() != logvar.rows() || mu.cols() != logvar.cols() || eps.rows() != mu.rows() ||
      eps.cols() != mu.cols())
    throw ConfigError("reparameterize: shape mismatch");
  return mu + (eps.array() * (0.5 * logvar.array()).exp()).matrix();
}

inline Matrix reparameterize(const Matrix& mu, const Matrix& logvar, Rng& rng) {
  return reparameterize(mu, logvar, standard_normal(mu.rows(), mu.cols(), rng));
}

inline Matrix decode(const VaeModel& model, const Matrix& z) {
  if (static_cast<std::size_t>(z.cols()) != model.latent)
    throw ConfigError("decode: latent width " + std::to_string(z.cols()) + " != K " +
                      std::to_string(model.latent));
  return mlp_predict(model.decoder, z);
}

/// Loss value and its gradients with respect to the decoder logits and the
/// Gaussian parameters (KL part only; the reparameterisation path is added by
/// the caller).
struct VaeLoss {
  double loss = 0.0;
  double nll = 0.0;
  double kl = 0.0;
  Matrix d_logits;
  Matrix d_mu;
  Matrix d_logvar;
};

/// Batch mean of  -sum_i x_ui log softmax(logits_u)_i + beta * KL(N(mu, sigma^2) || N(0, I)).
inline VaeLoss multivae_loss(const Matrix& logits, const Matrix& x, const Matrix& mu,
                             const Matrix& logvar, double beta) {
  if (logits.rows() != x.rows() || logits.cols() != x.cols() || mu.rows() != x.rows() ||
      logvar.rows() != mu.rows() || logvar.cols() != mu.cols())
    throw ConfigError("multivae_loss: shape mismatch");
  const double B = static_cast<double>(x.rows());
  VaeLoss out;
  out.d_logits.resize(logits.rows(), logits.cols());
  for (Eigen::Index u = 0; u < logits.rows(); ++u) {
    const double m = logits.row(u).maxCoeff();
    const RowVector e = (logits.row(u).array() - m).exp().matrix();
    const double z = e.sum();
    const double log_z = m + std::log(z);
    const double n = x.row(u).sum();
    out.nll += -(x.row(u).array() * (logits.row(u).array() - log_z)).sum();
    out.d_logits.row(u) = (n * e / z - x.row(u)) / B;
  }
  const auto var = logvar.array().exp();
  out.kl = 0.5 * (var + mu.array().square() - 1.0 - logvar.array()).sum();
  out.nll /= B;
  out.kl /= B;
  out.loss = out.nll + beta * out.kl;
  out.d_mu = beta * mu / B;
  out.d_logvar = (beta * 0.5 * (var - 1.0) / B).matrix();
  if (!std::isfinite(out.loss)) throw TrainingError("multivae_loss: non-finite loss");
  return out;
}

struct VaeGradients {
  double loss = 0.0;
  MlpGrads encoder;
  MlpGrads decoder;
};

/// Full training objective with frozen noise `eps`: encoder on `x_normalized`,
/// multinomial likelihood against counts `x`.
inline VaeGradients vae_loss_and_grads(const VaeModel& model, const Matrix& x_normalized,
                                       const Matrix& x, const Matrix& eps, double beta) {
  const auto enc = mlp_forward(model.encoder, x_normalized);
  const auto g = split_gaussian(enc.output(), model.latent);
  const Matrix sigma = (0.5 * g.logvar.array()).exp().matrix();
  const Matrix z = g.mu + eps.cwiseProduct(sigma);
  const auto dec = mlp_forward(model.decoder, z);
  const auto l = multivae_loss(dec.output(), x, g.mu, g.logvar, beta);
  VaeGradients out;
  out.loss = l.loss;
  out.decoder = mlp_backward(model.decoder, dec, l.d_logits);
  const Matrix& dz = out.decoder.input;
  const auto K = static_cast<Eigen::Index>(model.latent);
  Matrix d_enc(enc.output().rows(), 2 * K);
  d_enc.leftCols(K) = l.d_mu + dz;
  d_enc.rightCols(K) = l.d_logvar + (0.5 * dz.array() * eps.array() * sigma.array()).matrix();
  out.encoder = mlp_backward(model.encoder, enc, d_enc);
  return out;
}

/// Mean Recall@k of decoder scores at the posterior mean, visible items masked.
/// Users with no held-out items are skipped.
inline double vae_recall(const VaeModel& model, const EvalPartition& eval, std::size_t k) {
  if (eval.visible.users() == 0) return 0.0;
  const Matrix x = l2_normalize_rows(dense_rows(eval.visible));
  const Matrix scores = decode(model, encode(model, x).mu);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t u = 0; u < eval.visible.users(); ++u) {
    const auto row = scores.row(static_cast<Eigen::Index>(u));
    const auto ranked = rank_topk(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())),
                                  k, eval.visible.row(u));
    if (auto r = recall_at_k(ranked, eval.heldout.row(u), k)) {
      sum += *r;
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

struct VaeEpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double val_recall = 0.0;
  double beta = 0.0;
};

struct VaeTrainResult {
  VaeModel model;  // best validation-Recall checkpoint
  std::vector<VaeEpochLog> curve;
  std::size_t best_epoch = 0;
  double best_recall = -1.0;
};

/// Adam on shuffled mini-batches of `train`; after every epoch scores
/// validation Recall@k and keeps the best checkpoint. Stops once `patience`
/// consecutive epochs fail to improve, or at max_epochs.
inline VaeTrainResult train_multivae(const InteractionMatrix& train, const EvalPartition& validation,
                                     const VaeHyper& h, Rng& rng,
                                     const std::function<void(const VaeEpochLog&)>& on_epoch = {}) {
  if (train.users() == 0) throw DataError("train_multivae: empty training matrix");
  if (h.batch_size == 0) throw ConfigError("batch size must be >= 1");
  VaeModel model = make_vae(train.items(), h, rng);
  AdamState enc_opt(model.encoder, {h.learning_rate});
  AdamState dec_opt(model.decoder, {h.learning_rate});
  const std::size_t U = train.users();
  const std::size_t batches = (U + h.batch_size - 1) / h.batch_size;
  const std::size_t anneal =
      h.anneal_steps > 0 ? h.anneal_steps : std::max<std::size_t>(1, h.max_epochs * batches / 2);
  std::vector<std::size_t> order(U);
  std::iota(order.begin(), order.end(), std::size_t{0});

  VaeTrainResult result;
  result.model = model;
  std::size_t since_best = 0;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= h.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    double beta = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * h.batch_size, hi = std::min(U, lo + h.batch_size);
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      const Matrix x = dense_rows(train, idx);
      const Matrix eps = standard_normal(x.rows(), static_cast<Eigen::Index>(h.latent), rng);
      beta = h.beta_max * std::min(1.0, static_cast<double>(step) / static_cast<double>(anneal));
      VaeGradients g;
      try {
        g = vae_loss_and_grads(model, l2_normalize_rows(x), x, eps, beta);
        adam_step(model.encoder, g.encoder, enc_opt);
        adam_step(model.decoder, g.decoder, dec_opt);
      } catch (const TrainingError& e) {
        throw TrainingError("VAE diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      epoch_loss += g.loss * static_cast<double>(hi - lo);
      ++step;
    }
    double recall = 0.0;
    try {
      recall = vae_recall(model, validation, h.eval_k);
    } catch (const TrainingError& e) {
      throw TrainingError("VAE diverged at epoch " + std::to_string(epoch) + ": " + e.what());
    }
    VaeEpochLog log{epoch, epoch_loss / static_cast<double>(U), recall, beta};
    result.curve.push_back(log);
    if (on_epoch) on_epoch(log);
    if (log.val_recall > result.best_recall) {
      result.best_recall = log.val_recall;
      result.best_epoch = epoch;
      result.model = model;
      since_best = 0;
    } else if (++since_best > h.patience) {
      break;
    }
  }
  return result;
}

}  // namespace sdrm
