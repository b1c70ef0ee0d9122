// SPDX-License-Identifier: Apache-2.0
//
// Score-based diffusion over a frozen VAE latent space.
//
//  * NoiseSchedule   linear beta_t with alpha_t = 1 - beta_t and cumulative products
//  * DiffusionModel  MLP trunk on [z_t | sinusoidal(t)] with two K-wide linear heads,
//                    a score head s(.) and a noise head eps(.)
//  * sdrm_loss       ( |(s(z^) - s(z)) - D|^2 + |s(z) - D|^2 ) / max(|D|^2, 1e-8),
//                    D = eps(z_t) - z_t, z^ = z_t + nu
//  * sample_latents  ancestral sampling from T (Full) or a per-sample random start (Multi)

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdrm/common.hpp"
#include "sdrm/dataset.hpp"
#include "sdrm/multivae.hpp"
#include "sdrm/tensor_nn.hpp"

namespace sdrm {

/// Per-step tables for t = 1..T, stored at index t - 1.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  std::size_t steps() const { return beta_.size(); }
  double beta(std::size_t t) const { return beta_.at(t - 1); }
  double alpha(std::size_t t) const { return alpha_.at(t - 1); }
  double alpha_bar(std::size_t t) const { return alpha_bar_.at(t - 1); }
  double sigma(std::size_t t) const { return std::sqrt(beta(t)); }
  double beta_start() const { return beta_.front(); }
  double beta_end() const { return beta_.back(); }

 private:
  friend NoiseSchedule build_schedule(std::size_t, double, double);
  std::vector<double> beta_, alpha_, alpha_bar_;
};

/// Linear beta from beta_start to beta_end over T steps.
inline NoiseSchedule build_schedule(std::size_t T, double beta_start = 1e-4, double beta_end = 0.02) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.beta_.resize(T);
  s.alpha_.resize(T);
  s.alpha_bar_.resize(T);
  double running = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    s.beta_[i] = beta_start + (beta_end - beta_start) * frac;
    s.alpha_[i] = 1.0 - s.beta_[i];
    running *= s.alpha_[i];
    s.alpha_bar_[i] = running;
  }
  return s;
}

/// Closed-form forward process: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, per row.
inline Matrix q_sample(const Matrix& z0, std::span<const std::size_t> t, const Matrix& eps,
                       const NoiseSchedule& schedule) {
  if (eps.rows() != z0.rows() || eps.cols() != z0.cols() ||
      t.size() != static_cast<std::size_t>(z0.rows()))
    throw ConfigError("q_sample: shape mismatch");
  Matrix out(z0.rows(), z0.cols());
  for (Eigen::Index r = 0; r < z0.rows(); ++r) {
    const auto step = t[static_cast<std::size_t>(r)];
    if (step < 1 || step > schedule.steps())
      throw ConfigError("q_sample: timestep " + std::to_string(step) + " outside 1.." +
                        std::to_string(schedule.steps()));
    const double ab = schedule.alpha_bar(step);
    out.row(r) = std::sqrt(ab) * z0.row(r) + std::sqrt(1.0 - ab) * eps.row(r);
  }
  return out;
}

/// Sinusoidal timestep features: [sin(t f_0..f_{h-1}) | cos(t f_0..f_{h-1})],
/// f_j = 10000^(-j/h), h = width / 2.
inline Matrix timestep_embedding(std::span<const std::size_t> t, std::size_t width) {
  if (width == 0 || width % 2 != 0) throw ConfigError("embedding width must be even and > 0");
  const std::size_t half = width / 2;
  Matrix e(static_cast<Eigen::Index>(t.size()), static_cast<Eigen::Index>(width));
  for (std::size_t r = 0; r < t.size(); ++r)
    for (std::size_t j = 0; j < half; ++j) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
      const double a = static_cast<double>(t[r]) * f;
      e(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = std::sin(a);
      e(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(half + j)) = std::cos(a);
    }
  return e;
}

struct DiffusionHyper {
  std::size_t timesteps = 50;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  /// Variance of the score perturbation nu ~ N(0, sigma_nu I).
  double sigma_nu = 0.01;
  std::size_t hidden_layers = 2;
  std::size_t hidden_width = 200;
  std::size_t embedding_width = 16;
  double learning_rate = 1e-4;
  std::size_t batch_size = 100;
  std::size_t epochs = 100;
};

struct DiffusionModel {
  MlpNet trunk;
  MlpNet score_head;
  MlpNet noise_head;
  std::size_t latent = 0;
  std::size_t embedding_width = 16;
};

inline DiffusionModel make_diffusion(std::size_t latent, const DiffusionHyper& h, Rng& rng) {
  if (latent == 0) throw ConfigError("diffusion latent width must be >= 1");
  DiffusionModel m;
  m.latent = latent;
  m.embedding_width = h.embedding_width;
  std::vector<std::size_t> widths{latent + h.embedding_width};
  for (std::size_t i = 0; i < h.hidden_layers; ++i) widths.push_back(h.hidden_width);
  m.trunk = MlpNet::glorot(widths, Activation::Tanh, Activation::Tanh, rng);
  const std::size_t feat = m.trunk.output_width();
  m.score_head = MlpNet::glorot({feat, latent}, Activation::Identity, Activation::Identity, rng);
  m.noise_head = MlpNet::glorot({feat, latent}, Activation::Identity, Activation::Identity, rng);
  return m;
}

struct DiffusionPass {
  ForwardTrace trunk, score, noise;
};

inline DiffusionPass diffusion_forward(const DiffusionModel& m, const Matrix& z,
                                       std::span<const std::size_t> t) {
  if (static_cast<std::size_t>(z.cols()) != m.latent) throw ConfigError("diffusion: latent width mismatch");
  Matrix in(z.rows(), static_cast<Eigen::Index>(m.latent + m.embedding_width));
  in.leftCols(z.cols()) = z;
  in.rightCols(static_cast<Eigen::Index>(m.embedding_width)) = timestep_embedding(t, m.embedding_width);
  DiffusionPass p;
  p.trunk = mlp_forward(m.trunk, in);
  p.score = mlp_forward(m.score_head, p.trunk.output());
  p.noise = mlp_forward(m.noise_head, p.trunk.output());
  return p;
}

inline Matrix predict_noise(const DiffusionModel& m, const Matrix& z, std::span<const std::size_t> t) {
  return diffusion_forward(m, z, t).noise.output();
}

struct DiffusionGrads {
  MlpGrads trunk, score, noise;
};

inline DiffusionGrads zero_grads(const DiffusionModel& m) {
  return {zero_grads(m.trunk), zero_grads(m.score_head), zero_grads(m.noise_head)};
}

struct SdrmLoss {
  double loss = 0.0;
  DiffusionGrads grads;
  // Per-sample pieces, for diagnostics and the sigma_nu = 0 identity.
  std::vector<double> first_term, second_term, delta_norm2;
};

inline constexpr double kSdrmDenominatorFloor = 1e-8;

/// Batch-mean SDRM objective on given z_t, perturbed z_hat and timesteps,
/// with gradients for the denoiser only.
inline SdrmLoss sdrm_loss_and_grads(const DiffusionModel& m, const Matrix& z_t, const Matrix& z_hat,
                                    std::span<const std::size_t> t) {
  const auto pz = diffusion_forward(m, z_t, t);
  const auto ph = diffusion_forward(m, z_hat, t);
  const Matrix& s_z = pz.score.output();
  const Matrix& s_h = ph.score.output();
  const Matrix delta = pz.noise.output() - z_t;
  const Matrix a = (s_h - s_z) - delta;
  const Matrix b = s_z - delta;
  const Eigen::Index B = z_t.rows();
  const double inv_b = 1.0 / static_cast<double>(B);

  Matrix d_sh(B, z_t.cols()), d_sz(B, z_t.cols()), d_eps(B, z_t.cols());
  SdrmLoss out;
  out.first_term.resize(static_cast<std::size_t>(B));
  out.second_term.resize(static_cast<std::size_t>(B));
  out.delta_norm2.resize(static_cast<std::size_t>(B));
  for (Eigen::Index r = 0; r < B; ++r) {
    const double na = a.row(r).squaredNorm();
    const double nb = b.row(r).squaredNorm();
    const double nd = delta.row(r).squaredNorm();
    const bool clamped = nd < kSdrmDenominatorFloor;
    const double den = clamped ? kSdrmDenominatorFloor : nd;
    out.first_term[static_cast<std::size_t>(r)] = na;
    out.second_term[static_cast<std::size_t>(r)] = nb;
    out.delta_norm2[static_cast<std::size_t>(r)] = nd;
    out.loss += (na + nb) / den * inv_b;
    const double c = 2.0 * inv_b / den;
    d_sh.row(r) = c * a.row(r);
    d_sz.row(r) = c * (b.row(r) - a.row(r));
    d_eps.row(r) = -c * (a.row(r) + b.row(r));
    if (!clamped) d_eps.row(r) -= (2.0 * (na + nb) * inv_b / (den * den)) * delta.row(r);
  }
  if (!std::isfinite(out.loss)) throw TrainingError("sdrm_loss: non-finite loss");

  const auto gs_z = mlp_backward(m.score_head, pz.score, d_sz);
  const auto gs_h = mlp_backward(m.score_head, ph.score, d_sh);
  out.grads.noise = mlp_backward(m.noise_head, pz.noise, d_eps);
  out.grads.score = gs_z;
  accumulate(out.grads.score, gs_h);
  out.grads.trunk = mlp_backward(m.trunk, pz.trunk, gs_z.input + out.grads.noise.input);
  accumulate(out.grads.trunk, mlp_backward(m.trunk, ph.trunk, gs_h.input));
  return out;
}

/// Frozen draws for one SDRM batch.
struct SdrmDraws {
  Matrix z0;
  std::vector<std::size_t> t;
  Matrix eps;
  Matrix nu;
};

/// Encodes `x` with the frozen VAE (reparameterised sample) and draws t, eps, nu.
inline SdrmDraws draw_sdrm_batch(const VaeModel& vae, const Matrix& x, const NoiseSchedule& schedule,
                                 double sigma_nu, Rng& rng) {
  const auto g = encode(vae, l2_normalize_rows(x));
  SdrmDraws d;
  d.z0 = reparameterize(g.mu, g.logvar, rng);
  std::uniform_int_distribution<std::size_t> pick(1, schedule.steps());
  d.t.resize(static_cast<std::size_t>(x.rows()));
  for (auto& s : d.t) s = pick(rng);
  d.eps = standard_normal(d.z0.rows(), d.z0.cols(), rng);
  d.nu = std::sqrt(sigma_nu) * standard_normal(d.z0.rows(), d.z0.cols(), rng);
  return d;
}

inline SdrmLoss sdrm_loss(const DiffusionModel& m, const SdrmDraws& d, const NoiseSchedule& schedule) {
  const Matrix z_t = q_sample(d.z0, d.t, d.eps, schedule);
  return sdrm_loss_and_grads(m, z_t, z_t + d.nu, d.t);
}

inline SdrmLoss sdrm_loss(const DiffusionModel& m, const VaeModel& vae, const Matrix& x,
                          const NoiseSchedule& schedule, double sigma_nu, Rng& rng) {
  return sdrm_loss(m, draw_sdrm_batch(vae, x, schedule, sigma_nu, rng), schedule);
}

struct DiffusionOptimizer {
  AdamState trunk, score, noise;

  DiffusionOptimizer(const DiffusionModel& m, AdamConfig c)
      : trunk(m.trunk, c), score(m.score_head, c), noise(m.noise_head, c) {}

  void step(DiffusionModel& m, const DiffusionGrads& g) {
    adam_step(m.trunk, g.trunk, trunk);
    adam_step(m.score_head, g.score, score);
    adam_step(m.noise_head, g.noise, noise);
  }
};

struct SdrmTrainResult {
  DiffusionModel model;
  NoiseSchedule schedule;
  std::vector<double> epoch_loss;
};

/// Fixed number of epochs of Adam on the denoiser; the VAE is read-only.
inline SdrmTrainResult train_sdrm(const VaeModel& vae, const InteractionMatrix& train,
                                  const DiffusionHyper& h, Rng& rng,
                                  const std::function<void(std::size_t, double)>& on_epoch = {}) {
  if (h.batch_size == 0) throw ConfigError("batch size must be >= 1");
  if (train.items() != vae.items()) throw ConfigError("train_sdrm: VAE item count mismatch");
  SdrmTrainResult r;
  r.schedule = build_schedule(h.timesteps, h.beta_start, h.beta_end);
  r.model = make_diffusion(vae.latent, h, rng);
  DiffusionOptimizer opt(r.model, {h.learning_rate});
  const std::size_t U = train.users();
  std::vector<std::size_t> order(U);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= h.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t lo = 0, batch = 0; lo < U; lo += h.batch_size, ++batch) {
      const std::size_t hi = std::min(U, lo + h.batch_size);
      const Matrix x = dense_rows(train, std::span<const std::size_t>(order.data() + lo, hi - lo));
      try {
        const auto l = sdrm_loss(r.model, vae, x, r.schedule, h.sigma_nu, rng);
        opt.step(r.model, l.grads);
        total += l.loss * static_cast<double>(hi - lo);
      } catch (const TrainingError& e) {
        throw TrainingError("SDRM diverged at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch) + ": " + e.what());
      }
    }
    r.epoch_loss.push_back(U ? total / static_cast<double>(U) : 0.0);
    if (on_epoch) on_epoch(epoch, r.epoch_loss.back());
  }
  return r;
}

enum class SamplerMode { Full, Multi };

inline SamplerMode parse_sampler_mode(std::string_view s) {
  if (s == "full") return SamplerMode::Full;
  if (s == "multi") return SamplerMode::Multi;
  throw ConfigError("unknown sampler mode '" + std::string(s) + "' (full|multi)");
}

inline const char* sampler_mode_name(SamplerMode m) { return m == SamplerMode::Full ? "full" : "multi"; }

/// Predicts eps for rows `z` at per-row timesteps `t`.
using NoisePredictor = std::function<Matrix(const Matrix& z, std::span<const std::size_t> t)>;

struct SamplerOptions {
  /// Replaces sigma_t by 0 in every step (deterministic reverse process).
  bool zero_variance = false;
};

struct SampledLatents {
  Matrix z;
  std::vector<std::size_t> start;  // first denoising step per sample
  std::size_t denoise_steps = 0;  // number of reverse iterations executed
};

/// z ~ N(0, I); for t = start..1:
///   z <- (z - (1 - alpha_t) / sqrt(1 - abar_t) * eps(z, t)) / sqrt(alpha_t) + sigma_t * zeta,
/// zeta ~ N(0, I) for t > 1 and 0 at t = 1. Full starts every sample at T, Multi
/// at an independent uniform draw from 1..T.
inline SampledLatents sample_latents(const NoisePredictor& eps_fn, const NoiseSchedule& schedule,
                                     std::size_t latent, std::size_t n, SamplerMode mode, Rng& rng,
                                     SamplerOptions options = {}) {
  if (n == 0) throw ConfigError("sample_latents: n must be >= 1");
  const std::size_t T = schedule.steps();
  SampledLatents out;
  out.z = standard_normal(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(latent), rng);
  out.start.assign(n, T);
  if (mode == SamplerMode::Multi) {
    std::uniform_int_distribution<std::size_t> pick(1, T);
    for (auto& s : out.start) s = pick(rng);
  }
  const std::size_t top = *std::max_element(out.start.begin(), out.start.end());
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t t = top; t >= 1; --t) {
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < n; ++i)
      if (out.start[i] >= t) active.push_back(i);
    Matrix z(static_cast<Eigen::Index>(active.size()), static_cast<Eigen::Index>(latent));
    for (std::size_t r = 0; r < active.size(); ++r)
      z.row(static_cast<Eigen::Index>(r)) = out.z.row(static_cast<Eigen::Index>(active[r]));
    const std::vector<std::size_t> steps(active.size(), t);
    const Matrix eps = eps_fn(z, steps);
    const double a = schedule.alpha(t);
    const double coef = (1.0 - a) / std::sqrt(1.0 - schedule.alpha_bar(t));
    const double sigma = options.zero_variance ? 0.0 : schedule.sigma(t);
    for (std::size_t r = 0; r < active.size(); ++r) {
      const auto R = static_cast<Eigen::Index>(r);
      RowVector next = (z.row(R) - coef * eps.row(R)) / std::sqrt(a);
      if (t > 1)
        for (Eigen::Index c = 0; c < next.size(); ++c) next(c) += sigma * normal(rng);
      out.z.row(static_cast<Eigen::Index>(active[r])) = next;
    }
    ++out.denoise_steps;
    if (t == 1) break;
  }
  if (!out.z.allFinite()) throw TrainingError("sample_latents: non-finite latent");
  return out;
}

inline SampledLatents sample_latents(const DiffusionModel& m, const NoiseSchedule& schedule, std::size_t n,
                                     SamplerMode mode, Rng& rng, SamplerOptions options = {}) {
  return sample_latents(
      [&m](const Matrix& z, std::span<const std::size_t> t) { return predict_noise(m, z, t); }, schedule,
      m.latent, n, mode, rng, options);
}

inline nlohmann::json diffusion_header(const DiffusionModel& m, const DiffusionHyper& h) {
  return {{"timesteps", h.timesteps},         {"beta_start", h.beta_start},
          {"beta_end", h.beta_end},           {"sigma_nu", h.sigma_nu},
          {"latent", m.latent},               {"embedding_width", m.embedding_width},
          {"hidden_layers", h.hidden_layers}, {"hidden_width", h.hidden_width}};
}

}  // namespace sdrm
