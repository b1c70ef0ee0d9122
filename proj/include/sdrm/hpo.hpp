// SPDX-License-Identifier: Apache-2.0
//
// Random search over a gridded hyperparameter space with k-fold
// cross-validation and successive-halving pruning.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "sdrm/common.hpp"
#include "sdrm/dataset.hpp"
#include "sdrm/diffusion.hpp"
#include "sdrm/multivae.hpp"

namespace sdrm {

/// Values lo, lo + step, ... not exceeding hi.
struct GridRange {
  double lo = 0.0;
  double hi = 0.0;
  double step = 1.0;

  std::size_t points() const {
    if (hi < lo || step <= 0.0) throw ConfigError("grid range needs lo <= hi and step > 0");
    return static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
  }
  double at(std::size_t idx) const { return lo + static_cast<double>(idx) * step; }
  std::optional<std::size_t> index_of(double v) const {
    const double k = (v - lo) / step;
    const double r = std::round(k);
    if (std::abs(k - r) > 1e-6 || r < 0 || r >= static_cast<double>(points())) return std::nullopt;
    return static_cast<std::size_t>(r);
  }
  bool contains(double v) const { return index_of(v).has_value(); }
};

/// Defaults reproduce the published search table. The VAE hidden width grid
/// starts at the sampled latent width: {latent, latent + step, ..., <= hi}.
struct SearchSpace {
  GridRange sdrm_epochs{5, 501, 5};
  GridRange sdrm_lr{1e-6, 1e-4, 1e-6};
  GridRange sigma_nu{0.01, 1.0, 0.1};
  GridRange timesteps{3, 200, 5};
  GridRange sdrm_batch{30, 1000, 10};
  GridRange mlp_hidden_layers{0, 5, 1};
  GridRange mlp_latent{50, 1000, 50};
  double vae_hidden_max = 1000;
  double vae_hidden_step = 50;
  GridRange vae_lr{1e-4, 1e-2, 1e-4};
  GridRange vae_batch{30, 1000, 10};

  GridRange vae_hidden_for(double latent) const { return {latent, vae_hidden_max, vae_hidden_step}; }
};

struct TrialConfig {
  std::size_t sdrm_epochs = 5;
  double sdrm_lr = 1e-6;
  double sigma_nu = 0.01;
  std::size_t timesteps = 3;
  std::size_t sdrm_batch = 30;
  std::size_t mlp_hidden_layers = 0;
  std::size_t mlp_latent = 50;
  std::size_t vae_hidden = 50;
  double vae_lr = 1e-4;
  std::size_t vae_batch = 30;

  friend bool operator==(const TrialConfig&, const TrialConfig&) = default;
};

inline nlohmann::json to_json(const TrialConfig& c) {
  return {{"sdrm_epochs", c.sdrm_epochs}, {"sdrm_lr", c.sdrm_lr},
          {"sigma_nu", c.sigma_nu},       {"timesteps", c.timesteps},
          {"sdrm_batch", c.sdrm_batch},   {"mlp_hidden_layers", c.mlp_hidden_layers},
          {"mlp_latent", c.mlp_latent},   {"vae_hidden", c.vae_hidden},
          {"vae_lr", c.vae_lr},           {"vae_batch", c.vae_batch}};
}

inline TrialConfig trial_config_from_json(const nlohmann::json& j) {
  TrialConfig c;
  c.sdrm_epochs = j.at("sdrm_epochs").get<std::size_t>();
  c.sdrm_lr = j.at("sdrm_lr").get<double>();
  c.sigma_nu = j.at("sigma_nu").get<double>();
  c.timesteps = j.at("timesteps").get<std::size_t>();
  c.sdrm_batch = j.at("sdrm_batch").get<std::size_t>();
  c.mlp_hidden_layers = j.at("mlp_hidden_layers").get<std::size_t>();
  c.mlp_latent = j.at("mlp_latent").get<std::size_t>();
  c.vae_hidden = j.at("vae_hidden").get<std::size_t>();
  c.vae_lr = j.at("vae_lr").get<double>();
  c.vae_batch = j.at("vae_batch").get<std::size_t>();
  return c;
}

/// Optional overrides: {"sdrm_epochs": [lo, hi, step], ..., "vae_hidden": [max, step]}.
inline SearchSpace search_space_from_json(const nlohmann::json& j) {
  SearchSpace s;
  auto grid = [&](const char* key, GridRange& g) {
    if (!j.contains(key)) return;
    const auto v = j.at(key).get<std::vector<double>>();
    if (v.size() != 3) throw ConfigError(std::string("search space '") + key + "' needs [lo, hi, step]");
    g = {v[0], v[1], v[2]};
    (void)g.points();
  };
  grid("sdrm_epochs", s.sdrm_epochs);
  grid("sdrm_lr", s.sdrm_lr);
  grid("sigma_nu", s.sigma_nu);
  grid("timesteps", s.timesteps);
  grid("sdrm_batch", s.sdrm_batch);
  grid("mlp_hidden_layers", s.mlp_hidden_layers);
  grid("mlp_latent", s.mlp_latent);
  grid("vae_lr", s.vae_lr);
  grid("vae_batch", s.vae_batch);
  if (j.contains("vae_hidden")) {
    const auto v = j.at("vae_hidden").get<std::vector<double>>();
    if (v.size() != 2) throw ConfigError("search space 'vae_hidden' needs [max, step]");
    s.vae_hidden_max = v[0];
    s.vae_hidden_step = v[1];
  }
  return s;
}

/// Grid membership of every field plus latent <= VAE hidden.
inline bool is_grid_valid(const SearchSpace& s, const TrialConfig& c) {
  return s.sdrm_epochs.contains(static_cast<double>(c.sdrm_epochs)) && s.sdrm_lr.contains(c.sdrm_lr) &&
         s.sigma_nu.contains(c.sigma_nu) && s.timesteps.contains(static_cast<double>(c.timesteps)) &&
         s.sdrm_batch.contains(static_cast<double>(c.sdrm_batch)) &&
         s.mlp_hidden_layers.contains(static_cast<double>(c.mlp_hidden_layers)) &&
         s.mlp_latent.contains(static_cast<double>(c.mlp_latent)) &&
         s.vae_hidden_for(static_cast<double>(c.mlp_latent)).contains(static_cast<double>(c.vae_hidden)) &&
         s.vae_lr.contains(c.vae_lr) && s.vae_batch.contains(static_cast<double>(c.vae_batch));
}

/// Uniform draw on each grid; the VAE hidden grid is conditioned on the drawn latent.
inline TrialConfig sample_config(const SearchSpace& s, Rng& rng) {
  auto draw = [&](const GridRange& g) {
    std::uniform_int_distribution<std::size_t> pick(0, g.points() - 1);
    return g.at(pick(rng));
  };
  auto as_count = [](double v) { return static_cast<std::size_t>(std::llround(v)); };
  TrialConfig c;
  c.sdrm_epochs = as_count(draw(s.sdrm_epochs));
  c.sdrm_lr = draw(s.sdrm_lr);
  c.sigma_nu = draw(s.sigma_nu);
  c.timesteps = as_count(draw(s.timesteps));
  c.sdrm_batch = as_count(draw(s.sdrm_batch));
  c.mlp_hidden_layers = as_count(draw(s.mlp_hidden_layers));
  c.mlp_latent = as_count(draw(s.mlp_latent));
  const auto hidden = s.vae_hidden_for(static_cast<double>(c.mlp_latent));
  if (hidden.hi < hidden.lo) throw ConfigError("search space: latent exceeds VAE hidden maximum");
  c.vae_hidden = as_count(draw(hidden));
  c.vae_lr = draw(s.vae_lr);
  c.vae_batch = as_count(draw(s.vae_batch));
  return c;
}

/// Model settings implied by a trial. "MLP latent neurons" sets both the VAE
/// latent width and the denoiser hidden width.
inline VaeHyper vae_hyper_for(const TrialConfig& c, VaeHyper base = {}) {
  base.latent = c.mlp_latent;
  base.hidden = {c.vae_hidden};
  base.learning_rate = c.vae_lr;
  base.batch_size = c.vae_batch;
  return base;
}

inline DiffusionHyper diffusion_hyper_for(const TrialConfig& c, DiffusionHyper base = {}) {
  base.epochs = c.sdrm_epochs;
  base.learning_rate = c.sdrm_lr;
  base.sigma_nu = c.sigma_nu;
  base.timesteps = c.timesteps;
  base.batch_size = c.sdrm_batch;
  base.hidden_layers = c.mlp_hidden_layers;
  base.hidden_width = c.mlp_latent;
  return base;
}

/// One cross-validation fold: a training matrix and validation users split
/// into visible / held-out items.
struct FoldData {
  InteractionMatrix train;
  EvalPartition validation;
};

/// Reshuffles the train + validation users (never test) into `folds`
/// disjoint validation chunks. One fold keeps the stored train/validation split.
inline std::vector<FoldData> make_folds(const DatasetSplits& splits, std::size_t folds, std::uint64_t seed,
                                        double holdout_fraction = 0.2) {
  if (folds == 0) throw ConfigError("folds must be >= 1");
  if (folds == 1) return {{splits.train, splits.validation_eval}};
  const InteractionMatrix pool = InteractionMatrix::concat(splits.train, splits.validation);
  if (pool.users() < folds) throw DataError("fewer pool users than folds");
  std::vector<std::size_t> order(pool.users());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<FoldData> out;
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> val, tr;
    for (std::size_t i = 0; i < order.size(); ++i) (i % folds == f ? val : tr).push_back(order[i]);
    std::sort(val.begin(), val.end());
    std::sort(tr.begin(), tr.end());
    out.push_back({pool.select_users(tr),
                   partition_for_eval(pool.select_users(val), holdout_fraction, derive_seed(seed, 1000 + f))});
  }
  return out;
}

/// Validation score (Recall@10) of `config` on one fold at a fraction of the
/// full training budget. Throwing TrainingError marks the trial failed.
using TrialObjective =
    std::function<double(const TrialConfig&, const FoldData&, double budget_fraction, std::uint64_t seed)>;

struct TrialResult {
  std::size_t trial = 0;
  TrialConfig config;
  std::vector<double> fold_scores;
  double mean = -std::numeric_limits<double>::infinity();
  bool failed = false;
  std::size_t rung = 0;  // last rung evaluated (1-based)
  double budget = 0.0;
  double wall_seconds = 0.0;
};

inline nlohmann::json to_json(const TrialResult& r) {
  nlohmann::json j{{"trial", r.trial},   {"config", to_json(r.config)}, {"fold_scores", r.fold_scores},
                   {"failed", r.failed}, {"rung", r.rung},              {"budget", r.budget}};
  j["mean"] = r.failed ? nlohmann::json(nullptr) : nlohmann::json(r.mean);
  return j;
}

/// Mean objective over the folds; any TrainingError fails the trial.
inline TrialResult run_trial(const TrialConfig& config, const std::vector<FoldData>& folds,
                             const TrialObjective& objective, double budget_fraction, std::uint64_t seed) {
  TrialResult r;
  r.config = config;
  r.budget = budget_fraction;
  const auto start = std::chrono::steady_clock::now();
  try {
    for (std::size_t f = 0; f < folds.size(); ++f)
      r.fold_scores.push_back(objective(config, folds[f], budget_fraction, derive_seed(seed, f)));
    r.mean = std::accumulate(r.fold_scores.begin(), r.fold_scores.end(), 0.0) /
             static_cast<double>(r.fold_scores.size());
  } catch (const TrainingError&) {
    r.failed = true;
    r.mean = -std::numeric_limits<double>::infinity();
  }
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

/// Evaluates every alive trial at each rung's budget, then keeps the best
/// max(1, floor(alive * keep_fraction)) (ties by lower trial index). Pruned
/// trials are not evaluated again. Returns one result per trial holding its
/// last evaluated rung.
inline std::vector<TrialResult> successive_halving(
    std::size_t trials, const std::vector<double>& rung_budgets, double keep_fraction,
    const std::function<TrialResult(std::size_t trial, double budget)>& evaluate, unsigned workers = 1) {
  if (trials == 0) throw ConfigError("successive halving needs at least one trial");
  if (rung_budgets.empty()) throw ConfigError("successive halving needs at least one rung");
  for (std::size_t r = 1; r < rung_budgets.size(); ++r)
    if (!(rung_budgets[r] > rung_budgets[r - 1])) throw ConfigError("rung budgets must increase");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw ConfigError("keep fraction must lie in (0, 1]");
  std::vector<TrialResult> results(trials);
  std::vector<std::size_t> alive(trials);
  std::iota(alive.begin(), alive.end(), std::size_t{0});
  workers = std::max(1u, workers);
  for (std::size_t rung = 0; rung < rung_budgets.size(); ++rung) {
    std::vector<std::thread> pool;
    const unsigned w_count = std::min<unsigned>(workers, static_cast<unsigned>(alive.size()));
    for (unsigned w = 0; w < w_count; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t a = w; a < alive.size(); a += w_count) {
          auto r = evaluate(alive[a], rung_budgets[rung]);
          r.trial = alive[a];
          r.rung = rung + 1;
          results[alive[a]] = std::move(r);
        }
      });
    for (auto& t : pool) t.join();
    std::stable_sort(alive.begin(), alive.end(), [&](std::size_t a, std::size_t b) {
      return results[a].mean > results[b].mean || (results[a].mean == results[b].mean && a < b);
    });
    const auto keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(static_cast<double>(alive.size()) * keep_fraction + 1e-9)));
    alive.resize(std::min(keep, alive.size()));
    std::sort(alive.begin(), alive.end());
  }
  return results;
}

struct SearchOptions {
  std::size_t budget = 30;  // trial count
  std::size_t folds = 5;
  std::vector<double> rung_budgets{0.10, 0.33, 1.0};
  double keep_fraction = 0.5;
  std::uint64_t seed = 0;
  unsigned workers = 1;
};

struct SearchResult {
  TrialConfig best;
  double best_score = -std::numeric_limits<double>::infinity();
  std::size_t best_trial = 0;
  std::vector<TrialResult> trace;  // one per trial, in trial order
};

/// Samples `budget` configs, prunes them with successive halving and returns
/// the best trial among those evaluated at the last rung any trial reached.
/// Scores from smaller budgets are not comparable and never win.
inline SearchResult search(const SearchSpace& space, const std::vector<FoldData>& folds,
                           const TrialObjective& objective, const SearchOptions& opt) {
  if (opt.budget == 0) throw ConfigError("search budget must be >= 1");
  Rng rng(opt.seed);
  std::vector<TrialConfig> configs;
  for (std::size_t i = 0; i < opt.budget; ++i) configs.push_back(sample_config(space, rng));
  SearchResult out;
  out.trace = successive_halving(
      opt.budget, opt.rung_budgets, opt.keep_fraction,
      [&](std::size_t i, double budget) {
        return run_trial(configs[i], folds, objective, budget, derive_seed(opt.seed, 7919 + i));
      },
      opt.workers);
  std::size_t top_rung = 0;
  for (const auto& r : out.trace)
    if (!r.failed) top_rung = std::max(top_rung, r.rung);
  bool any = false;
  for (const auto& r : out.trace) {
    if (r.failed || r.rung != top_rung) continue;
    if (!any || r.mean > out.best_score) {
      out.best = r.config;
      out.best_score = r.mean;
      out.best_trial = r.trial;
      any = true;
    }
  }
  if (!any) throw TrainingError("search: every trial failed");
  return out;
}

}  // namespace sdrm
