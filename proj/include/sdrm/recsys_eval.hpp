// SPDX-License-Identifier: Apache-2.0
//
// Downstream utility check: a logistic matrix-factorisation recommender
// trained on original / augmented / synthetic-replaced data and scored with
// Recall@k and NDCG@k on held-out ratings of injected real users.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "sdrm/common.hpp"
#include "sdrm/dataset.hpp"
#include "sdrm/metrics.hpp"
#include "sdrm/postprocess.hpp"
#include "sdrm/tensor_nn.hpp"

namespace sdrm {

struct MfHyper {
  std::size_t factors = 64;
  double learning_rate = 0.01;
  std::size_t epochs = 30;
  std::size_t negatives = 4;
  double reg = 0.01;
  double init_scale = 0.1;
};

struct MfModel {
  Matrix user_factors;  // U x d
  Matrix item_factors;  // I x d
  Eigen::VectorXd user_bias;
  Eigen::VectorXd item_bias;
  double global_bias = 0.0;

  double score(std::size_t u, std::size_t i) const {
    return global_bias + user_bias(static_cast<Eigen::Index>(u)) + item_bias(static_cast<Eigen::Index>(i)) +
           user_factors.row(static_cast<Eigen::Index>(u)).dot(item_factors.row(static_cast<Eigen::Index>(i)));
  }

  std::vector<double> user_scores(std::size_t u) const {
    const Eigen::VectorXd s = item_factors * user_factors.row(static_cast<Eigen::Index>(u)).transpose() +
                              item_bias +
                              Eigen::VectorXd::Constant(item_bias.size(),
                                                        global_bias + user_bias(static_cast<Eigen::Index>(u)));
    return {s.data(), s.data() + s.size()};
  }
};

struct MfTrainResult {
  MfModel model;
  std::vector<double> epoch_loss;
};

/// SGD on the logistic loss over every positive plus `negatives` uniformly
/// drawn non-positive items per positive.
inline MfTrainResult train_mf(const InteractionMatrix& m, const MfHyper& h, Rng& rng) {
  if (m.users() == 0 || m.items() == 0 || m.nnz() == 0) throw DataError("train_mf: empty matrix");
  if (h.factors == 0) throw ConfigError("MF needs at least one factor");
  const auto U = static_cast<Eigen::Index>(m.users()), I = static_cast<Eigen::Index>(m.items()),
             d = static_cast<Eigen::Index>(h.factors);
  MfTrainResult r;
  std::normal_distribution<double> init(0.0, h.init_scale);
  r.model.user_factors = Matrix(U, d);
  r.model.item_factors = Matrix(I, d);
  for (Eigen::Index k = 0; k < r.model.user_factors.size(); ++k) r.model.user_factors.data()[k] = init(rng);
  for (Eigen::Index k = 0; k < r.model.item_factors.size(); ++k) r.model.item_factors.data()[k] = init(rng);
  r.model.user_bias = Eigen::VectorXd::Zero(U);
  r.model.item_bias = Eigen::VectorXd::Zero(I);

  std::vector<std::pair<std::int32_t, std::int32_t>> positives;
  positives.reserve(m.nnz());
  for (std::size_t u = 0; u < m.users(); ++u)
    for (auto i : m.row(u)) positives.emplace_back(static_cast<std::int32_t>(u), i);
  std::uniform_int_distribution<std::int32_t> any_item(0, static_cast<std::int32_t>(I - 1));
  auto& mdl = r.model;
  RowVector pu(d);
  auto sgd = [&](std::int32_t u, std::int32_t i, double label) {
    const double pred = mdl.score(static_cast<std::size_t>(u), static_cast<std::size_t>(i));
    const double p = detail::sigmoid(pred);
    const double err = label - p;
    pu = mdl.user_factors.row(u);
    mdl.user_factors.row(u) += h.learning_rate * (err * mdl.item_factors.row(i) - h.reg * pu);
    mdl.item_factors.row(i) += h.learning_rate * (err * pu - h.reg * mdl.item_factors.row(i));
    mdl.user_bias(u) += h.learning_rate * (err - h.reg * mdl.user_bias(u));
    mdl.item_bias(i) += h.learning_rate * (err - h.reg * mdl.item_bias(i));
    mdl.global_bias += h.learning_rate * err;
    return label > 0.5 ? -std::log(std::max(p, 1e-300)) : -std::log(std::max(1.0 - p, 1e-300));
  };
  for (std::size_t epoch = 0; epoch < h.epochs; ++epoch) {
    std::shuffle(positives.begin(), positives.end(), rng);
    double loss = 0.0;
    std::size_t count = 0;
    for (const auto& [u, i] : positives) {
      loss += sgd(u, i, 1.0);
      ++count;
      const auto& row = m.row(static_cast<std::size_t>(u));
      if (row.size() >= static_cast<std::size_t>(I)) continue;
      for (std::size_t n = 0; n < h.negatives; ++n) {
        std::int32_t j = any_item(rng);
        while (std::binary_search(row.begin(), row.end(), j)) j = any_item(rng);
        loss += sgd(u, j, 0.0);
        ++count;
      }
    }
    loss /= static_cast<double>(count);
    if (!std::isfinite(loss) || !mdl.user_factors.allFinite() || !mdl.item_factors.allFinite())
      throw TrainingError("MF diverged at epoch " + std::to_string(epoch + 1));
    r.epoch_loss.push_back(loss);
  }
  return r;
}

inline std::vector<std::int32_t> recommend_topk(const MfModel& model, std::size_t user, std::size_t k,
                                                std::span<const std::int32_t> mask) {
  const auto s = model.user_scores(user);
  return rank_topk(s, k, mask);
}

enum class Protocol { Original, Augment, Replace, Popularity };

inline Protocol parse_protocol(std::string_view s) {
  if (s == "original") return Protocol::Original;
  if (s == "augment") return Protocol::Augment;
  if (s == "replace") return Protocol::Replace;
  if (s == "popularity") return Protocol::Popularity;
  throw ConfigError("unknown protocol '" + std::string(s) + "' (original|augment|replace|popularity)");
}

inline const char* protocol_name(Protocol p) {
  switch (p) {
    case Protocol::Original: return "original";
    case Protocol::Augment: return "augment";
    case Protocol::Replace: return "replace";
    case Protocol::Popularity: return "popularity";
  }
  return "?";
}

inline const std::vector<std::size_t>& default_k_list() {
  static const std::vector<std::size_t> ks{1, 3, 5, 10, 20, 50};
  return ks;
}

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> per_run;
};

struct EvalReport {
  std::string protocol;
  std::string dataset;
  std::size_t runs = 0;
  std::vector<std::size_t> ks;
  std::map<std::string, MetricSummary> metrics;  // "recall@10", "ndcg@10", ...

  const MetricSummary& at(const std::string& metric, std::size_t k) const {
    return metrics.at(metric + "@" + std::to_string(k));
  }
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json m = nlohmann::json::object();
  for (const auto& [name, s] : r.metrics) m[name] = {{"mean", s.mean}, {"std", s.std}, {"per_run", s.per_run}};
  return {{"protocol", r.protocol}, {"dataset", r.dataset}, {"runs", r.runs}, {"ks", r.ks}, {"metrics", m}};
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.protocol = j.at("protocol").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.runs = j.at("runs").get<std::size_t>();
  r.ks = j.at("ks").get<std::vector<std::size_t>>();
  for (const auto& [name, s] : j.at("metrics").items())
    r.metrics[name] = {s.at("mean").get<double>(), s.at("std").get<double>(),
                       s.at("per_run").get<std::vector<double>>()};
  return r;
}

/// Inputs shared by every protocol.
struct EvalBundle {
  const DatasetSplits* splits = nullptr;
  const SyntheticDataset* synthetic = nullptr;
  std::string dataset = "dataset";
  double inject_fraction = 0.2;
};

struct EvalOptions {
  std::vector<std::size_t> ks = default_k_list();
  std::size_t runs = 5;
  std::uint64_t seed = 0;
  unsigned workers = 0;  // 0 -> worker_count()
};

/// Training matrix a protocol trains on, before ground-truth injection.
inline InteractionMatrix protocol_base(Protocol p, const EvalBundle& b) {
  if ((p == Protocol::Augment || p == Protocol::Replace) && b.synthetic == nullptr)
    throw ConfigError(std::string("protocol '") + protocol_name(p) + "' needs a synthetic dataset");
  switch (p) {
    case Protocol::Original:
    case Protocol::Popularity: return b.splits->train;
    case Protocol::Augment: return InteractionMatrix::concat(b.splits->train, b.synthetic->matrix);
    case Protocol::Replace: return b.synthetic->matrix;
  }
  return {};
}

/// Per-user metric means for one trained scorer over the injected users.
template <class ScoreFn>
std::map<std::string, double> score_injected(const InjectedTraining& inj, const EvalPartition& eval,
                                             const std::vector<std::size_t>& ks, ScoreFn&& scores_for_row) {
  const std::size_t kmax = *std::max_element(ks.begin(), ks.end());
  std::map<std::string, double> sums;
  std::size_t n = 0;
  for (std::size_t j = 0; j < inj.injected_users.size(); ++j) {
    const std::size_t eval_user = inj.injected_users[j];
    const auto& relevant = eval.heldout.row(eval_user);
    if (relevant.empty()) continue;
    const std::size_t row = inj.first_injected_row + j;
    const std::vector<double> s = scores_for_row(row);
    const auto& mask = inj.matrix.row(row);
    const auto ranked = rank_topk(s, kmax, mask);
    for (auto k : ks) {
      sums["recall@" + std::to_string(k)] += *recall_at_k(ranked, relevant, k);
      sums["ndcg@" + std::to_string(k)] += *ndcg_at_k(ranked, relevant, k);
    }
    ++n;
  }
  if (n == 0) throw DataError("evaluation: no injected user has held-out items");
  for (auto& [_, v] : sums) v /= static_cast<double>(n);
  return sums;
}

/// Runs `runs` independent seeded repetitions of: inject a fraction of test
/// users into the protocol's training matrix, fit the recommender, rank all
/// items with the injected visible items masked, score held-out items.
inline EvalReport evaluate_protocol(Protocol p, const EvalBundle& b, const MfHyper& mf, const EvalOptions& opt) {
  if (b.splits == nullptr) throw ConfigError("evaluate_protocol: no splits");
  if (opt.runs == 0 || opt.ks.empty()) throw ConfigError("evaluate_protocol: runs and k list must be non-empty");
  const InteractionMatrix base = protocol_base(p, b);
  std::vector<std::map<std::string, double>> per_run(opt.runs);
  std::vector<std::exception_ptr> errors(opt.runs);
  auto one_run = [&](std::size_t r) {
    try {
      const std::uint64_t seed = derive_seed(opt.seed, r);
      const auto inj = inject_ground_truth(base, b.splits->test_eval, b.inject_fraction, derive_seed(seed, 1));
      if (p == Protocol::Popularity) {
        std::vector<double> pop(inj.matrix.items(), 0.0);
        for (const auto& row : inj.matrix.rows())
          for (auto i : row) pop[static_cast<std::size_t>(i)] += 1.0;
        per_run[r] = score_injected(inj, b.splits->test_eval, opt.ks, [&](std::size_t) { return pop; });
      } else {
        Rng rng(derive_seed(seed, 2));
        const auto model = train_mf(inj.matrix, mf, rng).model;
        per_run[r] = score_injected(inj, b.splits->test_eval, opt.ks,
                                    [&](std::size_t row) { return model.user_scores(row); });
      }
    } catch (...) {
      errors[r] = std::current_exception();
    }
  };
  const unsigned workers = std::max(1u, std::min<unsigned>(opt.workers ? opt.workers : worker_count(),
                                                          static_cast<unsigned>(opt.runs)));
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t r = w; r < opt.runs; r += workers) one_run(r);
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  EvalReport rep;
  rep.protocol = protocol_name(p);
  rep.dataset = b.dataset;
  rep.runs = opt.runs;
  rep.ks = opt.ks;
  for (const auto& [name, _] : per_run.front()) {
    MetricSummary s;
    for (const auto& run : per_run) s.per_run.push_back(run.at(name));
    s.mean = std::accumulate(s.per_run.begin(), s.per_run.end(), 0.0) / static_cast<double>(opt.runs);
    if (opt.runs > 1) {
      double ss = 0.0;
      for (double v : s.per_run) ss += (v - s.mean) * (v - s.mean);
      s.std = std::sqrt(ss / static_cast<double>(opt.runs - 1));
    }
    rep.metrics[name] = std::move(s);
  }
  return rep;
}

/// Markdown table, one row per report, Recall@k then NDCG@k columns. In each
/// column the best mean is bold and the second best underlined.
inline std::string render_eval_markdown(const std::vector<EvalReport>& reports) {
  if (reports.empty()) return "_no evaluation reports_\n";
  const auto& ks = reports.front().ks;
  std::vector<std::string> cols;
  for (const char* m : {"recall", "ndcg"})
    for (auto k : ks) cols.push_back(std::string(m) + "@" + std::to_string(k));
  std::ostringstream os;
  os << "| Protocol |";
  for (const auto& c : cols) os << ' ' << (c.rfind("recall", 0) == 0 ? "Recall" : "NDCG") << c.substr(c.find('@')) << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < cols.size(); ++i) os << "---|";
  os << '\n';
  std::map<std::string, std::pair<double, double>> top2;  // best, second
  for (const auto& c : cols) {
    std::vector<double> v;
    for (const auto& r : reports)
      if (r.metrics.count(c)) v.push_back(r.metrics.at(c).mean);
    std::sort(v.begin(), v.end(), std::greater<>());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    top2[c] = {v.empty() ? NAN : v[0], v.size() > 1 ? v[1] : NAN};
  }
  for (const auto& r : reports) {
    os << "| " << r.protocol << " |";
    for (const auto& c : cols) {
      if (!r.metrics.count(c)) {
        os << " - |";
        continue;
      }
      const auto& s = r.metrics.at(c);
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(4) << s.mean << " ± " << std::setprecision(3) << s.std;
      std::string text = cell.str();
      if (reports.size() > 1 && s.mean == top2[c].first) text = "**" + text + "**";
      else if (reports.size() > 2 && s.mean == top2[c].second) text = "<u>" + text + "</u>";
      os << ' ' << text << " |";
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace sdrm
