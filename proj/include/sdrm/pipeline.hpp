// SPDX-License-Identifier: Apache-2.0
//
// End-to-end stages behind the command-line tool: configuration, prepare,
// pipeline (train -> generate -> evaluate -> audit), report, audit, hpo, and
// the run manifest that records every artifact hash.

#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdrm/checkpoint.hpp"
#include "sdrm/common.hpp"
#include "sdrm/dataset.hpp"
#include "sdrm/diffusion.hpp"
#include "sdrm/hpo.hpp"
#include "sdrm/multivae.hpp"
#include "sdrm/postprocess.hpp"
#include "sdrm/privacy_audit.hpp"
#include "sdrm/recsys_eval.hpp"

namespace sdrm {

inline constexpr const char* kToolVersion = "0.1.0";

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Process exit code for an error: I/O 2, configuration/usage 3, data 4,
/// training 5, anything else 1.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const IoError*>(&e)) return 2;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const UsageError*>(&e)) return 3;
  if (dynamic_cast<const DataError*>(&e)) return 4;
  if (dynamic_cast<const TrainingError*>(&e)) return 5;
  return 1;
}

/// A stage failed; carries the stage name and the cause's exit code.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::exception& cause)
      : Error("stage '" + stage + "' failed: " + cause.what()),
        stage_(std::move(stage)),
        code_(exit_code_for(cause)) {}
  const std::string& stage() const { return stage_; }
  int exit_code() const { return code_; }

 private:
  std::string stage_;
  int code_;
};

// ---- configuration --------------------------------------------------------

struct DataConfig {
  std::string input;
  LoadOptions load;
  std::size_t min_user = 5;
  std::size_t min_item = 5;
  SplitRatios ratios;
  double holdout_fraction = 0.2;
  std::string name = "dataset";
};

struct PipelineConfig {
  std::uint64_t seed = 42;
  DataConfig data;
  std::string splits_dir;  // prepared splits; relative paths resolve against the config file
  VaeHyper vae;
  DiffusionHyper sdrm;
  SamplerMode mode = SamplerMode::Full;
  std::size_t samples = 0;  // 0 -> number of training users
  std::vector<Protocol> protocols{Protocol::Original, Protocol::Augment, Protocol::Replace};
  bool popularity_baseline = true;
  MfHyper mf;
  EvalOptions eval;
  double inject_fraction = 0.2;
  bool audit = true;
  // hpo
  SearchSpace space;
  SearchOptions search;
  std::size_t hpo_vae_max_epochs = 30;
  std::size_t hpo_mf_epochs = 10;
  json raw = json::object();
};

namespace detail {

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline PipelineConfig pipeline_config_from_json(const json& j, const fs::path& base_dir = {}) {
  using detail::read_opt;
  PipelineConfig c;
  c.raw = j;
  read_opt(j, "seed", c.seed);
  auto resolve = [&](std::string p) {
    if (p.empty() || fs::path(p).is_absolute() || base_dir.empty()) return p;
    return (base_dir / p).lexically_normal().string();
  };
  if (j.contains("data")) {
    const auto& d = j.at("data");
    read_opt(d, "input", c.data.input);
    c.data.input = resolve(c.data.input);
    if (d.contains("format")) c.data.load.format = parse_input_format(d.at("format").get<std::string>());
    if (d.contains("columns")) {
      const auto& col = d.at("columns");
      read_opt(col, "user", c.data.load.user_column);
      read_opt(col, "item", c.data.load.item_column);
      read_opt(col, "rating", c.data.load.rating_column);
      read_opt(col, "timestamp", c.data.load.timestamp_column);
    }
    read_opt(d, "min_user", c.data.min_user);
    read_opt(d, "min_item", c.data.min_item);
    if (d.contains("ratios")) {
      const auto r = d.at("ratios").get<std::vector<double>>();
      if (r.size() != 3) throw ConfigError("data.ratios needs [train, test, validation]");
      c.data.ratios = {r[0], r[1], r[2]};
    }
    read_opt(d, "holdout_fraction", c.data.holdout_fraction);
    read_opt(d, "name", c.data.name);
  }
  read_opt(j, "splits", c.splits_dir);
  c.splits_dir = resolve(c.splits_dir);
  if (j.contains("vae")) {
    const auto& v = j.at("vae");
    read_opt(v, "latent", c.vae.latent);
    read_opt(v, "hidden", c.vae.hidden);
    read_opt(v, "learning_rate", c.vae.learning_rate);
    read_opt(v, "batch_size", c.vae.batch_size);
    read_opt(v, "beta_max", c.vae.beta_max);
    read_opt(v, "anneal_steps", c.vae.anneal_steps);
    read_opt(v, "patience", c.vae.patience);
    read_opt(v, "max_epochs", c.vae.max_epochs);
  }
  if (j.contains("sdrm")) {
    const auto& s = j.at("sdrm");
    read_opt(s, "timesteps", c.sdrm.timesteps);
    read_opt(s, "beta_start", c.sdrm.beta_start);
    read_opt(s, "beta_end", c.sdrm.beta_end);
    read_opt(s, "sigma_nu", c.sdrm.sigma_nu);
    read_opt(s, "hidden_layers", c.sdrm.hidden_layers);
    read_opt(s, "hidden_width", c.sdrm.hidden_width);
    read_opt(s, "embedding_width", c.sdrm.embedding_width);
    read_opt(s, "learning_rate", c.sdrm.learning_rate);
    read_opt(s, "batch_size", c.sdrm.batch_size);
    read_opt(s, "epochs", c.sdrm.epochs);
  }
  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    if (s.contains("mode")) c.mode = parse_sampler_mode(s.at("mode").get<std::string>());
    read_opt(s, "samples", c.samples);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    if (e.contains("protocols")) {
      c.protocols.clear();
      for (const auto& p : e.at("protocols")) c.protocols.push_back(parse_protocol(p.get<std::string>()));
    }
    read_opt(e, "popularity_baseline", c.popularity_baseline);
    read_opt(e, "runs", c.eval.runs);
    read_opt(e, "k_list", c.eval.ks);
    read_opt(e, "inject_fraction", c.inject_fraction);
    if (e.contains("mf")) {
      const auto& m = e.at("mf");
      read_opt(m, "factors", c.mf.factors);
      read_opt(m, "learning_rate", c.mf.learning_rate);
      read_opt(m, "epochs", c.mf.epochs);
      read_opt(m, "negatives", c.mf.negatives);
      read_opt(m, "reg", c.mf.reg);
      read_opt(m, "init_scale", c.mf.init_scale);
    }
  }
  if (j.contains("audit")) read_opt(j.at("audit"), "enabled", c.audit);
  if (j.contains("hpo")) {
    const auto& h = j.at("hpo");
    if (h.contains("space")) c.space = search_space_from_json(h.at("space"));
    read_opt(h, "budget", c.search.budget);
    read_opt(h, "folds", c.search.folds);
    read_opt(h, "rungs", c.search.rung_budgets);
    read_opt(h, "keep_fraction", c.search.keep_fraction);
    read_opt(h, "vae_max_epochs", c.hpo_vae_max_epochs);
    read_opt(h, "mf_epochs", c.hpo_mf_epochs);
  }
  return c;
}

inline PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(is);
    return pipeline_config_from_json(j, path.parent_path());
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Effective settings, as recorded in manifests.
inline json effective_config(const PipelineConfig& c) {
  json protocols = json::array();
  for (auto p : c.protocols) protocols.push_back(protocol_name(p));
  return {{"seed", c.seed},
          {"splits", c.splits_dir},
          {"vae",
           {{"latent", c.vae.latent},
            {"hidden", c.vae.hidden},
            {"learning_rate", c.vae.learning_rate},
            {"batch_size", c.vae.batch_size},
            {"beta_max", c.vae.beta_max},
            {"anneal_steps", c.vae.anneal_steps},
            {"patience", c.vae.patience},
            {"max_epochs", c.vae.max_epochs}}},
          {"sdrm",
           {{"timesteps", c.sdrm.timesteps},
            {"beta_start", c.sdrm.beta_start},
            {"beta_end", c.sdrm.beta_end},
            {"sigma_nu", c.sdrm.sigma_nu},
            {"hidden_layers", c.sdrm.hidden_layers},
            {"hidden_width", c.sdrm.hidden_width},
            {"embedding_width", c.sdrm.embedding_width},
            {"learning_rate", c.sdrm.learning_rate},
            {"batch_size", c.sdrm.batch_size},
            {"epochs", c.sdrm.epochs}}},
          {"sampler", {{"mode", sampler_mode_name(c.mode)}, {"samples", c.samples}}},
          {"eval",
           {{"protocols", protocols},
            {"popularity_baseline", c.popularity_baseline},
            {"runs", c.eval.runs},
            {"k_list", c.eval.ks},
            {"inject_fraction", c.inject_fraction},
            {"mf",
             {{"factors", c.mf.factors},
              {"learning_rate", c.mf.learning_rate},
              {"epochs", c.mf.epochs},
              {"negatives", c.mf.negatives},
              {"reg", c.mf.reg},
              {"init_scale", c.mf.init_scale}}}}},
          {"audit", {{"enabled", c.audit}}}};
}

// ---- manifest -------------------------------------------------------------

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

/// sha256 of every file under `dir` except manifest.json, keyed by relative path.
inline std::map<std::string, std::string> hash_artifacts(const fs::path& dir) {
  std::map<std::string, std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "manifest.json") continue;
    out[rel] = sha256_file(e.path());
  }
  return out;
}

struct RunManifest {
  std::string command;
  json config = json::object();
  json seeds = json::object();
  std::map<std::string, std::string> inputs;  // path -> sha256
  std::vector<std::string> stages;
  std::string status = "ok";
  std::string failed_stage;
  std::string error;
  std::string started_at = utc_timestamp();
  json timings = json::object();

  void write(const fs::path& out_dir) const {
    json j{{"tool_version", kToolVersion}, {"command", command}, {"config", config},
           {"seeds", seeds},               {"inputs", inputs},   {"artifacts", hash_artifacts(out_dir)},
           {"stages", stages},             {"status", status},   {"started_at", started_at},
           {"finished_at", utc_timestamp()}, {"timings", timings}};
    if (!failed_stage.empty()) {
      j["failed_stage"] = failed_stage;
      j["error"] = error;
    }
    std::ofstream os(out_dir / "manifest.json", std::ios::trunc);
    os << j.dump(2) << '\n';
  }
};

/// Recomputes artifact hashes and lists every path whose hash differs from the
/// manifest (or is missing from either side).
inline std::vector<std::string> verify_manifest(const fs::path& out_dir) {
  std::ifstream is(out_dir / "manifest.json");
  if (!is) throw IoError("missing manifest in " + out_dir.string());
  const auto recorded = json::parse(is).at("artifacts").get<std::map<std::string, std::string>>();
  const auto actual = hash_artifacts(out_dir);
  std::vector<std::string> bad;
  for (const auto& [p, h] : recorded)
    if (!actual.count(p) || actual.at(p) != h) bad.push_back(p);
  for (const auto& [p, _] : actual)
    if (!recorded.count(p)) bad.push_back(p);
  return bad;
}

/// Runs `body` as a named stage, recording it in the manifest; on failure the
/// manifest is written with the stage name before a StageError propagates.
template <class F>
void run_stage(RunManifest& manifest, const fs::path& out, const std::string& name, F&& body) {
  const auto start = std::chrono::steady_clock::now();
  try {
    body();
  } catch (const std::exception& e) {
    manifest.status = "failed";
    manifest.failed_stage = name;
    manifest.error = e.what();
    manifest.write(out);
    throw StageError(name, e);
  }
  manifest.stages.push_back(name);
  manifest.timings[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw IoError("cannot write " + p.string());
  os << s;
}

inline void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

inline json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot read " + p.string());
  return json::parse(is);
}

// ---- prepare --------------------------------------------------------------

struct PreparedData {
  DatasetSplits splits;
  DatasetStats table_stats;     // all raw ratings within the filtered vocabulary
  DatasetStats positive_stats;  // binary matrix after k-core
  std::size_t raw_ratings = 0;
};

inline PreparedData prepare_dataset(const DataConfig& d, std::uint64_t seed) {
  const RawRatings raw = load_interactions(d.input, d.load);
  const auto filtered = kcore_filter(InteractionMatrix::from_interactions(binarize(raw)), d.min_user, d.min_item);
  PreparedData p;
  p.raw_ratings = raw.triples.size();
  p.table_stats = rating_stats(raw, filtered);
  p.positive_stats = dataset_stats(filtered);
  p.splits = split_users(filtered, seed, d.ratios, d.holdout_fraction);
  return p;
}

inline json prepared_stats_json(const PreparedData& p) {
  return {{"users", p.table_stats.users},
          {"items", p.table_stats.items},
          {"ratings", p.table_stats.ratings},
          {"sparsity", p.table_stats.sparsity},
          {"positives", p.positive_stats.ratings},
          {"positive_sparsity", p.positive_stats.sparsity},
          {"raw_ratings", p.raw_ratings},
          {"train", to_json(dataset_stats(p.splits.train))},
          {"test", to_json(dataset_stats(p.splits.test))},
          {"validation", to_json(dataset_stats(p.splits.validation))}};
}

/// Writes <out>/splits/*, <out>/stats.json and <out>/manifest.json.
inline PreparedData cmd_prepare(const DataConfig& d, std::uint64_t seed, const fs::path& out) {
  if (!fs::exists(d.input)) throw IoError("input file not found: " + d.input);
  fs::create_directories(out);
  RunManifest manifest;
  manifest.command = "prepare";
  manifest.seeds = {{"split", seed}};
  manifest.config = {{"input", d.input},       {"min_user", d.min_user},
                     {"min_item", d.min_item}, {"ratios", {d.ratios.train, d.ratios.test, d.ratios.validation}},
                     {"holdout_fraction", d.holdout_fraction}};
  manifest.inputs[d.input] = sha256_file(d.input);
  PreparedData p;
  run_stage(manifest, out, "prepare", [&] {
    p = prepare_dataset(d, seed);
    save_splits(out / "splits", p.splits,
                {{"seed", seed}, {"holdout_fraction", d.holdout_fraction}, {"dataset", d.name}});
    write_json(out / "stats.json", prepared_stats_json(p));
  });
  manifest.write(out);
  return p;
}

// ---- pipeline -------------------------------------------------------------

inline json vae_header(const VaeModel& m, const VaeHyper& h) {
  return {{"items", m.items()}, {"latent", m.latent}, {"hidden", h.hidden}, {"activation", "tanh"}};
}

inline std::string checkpoint_bytes(std::span<const MlpNet* const> nets) {
  std::vector<Matrix> blocks;
  for (const auto* n : nets) append_blocks(blocks, *n);
  std::ostringstream os(std::ios::binary);
  write_container(os, blocks);
  return os.str();
}

inline std::string vae_checkpoint_hash(const VaeModel& vae) {
  const MlpNet* nets[] = {&vae.encoder, &vae.decoder};
  return sha256_hex(checkpoint_bytes(nets));
}

struct GeneratedData {
  SyntheticDataset synthetic;
  Matrix scores;
  SampledLatents latents;
};

/// Samples latents, decode, binarise at the training sparsity.
inline GeneratedData generate_synthetic(const VaeModel& vae, const SdrmTrainResult& sd, std::size_t n,
                                        SamplerMode mode, double target_sparsity, std::uint64_t seed) {
  Rng rng(seed);
  GeneratedData g;
  g.latents = sample_latents(sd.model, sd.schedule, n, mode, rng);
  g.scores = decode_latents(vae, g.latents.z);
  auto thr = sparsity_threshold(g.scores, target_sparsity);
  g.synthetic.matrix = std::move(thr.matrix);
  g.synthetic.provenance = {{"sampler_mode", sampler_mode_name(mode)},
                            {"seed", seed},
                            {"lambda", thr.lambda},
                            {"target_sparsity", target_sparsity}};
  return g;
}

struct PipelineOutputs {
  VaeTrainResult vae;
  SdrmTrainResult sdrm;
  GeneratedData generated;
  std::vector<EvalReport> reports;
  std::optional<SimilarityHistogram> similarity;
};

struct StageSeeds {
  std::uint64_t vae, sdrm, sampler, eval;
  explicit StageSeeds(std::uint64_t s)
      : vae(derive_seed(s, 1)), sdrm(derive_seed(s, 2)), sampler(derive_seed(s, 3)), eval(derive_seed(s, 4)) {}
  json to_json() const { return {{"vae", vae}, {"sdrm", sdrm}, {"sampler", sampler}, {"eval", eval}}; }
};

inline json audit_json(const SimilarityHistogram& h, const DegreeDistributions& real,
                       const DegreeDistributions& syn) {
  return {{"similarity", to_json(h)},
          {"fraction_below_0_1", h.fraction_below(0.1)},
          {"fraction_below_0_2", h.fraction_below(0.2)},
          {"degrees",
           {{"original",
             {{"items_per_user", to_json(real.items_per_user)}, {"users_per_item", to_json(real.users_per_item)}}},
            {"synthetic",
             {{"items_per_user", to_json(syn.items_per_user)}, {"users_per_item", to_json(syn.users_per_item)}}}}}};
}

/// Writes audit.json / audit.md / degree CSVs for synthetic vs real users.
inline SimilarityHistogram write_audit(const InteractionMatrix& synthetic, const InteractionMatrix& real,
                                       const fs::path& out, const std::string& label) {
  fs::create_directories(out);
  const auto h = pairwise_similarity_histogram(synthetic, real);
  const auto dr = degree_distributions(real);
  const auto ds = degree_distributions(synthetic);
  write_json(out / "audit.json", audit_json(h, dr, ds));
  write_text(out / "audit.md", render_similarity_markdown(h, label));
  write_text(out / "degrees_original_items_per_user.csv", degree_csv(dr.items_per_user));
  write_text(out / "degrees_original_users_per_item.csv", degree_csv(dr.users_per_item));
  write_text(out / "degrees_synthetic_items_per_user.csv", degree_csv(ds.items_per_user));
  write_text(out / "degrees_synthetic_users_per_item.csv", degree_csv(ds.users_per_item));
  return h;
}

inline void write_jsonl(const fs::path& p, const std::vector<json>& rows) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw IoError("cannot write " + p.string());
  for (const auto& r : rows) os << r.dump() << '\n';
}

/// Runs every stage and writes all artifacts below `out`.
inline PipelineOutputs cmd_pipeline(const PipelineConfig& cfg, const fs::path& out) {
  if (cfg.splits_dir.empty()) throw ConfigError("config has no 'splits' directory (run prepare first)");
  if (!fs::exists(fs::path(cfg.splits_dir) / "splits.json"))
    throw IoError("prepared splits not found: " + cfg.splits_dir);
  fs::create_directories(out / "checkpoints");
  const StageSeeds seeds(cfg.seed);
  RunManifest manifest;
  manifest.command = "pipeline";
  manifest.config = effective_config(cfg);
  manifest.seeds = seeds.to_json();
  for (const auto& e : fs::directory_iterator(cfg.splits_dir))
    if (e.is_regular_file()) manifest.inputs[e.path().generic_string()] = sha256_file(e.path());

  PipelineOutputs o;
  DatasetSplits splits;
  std::string dataset_name = "dataset";
  run_stage(manifest, out, "load", [&] {
    splits = load_splits(cfg.splits_dir);
    const auto meta = read_json(fs::path(cfg.splits_dir) / "splits.json");
    if (meta.contains("dataset")) dataset_name = meta.at("dataset").get<std::string>();
  });

  std::string vae_hash;
  run_stage(manifest, out, "train_vae", [&] {
    Rng rng(seeds.vae);
    std::vector<json> curve;
    o.vae = train_multivae(splits.train, splits.validation_eval, cfg.vae, rng);
    for (const auto& e : o.vae.curve)
      curve.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"val_recall@10", e.val_recall}, {"beta", e.beta}});
    write_jsonl(out / "vae_train.jsonl", curve);
    const MlpNet* nets[] = {&o.vae.model.encoder, &o.vae.model.decoder};
    save_checkpoint(out / "checkpoints" / "vae.bin", nets);
    auto header = vae_header(o.vae.model, cfg.vae);
    header["best_epoch"] = o.vae.best_epoch;
    header["best_val_recall@10"] = o.vae.best_recall;
    write_json(out / "checkpoints" / "vae.json", header);
    vae_hash = sha256_file(out / "checkpoints" / "vae.bin");
  });

  std::string denoiser_hash;
  run_stage(manifest, out, "train_sdrm", [&] {
    Rng rng(seeds.sdrm);
    const auto before = vae_checkpoint_hash(o.vae.model);
    o.sdrm = train_sdrm(o.vae.model, splits.train, cfg.sdrm, rng);
    if (vae_checkpoint_hash(o.vae.model) != before) throw TrainingError("VAE parameters changed during SDRM training");
    std::vector<json> curve;
    for (std::size_t e = 0; e < o.sdrm.epoch_loss.size(); ++e)
      curve.push_back({{"epoch", e + 1}, {"loss", o.sdrm.epoch_loss[e]}});
    write_jsonl(out / "sdrm_train.jsonl", curve);
    const MlpNet* nets[] = {&o.sdrm.model.trunk, &o.sdrm.model.score_head, &o.sdrm.model.noise_head};
    save_checkpoint(out / "checkpoints" / "denoiser.bin", nets);
    write_json(out / "checkpoints" / "denoiser.json", diffusion_header(o.sdrm.model, cfg.sdrm));
    denoiser_hash = sha256_file(out / "checkpoints" / "denoiser.bin");
  });

  run_stage(manifest, out, "generate", [&] {
    const std::size_t n = cfg.samples ? cfg.samples : splits.train.users();
    o.generated = generate_synthetic(o.vae.model, o.sdrm, n, cfg.mode, splits.train.sparsity(), seeds.sampler);
    o.generated.synthetic.provenance["vae_sha256"] = vae_hash;
    o.generated.synthetic.provenance["denoiser_sha256"] = denoiser_hash;
    export_synthetic(o.generated.synthetic, out / "synthetic");
    std::ofstream os(out / "synthetic" / "scores.bin", std::ios::binary | std::ios::trunc);
    const Matrix blocks[] = {o.generated.scores};
    write_container(os, blocks);
  });

  run_stage(manifest, out, "evaluate", [&] {
    EvalBundle bundle{&splits, &o.generated.synthetic, dataset_name, cfg.inject_fraction};
    EvalOptions eo = cfg.eval;
    eo.seed = seeds.eval;
    std::vector<Protocol> todo = cfg.protocols;
    if (cfg.popularity_baseline) todo.push_back(Protocol::Popularity);
    json reports = json::array();
    for (auto p : todo) {
      o.reports.push_back(evaluate_protocol(p, bundle, cfg.mf, eo));
      reports.push_back(to_json(o.reports.back()));
    }
    write_json(out / "eval_report.json", reports);
    write_text(out / "eval_report.md", render_eval_markdown(o.reports));
  });

  if (cfg.audit) {
    run_stage(manifest, out, "audit", [&] {
      o.similarity = write_audit(o.generated.synthetic.matrix, splits.train, out / "audit",
                                 cfg.mode == SamplerMode::Multi ? "M-SDRM" : "F-SDRM");
    });
  }
  manifest.write(out);
  return o;
}

// ---- report ---------------------------------------------------------------

struct RunReport {
  std::vector<EvalReport> evaluation;
  std::optional<SimilarityHistogram> similarity;
  std::string similarity_label = "SDRM";
  std::vector<std::string> missing;
};

inline json to_json(const RunReport& r) {
  json ev = json::array();
  for (const auto& e : r.evaluation) ev.push_back(to_json(e));
  return {{"evaluation", ev},
          {"audit", r.similarity ? to_json(*r.similarity) : json(nullptr)},
          {"audit_label", r.similarity_label},
          {"missing", r.missing}};
}

inline RunReport run_report_from_json(const json& j) {
  RunReport r;
  for (const auto& e : j.at("evaluation")) r.evaluation.push_back(eval_report_from_json(e));
  if (!j.at("audit").is_null()) r.similarity = similarity_histogram_from_json(j.at("audit"));
  r.similarity_label = j.at("audit_label").get<std::string>();
  r.missing = j.at("missing").get<std::vector<std::string>>();
  return r;
}

inline std::string render_run_markdown(const RunReport& r) {
  std::ostringstream os;
  os << "# Run report\n\n## Utility (mean ± std over runs)\n\n";
  if (r.evaluation.empty()) os << "_evaluation missing_\n";
  else os << render_eval_markdown(r.evaluation);
  os << "\n## Privacy audit (synthetic x real Jaccard)\n\n";
  if (r.similarity) os << render_similarity_markdown(*r.similarity, r.similarity_label);
  else os << "_audit skipped_\n";
  if (!r.missing.empty()) {
    os << "\n## Missing artifacts\n\n";
    for (const auto& m : r.missing) os << "- " << m << '\n';
  }
  return os.str();
}

inline RunReport collect_run_report(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw IoError("run directory not found: " + run_dir.string());
  RunReport r;
  const auto eval = run_dir / "eval_report.json";
  if (fs::exists(eval)) {
    for (const auto& e : read_json(eval)) r.evaluation.push_back(eval_report_from_json(e));
  } else {
    r.missing.push_back("eval_report.json");
  }
  const auto audit = run_dir / "audit" / "audit.json";
  if (fs::exists(audit)) r.similarity = similarity_histogram_from_json(read_json(audit).at("similarity"));
  if (fs::exists(run_dir / "synthetic" / "synthetic.json")) {
    const auto prov = read_json(run_dir / "synthetic" / "synthetic.json");
    if (prov.contains("sampler_mode"))
      r.similarity_label = prov.at("sampler_mode").get<std::string>() == "multi" ? "M-SDRM" : "F-SDRM";
  }
  return r;
}

/// Writes report.md and report.json into the run directory.
inline RunReport cmd_report(const fs::path& run_dir) {
  auto r = collect_run_report(run_dir);
  write_text(run_dir / "report.md", render_run_markdown(r));
  write_json(run_dir / "report.json", to_json(r));
  return r;
}

// ---- audit ----------------------------------------------------------------

inline SimilarityHistogram cmd_audit(const fs::path& synthetic_dir, const fs::path& splits_dir, const fs::path& out) {
  if (!fs::exists(synthetic_dir / "synthetic.json")) throw IoError("synthetic data not found: " + synthetic_dir.string());
  if (!fs::exists(splits_dir / "splits.json")) throw IoError("prepared splits not found: " + splits_dir.string());
  fs::create_directories(out);
  RunManifest manifest;
  manifest.command = "audit";
  for (const auto& d : {synthetic_dir, splits_dir})
    for (const auto& e : fs::directory_iterator(d))
      if (e.is_regular_file()) manifest.inputs[e.path().generic_string()] = sha256_file(e.path());
  SimilarityHistogram h;
  run_stage(manifest, out, "audit", [&] {
    const auto syn = load_synthetic(synthetic_dir);
    const auto splits = load_splits(splits_dir);
    const std::string mode = syn.provenance.value("sampler_mode", "full");
    h = write_audit(syn.matrix, splits.train, out, mode == "multi" ? "M-SDRM" : "F-SDRM");
  });
  manifest.write(out);
  return h;
}

// ---- hpo ------------------------------------------------------------------

struct ObjectiveSettings {
  VaeHyper vae;
  DiffusionHyper sdrm;
  MfHyper mf;
  SamplerMode mode = SamplerMode::Full;
  std::size_t k = 10;
};

/// Trains VAE + SDRM on the fold, generates as many synthetic users as the
/// fold has training users, trains MF on fold-train ∪ synthetic ∪ visible
/// validation items, and returns validation Recall@k. The SDRM epoch count is
/// scaled by the rung budget.
inline TrialObjective pipeline_objective(ObjectiveSettings s) {
  return [s](const TrialConfig& c, const FoldData& fold, double budget, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 1));
    const auto vae = train_multivae(fold.train, fold.validation, vae_hyper_for(c, s.vae), rng).model;
    auto dh = diffusion_hyper_for(c, s.sdrm);
    dh.epochs = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(budget * static_cast<double>(c.sdrm_epochs))));
    Rng srng(derive_seed(seed, 2));
    const auto sd = train_sdrm(vae, fold.train, dh, srng);
    const auto gen = generate_synthetic(vae, sd, fold.train.users(), s.mode, fold.train.sparsity(), derive_seed(seed, 3));
    const auto inj = inject_ground_truth(InteractionMatrix::concat(fold.train, gen.synthetic.matrix), fold.validation,
                                         1.0, derive_seed(seed, 4));
    Rng mrng(derive_seed(seed, 5));
    const auto mf = train_mf(inj.matrix, s.mf, mrng).model;
    const std::vector<std::size_t> ks{s.k};
    return score_injected(inj, fold.validation, ks, [&](std::size_t row) { return mf.user_scores(row); })
        .at("recall@" + std::to_string(s.k));
  };
}

inline SearchResult cmd_hpo(const PipelineConfig& cfg, const fs::path& out, const TrialObjective& objective = {}) {
  if (cfg.splits_dir.empty()) throw ConfigError("config has no 'splits' directory (run prepare first)");
  if (!fs::exists(fs::path(cfg.splits_dir) / "splits.json"))
    throw IoError("prepared splits not found: " + cfg.splits_dir);
  fs::create_directories(out);
  RunManifest manifest;
  manifest.command = "hpo";
  manifest.config = effective_config(cfg);
  manifest.config["hpo"] = {{"budget", cfg.search.budget},
                            {"folds", cfg.search.folds},
                            {"rungs", cfg.search.rung_budgets},
                            {"keep_fraction", cfg.search.keep_fraction},
                            {"vae_max_epochs", cfg.hpo_vae_max_epochs},
                            {"mf_epochs", cfg.hpo_mf_epochs}};
  manifest.seeds = {{"search", cfg.seed}};
  for (const auto& e : fs::directory_iterator(cfg.splits_dir))
    if (e.is_regular_file()) manifest.inputs[e.path().generic_string()] = sha256_file(e.path());
  SearchResult result;
  run_stage(manifest, out, "search", [&] {
    const auto splits = load_splits(cfg.splits_dir);
    const auto folds = make_folds(splits, cfg.search.folds, derive_seed(cfg.seed, 11));
    ObjectiveSettings s;
    s.vae = cfg.vae;
    s.vae.max_epochs = cfg.hpo_vae_max_epochs;
    s.sdrm = cfg.sdrm;
    s.mf = cfg.mf;
    s.mf.epochs = cfg.hpo_mf_epochs;
    s.mode = cfg.mode;
    SearchOptions opt = cfg.search;
    opt.seed = cfg.seed;
    opt.workers = worker_count();
    result = search(cfg.space, folds, objective ? objective : pipeline_objective(s), opt);
    std::vector<json> rows;
    json timings = json::array();
    for (const auto& r : result.trace) {
      rows.push_back(to_json(r));
      timings.push_back(r.wall_seconds);
    }
    manifest.timings["trial_wall_seconds"] = timings;
    write_jsonl(out / "hpo_trace.jsonl", rows);
    write_json(out / "hpo_best.json",
               {{"trial", result.best_trial}, {"score", result.best_score}, {"config", to_json(result.best)}});
  });
  manifest.write(out);
  return result;
}

}  // namespace sdrm
