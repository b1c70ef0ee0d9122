// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <fstream>

#include "test_support.hpp"

using namespace sdrm;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SDRM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// 90 users in three taste groups over 36 items; ratings 1-5.
fs::path write_toy_ratings(const fs::path& dir) {
  Rng rng(1);
  std::bernoulli_distribution like(0.55), noise(0.08);
  std::uniform_int_distribution<int> high(4, 5), low(1, 3);
  const auto path = dir / "ratings.csv";
  std::ofstream os(path);
  os << "user,item,rating,timestamp\n";
  for (int u = 0; u < 90; ++u)
    for (int i = 0; i < 36; ++i) {
      const bool in_group = (i / 12) == (u % 3);
      if (in_group && like(rng)) os << "u" << u << ",i" << i << "," << high(rng) << ",0\n";
      else if (noise(rng)) os << "u" << u << ",i" << i << "," << low(rng) << ",0\n";
    }
  return path;
}

json tiny_config(const fs::path& splits) {
  return {{"seed", 5},
          {"splits", splits.string()},
          {"vae", {{"latent", 4}, {"hidden", {16}}, {"batch_size", 16}, {"max_epochs", 4}, {"patience", 2}}},
          {"sdrm",
           {{"timesteps", 5},
            {"hidden_layers", 1},
            {"hidden_width", 8},
            {"embedding_width", 4},
            {"batch_size", 16},
            {"epochs", 2},
            {"learning_rate", 1e-3}}},
          {"eval", {{"runs", 2}, {"k_list", {5, 10}}, {"mf", {{"factors", 4}, {"epochs", 3}}}}},
          {"audit", {{"enabled", true}}}};
}

struct ToyRun {
  fs::path root, splits, config;
};

/// Prepares the toy dataset once per test binary.
const ToyRun& toy() {
  static const ToyRun run = [] {
    ToyRun r;
    r.root = sdrm::testing::scratch_dir("pipeline");
    DataConfig d;
    d.input = write_toy_ratings(r.root).string();
    d.load.format = InputFormat::Csv;
    d.name = "toy";
    cmd_prepare(d, 3, r.root / "prepared");
    r.splits = r.root / "prepared" / "splits";
    r.config = r.root / "config.json";
    std::ofstream(r.config) << tiny_config(r.splits).dump(2);
    return r;
  }();
  return run;
}

PipelineConfig toy_config() { return load_pipeline_config(toy().config); }

}  // namespace

TEST(Cli, MissingInputExitsWithIoCode) {
  const auto dir = sdrm::testing::scratch_dir("cli_missing");
  EXPECT_EQ(run_cli("prepare --input " + (dir / "nope.tsv").string() + " --out " + (dir / "o").string()), 2);
  EXPECT_EQ(run_cli("pipeline --config " + (dir / "nope.json").string() + " --out " + (dir / "o").string()), 2);
}

TEST(Cli, BadOptionValuesExitWithConfigCode) {
  const auto dir = sdrm::testing::scratch_dir("cli_bad");
  EXPECT_EQ(run_cli("pipeline --config " + toy().config.string() + " --mode half --out " + dir.string()), 3);
  EXPECT_EQ(run_cli("pipeline --config " + toy().config.string() + " --k-list 0,5 --out " + dir.string()), 3);
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_EQ(run_cli("pipeline --config " + (dir / "broken.json").string() + " --out " + dir.string()), 3);
}

TEST(Cli, PrepareReportsDatasetStats) {
  const auto dir = sdrm::testing::scratch_dir("cli_prepare");
  const auto input = write_toy_ratings(dir);
  ASSERT_EQ(run_cli("prepare --input " + input.string() + " --format csv --seed 3 --out " + (dir / "p").string()), 0);
  const auto stats = read_json(dir / "p" / "stats.json");
  const auto in_process = read_json(toy().root / "prepared" / "stats.json");
  EXPECT_EQ(stats, in_process);
  EXPECT_TRUE(verify_manifest(dir / "p").empty());
}

TEST(Prepare, SameSeedSameBytes) {
  const auto dir = sdrm::testing::scratch_dir("prepare_twice");
  DataConfig d;
  d.input = write_toy_ratings(dir).string();
  d.load.format = InputFormat::Csv;
  cmd_prepare(d, 9, dir / "a");
  cmd_prepare(d, 9, dir / "b");
  EXPECT_EQ(hash_artifacts(dir / "a"), hash_artifacts(dir / "b"));
  cmd_prepare(d, 10, dir / "c");
  EXPECT_NE(hash_artifacts(dir / "a").at("splits/train.csv"), hash_artifacts(dir / "c").at("splits/train.csv"));
}

TEST(Config, RelativePathsResolveAgainstConfigDir) {
  const auto dir = sdrm::testing::scratch_dir("config_rel");
  std::ofstream(dir / "c.json") << R"({"splits": "prepared/splits", "sampler": {"mode": "multi"}})";
  const auto c = load_pipeline_config(dir / "c.json");
  EXPECT_EQ(fs::path(c.splits_dir), (dir / "prepared" / "splits").lexically_normal());
  EXPECT_EQ(c.mode, SamplerMode::Multi);
  EXPECT_THROW(pipeline_config_from_json({{"data", {{"ratios", {0.5, 0.5}}}}}), ConfigError);
}

TEST(Pipeline, ArtifactsManifestAndTamperDetection) {
  const auto out = sdrm::testing::scratch_dir("pipeline_run");
  const auto o = cmd_pipeline(toy_config(), out);
  for (const char* f : {"vae_train.jsonl", "sdrm_train.jsonl", "checkpoints/vae.bin", "checkpoints/denoiser.bin",
                        "synthetic/synthetic.csv", "synthetic/synthetic.json", "eval_report.json",
                        "eval_report.md", "audit/audit.json", "manifest.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const auto manifest = read_json(out / "manifest.json");
  EXPECT_EQ(manifest.at("status"), "ok");
  EXPECT_EQ(manifest.at("tool_version"), kToolVersion);
  EXPECT_EQ(manifest.at("stages"),
            json({"load", "train_vae", "train_sdrm", "generate", "evaluate", "audit"}));
  EXPECT_TRUE(verify_manifest(out).empty());
  EXPECT_EQ(o.reports.size(), 4u);  // original, augment, replace, popularity
  EXPECT_EQ(o.generated.synthetic.matrix.users(), load_splits(toy().splits).train.users());

  std::ofstream(out / "eval_report.md", std::ios::app) << "tampered\n";
  EXPECT_EQ(verify_manifest(out), std::vector<std::string>{"eval_report.md"});
}

TEST(Pipeline, SameSeedReproducesArtifacts) {
  const auto a = sdrm::testing::scratch_dir("pipeline_a");
  const auto b = sdrm::testing::scratch_dir("pipeline_b");
  cmd_pipeline(toy_config(), a);
  cmd_pipeline(toy_config(), b);
  EXPECT_EQ(hash_artifacts(a), hash_artifacts(b));
}

TEST(Pipeline, FullAndMultiDifferOnlyAfterSampling) {
  const auto full = sdrm::testing::scratch_dir("pipeline_full");
  const auto multi = sdrm::testing::scratch_dir("pipeline_multi");
  auto c = toy_config();
  c.audit = false;
  c.mode = SamplerMode::Full;
  cmd_pipeline(c, full);
  c.mode = SamplerMode::Multi;
  cmd_pipeline(c, multi);
  const auto hf = hash_artifacts(full), hm = hash_artifacts(multi);
  for (const char* f : {"checkpoints/vae.bin", "checkpoints/denoiser.bin", "vae_train.jsonl", "sdrm_train.jsonl"})
    EXPECT_EQ(hf.at(f), hm.at(f)) << f;
  EXPECT_NE(hf.at("synthetic/scores.bin"), hm.at("synthetic/scores.bin"));
  EXPECT_EQ(read_json(multi / "synthetic" / "synthetic.json").at("sampler_mode"), "multi");
}

TEST(Pipeline, StageFailureNamesTheStage) {
  const auto out = sdrm::testing::scratch_dir("pipeline_fail");
  auto j = tiny_config(toy().splits);
  j["vae"]["learning_rate"] = 1e300;
  std::ofstream(out / "bad.json") << j.dump();
  EXPECT_EQ(run_cli("pipeline --config " + (out / "bad.json").string() + " --out " + (out / "run").string()), 5);
  const auto manifest = read_json(out / "run" / "manifest.json");
  EXPECT_EQ(manifest.at("status"), "failed");
  EXPECT_EQ(manifest.at("failed_stage"), "train_vae");
  EXPECT_EQ(manifest.at("stages"), json({"load"}));
}

TEST(Pipeline, MissingSplitsIsIoError) {
  auto c = toy_config();
  c.splits_dir = "/nonexistent/splits";
  EXPECT_THROW(cmd_pipeline(c, sdrm::testing::scratch_dir("pipeline_nosplits")), IoError);
}

TEST(Report, RoundTripAndAuditSkipped) {
  const auto with_audit = sdrm::testing::scratch_dir("report_audit");
  const auto without = sdrm::testing::scratch_dir("report_noaudit");
  auto c = toy_config();
  c.protocols = {Protocol::Original};
  c.popularity_baseline = false;
  cmd_pipeline(c, with_audit);
  c.audit = false;
  cmd_pipeline(c, without);

  ASSERT_EQ(run_cli("report --out " + with_audit.string()), 0);
  const auto r = run_report_from_json(read_json(with_audit / "report.json"));
  EXPECT_EQ(to_json(r), read_json(with_audit / "report.json"));
  ASSERT_TRUE(r.similarity.has_value());
  EXPECT_EQ(r.similarity_label, "F-SDRM");
  ASSERT_EQ(r.evaluation.size(), 1u);
  EXPECT_EQ(to_json(r.evaluation[0]), read_json(with_audit / "eval_report.json")[0]);

  const auto skipped = cmd_report(without);
  EXPECT_FALSE(skipped.similarity.has_value());
  std::ifstream md(without / "report.md");
  const std::string text((std::istreambuf_iterator<char>(md)), {});
  EXPECT_NE(text.find("_audit skipped_"), std::string::npos) << text;
  EXPECT_EQ(run_cli("report --out " + (without / "absent").string()), 2);
}

TEST(Audit, StandaloneMatchesPipelineAudit) {
  const auto run = sdrm::testing::scratch_dir("audit_run");
  cmd_pipeline(toy_config(), run);
  const auto out = run.parent_path() / (run.filename().string() + "_standalone");
  fs::remove_all(out);
  ASSERT_EQ(run_cli("audit --input " + (run / "synthetic").string() + " --splits " + toy().splits.string() +
                    " --out " + out.string()),
            0);
  EXPECT_EQ(read_json(out / "audit.json"), read_json(run / "audit" / "audit.json"));
}

TEST(Hpo, WritesTraceAndBest) {
  const auto out = sdrm::testing::scratch_dir("hpo_run");
  auto c = toy_config();
  c.search.budget = 4;
  c.search.folds = 2;
  TrialObjective stub = [](const TrialConfig& t, const FoldData& f, double budget, std::uint64_t) {
    return budget * static_cast<double>(f.train.users()) / static_cast<double>(t.timesteps);
  };
  const auto r = cmd_hpo(c, out, stub);
  std::ifstream trace(out / "hpo_trace.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(trace, line);) ++lines;
  EXPECT_EQ(lines, 4u);
  const auto best = read_json(out / "hpo_best.json");
  EXPECT_EQ(best.at("trial").get<std::size_t>(), r.best_trial);
  EXPECT_EQ(read_json(out / "manifest.json").at("timings").at("trial_wall_seconds").size(), 4u);
}
