// SPDX-License-Identifier: Apache-2.0
//
// sdrm: prepare | pipeline | report | hpo | audit

#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "sdrm.hpp"

namespace {

std::vector<std::size_t> parse_k_list(const std::string& s) {
  std::vector<std::size_t> ks;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    std::size_t pos = 0;
    long v = 0;
    try {
      v = std::stol(tok, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != tok.size() || v < 1) throw sdrm::UsageError("--k-list: '" + tok + "' is not a positive integer");
    ks.push_back(static_cast<std::size_t>(v));
  }
  if (ks.empty()) throw sdrm::UsageError("--k-list is empty");
  return ks;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic recommendation data via latent diffusion"};
  app.require_subcommand(1);
  app.set_version_flag("--version", sdrm::kToolVersion);

  std::string config_path, out_dir, input, format = "tsv", mode, k_list, synthetic_dir, splits_dir, run_dir;
  std::vector<std::string> protocols;
  std::uint64_t seed = 0;

  auto* prepare = app.add_subcommand("prepare", "ingest, binarise, k-core filter and split a rating log");
  prepare->add_option("--input", input, "rating log")->required();
  prepare->add_option("--format", format, "csv | tsv | movielens-dat")->capture_default_str();
  prepare->add_option("--config", config_path, "config file (data section)");
  prepare->add_option("--seed", seed, "split seed");
  prepare->add_option("--out", out_dir, "output directory")->required();

  auto* pipeline = app.add_subcommand("pipeline", "train, generate, evaluate and audit");
  pipeline->add_option("--config", config_path, "config file")->required();
  pipeline->add_option("--seed", seed, "overrides config seed");
  pipeline->add_option("--out", out_dir, "output directory")->required();
  pipeline->add_option("--mode", mode, "full | multi");
  pipeline->add_option("--protocol", protocols, "original | augment | replace (repeatable)");
  pipeline->add_option("--k-list", k_list, "comma-separated k values");

  auto* report = app.add_subcommand("report", "summarise a completed run");
  report->add_option("--out", run_dir, "run directory")->required();

  auto* hpo = app.add_subcommand("hpo", "random search with successive halving");
  hpo->add_option("--config", config_path, "config file")->required();
  hpo->add_option("--seed", seed, "overrides config seed");
  hpo->add_option("--out", out_dir, "output directory")->required();
  hpo->add_option("--mode", mode, "full | multi");

  auto* audit = app.add_subcommand("audit", "Jaccard histogram and degree distributions");
  audit->add_option("--input", synthetic_dir, "synthetic dataset directory")->required();
  audit->add_option("--config", config_path, "config file (for the splits directory)");
  audit->add_option("--splits", splits_dir, "prepared splits directory");
  audit->add_option("--out", out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    std::optional<sdrm::PipelineConfig> cfg;
    if (!config_path.empty()) cfg = sdrm::load_pipeline_config(config_path);
    auto apply_overrides = [&](sdrm::PipelineConfig& c, const CLI::App* cmd) {
      if (cmd->count("--seed")) c.seed = seed;
      if (!mode.empty()) c.mode = sdrm::parse_sampler_mode(mode);
      if (!protocols.empty()) {
        c.protocols.clear();
        for (const auto& p : protocols) {
          const auto parsed = sdrm::parse_protocol(p);
          if (parsed == sdrm::Protocol::Popularity) throw sdrm::UsageError("--protocol: use original|augment|replace");
          c.protocols.push_back(parsed);
        }
      }
      if (!k_list.empty()) c.eval.ks = parse_k_list(k_list);
    };

    if (prepare->parsed()) {
      sdrm::DataConfig d = cfg ? cfg->data : sdrm::DataConfig{};
      std::uint64_t s = cfg ? cfg->seed : 0;
      if (prepare->count("--seed")) s = seed;
      d.input = input;
      if (prepare->count("--format") || !cfg) d.load.format = sdrm::parse_input_format(format);
      const auto p = sdrm::cmd_prepare(d, s, out_dir);
      std::cout << "users " << p.table_stats.users << ", items " << p.table_stats.items << ", ratings "
                << p.table_stats.ratings << ", sparsity " << p.table_stats.sparsity << " (positives "
                << p.positive_stats.ratings << ")\n";
    } else if (pipeline->parsed()) {
      apply_overrides(*cfg, pipeline);
      const auto o = sdrm::cmd_pipeline(*cfg, out_dir);
      std::cout << sdrm::render_eval_markdown(o.reports);
      if (o.similarity) std::cout << "\n" << sdrm::render_similarity_markdown(*o.similarity, "synthetic");
    } else if (report->parsed()) {
      const auto r = sdrm::cmd_report(run_dir);
      std::cout << sdrm::render_run_markdown(r);
    } else if (hpo->parsed()) {
      apply_overrides(*cfg, hpo);
      const auto r = sdrm::cmd_hpo(*cfg, out_dir);
      std::cout << "best trial " << r.best_trial << " recall@10 " << r.best_score << "\n"
                << sdrm::to_json(r.best).dump(2) << "\n";
    } else if (audit->parsed()) {
      std::string splits = splits_dir;
      if (splits.empty() && cfg) splits = cfg->splits_dir;
      if (splits.empty()) throw sdrm::UsageError("audit needs --splits or a config with 'splits'");
      const auto h = sdrm::cmd_audit(synthetic_dir, splits, out_dir);
      std::cout << sdrm::render_similarity_markdown(h, "synthetic");
    }
  } catch (const sdrm::StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return sdrm::exit_code_for(e);
  }
  return 0;
}
