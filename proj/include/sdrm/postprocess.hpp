// SPDX-License-Identifier: Apache-2.0
//
// Latents -> decoder scores -> binary synthetic users via one global
// sparsity-quantile threshold.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdrm/common.hpp"
#include "sdrm/dataset.hpp"
#include "sdrm/multivae.hpp"

namespace sdrm {

inline Matrix decode_latents(const VaeModel& vae, const Matrix& latents) { return decode(vae, latents); }

struct Thresholded {
  InteractionMatrix matrix;
  double lambda = 0.0;
};

/// Cutoff at rank floor(target * N) of the ascending flattened scores.
inline double sparsity_quantile(const Matrix& scores, double target_sparsity) {
  if (!(target_sparsity > 0.0 && target_sparsity < 1.0))
    throw ConfigError("target sparsity must lie in (0, 1)");
  if (scores.size() == 0) throw DataError("sparsity_threshold: empty score matrix");
  std::vector<double> flat(scores.data(), scores.data() + scores.size());
  const auto n = flat.size();
  const auto rank = std::min(n - 1, static_cast<std::size_t>(std::floor(target_sparsity * static_cast<double>(n) + 1e-9)));
  std::nth_element(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(rank), flat.end());
  return flat[rank];
}

/// Binarises with a single global lambda: cell = 1 iff score >= lambda.
inline InteractionMatrix apply_threshold(const Matrix& scores, double lambda) {
  std::vector<std::vector<std::int32_t>> rows(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index u = 0; u < scores.rows(); ++u)
    for (Eigen::Index i = 0; i < scores.cols(); ++i)
      if (scores(u, i) >= lambda) rows[static_cast<std::size_t>(u)].push_back(static_cast<std::int32_t>(i));
  return InteractionMatrix(static_cast<std::size_t>(scores.cols()), std::move(rows));
}

inline Thresholded sparsity_threshold(const Matrix& scores, double target_sparsity) {
  const double lambda = sparsity_quantile(scores, target_sparsity);
  if (scores.size() > 0 && scores.maxCoeff() == scores.minCoeff())
    throw DataError("sparsity_threshold: all scores tie; no threshold separates cells");
  return {apply_threshold(scores, lambda), lambda};
}

/// Binary synthetic users plus the provenance needed to reproduce them.
struct SyntheticDataset {
  InteractionMatrix matrix;
  nlohmann::json provenance = nlohmann::json::object();
};

/// Writes `<stem>.csv` (user_idx,item_idx) and `<stem>.json` (provenance,
/// shape). Returns the CSV path.
inline std::filesystem::path export_synthetic(const SyntheticDataset& ds, const std::filesystem::path& dir,
                                              const std::string& stem = "synthetic") {
  std::filesystem::create_directories(dir);
  const auto csv = dir / (stem + ".csv");
  write_matrix_csv(csv, ds.matrix);
  nlohmann::json j = ds.provenance;
  j["users"] = ds.matrix.users();
  j["items"] = ds.matrix.items();
  j["ratings"] = ds.matrix.nnz();
  j["sparsity"] = ds.matrix.sparsity();
  std::ofstream os(dir / (stem + ".json"), std::ios::trunc);
  if (!os) throw IoError("cannot write " + (dir / (stem + ".json")).string());
  os << j.dump(2) << '\n';
  return csv;
}

inline SyntheticDataset load_synthetic(const std::filesystem::path& dir, const std::string& stem = "synthetic") {
  std::ifstream is(dir / (stem + ".json"));
  if (!is) throw IoError("missing " + (dir / (stem + ".json")).string());
  SyntheticDataset ds;
  ds.provenance = nlohmann::json::parse(is);
  ds.matrix = read_matrix_csv(dir / (stem + ".csv"), ds.provenance.at("users").get<std::size_t>(),
                              ds.provenance.at("items").get<std::size_t>());
  for (const char* k : {"users", "items", "ratings", "sparsity"}) ds.provenance.erase(k);
  return ds;
}

}  // namespace sdrm
