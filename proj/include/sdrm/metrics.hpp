// SPDX-License-Identifier: Apache-2.0
//
// Top-k ranking and binary-relevance Recall@k / NDCG@k.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "sdrm/common.hpp"

namespace sdrm {

/// Indices of the k highest scores, masked items excluded, ties broken by
/// ascending index. `mask` must be sorted. Returns fewer than k items when
/// fewer remain unmasked.
inline std::vector<std::int32_t> rank_topk(std::span<const double> scores, std::size_t k,
                                           std::span<const std::int32_t> mask = {}) {
  if (k == 0) throw ConfigError("rank_topk: k must be >= 1");
  std::vector<std::int32_t> candidates;
  candidates.reserve(scores.size());
  auto m = mask.begin();
  for (std::int32_t i = 0; i < static_cast<std::int32_t>(scores.size()); ++i) {
    while (m != mask.end() && *m < i) ++m;
    if (m != mask.end() && *m == i) continue;
    candidates.push_back(i);
  }
  const auto better = [&](std::int32_t a, std::int32_t b) {
    const double sa = scores[static_cast<std::size_t>(a)], sb = scores[static_cast<std::size_t>(b)];
    return sa > sb || (sa == sb && a < b);
  };
  const std::size_t take = std::min(k, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take),
                    candidates.end(), better);
  candidates.resize(take);
  return candidates;
}

/// |relevant ∩ top-k| / |relevant|. `relevant` sorted. nullopt when there is
/// nothing relevant (the user is skipped).
inline std::optional<double> recall_at_k(std::span<const std::int32_t> ranked,
                                         std::span<const std::int32_t> relevant, std::size_t k) {
  if (k == 0) throw ConfigError("recall_at_k: k must be >= 1");
  if (relevant.empty()) return std::nullopt;
  std::size_t hits = 0;
  const std::size_t n = std::min(k, ranked.size());
  for (std::size_t r = 0; r < n; ++r)
    hits += std::binary_search(relevant.begin(), relevant.end(), ranked[r]) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

/// DCG over the first k ranks with gain 2^rel - 1 and discount log2(rank + 1),
/// normalised by the ideal DCG of min(|relevant|, k) hits.
inline std::optional<double> ndcg_at_k(std::span<const std::int32_t> ranked,
                                       std::span<const std::int32_t> relevant, std::size_t k) {
  if (k == 0) throw ConfigError("ndcg_at_k: k must be >= 1");
  if (relevant.empty()) return std::nullopt;
  double dcg = 0.0;
  const std::size_t n = std::min(k, ranked.size());
  for (std::size_t r = 0; r < n; ++r)
    if (std::binary_search(relevant.begin(), relevant.end(), ranked[r]))
      dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  double idcg = 0.0;
  const std::size_t ideal = std::min(k, relevant.size());
  for (std::size_t r = 0; r < ideal; ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return dcg / idcg;
}

}  // namespace sdrm
