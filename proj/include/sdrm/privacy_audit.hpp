// SPDX-License-Identifier: Apache-2.0
//
// Memorisation and fidelity audit: synthetic x real Jaccard histogram and
// degree distributions.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "sdrm/common.hpp"
#include "sdrm/dataset.hpp"

namespace sdrm {

/// |a ∩ b| / |a ∪ b| over sorted unique item lists; 0 when both are empty.
inline double jaccard(std::span<const std::int32_t> a, std::span<const std::int32_t> b) {
  std::size_t inter = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) ++i;
    else if (*j < *i) ++j;
    else {
      ++inter;
      ++i;
      ++j;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline constexpr std::size_t kSimilarityBuckets = 10;

/// Bucket b covers [b/10, (b+1)/10); the last bucket is closed at 1.
inline std::size_t similarity_bucket(double j) {
  return std::min(kSimilarityBuckets - 1, static_cast<std::size_t>(std::floor(j * 10.0 + 1e-12)));
}

struct SimilarityHistogram {
  std::array<std::uint64_t, kSimilarityBuckets> counts{};
  std::uint64_t total = 0;
  double max_similarity = 0.0;
  std::size_t max_synthetic = 0;
  std::size_t max_real = 0;

  double percent(std::size_t b) const {
    return total == 0 ? 0.0 : 100.0 * static_cast<double>(counts[b]) / static_cast<double>(total);
  }
  /// Share of pairs with similarity below `threshold` (a bucket edge).
  double fraction_below(double threshold) const {
    std::uint64_t n = 0;
    for (std::size_t b = 0; b < kSimilarityBuckets; ++b)
      if (static_cast<double>(b + 1) / 10.0 <= threshold + 1e-12) n += counts[b];
    return total == 0 ? 0.0 : static_cast<double>(n) / static_cast<double>(total);
  }
};

/// Every synthetic x real pair. Pairs sharing no item (found through an
/// inverted index over real users) go to the first bucket without an explicit
/// intersection. Synthetic rows are partitioned across worker threads and the
/// partial histograms merged.
inline SimilarityHistogram pairwise_similarity_histogram(const InteractionMatrix& synthetic,
                                                         const InteractionMatrix& real, unsigned workers = 0) {
  if (synthetic.users() == 0 || real.users() == 0) throw DataError("similarity histogram: empty matrix");
  if (synthetic.items() != real.items()) throw DataError("similarity histogram: item vocabularies differ");
  std::vector<std::vector<std::uint32_t>> postings(real.items());
  for (std::size_t u = 0; u < real.users(); ++u)
    for (auto i : real.row(u)) postings[static_cast<std::size_t>(i)].push_back(static_cast<std::uint32_t>(u));

  const std::size_t S = synthetic.users();
  workers = std::max(1u, std::min<unsigned>(workers ? workers : worker_count(), static_cast<unsigned>(S)));
  std::vector<SimilarityHistogram> parts(workers);
  auto work = [&](unsigned w) {
    auto& h = parts[w];
    std::vector<std::uint32_t> shared(real.users(), 0);
    std::vector<std::uint32_t> touched;
    for (std::size_t s = w; s < S; s += workers) {
      const auto& row = synthetic.row(s);
      touched.clear();
      for (auto i : row)
        for (auto u : postings[static_cast<std::size_t>(i)]) {
          if (shared[u]++ == 0) touched.push_back(u);
        }
      std::sort(touched.begin(), touched.end());
      for (auto u : touched) {
        const std::size_t inter = shared[u];
        shared[u] = 0;
        const double j = static_cast<double>(inter) /
                         static_cast<double>(row.size() + real.row(u).size() - inter);
        ++h.counts[similarity_bucket(j)];
        if (j > h.max_similarity) {
          h.max_similarity = j;
          h.max_synthetic = s;
          h.max_real = u;
        }
      }
      h.counts[0] += real.users() - touched.size();
      h.total += real.users();
    }
  };
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work, w);
  for (auto& t : pool) t.join();

  SimilarityHistogram out;
  for (const auto& p : parts) {
    for (std::size_t b = 0; b < kSimilarityBuckets; ++b) out.counts[b] += p.counts[b];
    out.total += p.total;
    // Deterministic tie-break: lowest (synthetic, real) pair wins.
    if (p.max_similarity > out.max_similarity ||
        (p.max_similarity == out.max_similarity && p.max_similarity > 0 &&
         std::pair(p.max_synthetic, p.max_real) < std::pair(out.max_synthetic, out.max_real))) {
      out.max_similarity = p.max_similarity;
      out.max_synthetic = p.max_synthetic;
      out.max_real = p.max_real;
    }
  }
  return out;
}

struct DegreeHistogram {
  /// Bin 0 holds degree 0; bin b >= 1 holds degrees in [2^(b-1), 2^b).
  std::vector<std::uint64_t> bins;
  std::size_t p50 = 0, p90 = 0, p99 = 0;
  std::size_t total = 0;
  std::vector<std::size_t> degrees;
};

inline std::size_t degree_bin(std::size_t d) {
  std::size_t b = 0;
  while (d > 0) {
    d >>= 1;
    ++b;
  }
  return b;
}

inline DegreeHistogram degree_histogram(std::vector<std::size_t> degrees) {
  DegreeHistogram h;
  h.total = degrees.size();
  for (auto d : degrees) {
    const auto b = degree_bin(d);
    if (h.bins.size() <= b) h.bins.resize(b + 1, 0);
    ++h.bins[b];
  }
  h.degrees = degrees;
  if (!degrees.empty()) {
    std::sort(degrees.begin(), degrees.end());
    // Nearest-rank percentiles.
    auto pct = [&](double p) {
      const auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(degrees.size())));
      return degrees[std::clamp<std::size_t>(rank, 1, degrees.size()) - 1];
    };
    h.p50 = pct(0.50);
    h.p90 = pct(0.90);
    h.p99 = pct(0.99);
  }
  return h;
}

struct DegreeDistributions {
  DegreeHistogram items_per_user;
  DegreeHistogram users_per_item;
};

inline DegreeDistributions degree_distributions(const InteractionMatrix& m) {
  if (m.users() == 0 || m.items() == 0) throw DataError("degree distributions: empty matrix");
  std::vector<std::size_t> per_user(m.users()), per_item(m.items(), 0);
  for (std::size_t u = 0; u < m.users(); ++u) {
    per_user[u] = m.row(u).size();
    for (auto i : m.row(u)) ++per_item[static_cast<std::size_t>(i)];
  }
  return {degree_histogram(std::move(per_user)), degree_histogram(std::move(per_item))};
}

inline nlohmann::json to_json(const SimilarityHistogram& h) {
  nlohmann::json buckets = nlohmann::json::array();
  for (std::size_t b = 0; b < kSimilarityBuckets; ++b)
    buckets.push_back({{"lo", static_cast<double>(b) / 10.0},
                       {"hi", static_cast<double>(b + 1) / 10.0},
                       {"count", h.counts[b]},
                       {"percent", h.percent(b)}});
  return {{"buckets", buckets},
          {"total_pairs", h.total},
          {"max_similarity", h.max_similarity},
          {"max_pair", {h.max_synthetic, h.max_real}}};
}

inline SimilarityHistogram similarity_histogram_from_json(const nlohmann::json& j) {
  SimilarityHistogram h;
  const auto& b = j.at("buckets");
  for (std::size_t i = 0; i < kSimilarityBuckets; ++i) h.counts[i] = b.at(i).at("count").get<std::uint64_t>();
  h.total = j.at("total_pairs").get<std::uint64_t>();
  h.max_similarity = j.at("max_similarity").get<double>();
  h.max_synthetic = j.at("max_pair").at(0).get<std::size_t>();
  h.max_real = j.at("max_pair").at(1).get<std::size_t>();
  return h;
}

inline nlohmann::json to_json(const DegreeHistogram& h) {
  return {{"bins", h.bins}, {"p50", h.p50}, {"p90", h.p90}, {"p99", h.p99}, {"total", h.total}};
}

/// CSV of log2 bins: bin,lo,hi,count (hi exclusive; bin 0 is degree 0).
inline std::string degree_csv(const DegreeHistogram& h) {
  std::ostringstream os;
  os << "bin,lo,hi,count\n";
  for (std::size_t b = 0; b < h.bins.size(); ++b) {
    const std::size_t lo = b == 0 ? 0 : (std::size_t{1} << (b - 1));
    const std::size_t hi = b == 0 ? 1 : (std::size_t{1} << b);
    os << b << ',' << lo << ',' << hi << ',' << h.bins[b] << '\n';
  }
  return os.str();
}

/// Markdown rendition of the similarity histogram, one row per bucket.
inline std::string render_similarity_markdown(const SimilarityHistogram& h, const std::string& label) {
  std::ostringstream os;
  os << "| Similarity | " << label << " | Total % |\n|---|---|---|\n";
  for (std::size_t b = 0; b < kSimilarityBuckets; ++b) {
    os << "| " << std::fixed << std::setprecision(1) << static_cast<double>(b) / 10.0 << " - "
       << static_cast<double>(b + 1) / 10.0 << " | " << h.counts[b] << " | ";
    const double p = h.percent(b);
    if (p < 1.0) os << "< 1%";
    else os << std::setprecision(2) << p << '%';
    os << " |\n";
  }
  return os.str();
}

}  // namespace sdrm
