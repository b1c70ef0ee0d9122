// SPDX-License-Identifier: Apache-2.0
//
// Rating-log ingestion, binarisation, k-core filtering, user-level splits and
// ground-truth injection for implicit-feedback data.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "sdrm/common.hpp"

namespace sdrm {

struct RatingTriple {
  std::string user;
  std::string item;
  double rating = 0.0;
  std::optional<std::int64_t> timestamp;
};

/// Parsed rating log; duplicate (user, item) pairs already collapsed to the
/// last occurrence, in order of first appearance.
struct RawRatings {
  std::vector<RatingTriple> triples;
};

enum class InputFormat { Csv, Tsv, MovieLensDat };

inline InputFormat parse_input_format(std::string_view s) {
  if (s == "csv") return InputFormat::Csv;
  if (s == "tsv") return InputFormat::Tsv;
  if (s == "movielens-dat" || s == "dat") return InputFormat::MovieLensDat;
  throw ConfigError("unknown input format '" + std::string(s) + "' (csv|tsv|movielens-dat)");
}

struct LoadOptions {
  InputFormat format = InputFormat::Tsv;
  // Column positions; timestamp < 0 means absent.
  int user_column = 0;
  int item_column = 1;
  int rating_column = 2;
  int timestamp_column = 3;
  double min_rating = 1.0;
  double max_rating = 5.0;
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, InputFormat fmt) {
  std::vector<std::string_view> out;
  const std::string_view sep = fmt == InputFormat::Csv ? "," : fmt == InputFormat::Tsv ? "\t" : "::";
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
  for (auto& f : out) {
    while (!f.empty() && (f.front() == ' ' || f.front() == '"')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '"' || f.back() == '\r')) f.remove_suffix(1);
  }
  return out;
}

inline bool parse_double(std::string_view s, double& out) {
  // std::from_chars for double is available in libstdc++ 11.
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

inline bool parse_int64(std::string_view s, std::int64_t& out) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

}  // namespace detail

/// Parses a rating log. A first line whose rating field is not numeric is
/// treated as a header. Malformed rows are reported with 1-based line numbers.
inline RawRatings load_interactions(const std::filesystem::path& path, const LoadOptions& opt = {}) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  const int needed = std::max({opt.user_column, opt.item_column, opt.rating_column,
                               opt.timestamp_column}) + 1;
  RawRatings raw;
  std::unordered_map<std::string, std::size_t> seen;  // "user\x1fitem" -> index
  std::vector<std::size_t> bad;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string_view v(line);
    if (!v.empty() && v.back() == '\r') v.remove_suffix(1);
    if (v.empty()) continue;
    const auto f = detail::split_fields(v, opt.format);
    double rating = 0.0;
    const bool enough = static_cast<int>(f.size()) >= needed;
    if (!enough || !detail::parse_double(f[opt.rating_column], rating)) {
      if (lineno == 1 && enough) continue;  // header
      bad.push_back(lineno);
      continue;
    }
    if (f[opt.user_column].empty() || f[opt.item_column].empty() || !std::isfinite(rating) ||
        rating < opt.min_rating || rating > opt.max_rating) {
      bad.push_back(lineno);
      continue;
    }
    RatingTriple t{std::string(f[opt.user_column]), std::string(f[opt.item_column]), rating, {}};
    if (opt.timestamp_column >= 0) {
      std::int64_t ts = 0;
      if (!detail::parse_int64(f[opt.timestamp_column], ts)) {
        double d = 0;
        if (!detail::parse_double(f[opt.timestamp_column], d)) {
          bad.push_back(lineno);
          continue;
        }
        ts = static_cast<std::int64_t>(d);
      }
      t.timestamp = ts;
    }
    std::string key = t.user + '\x1f' + t.item;
    if (auto it = seen.find(key); it != seen.end()) {
      raw.triples[it->second] = std::move(t);
    } else {
      seen.emplace(std::move(key), raw.triples.size());
      raw.triples.push_back(std::move(t));
    }
  }
  if (!bad.empty()) {
    std::ostringstream msg;
    msg << path.string() << ": " << bad.size() << " malformed row(s) at line(s)";
    for (std::size_t i = 0; i < std::min<std::size_t>(bad.size(), 10); ++i) msg << ' ' << bad[i];
    if (bad.size() > 10) msg << " ...";
    throw DataError(msg.str());
  }
  if (raw.triples.empty()) throw DataError(path.string() + ": no ratings");
  return raw;
}

struct Interaction {
  std::string user;
  std::string item;
};

/// Rating > 3 becomes a positive; everything else is dropped.
inline std::vector<Interaction> binarize(const RawRatings& raw, double threshold = 3.0) {
  std::vector<Interaction> out;
  for (const auto& t : raw.triples)
    if (t.rating > threshold) out.push_back({t.user, t.item});
  return out;
}

/// Sparse binary users x items matrix. Rows hold sorted, unique item indices.
/// Token vectors map dense indices back to source ids and may be empty for
/// synthetic users.
class InteractionMatrix {
 public:
  InteractionMatrix() = default;

  InteractionMatrix(std::size_t items, std::vector<std::vector<std::int32_t>> rows)
      : items_(items), rows_(std::move(rows)) {
    for (auto& r : rows_) {
      std::sort(r.begin(), r.end());
      r.erase(std::unique(r.begin(), r.end()), r.end());
      if (!r.empty() && (r.front() < 0 || static_cast<std::size_t>(r.back()) >= items_))
        throw DataError("InteractionMatrix: item index out of range");
    }
  }

  static InteractionMatrix from_interactions(const std::vector<Interaction>& cells) {
    std::unordered_map<std::string, std::int32_t> uidx, iidx;
    InteractionMatrix m;
    std::vector<std::vector<std::int32_t>> rows;
    for (const auto& c : cells) {
      auto [ui, unew] = uidx.try_emplace(c.user, static_cast<std::int32_t>(rows.size()));
      if (unew) {
        rows.emplace_back();
        m.user_tokens_.push_back(c.user);
      }
      auto [ii, inew] = iidx.try_emplace(c.item, static_cast<std::int32_t>(m.item_tokens_.size()));
      if (inew) m.item_tokens_.push_back(c.item);
      rows[static_cast<std::size_t>(ui->second)].push_back(ii->second);
    }
    auto tokens_u = std::move(m.user_tokens_);
    auto tokens_i = std::move(m.item_tokens_);
    m = InteractionMatrix(tokens_i.size(), std::move(rows));
    m.user_tokens_ = std::move(tokens_u);
    m.item_tokens_ = std::move(tokens_i);
    return m;
  }

  std::size_t users() const { return rows_.size(); }
  std::size_t items() const { return items_; }
  std::size_t nnz() const {
    std::size_t n = 0;
    for (const auto& r : rows_) n += r.size();
    return n;
  }
  double sparsity() const {
    const double cells = static_cast<double>(users()) * static_cast<double>(items());
    return cells == 0.0 ? 1.0 : 1.0 - static_cast<double>(nnz()) / cells;
  }

  const std::vector<std::int32_t>& row(std::size_t u) const { return rows_[u]; }
  const std::vector<std::vector<std::int32_t>>& rows() const { return rows_; }
  bool contains(std::size_t u, std::int32_t item) const {
    return std::binary_search(rows_[u].begin(), rows_[u].end(), item);
  }

  const std::vector<std::string>& user_tokens() const { return user_tokens_; }
  const std::vector<std::string>& item_tokens() const { return item_tokens_; }
  void set_user_tokens(std::vector<std::string> t) { user_tokens_ = std::move(t); }
  void set_item_tokens(std::vector<std::string> t) { item_tokens_ = std::move(t); }

  /// Appends a user; `items` need not be sorted.
  void add_user(std::vector<std::int32_t> items, std::string token = {}) {
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
    if (!items.empty() && (items.front() < 0 || static_cast<std::size_t>(items.back()) >= items_))
      throw DataError("add_user: item index out of range");
    rows_.push_back(std::move(items));
    // Tokens are either absent altogether or one per row.
    if (user_tokens_.empty() && token.empty()) return;
    user_tokens_.resize(rows_.size() - 1);
    user_tokens_.push_back(std::move(token));
  }

  /// Rows `users` (in the given order), same item vocabulary.
  InteractionMatrix select_users(const std::vector<std::size_t>& users) const {
    InteractionMatrix out;
    out.items_ = items_;
    out.item_tokens_ = item_tokens_;
    for (auto u : users) {
      out.rows_.push_back(rows_[u]);
      if (!user_tokens_.empty()) out.user_tokens_.push_back(user_tokens_[u]);
    }
    return out;
  }

  /// Row-wise concatenation; item vocabularies must agree in size.
  static InteractionMatrix concat(const InteractionMatrix& a, const InteractionMatrix& b) {
    if (a.items() != b.items()) throw DataError("concat: item counts differ");
    InteractionMatrix out = a;
    out.rows_.insert(out.rows_.end(), b.rows_.begin(), b.rows_.end());
    if (!a.user_tokens_.empty() || !b.user_tokens_.empty()) {
      out.user_tokens_.resize(a.users());
      auto bt = b.user_tokens_;
      bt.resize(b.users());
      out.user_tokens_.insert(out.user_tokens_.end(), bt.begin(), bt.end());
    }
    if (out.item_tokens_.empty()) out.item_tokens_ = b.item_tokens_;
    return out;
  }

  friend bool operator==(const InteractionMatrix& a, const InteractionMatrix& b) {
    return a.items_ == b.items_ && a.rows_ == b.rows_;
  }

 private:
  std::size_t items_ = 0;
  std::vector<std::vector<std::int32_t>> rows_;
  std::vector<std::string> user_tokens_;
  std::vector<std::string> item_tokens_;
};

/// Iteratively drops users with < min_user and items with < min_item positives
/// until nothing changes, then re-indexes densely (relative order preserved).
inline InteractionMatrix kcore_filter(const InteractionMatrix& m, std::size_t min_user = 5,
                                      std::size_t min_item = 5) {
  std::vector<char> user_alive(m.users(), 1), item_alive(m.items(), 1);
  std::vector<std::size_t> udeg(m.users()), ideg(m.items(), 0);
  for (std::size_t u = 0; u < m.users(); ++u) {
    udeg[u] = m.row(u).size();
    for (auto i : m.row(u)) ++ideg[static_cast<std::size_t>(i)];
  }
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t u = 0; u < m.users(); ++u) {
      if (!user_alive[u] || udeg[u] >= min_user) continue;
      user_alive[u] = 0;
      changed = true;
      for (auto i : m.row(u))
        if (item_alive[static_cast<std::size_t>(i)]) --ideg[static_cast<std::size_t>(i)];
    }
    for (std::size_t i = 0; i < m.items(); ++i) {
      if (!item_alive[i] || ideg[i] >= min_item) continue;
      item_alive[i] = 0;
      changed = true;
    }
    if (changed) {
      // Recount user degrees against live items.
      for (std::size_t u = 0; u < m.users(); ++u) {
        if (!user_alive[u]) continue;
        std::size_t d = 0;
        for (auto i : m.row(u)) d += item_alive[static_cast<std::size_t>(i)] ? 1 : 0;
        udeg[u] = d;
      }
      std::fill(ideg.begin(), ideg.end(), 0);
      for (std::size_t u = 0; u < m.users(); ++u)
        if (user_alive[u])
          for (auto i : m.row(u))
            if (item_alive[static_cast<std::size_t>(i)]) ++ideg[static_cast<std::size_t>(i)];
    }
  }
  std::vector<std::int32_t> remap(m.items(), -1);
  std::vector<std::string> item_tokens;
  std::int32_t next = 0;
  for (std::size_t i = 0; i < m.items(); ++i) {
    if (!item_alive[i]) continue;
    remap[i] = next++;
    if (!m.item_tokens().empty()) item_tokens.push_back(m.item_tokens()[i]);
  }
  std::vector<std::vector<std::int32_t>> rows;
  std::vector<std::string> user_tokens;
  for (std::size_t u = 0; u < m.users(); ++u) {
    if (!user_alive[u]) continue;
    std::vector<std::int32_t> r;
    for (auto i : m.row(u))
      if (remap[static_cast<std::size_t>(i)] >= 0) r.push_back(remap[static_cast<std::size_t>(i)]);
    rows.push_back(std::move(r));
    if (!m.user_tokens().empty()) user_tokens.push_back(m.user_tokens()[u]);
  }
  if (rows.empty() || next == 0)
    throw DataError("k-core filter (" + std::to_string(min_user) + "," + std::to_string(min_item) +
                    ") left an empty dataset: too sparse");
  InteractionMatrix out(static_cast<std::size_t>(next), std::move(rows));
  out.set_user_tokens(std::move(user_tokens));
  out.set_item_tokens(std::move(item_tokens));
  return out;
}

struct DatasetStats {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t ratings = 0;
  double sparsity = 1.0;
};

inline DatasetStats dataset_stats(const InteractionMatrix& m) {
  return {m.users(), m.items(), m.nnz(), m.sparsity()};
}

/// Statistics counting every raw rating (positive or not) whose user and item
/// survive in `vocabulary`. This is the convention of the published
/// dataset-statistics tables, where sparsity is taken over all observed ratings.
inline DatasetStats rating_stats(const RawRatings& raw, const InteractionMatrix& vocabulary) {
  std::unordered_map<std::string_view, char> users, items;
  for (const auto& t : vocabulary.user_tokens()) users.emplace(t, 1);
  for (const auto& t : vocabulary.item_tokens()) items.emplace(t, 1);
  std::size_t n = 0;
  for (const auto& t : raw.triples) n += (users.count(t.user) && items.count(t.item)) ? 1 : 0;
  DatasetStats s{vocabulary.users(), vocabulary.items(), n, 1.0};
  const double cells = static_cast<double>(s.users) * static_cast<double>(s.items);
  if (cells > 0) s.sparsity = 1.0 - static_cast<double>(n) / cells;
  return s;
}

inline nlohmann::json to_json(const DatasetStats& s) {
  return {{"users", s.users}, {"items", s.items}, {"ratings", s.ratings}, {"sparsity", s.sparsity}};
}

/// Eval-time view of held-out users: `visible` items are known to the model
/// (and masked when ranking); `heldout` items are the relevance targets.
struct EvalPartition {
  InteractionMatrix visible;
  InteractionMatrix heldout;
};

struct SplitRatios {
  double train = 0.7;
  double test = 0.2;
  double validation = 0.1;
};

struct DatasetSplits {
  InteractionMatrix train;
  InteractionMatrix test;
  InteractionMatrix validation;
  EvalPartition test_eval;
  EvalPartition validation_eval;
  // Row indices into the filtered matrix the splits were drawn from.
  std::vector<std::size_t> train_users, test_users, validation_users;
};

/// Splits each row of `m` into visible / held-out parts, holding out
/// max(1, floor(fraction * n)) items per user chosen by a seeded shuffle.
inline EvalPartition partition_for_eval(const InteractionMatrix& m, double holdout_fraction,
                                        std::uint64_t seed) {
  EvalPartition p;
  std::vector<std::vector<std::int32_t>> vis, held;
  for (std::size_t u = 0; u < m.users(); ++u) {
    auto items = m.row(u);
    Rng rng(derive_seed(seed, u));
    std::shuffle(items.begin(), items.end(), rng);
    std::size_t h = static_cast<std::size_t>(std::floor(holdout_fraction * static_cast<double>(items.size())));
    if (h == 0 && items.size() >= 2) h = 1;
    held.emplace_back(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(h));
    vis.emplace_back(items.begin() + static_cast<std::ptrdiff_t>(h), items.end());
  }
  p.visible = InteractionMatrix(m.items(), std::move(vis));
  p.heldout = InteractionMatrix(m.items(), std::move(held));
  p.visible.set_user_tokens(m.user_tokens());
  p.heldout.set_user_tokens(m.user_tokens());
  return p;
}

/// Shuffles users with `seed`; test takes floor(test*U), validation
/// floor(validation*U), train the remainder.
inline DatasetSplits split_users(const InteractionMatrix& m, std::uint64_t seed,
                                 SplitRatios ratios = {}, double holdout_fraction = 0.2) {
  if (std::abs(ratios.train + ratios.test + ratios.validation - 1.0) > 1e-9 || ratios.train < 0 ||
      ratios.test < 0 || ratios.validation < 0)
    throw ConfigError("split ratios must be non-negative and sum to 1");
  const std::size_t U = m.users();
  if (U < 10) throw DataError("split_users: need at least 10 users, have " + std::to_string(U));
  std::vector<std::size_t> order(U);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::floor(ratios.test * static_cast<double>(U) + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(ratios.validation * static_cast<double>(U) + 1e-9));
  DatasetSplits s;
  s.test_users.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.validation_users.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test),
                            order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
  s.train_users.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), order.end());
  for (auto* v : {&s.test_users, &s.validation_users, &s.train_users}) std::sort(v->begin(), v->end());
  s.train = m.select_users(s.train_users);
  s.test = m.select_users(s.test_users);
  s.validation = m.select_users(s.validation_users);
  s.test_eval = partition_for_eval(s.test, holdout_fraction, derive_seed(seed, 101));
  s.validation_eval = partition_for_eval(s.validation, holdout_fraction, derive_seed(seed, 202));
  return s;
}

/// Training matrix with a sample of held-out users' visible rows appended.
struct InjectedTraining {
  InteractionMatrix matrix;
  std::size_t first_injected_row = 0;
  /// Indices into the eval partition, one per appended row, ascending.
  std::vector<std::size_t> injected_users;
};

/// Appends the visible rows of floor(fraction * n) seeded-sampled users of
/// `eval` to `train`. The appended items are exactly the eval-time mask.
inline InjectedTraining inject_ground_truth(const InteractionMatrix& train, const EvalPartition& eval,
                                           double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("injection fraction must lie in (0, 1]");
  if (train.items() != eval.visible.items()) throw DataError("inject_ground_truth: item counts differ");
  const std::size_t n = eval.visible.users();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto take = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  order.resize(take);
  std::sort(order.begin(), order.end());
  InjectedTraining out;
  out.first_injected_row = train.users();
  out.injected_users = order;
  out.matrix = InteractionMatrix::concat(train, eval.visible.select_users(order));
  return out;
}

// ---- serialisation -------------------------------------------------------

/// "user_idx,item_idx" CSV, header line first, rows sorted by (user, item).
inline void write_matrix_csv(const std::filesystem::path& path, const InteractionMatrix& m) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "user_idx,item_idx\n";
  for (std::size_t u = 0; u < m.users(); ++u)
    for (auto i : m.row(u)) os << u << ',' << i << '\n';
  if (!os) throw IoError("write failed: " + path.string());
}

inline InteractionMatrix read_matrix_csv(const std::filesystem::path& path, std::size_t users,
                                         std::size_t items) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::vector<std::vector<std::int32_t>> rows(users);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    const auto comma = line.find(',');
    std::int64_t u = -1, i = -1;
    if (comma == std::string::npos || !detail::parse_int64(std::string_view(line).substr(0, comma), u) ||
        !detail::parse_int64(std::string_view(line).substr(comma + 1), i) || u < 0 ||
        static_cast<std::size_t>(u) >= users || i < 0 || static_cast<std::size_t>(i) >= items)
      throw DataError(path.string() + ": bad row at line " + std::to_string(lineno));
    rows[static_cast<std::size_t>(u)].push_back(static_cast<std::int32_t>(i));
  }
  return InteractionMatrix(items, std::move(rows));
}

inline void save_splits(const std::filesystem::path& dir, const DatasetSplits& s,
                        const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  write_matrix_csv(dir / "train.csv", s.train);
  write_matrix_csv(dir / "test.csv", s.test);
  write_matrix_csv(dir / "validation.csv", s.validation);
  write_matrix_csv(dir / "test_visible.csv", s.test_eval.visible);
  write_matrix_csv(dir / "test_heldout.csv", s.test_eval.heldout);
  write_matrix_csv(dir / "validation_visible.csv", s.validation_eval.visible);
  write_matrix_csv(dir / "validation_heldout.csv", s.validation_eval.heldout);
  nlohmann::json j = extra;
  j["items"] = s.train.items();
  j["item_tokens"] = s.train.item_tokens();
  j["train"] = {{"stats", to_json(dataset_stats(s.train))}, {"user_tokens", s.train.user_tokens()}};
  j["test"] = {{"stats", to_json(dataset_stats(s.test))}, {"user_tokens", s.test.user_tokens()}};
  j["validation"] = {{"stats", to_json(dataset_stats(s.validation))},
                     {"user_tokens", s.validation.user_tokens()}};
  std::ofstream os(dir / "splits.json", std::ios::trunc);
  if (!os) throw IoError("cannot write " + (dir / "splits.json").string());
  os << j.dump(2) << '\n';
}

inline DatasetSplits load_splits(const std::filesystem::path& dir) {
  std::ifstream is(dir / "splits.json");
  if (!is) throw IoError("missing " + (dir / "splits.json").string());
  const auto j = nlohmann::json::parse(is);
  const std::size_t items = j.at("items").get<std::size_t>();
  const auto item_tokens = j.at("item_tokens").get<std::vector<std::string>>();
  auto load = [&](const char* file, const char* tokens_of) {
    const auto tokens = j.at(tokens_of).at("user_tokens").get<std::vector<std::string>>();
    auto m = read_matrix_csv(dir / file, tokens.size(), items);
    m.set_user_tokens(tokens);
    m.set_item_tokens(item_tokens);
    return m;
  };
  DatasetSplits s;
  s.train = load("train.csv", "train");
  s.test = load("test.csv", "test");
  s.validation = load("validation.csv", "validation");
  s.test_eval = {load("test_visible.csv", "test"), load("test_heldout.csv", "test")};
  s.validation_eval = {load("validation_visible.csv", "validation"), load("validation_heldout.csv", "validation")};
  return s;
}

}  // namespace sdrm
