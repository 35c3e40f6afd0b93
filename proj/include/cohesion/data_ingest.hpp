#pragma once

// Interaction tables, k-core filtering, per-user splitting, modality feature
// files and the planted-cluster synthetic generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cohesion/cmf.hpp"
#include "cohesion/error.hpp"
#include "cohesion/matrix.hpp"
#include "cohesion/rng.hpp"

namespace cohesion {

using Index = std::uint32_t;

struct Interaction {
  Index user = 0;
  Index item = 0;
  friend bool operator==(const Interaction&, const Interaction&) = default;
  friend auto operator<=>(const Interaction&, const Interaction&) = default;
};

// Bidirectional raw-id <-> dense-index map. Indices are assigned in insertion order.
class IdMap {
 public:
  Index intern(std::string_view raw) {
    auto [it, inserted] = index_.try_emplace(std::string(raw), static_cast<Index>(ids_.size()));
    if (inserted) ids_.emplace_back(raw);
    return it->second;
  }
  std::optional<Index> find(std::string_view raw) const {
    auto it = index_.find(std::string(raw));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  const std::string& raw(Index i) const { return ids_.at(i); }
  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }

  friend bool operator==(const IdMap& a, const IdMap& b) { return a.ids_ == b.ids_; }

 private:
  std::unordered_map<std::string, Index> index_;
  std::vector<std::string> ids_;
};

// Deduplicated implicit-feedback pairs over a dense user/item index space.
// Tables produced by splitting share the parent's index space, so some
// indices may have no pair in a given split.
struct InteractionTable {
  std::vector<Interaction> pairs;
  IdMap users;
  IdMap items;

  std::size_t n_users() const noexcept { return users.size(); }
  std::size_t n_items() const noexcept { return items.size(); }
  bool empty() const noexcept { return pairs.empty(); }

  // Items per user, in pair order.
  std::vector<std::vector<Index>> items_by_user() const {
    std::vector<std::vector<Index>> out(n_users());
    for (const auto& p : pairs) out[p.user].push_back(p.item);
    return out;
  }

  std::vector<std::size_t> user_degrees() const {
    std::vector<std::size_t> deg(n_users(), 0);
    for (const auto& p : pairs) ++deg[p.user];
    return deg;
  }

  // Same index space, different pairs.
  InteractionTable with_pairs(std::vector<Interaction> new_pairs) const {
    InteractionTable t;
    t.users = users;
    t.items = items;
    t.pairs = std::move(new_pairs);
    return t;
  }
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

inline std::uint64_t pair_key(Index u, Index i) { return (std::uint64_t{u} << 32) | i; }

}  // namespace detail

// Parses user<TAB>item[<TAB>ignored...] lines. Blank lines are skipped; when
// skip_header is set the first non-blank line is dropped.
inline InteractionTable parse_interactions(std::istream& in, bool skip_header = false) {
  InteractionTable table;
  std::unordered_set<std::uint64_t> seen;
  std::string line;
  std::size_t lineno = 0;
  bool header_pending = skip_header;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header_pending) {
      header_pending = false;
      continue;
    }
    const auto fields = detail::split_tabs(line);
    if (fields.size() < 2 || fields[0].empty() || fields[1].empty())
      throw ParseError("expected at least two tab-separated fields", lineno);
    const Index u = table.users.intern(fields[0]);
    const Index i = table.items.intern(fields[1]);
    if (seen.insert(detail::pair_key(u, i)).second) table.pairs.push_back({u, i});
  }
  if (table.pairs.empty()) throw ParseError("no interactions found");
  return table;
}

inline InteractionTable load_interactions(const std::filesystem::path& path, bool skip_header = false) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open interaction file " + path.string());
  return parse_interactions(in, skip_header);
}

inline void write_interactions(const std::filesystem::path& path, const InteractionTable& t) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& p : t.pairs) out << t.users.raw(p.user) << '\t' << t.items.raw(p.item) << '\n';
}

struct FilterResult {
  InteractionTable table;
  bool empty_warning = false;
};

// Maximal k-core of the bipartite interaction graph. Survivors are re-indexed
// in order of first appearance among the surviving pairs.
inline FilterResult kcore_filter(const InteractionTable& table, std::size_t k) {
  if (k < 1) throw Error("kcore_filter: k must be >= 1");
  std::vector<std::size_t> udeg(table.n_users(), 0), ideg(table.n_items(), 0);
  for (const auto& p : table.pairs) {
    ++udeg[p.user];
    ++ideg[p.item];
  }
  std::vector<std::vector<std::size_t>> user_edges(table.n_users()), item_edges(table.n_items());
  for (std::size_t e = 0; e < table.pairs.size(); ++e) {
    user_edges[table.pairs[e].user].push_back(e);
    item_edges[table.pairs[e].item].push_back(e);
  }
  std::vector<char> edge_alive(table.pairs.size(), 1);
  std::vector<char> user_dead(table.n_users(), 0), item_dead(table.n_items(), 0);

  // Work list of (is_item, index) nodes whose degree dropped below k.
  std::vector<std::pair<bool, Index>> stack;
  for (Index u = 0; u < udeg.size(); ++u)
    if (udeg[u] < k) {
      user_dead[u] = 1;
      stack.emplace_back(false, u);
    }
  for (Index i = 0; i < ideg.size(); ++i)
    if (ideg[i] < k) {
      item_dead[i] = 1;
      stack.emplace_back(true, i);
    }
  while (!stack.empty()) {
    const auto [is_item, node] = stack.back();
    stack.pop_back();
    const auto& edges = is_item ? item_edges[node] : user_edges[node];
    for (std::size_t e : edges) {
      if (!edge_alive[e]) continue;
      edge_alive[e] = 0;
      const auto& p = table.pairs[e];
      if (is_item) {
        if (!user_dead[p.user] && --udeg[p.user] < k) {
          user_dead[p.user] = 1;
          stack.emplace_back(false, p.user);
        }
      } else {
        if (!item_dead[p.item] && --ideg[p.item] < k) {
          item_dead[p.item] = 1;
          stack.emplace_back(true, p.item);
        }
      }
    }
  }

  FilterResult result;
  for (std::size_t e = 0; e < table.pairs.size(); ++e) {
    if (!edge_alive[e]) continue;
    const auto& p = table.pairs[e];
    const Index u = result.table.users.intern(table.users.raw(p.user));
    const Index i = result.table.items.intern(table.items.raw(p.item));
    result.table.pairs.push_back({u, i});
  }
  result.empty_warning = result.table.pairs.empty();
  return result;
}

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct DatasetSplit {
  InteractionTable train;
  InteractionTable val;
  InteractionTable test;
  std::uint64_t seed = 0;
  SplitRatios ratios;
};

// Per-user random split. Each user contributes max(1, round(r*n)) pairs to
// test and to val; the remainder goes to train.
inline DatasetSplit split_dataset(const InteractionTable& table, SplitRatios ratios, std::uint64_t seed) {
  if (!(ratios.train > 0 && ratios.val > 0 && ratios.test > 0))
    throw Error("split_dataset: ratios must be positive");
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
    throw Error("split_dataset: ratios must sum to 1");

  // Positions of each user's pairs in the input, in input order.
  std::vector<std::vector<std::size_t>> by_user(table.n_users());
  for (std::size_t e = 0; e < table.pairs.size(); ++e) by_user[table.pairs[e].user].push_back(e);

  enum : char { kTrain, kVal, kTest };
  std::vector<char> assignment(table.pairs.size(), kTrain);
  Rng rng(seed);
  for (Index u = 0; u < by_user.size(); ++u) {
    auto& idx = by_user[u];
    const std::size_t n = idx.size();
    if (n < 3)
      throw DataError("split_dataset: user '" + table.users.raw(u) + "' has " + std::to_string(n) +
                      " interactions, need at least 3");
    const auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratios.test * n)));
    const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratios.val * n)));
    if (n_test + n_val >= n)
      throw DataError("split_dataset: ratios leave user '" + table.users.raw(u) + "' without training data");
    shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < n_test; ++k) assignment[idx[k]] = kTest;
    for (std::size_t k = n_test; k < n_test + n_val; ++k) assignment[idx[k]] = kVal;
  }

  std::vector<Interaction> tr, va, te;
  for (std::size_t e = 0; e < table.pairs.size(); ++e) {
    switch (assignment[e]) {
      case kTrain: tr.push_back(table.pairs[e]); break;
      case kVal: va.push_back(table.pairs[e]); break;
      default: te.push_back(table.pairs[e]); break;
    }
  }
  return DatasetSplit{table.with_pairs(std::move(tr)), table.with_pairs(std::move(va)),
                      table.with_pairs(std::move(te)), seed, ratios};
}

inline nlohmann::json split_manifest(const DatasetSplit& split) {
  return {
      {"seed", split.seed},
      {"ratios", {split.ratios.train, split.ratios.val, split.ratios.test}},
      {"counts",
       {{"train", split.train.pairs.size()},
        {"val", split.val.pairs.size()},
        {"test", split.test.pairs.size()}}},
      {"n_users", split.train.n_users()},
      {"n_items", split.train.n_items()},
  };
}

// ---------------------------------------------------------------------------
// Modality features

enum class Modality { behavior, textual, visual };

inline std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::behavior: return "behavior";
    case Modality::textual: return "textual";
    case Modality::visual: return "visual";
  }
  return "?";
}

inline Modality parse_modality(std::string_view s) {
  if (s == "behavior" || s == "i") return Modality::behavior;
  if (s == "textual" || s == "t") return Modality::textual;
  if (s == "visual" || s == "v") return Modality::visual;
  throw Error("unknown modality '" + std::string(s) + "'");
}

struct FeatureMatrix {
  Modality modality = Modality::textual;
  Matrix values;  // rows = items, cols = modality dimension

  std::size_t rows() const noexcept { return values.rows(); }
  std::size_t dim() const noexcept { return values.cols(); }
};

inline FeatureMatrix load_features(const std::filesystem::path& path, std::size_t expected_items,
                                   Modality modality = Modality::textual) {
  const auto raw = cmf::read_raw(path);
  if (raw.rows != expected_items)
    throw AlignmentError(path.string() + ": " + std::to_string(raw.rows) + " feature rows but " +
                         std::to_string(expected_items) + " items");
  for (std::size_t k = 0; k < raw.values.size(); ++k)
    if (!std::isfinite(raw.values[k]))
      throw DataError(path.string() + ": non-finite value at row " + std::to_string(k / raw.cols) +
                      ", column " + std::to_string(k % raw.cols));
  return FeatureMatrix{modality, raw.to_matrix()};
}

inline void save_features(const std::filesystem::path& path, const FeatureMatrix& f) {
  cmf::write(path, f.values);
}

// ---------------------------------------------------------------------------
// Synthetic planted-cluster data

struct SyntheticSpec {
  std::size_t n_users = 500;
  std::size_t n_items = 200;
  std::size_t n_clusters = 5;
  std::vector<std::size_t> feat_dims{16, 8};
  std::size_t interactions_per_user = 10;
  double noise = 0.1;
  std::uint64_t seed = 7;
  double in_cluster_share = 0.9;
};

struct SyntheticData {
  InteractionTable table;
  std::vector<FeatureMatrix> features;  // textual, visual, then further dims as visual
  std::vector<Index> item_cluster;
  std::vector<Index> user_cluster;
};

// Items are assigned to clusters round-robin (item i -> i mod C). Raw ids are
// the decimal indices, so item raw id k is feature row k.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_clusters < 1 || spec.n_clusters > spec.n_items)
    throw Error("generate_synthetic: need 1 <= n_clusters <= n_items");
  if (spec.noise < 0) throw Error("generate_synthetic: noise must be >= 0");
  if (spec.interactions_per_user > spec.n_items)
    throw Error("generate_synthetic: interactions_per_user exceeds n_items");

  Rng rng(spec.seed);
  SyntheticData out;
  out.item_cluster.resize(spec.n_items);
  std::vector<std::vector<Index>> members(spec.n_clusters);
  for (Index i = 0; i < spec.n_items; ++i) {
    out.item_cluster[i] = static_cast<Index>(i % spec.n_clusters);
    members[out.item_cluster[i]].push_back(i);
  }

  for (std::size_t m = 0; m < spec.feat_dims.size(); ++m) {
    const std::size_t dim = spec.feat_dims[m];
    Matrix centroids(spec.n_clusters, dim);
    for (double& v : centroids.values()) v = standard_normal(rng);
    Matrix feats(spec.n_items, dim);
    for (Index i = 0; i < spec.n_items; ++i)
      for (std::size_t c = 0; c < dim; ++c)
        feats(i, c) = centroids(out.item_cluster[i], c) + spec.noise * standard_normal(rng);
    out.features.push_back({m == 0 ? Modality::textual : Modality::visual, std::move(feats)});
  }

  for (Index u = 0; u < spec.n_users; ++u) out.table.users.intern(std::to_string(u));
  for (Index i = 0; i < spec.n_items; ++i) out.table.items.intern(std::to_string(i));

  out.user_cluster.resize(spec.n_users);
  for (Index u = 0; u < spec.n_users; ++u) {
    const auto pref = static_cast<Index>(uniform_index(rng, spec.n_clusters));
    out.user_cluster[u] = pref;
    std::vector<char> taken(spec.n_items, 0);
    std::size_t count = 0;
    while (count < spec.interactions_per_user) {
      Index item;
      if (uniform01(rng) < spec.in_cluster_share) {
        const auto& pool = members[pref];
        item = pool[uniform_index(rng, pool.size())];
      } else {
        item = static_cast<Index>(uniform_index(rng, spec.n_items));
      }
      if (taken[item]) continue;
      taken[item] = 1;
      out.table.pairs.push_back({u, item});
      ++count;
    }
  }
  return out;
}

}  // namespace cohesion
