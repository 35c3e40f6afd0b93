#pragma once

// Full-ranking top-K evaluation: Recall@K, NDCG@K and train-degree buckets.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cohesion/data_ingest.hpp"
#include "cohesion/error.hpp"
#include "cohesion/matrix.hpp"
#include "cohesion/parallel.hpp"

namespace cohesion {

namespace detail {

// Score order: higher first, then lower item index. Masked items sit below
// every unmasked item.
struct RankOrder {
  std::span<const double> scores;
  const std::vector<char>& masked;
  bool operator()(Index a, Index b) const {
    if (masked[a] != masked[b]) return masked[b];
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  }
};

}  // namespace detail

// Full permutation of items, best first.
inline std::vector<Index> rank_items(std::span<const double> scores, std::span<const Index> mask) {
  std::vector<char> masked(scores.size(), 0);
  for (Index i : mask) masked.at(i) = 1;
  std::vector<Index> order(scores.size());
  for (Index i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), detail::RankOrder{scores, masked});
  return order;
}

// First k entries of rank_items without sorting the tail.
inline std::vector<Index> top_k_items(std::span<const double> scores, const std::vector<char>& masked,
                                      std::size_t k) {
  std::vector<Index> order(scores.size());
  for (Index i = 0; i < order.size(); ++i) order[i] = i;
  k = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    detail::RankOrder{scores, masked});
  order.resize(k);
  return order;
}

// |top-K ∩ relevant| / |relevant|; nullopt when there is nothing relevant.
inline std::optional<double> recall_at_k(std::span<const Index> ranked, std::span<const Index> relevant,
                                         std::size_t k) {
  if (relevant.empty()) return std::nullopt;
  std::size_t hits = 0;
  for (std::size_t j = 0; j < std::min(k, ranked.size()); ++j)
    if (std::find(relevant.begin(), relevant.end(), ranked[j]) != relevant.end()) ++hits;
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

inline std::optional<double> ndcg_at_k(std::span<const Index> ranked, std::span<const Index> relevant,
                                       std::size_t k) {
  if (relevant.empty()) return std::nullopt;
  double dcg = 0.0;
  for (std::size_t j = 0; j < std::min(k, ranked.size()); ++j)
    if (std::find(relevant.begin(), relevant.end(), ranked[j]) != relevant.end())
      dcg += 1.0 / std::log2(static_cast<double>(j) + 2.0);
  double idcg = 0.0;
  for (std::size_t j = 0; j < std::min(k, relevant.size()); ++j) idcg += 1.0 / std::log2(static_cast<double>(j) + 2.0);
  return dcg / idcg;
}

struct BucketRow {
  std::size_t lo = 0;  // inclusive train degree
  std::optional<std::size_t> hi;  // inclusive; nullopt = unbounded
  std::size_t users = 0;
  std::optional<double> recall20;

  std::string label() const {
    return std::to_string(lo) + (hi ? "-" + std::to_string(*hi) : std::string("+"));
  }
};

struct MetricsReport {
  std::map<std::size_t, double> recall;
  std::map<std::size_t, double> ndcg;
  std::vector<BucketRow> per_bucket;
  double seconds = 0.0;
  std::size_t n_eval_users = 0;
};

struct EvalOptions {
  std::vector<std::size_t> ks{10, 20};
  // Train-degree cut points; buckets are [0, e0], [e0+1, e1], ..., [e_last+1, inf).
  std::optional<std::vector<std::size_t>> bucket_edges;
  // Extra interactions to mask besides the training ones (e.g. validation
  // pairs during test ranking).
  const InteractionTable* extra_mask = nullptr;
};

inline std::vector<std::size_t> default_bucket_edges() { return {5, 10, 15, 20}; }

inline std::vector<BucketRow> make_buckets(const std::vector<std::size_t>& edges) {
  if (!std::is_sorted(edges.begin(), edges.end()) ||
      std::adjacent_find(edges.begin(), edges.end()) != edges.end())
    throw Error("bucket edges must be strictly ascending");
  std::vector<BucketRow> rows;
  std::size_t lo = 0;
  for (std::size_t e : edges) {
    rows.push_back({lo, e, 0, std::nullopt});
    lo = e + 1;
  }
  rows.push_back({lo, std::nullopt, 0, std::nullopt});
  return rows;
}

inline std::size_t bucket_of(const std::vector<BucketRow>& rows, std::size_t degree) {
  for (std::size_t b = 0; b < rows.size(); ++b)
    if (!rows[b].hi || degree <= *rows[b].hi) return b;
  return rows.size() - 1;
}

// Scores every item for every user with a nonempty target set, masks the
// user's training items, and averages metrics over those users in ascending
// user order.
inline MetricsReport evaluate(const Matrix& user_emb, const Matrix& item_emb, const InteractionTable& train,
                              const InteractionTable& target, const EvalOptions& opt = {}) {
  const auto start = std::chrono::steady_clock::now();
  if (user_emb.cols() != item_emb.cols()) throw ShapeError("evaluate: embedding widths differ");
  if (user_emb.rows() != train.n_users() || item_emb.rows() != train.n_items())
    throw ShapeError("evaluate: embedding rows do not match the interaction index space");
  if (opt.ks.empty()) throw Error("evaluate: no cutoffs requested");

  const auto train_items = train.items_by_user();
  const auto target_items = target.items_by_user();
  std::vector<std::vector<Index>> extra_items;
  if (opt.extra_mask) extra_items = opt.extra_mask->items_by_user();

  std::vector<Index> users;
  for (Index u = 0; u < target_items.size(); ++u)
    if (!target_items[u].empty()) users.push_back(u);
  if (users.empty()) throw DataError("evaluate: no users with relevant items");

  std::size_t max_k = *std::max_element(opt.ks.begin(), opt.ks.end());
  if (opt.bucket_edges) max_k = std::max<std::size_t>(max_k, 20);
  const std::size_t nk = opt.ks.size();

  // Per evaluated user: recall and ndcg at each cutoff, then recall@20.
  std::vector<double> per_user(users.size() * (2 * nk + 1), 0.0);
  parallel_for(
      users.size(),
      [&](std::size_t j) {
        const Index u = users[j];
        std::vector<double> scores(item_emb.rows());
        for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = dot(user_emb.row(u), item_emb.row(i));
        std::vector<char> masked(scores.size(), 0);
        for (Index i : train_items[u]) masked[i] = 1;
        if (!extra_items.empty())
          for (Index i : extra_items[u]) masked[i] = 1;
        const auto top = top_k_items(scores, masked, max_k);
        double* out = per_user.data() + j * (2 * nk + 1);
        for (std::size_t q = 0; q < nk; ++q) {
          out[q] = *recall_at_k(top, target_items[u], opt.ks[q]);
          out[nk + q] = *ndcg_at_k(top, target_items[u], opt.ks[q]);
        }
        out[2 * nk] = *recall_at_k(top, target_items[u], 20);
      },
      16);

  MetricsReport rep;
  rep.n_eval_users = users.size();
  for (std::size_t q = 0; q < nk; ++q) {
    double r = 0.0, g = 0.0;
    for (std::size_t j = 0; j < users.size(); ++j) {
      r += per_user[j * (2 * nk + 1) + q];
      g += per_user[j * (2 * nk + 1) + nk + q];
    }
    rep.recall[opt.ks[q]] = r / static_cast<double>(users.size());
    rep.ndcg[opt.ks[q]] = g / static_cast<double>(users.size());
  }

  if (opt.bucket_edges) {
    rep.per_bucket = make_buckets(*opt.bucket_edges);
    std::vector<double> sums(rep.per_bucket.size(), 0.0);
    for (std::size_t j = 0; j < users.size(); ++j) {
      const std::size_t b = bucket_of(rep.per_bucket, train_items[users[j]].size());
      ++rep.per_bucket[b].users;
      sums[b] += per_user[j * (2 * nk + 1) + 2 * nk];
    }
    for (std::size_t b = 0; b < sums.size(); ++b)
      if (rep.per_bucket[b].users > 0) rep.per_bucket[b].recall20 = sums[b] / static_cast<double>(rep.per_bucket[b].users);
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

// Recall@20 per train-degree bucket; bucket counts sum to the evaluated users.
inline std::vector<BucketRow> sparsity_buckets(const Matrix& user_emb, const Matrix& item_emb,
                                               const InteractionTable& train, const InteractionTable& target,
                                               std::vector<std::size_t> edges = default_bucket_edges()) {
  EvalOptions opt;
  opt.ks = {20};
  opt.bucket_edges = std::move(edges);
  return evaluate(user_emb, item_emb, train, target, opt).per_bucket;
}

// Run-to-run stable JSON: wall-clock time is deliberately left out.
inline nlohmann::json to_json(const MetricsReport& rep) {
  nlohmann::json j;
  j["n_eval_users"] = rep.n_eval_users;
  for (const auto& [k, v] : rep.recall) j["recall@" + std::to_string(k)] = v;
  for (const auto& [k, v] : rep.ndcg) j["ndcg@" + std::to_string(k)] = v;
  if (!rep.per_bucket.empty()) {
    auto arr = nlohmann::json::array();
    for (const auto& b : rep.per_bucket) {
      nlohmann::json row{{"range", b.label()}, {"lo", b.lo}, {"users", b.users}};
      row["hi"] = b.hi ? nlohmann::json(*b.hi) : nlohmann::json(nullptr);
      row["recall@20"] = b.recall20 ? nlohmann::json(*b.recall20) : nlohmann::json(nullptr);
      arr.push_back(row);
    }
    j["buckets"] = arr;
  }
  return j;
}

inline void write_bucket_csv(const std::filesystem::path& path, const MetricsReport& rep) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "range,lo,hi,users,recall@20\n";
  char buf[64];
  for (const auto& b : rep.per_bucket) {
    out << b.label() << ',' << b.lo << ',' << (b.hi ? std::to_string(*b.hi) : std::string("inf")) << ','
        << b.users << ',';
    if (b.recall20) {
      std::snprintf(buf, sizeof buf, "%.17g", *b.recall20);
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace cohesion
