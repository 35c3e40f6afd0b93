#pragma once

// Bipartite user-item adjacency in CSR form and top-k cosine similarity graphs.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cohesion/data_ingest.hpp"
#include "cohesion/error.hpp"
#include "cohesion/matrix.hpp"
#include "cohesion/parallel.hpp"

namespace cohesion {

// Square CSR matrix over the stacked node space [users | items].
// Column indices are strictly ascending within each row.
struct SparseAdjacency {
  std::size_t n = 0;
  std::size_t n_users = 0;
  std::vector<std::size_t> row_ptr{0};
  std::vector<Index> col_idx;
  std::vector<double> val;

  std::size_t nnz() const noexcept { return col_idx.size(); }
  std::size_t degree(std::size_t r) const { return row_ptr[r + 1] - row_ptr[r]; }

  // Value at (r, c) or 0 when structurally absent.
  double at(std::size_t r, std::size_t c) const {
    const auto first = col_idx.begin() + static_cast<std::ptrdiff_t>(row_ptr[r]);
    const auto last = col_idx.begin() + static_cast<std::ptrdiff_t>(row_ptr[r + 1]);
    const auto it = std::lower_bound(first, last, static_cast<Index>(c));
    if (it == last || *it != c) return 0.0;
    return val[static_cast<std::size_t>(it - col_idx.begin())];
  }

  Matrix to_dense() const {
    Matrix d(n, n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t e = row_ptr[r]; e < row_ptr[r + 1]; ++e) d(r, col_idx[e]) = val[e];
    return d;
  }
};

// Unnormalized 0/1 adjacency [[0, R], [R^T, 0]] of the training interactions.
inline SparseAdjacency build_adjacency(const InteractionTable& train) {
  if (train.empty()) throw Error("build_adjacency: empty interaction table");
  const std::size_t nu = train.n_users();
  const std::size_t n = nu + train.n_items();
  std::vector<std::vector<Index>> rows(n);
  for (const auto& p : train.pairs) {
    rows[p.user].push_back(static_cast<Index>(nu + p.item));
    rows[nu + p.item].push_back(p.user);
  }
  SparseAdjacency a;
  a.n = n;
  a.n_users = nu;
  a.row_ptr.assign(n + 1, 0);
  for (std::size_t r = 0; r < n; ++r) {
    auto& cols = rows[r];
    std::sort(cols.begin(), cols.end());
    a.col_idx.insert(a.col_idx.end(), cols.begin(), cols.end());
    a.row_ptr[r + 1] = a.col_idx.size();
  }
  a.val.assign(a.col_idx.size(), 1.0);
  return a;
}

// D^{-1/2} A D^{-1/2}, degrees counted from the structure. Zero-degree rows have
// no entries and stay zero.
inline SparseAdjacency normalize_sym(const SparseAdjacency& a) {
  SparseAdjacency out = a;
  std::vector<double> deg(a.n, 0.0);
  for (std::size_t r = 0; r < a.n; ++r)
    for (std::size_t e = a.row_ptr[r]; e < a.row_ptr[r + 1]; ++e) deg[r] += a.val[e];
  for (std::size_t r = 0; r < a.n; ++r)
    for (std::size_t e = a.row_ptr[r]; e < a.row_ptr[r + 1]; ++e)
      out.val[e] = a.val[e] / std::sqrt(deg[r] * deg[a.col_idx[e]]);
  return out;
}

// Y = A X, summing each row in ascending column order.
inline Matrix spmm(const SparseAdjacency& a, const Matrix& x) {
  if (a.n != x.rows())
    throw ShapeError("spmm: adjacency has " + std::to_string(a.n) + " nodes, operand has " +
                     std::to_string(x.rows()) + " rows");
  Matrix y(a.n, x.cols());
  parallel_for(
      a.n,
      [&](std::size_t r) {
        auto out = y.row(r);
        for (std::size_t e = a.row_ptr[r]; e < a.row_ptr[r + 1]; ++e) {
          const double w = a.val[e];
          auto src = x.row(a.col_idx[e]);
          for (std::size_t c = 0; c < out.size(); ++c) out[c] += w * src[c];
        }
      },
      512);
  return y;
}

inline void write_triplets(const std::filesystem::path& path, const SparseAdjacency& a) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  char buf[64];
  for (std::size_t r = 0; r < a.n; ++r)
    for (std::size_t e = a.row_ptr[r]; e < a.row_ptr[r + 1]; ++e) {
      std::snprintf(buf, sizeof buf, "%.17g", a.val[e]);
      out << r << '\t' << a.col_idx[e] << '\t' << buf << '\n';
    }
}

// ---------------------------------------------------------------------------

struct Neighbor {
  Index index = 0;
  double weight = 0.0;
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

// Row-wise top-k similarity graph. Each row lists its neighbours by decreasing
// weight, ties by ascending index; a row never lists itself.
struct KnnGraph {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<std::vector<Neighbor>> neighbors;
  bool k_clamped = false;

  friend bool operator==(const KnnGraph& a, const KnnGraph& b) {
    return a.n == b.n && a.k == b.k && a.neighbors == b.neighbors;
  }
};

// Exact top-k cosine graph by a full O(n^2 d) scan. Rows with zero norm have
// similarity 0 to everything. k >= n is clamped to n-1 and flagged.
inline KnnGraph topk_knn(const Matrix& x, std::size_t k) {
  if (k < 1) throw Error("topk_knn: k must be >= 1");
  const std::size_t n = x.rows();
  if (n < 2) throw Error("topk_knn: need at least two rows");
  KnnGraph g;
  g.n = n;
  if (k >= n) {
    g.k_clamped = true;
    k = n - 1;
  }
  g.k = k;

  Matrix unit(n, x.cols());
  for (std::size_t r = 0; r < n; ++r) {
    const double nr = norm2(x.row(r));
    if (nr == 0.0) continue;
    auto src = x.row(r);
    auto dst = unit.row(r);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] = src[c] / nr;
  }

  g.neighbors.resize(n);
  parallel_for(
      n,
      [&](std::size_t r) {
        std::vector<Neighbor> cand;
        cand.reserve(n - 1);
        for (std::size_t o = 0; o < n; ++o) {
          if (o == r) continue;
          cand.push_back({static_cast<Index>(o), dot(unit.row(r), unit.row(o))});
        }
        auto better = [](const Neighbor& a, const Neighbor& b) {
          return a.weight > b.weight || (a.weight == b.weight && a.index < b.index);
        };
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), better);
        cand.resize(k);
        g.neighbors[r] = std::move(cand);
      },
      32);
  return g;
}

// TSV triplets (row, neighbour, weight) with a "# n k" header line.
inline void write_knn(const std::filesystem::path& path, const KnnGraph& g) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "# " << g.n << '\t' << g.k << '\n';
  char buf[64];
  for (std::size_t r = 0; r < g.n; ++r)
    for (const auto& nb : g.neighbors[r]) {
      std::snprintf(buf, sizeof buf, "%.17g", nb.weight);
      out << r << '\t' << nb.index << '\t' << buf << '\n';
    }
}

inline KnnGraph read_knn(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  KnnGraph g;
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line) || line.size() < 2 || line[0] != '#')
    throw FormatError(path.string() + ": missing knn header");
  {
    std::istringstream hs(line.substr(1));
    if (!(hs >> g.n >> g.k)) throw FormatError(path.string() + ": bad knn header");
  }
  g.neighbors.resize(g.n);
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t r;
    Neighbor nb;
    if (!(ls >> r >> nb.index >> nb.weight) || r >= g.n || nb.index >= g.n)
      throw ParseError(path.string() + ": bad knn triplet", lineno);
    g.neighbors[r].push_back(nb);
  }
  return g;
}

}  // namespace cohesion
