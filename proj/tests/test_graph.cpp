#include <gtest/gtest.h>

#include <cmath>

#include "cohesion/cohesion.hpp"
#include "oracle.hpp"

using namespace cohesion;

namespace {

InteractionTable table_from(std::size_t nu, std::size_t ni, std::vector<Interaction> pairs) {
  InteractionTable t;
  for (std::size_t u = 0; u < nu; ++u) t.users.intern("u" + std::to_string(u));
  for (std::size_t i = 0; i < ni; ++i) t.items.intern("i" + std::to_string(i));
  t.pairs = std::move(pairs);
  return t;
}

InteractionTable random_table(Rng& rng, std::size_t nu, std::size_t ni, double p) {
  std::vector<Interaction> pairs;
  for (Index u = 0; u < nu; ++u)
    for (Index i = 0; i < ni; ++i)
      if (uniform01(rng) < p) pairs.push_back({u, i});
  if (pairs.empty()) pairs.push_back({0, 0});
  return table_from(nu, ni, pairs);
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.values()) v = standard_normal(rng);
  return m;
}

}  // namespace

TEST(BuildAdjacency, SmallestCase) {
  const auto a = build_adjacency(table_from(1, 1, {{0, 0}}));
  EXPECT_EQ(a.n, 2u);
  EXPECT_EQ(a.at(0, 1), 1.0);
  EXPECT_EQ(a.at(1, 0), 1.0);
  EXPECT_EQ(a.at(0, 0), 0.0);
}

TEST(BuildAdjacency, BlockStructureAndCount) {
  const auto a = build_adjacency(table_from(2, 2, {{0, 0}, {0, 1}, {1, 0}}));
  EXPECT_EQ(a.nnz(), 6u);
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const auto t = random_table(rng, 1 + uniform_index(rng, 10), 1 + uniform_index(rng, 10), 0.3);
    const auto adj = build_adjacency(t);
    EXPECT_EQ(adj.nnz(), 2 * t.pairs.size());
    const Matrix d = adj.to_dense();
    for (std::size_t r = 0; r < adj.n; ++r)
      for (std::size_t c = 0; c < adj.n; ++c) {
        EXPECT_EQ(d(r, c), d(c, r));
        if ((r < t.n_users()) == (c < t.n_users())) {
          EXPECT_EQ(d(r, c), 0.0);
        }
      }
  }
  EXPECT_THROW(build_adjacency(table_from(1, 1, {})), Error);
}

TEST(NormalizeSym, Weights) {
  const auto single = normalize_sym(build_adjacency(table_from(1, 1, {{0, 0}})));
  EXPECT_EQ(single.at(0, 1), 1.0);
  // User of degree 2, items of degree 1.
  const auto star = normalize_sym(build_adjacency(table_from(1, 2, {{0, 0}, {0, 1}})));
  EXPECT_NEAR(star.at(0, 1), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(star.at(2, 0), 0.70711, 1e-5);
  const SparseAdjacency empty;
  EXPECT_EQ(normalize_sym(empty).nnz(), 0u);
}

TEST(NormalizeSym, EntriesEqualInverseSqrtDegrees) {
  Rng rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    const auto t = random_table(rng, 2 + uniform_index(rng, 8), 2 + uniform_index(rng, 8), 0.4);
    const auto raw = build_adjacency(t);
    const auto norm = normalize_sym(raw);
    for (std::size_t r = 0; r < raw.n; ++r)
      for (std::size_t e = raw.row_ptr[r]; e < raw.row_ptr[r + 1]; ++e) {
        const std::size_t c = raw.col_idx[e];
        EXPECT_EQ(norm.val[e],
                  1.0 / std::sqrt(static_cast<double>(raw.degree(r)) * static_cast<double>(raw.degree(c))));
      }
  }
}

TEST(NormalizeSym, SpectralBound) {
  Rng rng(55);
  for (int g = 0; g < 10; ++g) {
    const auto t = random_table(rng, 3 + uniform_index(rng, 6), 3 + uniform_index(rng, 6), 0.4);
    const auto a = normalize_sym(build_adjacency(t));
    for (int trial = 0; trial < 50; ++trial) {
      Matrix x = random_matrix(a.n, 1, rng);
      const double nx = norm2(x.values());
      for (double& v : x.values()) v /= nx;
      EXPECT_LE(norm2(spmm(a, x).values()), 1.0 + 1e-9);
    }
    // Power iteration: the dominant eigenvalue magnitude is at most 1.
    Matrix v = random_matrix(a.n, 1, rng);
    double lambda = 0;
    for (int it = 0; it < 200; ++it) {
      Matrix w = spmm(a, spmm(a, v));
      lambda = std::sqrt(norm2(w.values()) / norm2(v.values()));
      const double nw = norm2(w.values());
      if (nw == 0) break;
      for (double& e : w.values()) e /= nw;
      v = w;
    }
    EXPECT_LE(lambda, 1.0 + 1e-9);
  }
}

TEST(Spmm, MatchesDenseOracle) {
  Rng rng(8);
  for (int trial = 0; trial < 40; ++trial) {
    const auto t = random_table(rng, 1 + uniform_index(rng, 32), 1 + uniform_index(rng, 32), 0.2);
    const auto a = normalize_sym(build_adjacency(t));
    const Matrix x = random_matrix(a.n, 3, rng);
    const Matrix want = oracle::to_matrix(oracle::mul(oracle::from_matrix(a.to_dense()), oracle::from_matrix(x)));
    EXPECT_LE(max_abs_diff(spmm(a, x), want), 1e-12);
  }
}

TEST(Spmm, ZeroAndMismatch) {
  const auto a = normalize_sym(build_adjacency(table_from(2, 2, {{0, 0}, {1, 1}})));
  const Matrix zero(4, 3);
  EXPECT_EQ(spmm(a, zero), zero);
  EXPECT_THROW(spmm(a, Matrix(3, 3)), ShapeError);
  // Identity-like CSR (not produced by build_adjacency) leaves X unchanged.
  SparseAdjacency id;
  id.n = 3;
  id.row_ptr = {0, 1, 2, 3};
  id.col_idx = {0, 1, 2};
  id.val = {1, 1, 1};
  Rng rng(1);
  const Matrix x = random_matrix(3, 2, rng);
  EXPECT_EQ(spmm(id, x), x);
}

TEST(TopkKnn, TieBreakOnIdenticalRows) {
  const Matrix x(6, 3, 0.5);
  const auto g = topk_knn(x, 3);
  ASSERT_EQ(g.neighbors[0].size(), 3u);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(g.neighbors[0][j].index, j + 1);
    EXPECT_NEAR(g.neighbors[0][j].weight, 1.0, 1e-15);
  }
  EXPECT_EQ(g.neighbors[2][0].index, 0u);
  EXPECT_EQ(g.neighbors[2][1].index, 1u);
  EXPECT_EQ(g.neighbors[2][2].index, 3u);
}

TEST(TopkKnn, OrthogonalRowsKeepZeroEdges) {
  Matrix x(4, 4);
  for (std::size_t r = 0; r < 4; ++r) x(r, r) = 1.0;
  const auto g = topk_knn(x, 2);
  for (std::size_t r = 0; r < 4; ++r) {
    ASSERT_EQ(g.neighbors[r].size(), 2u);
    for (const auto& nb : g.neighbors[r]) {
      EXPECT_EQ(nb.weight, 0.0);
      EXPECT_NE(nb.index, r);
    }
  }
}

TEST(TopkKnn, ZeroRowsAndClamp) {
  Matrix x(3, 2);
  x(0, 0) = 1.0;
  x(1, 0) = 2.0;  // row 2 stays zero
  const auto g = topk_knn(x, 5);
  EXPECT_TRUE(g.k_clamped);
  EXPECT_EQ(g.k, 2u);
  for (const auto& nb : g.neighbors[2]) EXPECT_EQ(nb.weight, 0.0);
  EXPECT_EQ(g.neighbors[0][0].index, 1u);
  EXPECT_NEAR(g.neighbors[0][0].weight, 1.0, 1e-15);
  EXPECT_THROW(topk_knn(Matrix(1, 2), 1), Error);
  EXPECT_THROW(topk_knn(x, 0), Error);
}

TEST(TopkKnn, MatchesBruteForce) {
  Rng rng(64);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 63);
    const std::size_t k = 1 + uniform_index(rng, std::min<std::size_t>(n - 1, 12));
    const Matrix x = random_matrix(n, 1 + uniform_index(rng, 8), rng);
    const auto got = topk_knn(x, k);
    const auto want = oracle::brute_knn(oracle::from_matrix(x), k);
    for (std::size_t r = 0; r < n; ++r) {
      ASSERT_EQ(got.neighbors[r].size(), want[r].size());
      for (std::size_t j = 0; j < want[r].size(); ++j) {
        EXPECT_EQ(got.neighbors[r][j].index, want[r][j].first);
        EXPECT_NEAR(got.neighbors[r][j].weight, want[r][j].second, 1e-9);
      }
    }
  }
}

TEST(TopkKnn, PositiveRowScalingInvariance) {
  Rng rng(71);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = random_matrix(12, 5, rng);
    Matrix y = x;
    for (std::size_t r = 0; r < 12; ++r) {
      const double c = std::exp(3.0 * standard_normal(rng));
      for (double& v : y.row(r)) v *= c;
    }
    const auto a = topk_knn(x, 4);
    const auto b = topk_knn(y, 4);
    for (std::size_t r = 0; r < 12; ++r)
      for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(a.neighbors[r][j].index, b.neighbors[r][j].index);
        EXPECT_NEAR(a.neighbors[r][j].weight, b.neighbors[r][j].weight, 1e-9);
      }
  }
}

TEST(KnnIo, RoundTrip) {
  Rng rng(5);
  const auto g = topk_knn(random_matrix(9, 3, rng), 3);
  const auto path = std::filesystem::temp_directory_path() / "cohesion_knn_test.tsv";
  write_knn(path, g);
  EXPECT_EQ(read_knn(path), g);
  std::filesystem::remove(path);
}
