#include <gtest/gtest.h>

#include <cmath>

#include "cohesion/cohesion.hpp"
#include "fixtures.hpp"
#include "oracle.hpp"

using namespace cohesion;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.values()) v = standard_normal(rng);
  return m;
}

KnnGraph graph_from(std::size_t n, std::vector<std::vector<Neighbor>> nbrs) {
  KnnGraph g;
  g.n = n;
  g.k = 0;
  for (const auto& r : nbrs) g.k = std::max(g.k, r.size());
  g.neighbors = std::move(nbrs);
  return g;
}

}  // namespace

TEST(TransformFeatures, ZeroInputZeroBiasGivesZero) {
  Rng rng(1);
  Mlp mlp{random_matrix(5, 8, rng), Matrix(1, 8), random_matrix(8, 2, rng), Matrix(1, 2)};
  FeatureMatrix x{Modality::textual, Matrix(3, 5)};
  const Matrix out = transform_features(x, mlp);
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(TransformFeatures, LeakyReluNegativeSlope) {
  EXPECT_DOUBLE_EQ(leaky_relu(-1.0, 0.01), -0.01);
  EXPECT_DOUBLE_EQ(leaky_relu(2.0, 0.01), 2.0);
  // 1x1 feature, identity-like weights: pre-activation -1 flows through as -0.01.
  Mlp mlp{Matrix(1, 4, 0.0), Matrix(1, 4), Matrix(4, 1, 0.0), Matrix(1, 1)};
  mlp.w_in(0, 0) = 1.0;
  mlp.w_out(0, 0) = 1.0;
  FeatureMatrix x{Modality::visual, Matrix(1, 1, -1.0)};
  EXPECT_DOUBLE_EQ(transform_features(x, mlp)(0, 0), -0.01);
}

TEST(TransformFeatures, MatchesDenseTwoLayerOracle) {
  Rng rng(11);
  const Matrix x = random_matrix(3, 5, rng);
  Mlp mlp{random_matrix(5, 8, rng), random_matrix(1, 8, rng), random_matrix(8, 2, rng), random_matrix(1, 2, rng)};
  const Matrix got = transform_features(FeatureMatrix{Modality::textual, x}, mlp, 0.01);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      double out = mlp.b_out(0, c);
      for (std::size_t h = 0; h < 8; ++h) {
        double pre = mlp.b_in(0, h);
        for (std::size_t k = 0; k < 5; ++k) pre += x(i, k) * mlp.w_in(k, h);
        out += (pre < 0 ? 0.01 * pre : pre) * mlp.w_out(h, c);
      }
      EXPECT_NEAR(got(i, c), out, 1e-12);
    }
}

TEST(TransformFeatures, DimensionMismatchThrows) {
  Mlp mlp{Matrix(4, 8), Matrix(1, 8), Matrix(8, 2), Matrix(1, 2)};
  EXPECT_THROW(transform_features(FeatureMatrix{Modality::textual, Matrix(3, 5)}, mlp), ShapeError);
  EXPECT_THROW(transform_features(FeatureMatrix{Modality::behavior, Matrix(3, 4)}, mlp), Error);
}

TEST(Refine, DirectFormula) {
  const std::vector<double> x{3.0}, r{4.0};
  EXPECT_NEAR(refine(x, r, 0.0)[0], std::sqrt(12.5), 1e-15);
  EXPECT_NEAR(refine(x, r, 0.0)[0], 3.53553, 1e-5);
}

TEST(Refine, SymmetricReductionAndSymmetry) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(6), b(6);
    for (auto& v : a) v = standard_normal(rng);
    for (auto& v : b) v = standard_normal(rng);
    const auto self = refine(a, a, 1e-3);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(self[k], std::sqrt(a[k] * a[k] + 1e-3), 1e-15);
    EXPECT_EQ(refine(a, b, 1e-8), refine(b, a, 1e-8));
  }
}

TEST(HeteroPropagate, IdenticalRowGivesUnitGate) {
  // Two nodes joined by one edge: A_norm = [[0,1],[1,0]]. If E0 rows are equal,
  // the propagated row equals the E0 row and the gate is 1.
  InteractionTable t;
  t.users.intern("u");
  t.items.intern("i");
  t.pairs = {{0, 0}};
  const auto a = normalize_sym(build_adjacency(t));
  Matrix e0(2, 2);
  e0(0, 0) = e0(1, 0) = 0.6;
  e0(0, 1) = e0(1, 1) = -0.8;
  const double eps = 1e-8;
  const auto tr = hetero_propagate(a, e0, 1, eps);
  EXPECT_NEAR(tr.gate[0][0], 1.0, 1e-15);
  EXPECT_NEAR(tr.layers[1](0, 0), (1 + eps) * 0.6, 1e-15);
  EXPECT_NEAR(tr.layers[1](1, 1), (1 + eps) * -0.8, 1e-15);
}

TEST(HeteroPropagate, IsolatedNodeKeepsLayerZeroOnly) {
  InteractionTable t;
  t.users.intern("u0");
  t.users.intern("u1");  // no interactions: isolated
  t.items.intern("i0");
  t.pairs = {{0, 0}};
  const auto a = normalize_sym(build_adjacency(t));
  Rng rng(3);
  const Matrix e0 = random_matrix(3, 4, rng);
  const auto tr = hetero_propagate(a, e0, 3, 1e-8);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(tr.gate[l][1], 0.0);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(tr.layers[1](1, c), 0.0);
    EXPECT_EQ(tr.summed(1, c), e0(1, c));
  }
}

TEST(HeteroPropagate, ToyGraphMatchesDenseReplay) {
  InteractionTable t;
  t.users.intern("u0");
  t.users.intern("u1");
  t.items.intern("i0");
  t.items.intern("i1");
  t.pairs = {{0, 0}, {0, 1}, {1, 0}};
  const auto a = normalize_sym(build_adjacency(t));
  Rng rng(17);
  const Matrix e0 = random_matrix(4, 2, rng);
  const double eps = 1e-8;
  const auto tr = hetero_propagate(a, e0, 2, eps);

  const auto ad = oracle::dense_normalize(oracle::dense_adjacency(2, 2, t.pairs));
  auto cur = oracle::from_matrix(e0);
  auto sum = cur;
  const auto e0d = cur;
  for (int l = 0; l < 2; ++l) {
    auto p = oracle::mul(ad, cur);
    for (std::size_t r = 0; r < 4; ++r) {
      const double g = oracle::cos_sim(p[r], e0d[r]) + eps;
      for (auto& v : p[r]) v *= g;
    }
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 2; ++c) sum[r][c] += p[r][c];
    cur = p;
  }
  EXPECT_LE(max_abs_diff(tr.summed, oracle::to_matrix(sum)), 1e-12);
  EXPECT_THROW(hetero_propagate(a, e0, 0, eps), Error);
}

TEST(HeteroPropagate, GateBound) {
  const ModelConfig cfg{.d = 4, .layers = 3};
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto tiny = fixtures::make_tiny(5, 6, cfg, {3}, seed);
    Rng rng(seed);
    const Matrix e0 = random_matrix(11, 4, rng);
    const auto tr = hetero_propagate(tiny.inputs.adj_norm, e0, 3, cfg.eps);
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t r = 0; r < 11; ++r) {
        EXPECT_LE(std::abs(tr.gate[l][r]), 1.0 + 1e-12);
        EXPECT_LE(norm2(tr.layers[l + 1].row(r)), (1 + cfg.eps) * norm2(tr.propagated[l].row(r)) + 1e-12);
      }
  }
}

TEST(LateFuse, ConvexityAndSaturation) {
  Rng rng(2);
  const Matrix e = random_matrix(5, 3, rng);
  const auto alpha = softmax(std::vector<double>{0.3, -1.2, 2.0});
  EXPECT_LE(max_abs_diff(late_fuse({e, e, e}, alpha, FusionMode::weighted_sum), e), 1e-15);

  const std::vector<Matrix> ms{random_matrix(5, 3, rng), random_matrix(5, 3, rng), random_matrix(5, 3, rng)};
  const auto sat = softmax(std::vector<double>{20, -20, -20});
  EXPECT_LT(max_abs_diff(late_fuse(ms, sat, FusionMode::weighted_sum), ms[0]), 1e-6);

  const auto even = softmax(std::vector<double>{0, 0, 0});
  const Matrix mean = late_fuse(ms, even, FusionMode::weighted_sum);
  for (std::size_t k = 0; k < mean.size(); ++k)
    EXPECT_NEAR(mean.values()[k], (ms[0].values()[k] + ms[1].values()[k] + ms[2].values()[k]) / 3.0, 1e-12);
}

TEST(LateFuse, ConvexHullRowwise) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<Matrix> ms{random_matrix(4, 3, rng), random_matrix(4, 3, rng), random_matrix(4, 3, rng)};
    std::vector<double> logits(3);
    for (auto& v : logits) v = 2.0 * standard_normal(rng);
    const Matrix f = late_fuse(ms, softmax(logits), FusionMode::weighted_sum);
    for (std::size_t k = 0; k < f.size(); ++k) {
      const double lo = std::min({ms[0].values()[k], ms[1].values()[k], ms[2].values()[k]});
      const double hi = std::max({ms[0].values()[k], ms[1].values()[k], ms[2].values()[k]});
      EXPECT_GE(f.values()[k], lo - 1e-12);
      EXPECT_LE(f.values()[k], hi + 1e-12);
    }
  }
}

TEST(LateFuse, ConcatLayoutAndErrors) {
  Rng rng(4);
  const std::vector<Matrix> ms{random_matrix(2, 2, rng), random_matrix(2, 2, rng)};
  const std::vector<double> alpha{0.25, 0.75};
  const Matrix f = late_fuse(ms, alpha, FusionMode::concat);
  ASSERT_EQ(f.cols(), 4u);
  EXPECT_DOUBLE_EQ(f(1, 0), 0.25 * ms[0](1, 0));
  EXPECT_DOUBLE_EQ(f(1, 3), 0.75 * ms[1](1, 1));
  EXPECT_THROW(late_fuse({ms[0], Matrix(3, 2)}, alpha, FusionMode::weighted_sum), ShapeError);
  EXPECT_THROW(late_fuse({ms[0]}, std::vector<double>{1.0}, FusionMode::weighted_sum), Error);
}

TEST(Softmax, SumsToOneAndShiftInvariant) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> l(3);
    for (auto& v : l) v = 3.0 * standard_normal(rng);
    const auto a = softmax(l);
    EXPECT_NEAR(a[0] + a[1] + a[2], 1.0, 1e-12);
    const double shift = 10.0 * standard_normal(rng);
    auto l2 = l;
    for (auto& v : l2) v += shift;
    const auto b = softmax(l2);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
  }
}

TEST(UserGraphLayer, SingletonAndEqualWeights) {
  Rng rng(6);
  const Matrix a = random_matrix(3, 2, rng);
  const auto single = user_graph_layer(graph_from(3, {{{1, 0.3}}, {}, {}}), a);
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_DOUBLE_EQ(single(0, c), a(0, c) + a(1, c));
    EXPECT_DOUBLE_EQ(single(1, c), a(1, c));  // empty neighbour list: unchanged
  }
  const auto pair = user_graph_layer(graph_from(3, {{{1, 0.4}, {2, 0.4}}, {}, {}}), a);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(pair(0, c), a(0, c) + 0.5 * a(1, c) + 0.5 * a(2, c), 1e-15);
}

TEST(UserGraphLayer, MatchesBruteForceSoftmax) {
  Rng rng(21);
  const Matrix x = random_matrix(4, 3, rng);
  const KnnGraph g = topk_knn(x, 2);
  const Matrix a = random_matrix(4, 3, rng);
  const Matrix got = user_graph_layer(g, a);
  const auto knn = oracle::brute_knn(oracle::from_matrix(x), 2);
  for (std::size_t u = 0; u < 4; ++u) {
    double den = 0;
    for (const auto& [v, s] : knn[u]) den += std::exp(s);
    for (std::size_t c = 0; c < 3; ++c) {
      double want = a(u, c);
      for (const auto& [v, s] : knn[u]) want += std::exp(s) / den * a(v, c);
      EXPECT_NEAR(got(u, c), want, 1e-12);
    }
  }
}

TEST(ItemGraphLayer, RawWeightsNoResidual) {
  Rng rng(7);
  const Matrix a = random_matrix(3, 2, rng);
  const auto out = item_graph_layer(graph_from(3, {{{2, 0.7}}, {}, {}}), a);
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_DOUBLE_EQ(out(0, c), 0.7 * a(2, c));
    EXPECT_EQ(out(1, c), 0.0);
  }
  const auto norm = item_graph_layer(graph_from(3, {{{1, 0.2}, {2, 0.6}}, {}, {}}), a, true);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(norm(0, c), 0.25 * a(1, c) + 0.75 * a(2, c), 1e-15);
}

TEST(ItemGraphLayer, MatchesDirectSummation) {
  Rng rng(23);
  const Matrix x = random_matrix(5, 3, rng);
  const KnnGraph g = topk_knn(x, 2);
  const Matrix a = random_matrix(5, 4, rng);
  const Matrix got = item_graph_layer(g, a);
  const auto knn = oracle::brute_knn(oracle::from_matrix(x), 2);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 4; ++c) {
      double want = 0;
      for (const auto& [j, s] : knn[i]) want += s * a(j, c);
      EXPECT_NEAR(got(i, c), want, 1e-12);
    }
}

TEST(EnhanceAndAssemble, Branches) {
  Rng rng(12);
  const Matrix fused = random_matrix(5, 3, rng);
  EXPECT_EQ(enhance_and_assemble(fused, nullptr, nullptr, 2), fused);
  const Matrix au = random_matrix(2, 3, rng);
  const Matrix zero_items(3, 3);
  const Matrix out = enhance_and_assemble(fused, &au, &zero_items, 2);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_DOUBLE_EQ(out(1, c), fused(1, c) + au(1, c));
    EXPECT_DOUBLE_EQ(out(4, c), fused(4, c));
  }
  const Matrix bad(3, 3);
  EXPECT_THROW(enhance_and_assemble(fused, &bad, nullptr, 2), ShapeError);
}

TEST(Score, InnerProduct) {
  Matrix e(3, 2);  // 1 user, 2 items
  e(0, 0) = 1.0;
  e(1, 1) = 1.0;  // orthogonal item
  e(2, 0) = 1.0;  // same unit vector
  EXPECT_EQ(score(e, 1, 0, 0), 0.0);
  EXPECT_EQ(score(e, 1, 0, 1), 1.0);
  EXPECT_THROW(score(e, 1, 1, 0), Error);
  EXPECT_THROW(score(e, 1, 0, 2), Error);

  Rng rng(31);
  const Matrix r = random_matrix(7, 5, rng);
  for (std::size_t u = 0; u < 3; ++u)
    for (std::size_t i = 0; i < 4; ++i) {
      double want = 0;
      for (std::size_t c = 0; c < 5; ++c) want += r(u, c) * r(3 + i, c);
      EXPECT_NEAR(score(r, 3, u, i), want, 1e-14);
      EXPECT_NEAR(modality_score(r, 3, u, i), want, 1e-14);
    }
}

TEST(ModalityScore, ZeroUserRowAndIdenticalModalities) {
  Rng rng(13);
  Matrix e = random_matrix(5, 3, rng);
  for (std::size_t c = 0; c < 3; ++c) e(0, c) = 0.0;
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(modality_score(e, 2, 0, i), 0.0);
  const Matrix copy = e;
  EXPECT_EQ(modality_score(e, 2, 1, 2), modality_score(copy, 2, 1, 2));
}

TEST(RebuildKnnGraphs, DeterministicAndMatchesBruteForce) {
  const ModelConfig cfg{.d = 4, .layers = 1, .k_uu = 2, .k_ii = 3};
  auto tiny = fixtures::make_tiny(5, 7, cfg, {3, 2}, 42);
  const auto t = forward_fused(tiny.params, cfg, tiny.inputs);
  const auto g1 = rebuild_knn_graphs(t, cfg);
  const auto g2 = rebuild_knn_graphs(t, cfg);
  ASSERT_TRUE(g1.users && g1.items);
  EXPECT_EQ(*g1.users, *g2.users);
  EXPECT_EQ(*g1.items, *g2.items);
  const auto fused = oracle::from_matrix(t.fused);
  const auto bu = oracle::brute_knn(oracle::Dense(fused.begin(), fused.begin() + 5), 2);
  for (std::size_t u = 0; u < 5; ++u)
    for (std::size_t j = 0; j < 2; ++j) {
      EXPECT_EQ(g1.users->neighbors[u][j].index, bu[u][j].first);
      EXPECT_NEAR(g1.users->neighbors[u][j].weight, bu[u][j].second, 1e-12);
    }
}

TEST(RebuildKnnGraphs, BehaviorSource) {
  ModelConfig cfg{.d = 4, .layers = 1, .k_uu = 2, .k_ii = 3};
  cfg.knn_source = KnnSource::behavior;
  cfg.fusion_mode = FusionMode::concat;
  auto tiny = fixtures::make_tiny(5, 7, cfg, {3, 2}, 43);
  const auto t = forward_fused(tiny.params, cfg, tiny.inputs);
  const auto g = rebuild_knn_graphs(t, cfg);
  ASSERT_TRUE(g.users && g.items);
  EXPECT_EQ(*g.users, topk_knn(slice_rows(t.summed(0), 0, 5), 2));
  EXPECT_EQ(*g.items, topk_knn(slice_rows(t.summed(0), 5, 12), 3));
  EXPECT_EQ(parse_knn_source(to_string(KnnSource::behavior)), KnnSource::behavior);
  EXPECT_THROW(parse_knn_source("raw"), Error);
}

TEST(Forward, AblationIdentities) {
  ModelConfig cfg{.d = 3, .layers = 2, .k_uu = 2, .k_ii = 2};
  cfg.use_uu = cfg.use_ii = false;
  auto tiny = fixtures::make_tiny(4, 5, cfg, {4, 3}, 3);
  const auto t = forward(tiny.params, cfg, tiny.inputs, {});
  EXPECT_EQ(t.final_emb, t.fused);

  cfg.refine = {false, false, false};
  const auto raw = forward(tiny.params, cfg, tiny.inputs, {});
  for (std::size_t m = 0; m < raw.modality.size(); ++m) EXPECT_EQ(raw.modality[m].refined, raw.modality[m].transformed);
}

TEST(Forward, MatchesDenseOracle) {
  std::uint64_t seed = 100;
  for (auto mode : {FusionMode::weighted_sum, FusionMode::concat})
    for (bool uu : {false, true})
      for (bool ii : {false, true})
        for (std::size_t layers : {1u, 3u}) {
          ModelConfig cfg{.d = 3, .layers = layers, .k_uu = 2, .k_ii = 2};
          cfg.use_uu = uu;
          cfg.use_ii = ii;
          cfg.fusion_mode = mode;
          cfg.refine = {true, seed % 2 == 0, true};
          auto tiny = fixtures::make_tiny(4, 6, cfg, {5, 2}, ++seed);
          const auto t = forward_fused(tiny.params, cfg, tiny.inputs);
          auto g = rebuild_knn_graphs(t, cfg);
          const auto full = forward(tiny.params, cfg, tiny.inputs, g);
          const auto want = oracle::dense_forward(tiny.params, cfg, 4, 6, tiny.train.pairs, tiny.features);
          EXPECT_LE(max_abs_diff(full.final_emb, oracle::to_matrix(want.final_emb)), 1e-10);
        }
}
