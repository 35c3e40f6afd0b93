#pragma once

// Forward computation of the composite graph model and its exact reverse pass.
//
// Node layout everywhere is the stacked space [users (n_users rows) | items].
// Modality 0 is always behavior (trainable item ID table, no feature MLP);
// modalities 1.. carry a frozen feature matrix and a two-layer perceptron.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cohesion/data_ingest.hpp"
#include "cohesion/error.hpp"
#include "cohesion/graph.hpp"
#include "cohesion/matrix.hpp"
#include "cohesion/rng.hpp"

namespace cohesion {

enum class FusionMode { weighted_sum, concat };

inline std::string_view to_string(FusionMode f) {
  return f == FusionMode::weighted_sum ? "weighted_sum" : "concat";
}

inline FusionMode parse_fusion_mode(std::string_view s) {
  if (s == "weighted_sum" || s == "sum") return FusionMode::weighted_sum;
  if (s == "concat") return FusionMode::concat;
  throw Error("unknown fusion mode '" + std::string(s) + "'");
}

// Embeddings the kNN graphs are built from: the late-fused rows, or the
// behavior modality's propagated rows from before late fusion.
enum class KnnSource { fused, behavior };

inline std::string_view to_string(KnnSource s) { return s == KnnSource::fused ? "fused" : "behavior"; }

inline KnnSource parse_knn_source(std::string_view s) {
  if (s == "fused") return KnnSource::fused;
  if (s == "behavior") return KnnSource::behavior;
  throw Error("unknown kNN source '" + std::string(s) + "'");
}

struct ModelConfig {
  std::size_t d = 64;
  std::size_t layers = 2;       // heterogeneous propagation depth
  std::size_t user_layers = 1;  // user-user graph depth
  std::size_t item_layers = 1;  // item-item graph depth
  std::size_t k_uu = 10;
  std::size_t k_ii = 10;
  double eps = 1e-8;
  double leaky_slope = 0.01;
  // Early-fusion refinement toggle, indexed by Modality.
  std::array<bool, 3> refine{true, true, true};
  bool use_uu = true;
  bool use_ii = true;
  FusionMode fusion_mode = FusionMode::weighted_sum;
  // Epochs between kNN rebuilds; 0 builds once before training and freezes.
  std::size_t knn_refresh_interval = 1;
  KnnSource knn_source = KnnSource::fused;
  bool item_row_normalize = false;

  bool refine_enabled(Modality m) const { return refine[static_cast<std::size_t>(m)]; }

  void validate() const {
    if (d < 1) throw Error("model.d must be >= 1");
    if (layers < 1 || layers > 4) throw Error("model.L must be in [1, 4]");
    if (k_uu < 1 || k_ii < 1) throw Error("model.k must be >= 1");
    if (!(eps >= 0)) throw Error("model.eps must be >= 0");
  }
};

struct Mlp {
  Matrix w_in;   // d_m x 4d
  Matrix b_in;   // 1 x 4d
  Matrix w_out;  // 4d x d
  Matrix b_out;  // 1 x d
};

// Every trainable tensor. The same structure doubles as the gradient container.
struct ModelParams {
  std::vector<Modality> modalities;  // [0] is behavior
  std::vector<Matrix> user_emb;      // per modality, n_users x d
  Matrix item_id_emb;                // n_items x d
  std::vector<Mlp> mlp;              // per content modality (modality index - 1)
  Matrix fusion_logits;              // 1 x |M|

  std::size_t n_modalities() const noexcept { return modalities.size(); }
  std::size_t n_users() const noexcept { return item_id_emb.empty() ? 0 : user_emb.front().rows(); }
  std::size_t n_items() const noexcept { return item_id_emb.rows(); }
  std::size_t dim() const noexcept { return item_id_emb.cols(); }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (std::size_t m = 0; m < modalities.size(); ++m)
      fn("user_emb." + std::string(to_string(modalities[m])), user_emb[m]);
    fn(std::string("item_id_emb"), item_id_emb);
    for (std::size_t m = 0; m < mlp.size(); ++m) {
      const std::string p = "mlp." + std::string(to_string(modalities[m + 1])) + ".";
      fn(p + "w_in", mlp[m].w_in);
      fn(p + "b_in", mlp[m].b_in);
      fn(p + "w_out", mlp[m].w_out);
      fn(p + "b_out", mlp[m].b_out);
    }
    fn(std::string("fusion_logits"), fusion_logits);
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    const_cast<ModelParams*>(this)->for_each(
        [&](const std::string& name, Matrix& t) { fn(name, static_cast<const Matrix&>(t)); });
  }

  // Same shapes, all zeros.
  ModelParams zeros_like() const {
    ModelParams z = *this;
    z.for_each([](const std::string&, Matrix& t) { t.fill(0.0); });
    return z;
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](const std::string&, const Matrix& t) { ok = ok && t.all_finite(); });
    return ok;
  }
};

// Xavier-uniform tables and weights, zero biases, zero fusion logits.
inline ModelParams init_params(std::size_t n_users, std::size_t n_items,
                               const std::vector<FeatureMatrix>& features, const ModelConfig& cfg,
                               Rng& rng) {
  auto xavier = [&](std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (double& v : m.values()) v = uniform_real(rng, -bound, bound);
    return m;
  };
  const std::size_t d = cfg.d;
  const std::size_t hidden = 4 * d;
  ModelParams p;
  p.modalities.push_back(Modality::behavior);
  for (const auto& f : features) {
    if (f.modality == Modality::behavior) throw Error("feature matrices cannot use the behavior modality");
    if (f.rows() != n_items) throw AlignmentError("feature rows do not match the item count");
    p.modalities.push_back(f.modality);
  }
  for (std::size_t m = 0; m < p.modalities.size(); ++m) p.user_emb.push_back(xavier(n_users, d));
  p.item_id_emb = xavier(n_items, d);
  for (const auto& f : features) {
    Mlp mlp;
    mlp.w_in = xavier(f.dim(), hidden);
    mlp.b_in = Matrix(1, hidden);
    mlp.w_out = xavier(hidden, d);
    mlp.b_out = Matrix(1, d);
    p.mlp.push_back(std::move(mlp));
  }
  p.fusion_logits = Matrix(1, p.modalities.size());
  return p;
}

// Non-trainable model inputs.
struct GraphInputs {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  SparseAdjacency adj_norm;             // normalized bipartite adjacency
  std::vector<FeatureMatrix> features;  // content modalities, in params order
};

inline GraphInputs make_inputs(const InteractionTable& train, std::vector<FeatureMatrix> features) {
  GraphInputs in;
  in.n_users = train.n_users();
  in.n_items = train.n_items();
  in.adj_norm = normalize_sym(build_adjacency(train));
  in.features = std::move(features);
  return in;
}

// User-user and item-item similarity graphs; constants with respect to training.
struct HomogeneousGraphs {
  std::optional<KnnGraph> users;
  std::optional<KnnGraph> items;
};

// ---------------------------------------------------------------------------
// Individual stages

inline double leaky_relu(double x, double slope) { return x >= 0.0 ? x : slope * x; }

struct TransformTrace {
  Matrix pre_activation;  // n_items x 4d
  Matrix activation;      // n_items x 4d
  Matrix output;          // n_items x d
};

// out = leaky(x W_in + b_in) W_out + b_out, row by row.
inline TransformTrace transform_features_traced(const Matrix& raw, const Mlp& mlp, double slope) {
  if (raw.cols() != mlp.w_in.rows())
    throw ShapeError("transform_features: feature dim " + std::to_string(raw.cols()) +
                     " does not match W_in rows " + std::to_string(mlp.w_in.rows()));
  TransformTrace t;
  t.pre_activation = matmul(raw, mlp.w_in);
  for (std::size_t r = 0; r < t.pre_activation.rows(); ++r) {
    auto row = t.pre_activation.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += mlp.b_in(0, c);
  }
  t.activation = t.pre_activation;
  for (double& v : t.activation.values()) v = leaky_relu(v, slope);
  t.output = matmul(t.activation, mlp.w_out);
  for (std::size_t r = 0; r < t.output.rows(); ++r) {
    auto row = t.output.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += mlp.b_out(0, c);
  }
  return t;
}

inline Matrix transform_features(const FeatureMatrix& raw, const Mlp& mlp, double slope = 0.01) {
  if (raw.modality == Modality::behavior)
    throw Error("transform_features: the behavior modality has no feature transform");
  return transform_features_traced(raw.values, mlp, slope).output;
}

// Elementwise sqrt(|0.5 (x^2 + ref^2) + eps|).
inline double refine_scalar(double x, double ref, double eps) {
  return std::sqrt(std::abs(0.5 * (x * x + ref * ref) + eps));
}

inline std::vector<double> refine(std::span<const double> x, std::span<const double> id_ref, double eps) {
  if (x.size() != id_ref.size()) throw ShapeError("refine: vector sizes differ");
  std::vector<double> out(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) out[k] = refine_scalar(x[k], id_ref[k], eps);
  return out;
}

inline Matrix refine(const Matrix& x, const Matrix& id_ref, double eps) {
  if (!x.same_shape(id_ref)) throw ShapeError("refine: matrix shapes differ");
  Matrix out(x.rows(), x.cols());
  for (std::size_t k = 0; k < x.size(); ++k)
    out.values()[k] = refine_scalar(x.values()[k], id_ref.values()[k], eps);
  return out;
}

struct HeteroTrace {
  std::vector<Matrix> layers;             // E^(0..L)
  std::vector<Matrix> propagated;         // A E^(l-1), l = 1..L (index l-1)
  std::vector<std::vector<double>> gate;  // per layer, per node cosine gate
  Matrix summed;                          // sum over l = 0..L
};

// Cosine-gated residual propagation:
//   P = A E^(l-1);  g_r = cos(P_r, E0_r);  E^(l)_r = (g_r + eps) P_r
inline HeteroTrace hetero_propagate(const SparseAdjacency& adj_norm, const Matrix& e0, std::size_t layers,
                                    double eps) {
  if (layers < 1) throw Error("hetero_propagate: need at least one layer");
  if (adj_norm.n != e0.rows()) throw ShapeError("hetero_propagate: node count mismatch");
  HeteroTrace t;
  t.layers.push_back(e0);
  t.summed = e0;
  for (std::size_t l = 1; l <= layers; ++l) {
    Matrix p = spmm(adj_norm, t.layers.back());
    std::vector<double> gate(p.rows());
    Matrix next(p.rows(), p.cols());
    for (std::size_t r = 0; r < p.rows(); ++r) {
      gate[r] = cosine(p.row(r), e0.row(r));
      const double s = gate[r] + eps;
      auto src = p.row(r);
      auto dst = next.row(r);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] = s * src[c];
    }
    t.summed += next;
    t.propagated.push_back(std::move(p));
    t.gate.push_back(std::move(gate));
    t.layers.push_back(std::move(next));
  }
  return t;
}

// Numerically stable softmax.
inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) return {};
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) z += (out[k] = std::exp(logits[k] - mx));
  for (double& v : out) v /= z;
  return out;
}

// weighted_sum: sum_m a_m E_m.  concat: [a_1 E_1 | a_2 E_2 | ...].
inline Matrix late_fuse(const std::vector<Matrix>& per_modality, std::span<const double> alpha, FusionMode mode) {
  if (per_modality.size() < 2) throw Error("late_fuse: need at least two modalities");
  if (alpha.size() != per_modality.size()) throw ShapeError("late_fuse: weight count mismatch");
  const auto& first = per_modality.front();
  for (const auto& e : per_modality)
    if (!e.same_shape(first)) throw ShapeError("late_fuse: modality embeddings differ in shape");
  const std::size_t d = first.cols();
  if (mode == FusionMode::weighted_sum) {
    Matrix out(first.rows(), d);
    for (std::size_t m = 0; m < per_modality.size(); ++m) out.axpy(alpha[m], per_modality[m]);
    return out;
  }
  Matrix out(first.rows(), d * per_modality.size());
  for (std::size_t r = 0; r < first.rows(); ++r)
    for (std::size_t m = 0; m < per_modality.size(); ++m) {
      auto src = per_modality[m].row(r);
      for (std::size_t c = 0; c < d; ++c) out(r, m * d + c) = alpha[m] * src[c];
    }
  return out;
}

// Softmax over each row's retained similarities.
inline std::vector<std::vector<double>> user_graph_weights(const KnnGraph& s) {
  std::vector<std::vector<double>> w(s.n);
  for (std::size_t r = 0; r < s.n; ++r) {
    std::vector<double> sims;
    for (const auto& nb : s.neighbors[r]) sims.push_back(nb.weight);
    w[r] = softmax(sims);
  }
  return w;
}

// Raw similarities, optionally divided by the row's absolute weight sum.
inline std::vector<std::vector<double>> item_graph_weights(const KnnGraph& s, bool row_normalize) {
  std::vector<std::vector<double>> w(s.n);
  for (std::size_t r = 0; r < s.n; ++r) {
    double z = 0.0;
    for (const auto& nb : s.neighbors[r]) {
      w[r].push_back(nb.weight);
      z += std::abs(nb.weight);
    }
    if (row_normalize && z > 0.0)
      for (double& v : w[r]) v /= z;
  }
  return w;
}

// out_r = (residual ? prev_r : 0) + sum_j w_rj prev_j
inline Matrix propagate_knn(const KnnGraph& s, const std::vector<std::vector<double>>& weights,
                            const Matrix& prev, bool residual) {
  if (s.n != prev.rows()) throw ShapeError("knn propagation: node count mismatch");
  Matrix out = residual ? prev : Matrix(prev.rows(), prev.cols());
  for (std::size_t r = 0; r < s.n; ++r) {
    auto dst = out.row(r);
    for (std::size_t j = 0; j < s.neighbors[r].size(); ++j) {
      const double w = weights[r][j];
      auto src = prev.row(s.neighbors[r][j].index);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += w * src[c];
    }
  }
  return out;
}

// out_u = prev_u + sum_{v in N(u)} softmax_N(u)(s_uv) prev_v
inline Matrix user_graph_layer(const KnnGraph& s_u, const Matrix& prev) {
  return propagate_knn(s_u, user_graph_weights(s_u), prev, true);
}

// out_i = sum_{j in N(i)} s_ij prev_j
inline Matrix item_graph_layer(const KnnGraph& s_i, const Matrix& prev, bool row_normalize = false) {
  return propagate_knn(s_i, item_graph_weights(s_i, row_normalize), prev, false);
}

// Final stacked embeddings: [fused_U + A_u ; fused_I + A_i]. A missing branch
// contributes nothing.
inline Matrix enhance_and_assemble(const Matrix& fused, const Matrix* user_final, const Matrix* item_final,
                                   std::size_t n_users) {
  if (n_users > fused.rows()) throw ShapeError("enhance_and_assemble: n_users exceeds rows");
  Matrix out = fused;
  if (user_final) {
    if (user_final->rows() != n_users || user_final->cols() != fused.cols())
      throw ShapeError("enhance_and_assemble: user branch shape mismatch");
    for (std::size_t k = 0; k < user_final->size(); ++k) out.values()[k] += user_final->values()[k];
  }
  if (item_final) {
    if (item_final->rows() != fused.rows() - n_users || item_final->cols() != fused.cols())
      throw ShapeError("enhance_and_assemble: item branch shape mismatch");
    const std::size_t off = n_users * fused.cols();
    for (std::size_t k = 0; k < item_final->size(); ++k) out.values()[off + k] += item_final->values()[k];
  }
  return out;
}

// Inner product of user row u and item row (n_users + i) of a stacked matrix.
inline double score(const Matrix& stacked, std::size_t n_users, std::size_t u, std::size_t i) {
  if (u >= n_users || n_users + i >= stacked.rows())
    throw Error("score: index out of range (user " + std::to_string(u) + ", item " + std::to_string(i) + ")");
  return dot(stacked.row(u), stacked.row(n_users + i));
}

inline double modality_score(const Matrix& summed, std::size_t n_users, std::size_t u, std::size_t i) {
  return score(summed, n_users, u, i);
}

// ---------------------------------------------------------------------------
// Full forward pass

struct ModalityTrace {
  std::optional<TransformTrace> transform;  // content modalities only
  Matrix transformed;                       // n_items x d (item ID table for behavior)
  Matrix refined;                           // n_items x d
  HeteroTrace hetero;                       // E^(l) over all nodes
};

struct ForwardTrace {
  std::size_t n_users = 0;
  std::vector<ModalityTrace> modality;
  std::vector<double> alpha;
  Matrix fused;                    // N x D
  std::vector<Matrix> user_hops;   // A_u^(0..L_u), only when the user branch is on
  std::vector<Matrix> item_hops;   // A_i^(0..L_i)
  Matrix final_emb;                // N x D

  const Matrix& summed(std::size_t m) const { return modality[m].hetero.summed; }
  Matrix final_users() const { return slice_rows(final_emb, 0, n_users); }
  Matrix final_items() const { return slice_rows(final_emb, n_users, final_emb.rows()); }
};

// Everything up to and including late fusion.
inline ForwardTrace forward_fused(const ModelParams& params, const ModelConfig& cfg, const GraphInputs& in) {
  const std::size_t nm = params.n_modalities();
  if (in.features.size() + 1 != nm) throw ShapeError("forward: feature count does not match modalities");
  if (nm < 2) throw Error("forward: need at least one content modality");
  ForwardTrace t;
  t.n_users = in.n_users;
  t.modality.resize(nm);
  const Matrix& id_table = params.item_id_emb;
  for (std::size_t m = 0; m < nm; ++m) {
    auto& mt = t.modality[m];
    if (m == 0) {
      mt.transformed = id_table;
    } else {
      mt.transform = transform_features_traced(in.features[m - 1].values, params.mlp[m - 1], cfg.leaky_slope);
      mt.transformed = mt.transform->output;
    }
    mt.refined = cfg.refine_enabled(params.modalities[m]) ? refine(mt.transformed, id_table, cfg.eps)
                                                          : mt.transformed;
    mt.hetero = hetero_propagate(in.adj_norm, vstack(params.user_emb[m], mt.refined), cfg.layers, cfg.eps);
  }
  t.alpha = softmax(params.fusion_logits.values());
  std::vector<Matrix> sums;
  for (const auto& mt : t.modality) sums.push_back(mt.hetero.summed);
  t.fused = late_fuse(sums, t.alpha, cfg.fusion_mode);
  return t;
}

// User-user and item-item graphs from the user and item rows of cfg.knn_source.
inline HomogeneousGraphs rebuild_knn_graphs(const ForwardTrace& t, const ModelConfig& cfg) {
  HomogeneousGraphs g;
  const Matrix& src = cfg.knn_source == KnnSource::fused ? t.fused : t.summed(0);
  const std::size_t nu = t.n_users;
  const std::size_t ni = src.rows() - nu;
  if (cfg.use_uu && nu >= 2) g.users = topk_knn(slice_rows(src, 0, nu), cfg.k_uu);
  if (cfg.use_ii && ni >= 2) g.items = topk_knn(slice_rows(src, nu, src.rows()), cfg.k_ii);
  return g;
}

// Homogeneous enhancement on top of a fused trace.
inline void forward_homogeneous(ForwardTrace& t, const ModelConfig& cfg, const HomogeneousGraphs& g) {
  const std::size_t nu = t.n_users;
  t.user_hops.clear();
  t.item_hops.clear();
  const Matrix* user_final = nullptr;
  const Matrix* item_final = nullptr;
  if (cfg.use_uu && g.users) {
    const auto w = user_graph_weights(*g.users);
    t.user_hops.push_back(slice_rows(t.fused, 0, nu));
    for (std::size_t l = 0; l < cfg.user_layers; ++l)
      t.user_hops.push_back(propagate_knn(*g.users, w, t.user_hops.back(), true));
    user_final = &t.user_hops.back();
  }
  if (cfg.use_ii && g.items) {
    const auto w = item_graph_weights(*g.items, cfg.item_row_normalize);
    t.item_hops.push_back(slice_rows(t.fused, nu, t.fused.rows()));
    for (std::size_t l = 0; l < cfg.item_layers; ++l)
      t.item_hops.push_back(propagate_knn(*g.items, w, t.item_hops.back(), false));
    item_final = &t.item_hops.back();
  }
  t.final_emb = enhance_and_assemble(t.fused, user_final, item_final, nu);
}

inline ForwardTrace forward(const ModelParams& params, const ModelConfig& cfg, const GraphInputs& in,
                            const HomogeneousGraphs& g) {
  ForwardTrace t = forward_fused(params, cfg, in);
  forward_homogeneous(t, cfg, g);
  return t;
}

// ---------------------------------------------------------------------------
// Reverse pass

// Loss gradients with respect to the forward outputs.
struct OutputGrads {
  Matrix final_emb;             // N x D
  std::vector<Matrix> summed;   // per modality, N x d (may be left empty)
};

inline OutputGrads make_output_grads(const ForwardTrace& t) {
  OutputGrads g;
  g.final_emb = Matrix(t.final_emb.rows(), t.final_emb.cols());
  for (const auto& mt : t.modality) g.summed.emplace_back(mt.hetero.summed.rows(), mt.hetero.summed.cols());
  return g;
}

namespace detail {

// d/da and d/db of cos(a, b), scaled by `upstream`, accumulated into ga/gb.
inline void cosine_backward(std::span<const double> a, std::span<const double> b, double upstream,
                            std::span<double> ga, std::span<double> gb) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0 || upstream == 0.0) return;
  const double c = dot(a, b) / (na * nb);
  const double inv = 1.0 / (na * nb);
  for (std::size_t k = 0; k < a.size(); ++k) {
    ga[k] += upstream * (b[k] * inv - c * a[k] / (na * na));
    gb[k] += upstream * (a[k] * inv - c * b[k] / (nb * nb));
  }
}

// out += W^T g for a kNN propagation with per-edge weights.
inline void propagate_knn_transpose(const KnnGraph& s, const std::vector<std::vector<double>>& weights,
                                    const Matrix& g, Matrix& out) {
  for (std::size_t r = 0; r < s.n; ++r) {
    auto src = g.row(r);
    for (std::size_t j = 0; j < s.neighbors[r].size(); ++j) {
      const double w = weights[r][j];
      auto dst = out.row(s.neighbors[r][j].index);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += w * src[c];
    }
  }
}

}  // namespace detail

// Gradient of sum over layers back to E^(0). `d_summed` is dLoss/dSum.
inline Matrix hetero_backward(const SparseAdjacency& adj_norm, const HeteroTrace& t, const Matrix& d_summed,
                              double eps) {
  const std::size_t layers = t.propagated.size();
  const Matrix& e0 = t.layers.front();
  Matrix d_e0(e0.rows(), e0.cols());
  Matrix carry(e0.rows(), e0.cols());  // gradient reaching E^(l) from layer l+1
  for (std::size_t l = layers; l >= 1; --l) {
    const Matrix& p = t.propagated[l - 1];
    const auto& gate = t.gate[l - 1];
    Matrix d_p(p.rows(), p.cols());
    for (std::size_t r = 0; r < p.rows(); ++r) {
      auto de = d_summed.row(r);
      auto dc = carry.row(r);
      auto pr = p.row(r);
      auto dp = d_p.row(r);
      const double s = gate[r] + eps;
      double along = 0.0;
      for (std::size_t c = 0; c < dp.size(); ++c) {
        const double g = de[c] + dc[c];
        dp[c] = s * g;
        along += g * pr[c];
      }
      detail::cosine_backward(pr, e0.row(r), along, dp, d_e0.row(r));
    }
    carry = spmm(adj_norm, d_p);  // the normalized adjacency is symmetric
  }
  d_e0 += d_summed;
  d_e0 += carry;
  return d_e0;
}

// Exact gradients for every parameter tensor, given output gradients.
inline ModelParams backward(const ModelParams& params, const ModelConfig& cfg, const GraphInputs& in,
                            const HomogeneousGraphs& g, const ForwardTrace& t, const OutputGrads& og) {
  ModelParams grads = params.zeros_like();
  const std::size_t nu = t.n_users;
  const std::size_t n = t.fused.rows();
  const std::size_t nm = params.n_modalities();
  const std::size_t d = params.dim();

  // Homogeneous branches.
  Matrix d_fused = og.final_emb;
  if (!t.user_hops.empty()) {
    const auto w = user_graph_weights(*g.users);
    Matrix gcur = slice_rows(og.final_emb, 0, nu);
    for (std::size_t l = 0; l < cfg.user_layers; ++l) {
      Matrix next = gcur;
      detail::propagate_knn_transpose(*g.users, w, gcur, next);
      gcur = std::move(next);
    }
    for (std::size_t k = 0; k < gcur.size(); ++k) d_fused.values()[k] += gcur.values()[k];
  }
  if (!t.item_hops.empty()) {
    const auto w = item_graph_weights(*g.items, cfg.item_row_normalize);
    Matrix gcur = slice_rows(og.final_emb, nu, n);
    for (std::size_t l = 0; l < cfg.item_layers; ++l) {
      Matrix next(gcur.rows(), gcur.cols());
      detail::propagate_knn_transpose(*g.items, w, gcur, next);
      gcur = std::move(next);
    }
    const std::size_t off = nu * d_fused.cols();
    for (std::size_t k = 0; k < gcur.size(); ++k) d_fused.values()[off + k] += gcur.values()[k];
  }

  // Late fusion.
  std::vector<Matrix> d_summed(nm, Matrix(n, d));
  std::vector<double> d_alpha(nm, 0.0);
  for (std::size_t m = 0; m < nm; ++m) {
    const Matrix& sm = t.summed(m);
    if (cfg.fusion_mode == FusionMode::weighted_sum) {
      d_summed[m].axpy(t.alpha[m], d_fused);
      d_alpha[m] = dot(d_fused.values(), sm.values());
    } else {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) {
          const double gv = d_fused(r, m * d + c);
          d_summed[m](r, c) = t.alpha[m] * gv;
          d_alpha[m] += gv * sm(r, c);
        }
    }
    if (m < og.summed.size() && !og.summed[m].empty()) d_summed[m] += og.summed[m];
  }
  double weighted = 0.0;
  for (std::size_t m = 0; m < nm; ++m) weighted += t.alpha[m] * d_alpha[m];
  for (std::size_t m = 0; m < nm; ++m) grads.fusion_logits(0, m) = t.alpha[m] * (d_alpha[m] - weighted);

  // Per-modality propagation, refinement and feature transforms.
  Matrix& d_id = grads.item_id_emb;
  for (std::size_t m = 0; m < nm; ++m) {
    const auto& mt = t.modality[m];
    const Matrix d_e0 = hetero_backward(in.adj_norm, mt.hetero, d_summed[m], cfg.eps);
    std::copy(d_e0.data(), d_e0.data() + nu * d, grads.user_emb[m].data());
    const Matrix d_refined = slice_rows(d_e0, nu, n);

    Matrix d_transformed(d_refined.rows(), d);
    if (cfg.refine_enabled(params.modalities[m])) {
      for (std::size_t k = 0; k < d_refined.size(); ++k) {
        const double x = mt.transformed.values()[k];
        const double ref = params.item_id_emb.values()[k];
        const double z = 0.5 * (x * x + ref * ref) + cfg.eps;
        const double r = mt.refined.values()[k];
        if (r == 0.0) continue;
        const double common = d_refined.values()[k] * 0.5 * (z < 0 ? -1.0 : 1.0) / r;
        d_transformed.values()[k] += common * x;
        d_id.values()[k] += common * ref;
      }
    } else {
      d_transformed = d_refined;
    }

    if (m == 0) {
      d_id += d_transformed;
      continue;
    }
    const auto& tr = *mt.transform;
    auto& gm = grads.mlp[m - 1];
    const auto& pm = params.mlp[m - 1];
    gm.w_out = matmul_tn(tr.activation, d_transformed);
    for (std::size_t r = 0; r < d_transformed.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c) gm.b_out(0, c) += d_transformed(r, c);
    Matrix d_act = matmul_nt(d_transformed, pm.w_out);
    for (std::size_t k = 0; k < d_act.size(); ++k)
      if (tr.pre_activation.values()[k] < 0.0) d_act.values()[k] *= cfg.leaky_slope;
    gm.w_in = matmul_tn(in.features[m - 1].values, d_act);
    for (std::size_t r = 0; r < d_act.rows(); ++r)
      for (std::size_t c = 0; c < d_act.cols(); ++c) gm.b_in(0, c) += d_act(r, c);
  }
  return grads;
}

}  // namespace cohesion
