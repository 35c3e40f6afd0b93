#pragma once

// Triplet sampling, modality-adaptive BPR loss, Adam and the epoch loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "cohesion/cmf.hpp"
#include "cohesion/data_ingest.hpp"
#include "cohesion/error.hpp"
#include "cohesion/eval.hpp"
#include "cohesion/graph.hpp"
#include "cohesion/model.hpp"
#include "cohesion/rng.hpp"

namespace cohesion {

struct Triplet {
  Index u = 0;
  Index p = 0;
  Index n = 0;
  friend bool operator==(const Triplet&, const Triplet&) = default;
};

struct TrainConfig {
  double lr = 1e-3;
  double reg_lambda = 1e-4;
  std::size_t batch_size = 2048;
  std::size_t max_epochs = 1000;
  std::size_t patience = 20;
  std::uint64_t seed = 1;
  bool adaptive_loss = true;
  double fused_loss_weight = 1.0;
  // Differentiate through the modality weights instead of holding them fixed.
  bool weights_through = false;

  void validate() const {
    if (!(lr > 0)) throw Error("train.lr must be > 0");
    if (!(reg_lambda >= 0)) throw Error("train.reg_lambda must be >= 0");
    if (batch_size < 1) throw Error("train.batch_size must be >= 1");
    if (patience < 1) throw Error("train.patience must be >= 1");
  }
};

// Uniform (u, p) over training pairs, negatives rejection-sampled over items.
class TripletSampler {
 public:
  explicit TripletSampler(const InteractionTable& train) : pairs_(train.pairs), n_items_(train.n_items()) {
    if (pairs_.empty()) throw Error("sample_triplets: empty training table");
    seen_.reserve(pairs_.size() * 2);
    std::vector<std::size_t> deg(train.n_users(), 0);
    for (const auto& p : pairs_) {
      seen_.insert(key(p.user, p.item));
      ++deg[p.user];
    }
    for (Index u = 0; u < deg.size(); ++u)
      if (deg[u] >= n_items_)
        throw DataError("sample_triplets: user '" + train.users.raw(u) +
                        "' interacted with every item; no negative exists");
  }

  bool observed(Index u, Index i) const { return seen_.count(key(u, i)) != 0; }

  std::vector<Triplet> sample(std::size_t batch_size, Rng& rng) const {
    std::vector<Triplet> out;
    out.reserve(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) {
      const auto& pos = pairs_[uniform_index(rng, pairs_.size())];
      Index neg;
      do {
        neg = static_cast<Index>(uniform_index(rng, n_items_));
      } while (observed(pos.user, neg));
      out.push_back({pos.user, pos.item, neg});
    }
    return out;
  }

 private:
  static std::uint64_t key(Index u, Index i) { return (std::uint64_t{u} << 32) | i; }

  std::vector<Interaction> pairs_;
  std::size_t n_items_;
  std::unordered_set<std::uint64_t> seen_;
};

inline std::vector<Triplet> sample_triplets(const InteractionTable& train, std::size_t batch_size, Rng& rng) {
  return TripletSampler(train).sample(batch_size, rng);
}

// w_m = 1 - softmax(gaps)_m
inline std::vector<double> adaptive_weights(std::span<const double> gaps) {
  if (gaps.size() < 2) throw Error("adaptive_weights: need at least two modalities");
  auto w = softmax(gaps);
  for (double& v : w) v = 1.0 - v;
  return w;
}

// -log(sigmoid(x)), stable for large |x|.
inline double neg_log_sigmoid(double x) { return std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct LossBreakdown {
  double total = 0.0;
  double modality_term = 0.0;  // adaptive BPR over per-modality gaps
  double fused_term = 0.0;     // BPR on the final scores (weighted)
  double reg_term = 0.0;       // lambda * Omega
  std::vector<double> per_triplet;  // modality + fused terms, before regularization
};

// Per-triplet modality weights, useful for holding them fixed.
inline std::vector<std::vector<double>> batch_modality_weights(const ForwardTrace& t,
                                                               std::span<const Triplet> batch) {
  const std::size_t nm = t.modality.size();
  std::vector<std::vector<double>> out;
  out.reserve(batch.size());
  std::vector<double> gaps(nm);
  for (const auto& tr : batch) {
    for (std::size_t m = 0; m < nm; ++m)
      gaps[m] = modality_score(t.summed(m), t.n_users, tr.u, tr.p) - modality_score(t.summed(m), t.n_users, tr.u, tr.n);
    out.push_back(adaptive_weights(gaps));
  }
  return out;
}

// Regularizer: squared norms of the batch's user rows (every modality) and
// positive/negative item ID rows, counted per triplet, plus every dense
// parameter (MLPs and fusion logits) once per batch.
inline double regularizer(const ModelParams& params, std::span<const Triplet> batch, ModelParams* grad,
                          double scale) {
  double omega = 0.0;
  auto row_sq = [](std::span<const double> r) { return dot(r, r); };
  auto add_row = [&](Matrix& g, const Matrix& p, std::size_t r) {
    auto dst = g.row(r);
    auto src = p.row(r);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += 2.0 * scale * src[c];
  };
  for (const auto& tr : batch) {
    for (std::size_t m = 0; m < params.n_modalities(); ++m) {
      omega += row_sq(params.user_emb[m].row(tr.u));
      if (grad) add_row(grad->user_emb[m], params.user_emb[m], tr.u);
    }
    omega += row_sq(params.item_id_emb.row(tr.p)) + row_sq(params.item_id_emb.row(tr.n));
    if (grad) {
      add_row(grad->item_id_emb, params.item_id_emb, tr.p);
      add_row(grad->item_id_emb, params.item_id_emb, tr.n);
    }
  }
  for (std::size_t m = 0; m < params.mlp.size(); ++m) {
    const Mlp& p = params.mlp[m];
    omega += p.w_in.squared_norm() + p.b_in.squared_norm() + p.w_out.squared_norm() + p.b_out.squared_norm();
    if (grad) {
      grad->mlp[m].w_in.axpy(2.0 * scale, p.w_in);
      grad->mlp[m].b_in.axpy(2.0 * scale, p.b_in);
      grad->mlp[m].w_out.axpy(2.0 * scale, p.w_out);
      grad->mlp[m].b_out.axpy(2.0 * scale, p.b_out);
    }
  }
  omega += params.fusion_logits.squared_norm();
  if (grad) grad->fusion_logits.axpy(2.0 * scale, params.fusion_logits);
  return omega;
}

// Total loss over one batch. With `out_grads` set, writes dLoss/d(outputs)
// of the non-regularization terms. `frozen_weights` replaces the per-triplet
// modality weights (used to check stop-gradient derivatives).
inline LossBreakdown adaptive_bpr_loss(const ModelParams& params, const ForwardTrace& t,
                                       std::span<const Triplet> batch, const TrainConfig& cfg,
                                       OutputGrads* out_grads = nullptr,
                                       const std::vector<std::vector<double>>* frozen_weights = nullptr) {
  const std::size_t nm = t.modality.size();
  const std::size_t nu = t.n_users;
  const double fused_weight = cfg.adaptive_loss ? cfg.fused_loss_weight : 1.0;
  LossBreakdown lb;
  lb.per_triplet.reserve(batch.size());
  std::vector<double> gaps(nm);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Triplet& tr = batch[b];
    const std::size_t rp = nu + tr.p;
    const std::size_t rn = nu + tr.n;
    double term = 0.0;

    if (cfg.adaptive_loss) {
      for (std::size_t m = 0; m < nm; ++m)
        gaps[m] = modality_score(t.summed(m), nu, tr.u, tr.p) - modality_score(t.summed(m), nu, tr.u, tr.n);
      const std::vector<double> w = frozen_weights ? (*frozen_weights)[b] : adaptive_weights(gaps);
      double s = 0.0;
      for (std::size_t m = 0; m < nm; ++m) s += w[m] * gaps[m];
      const double mt = neg_log_sigmoid(s);
      term += mt;
      lb.modality_term += mt;
      if (out_grads) {
        const double c = -sigmoid(-s);
        std::vector<double> dgap(nm);
        if (cfg.weights_through && !frozen_weights) {
          const auto p = softmax(gaps);
          double pg = 0.0;
          for (std::size_t m = 0; m < nm; ++m) pg += p[m] * gaps[m];
          for (std::size_t m = 0; m < nm; ++m) dgap[m] = c * (w[m] - p[m] * gaps[m] + p[m] * pg);
        } else {
          for (std::size_t m = 0; m < nm; ++m) dgap[m] = c * w[m];
        }
        for (std::size_t m = 0; m < nm; ++m) {
          const Matrix& e = t.summed(m);
          Matrix& g = out_grads->summed[m];
          for (std::size_t c2 = 0; c2 < e.cols(); ++c2) {
            g(tr.u, c2) += dgap[m] * (e(rp, c2) - e(rn, c2));
            g(rp, c2) += dgap[m] * e(tr.u, c2);
            g(rn, c2) -= dgap[m] * e(tr.u, c2);
          }
        }
      }
    }

    if (fused_weight != 0.0) {
      const Matrix& e = t.final_emb;
      const double gf = dot(e.row(tr.u), e.row(rp)) - dot(e.row(tr.u), e.row(rn));
      const double ft = fused_weight * neg_log_sigmoid(gf);
      term += ft;
      lb.fused_term += ft;
      if (out_grads) {
        const double c = -fused_weight * sigmoid(-gf);
        Matrix& g = out_grads->final_emb;
        for (std::size_t c2 = 0; c2 < e.cols(); ++c2) {
          g(tr.u, c2) += c * (e(rp, c2) - e(rn, c2));
          g(rp, c2) += c * e(tr.u, c2);
          g(rn, c2) -= c * e(tr.u, c2);
        }
      }
    }
    if (!std::isfinite(term))
      throw DataError("non-finite loss at triplet " + std::to_string(b) + " (user " + std::to_string(tr.u) +
                      ", pos " + std::to_string(tr.p) + ", neg " + std::to_string(tr.n) + ")");
    lb.per_triplet.push_back(term);
  }
  lb.reg_term = cfg.reg_lambda * regularizer(params, batch, nullptr, 0.0);
  lb.total = lb.modality_term + lb.fused_term + lb.reg_term;
  return lb;
}

struct GradientResult {
  LossBreakdown loss;
  ModelParams grads;
};

// Forward, loss and exact reverse pass for one batch.
inline GradientResult compute_gradients(const ModelParams& params, const ModelConfig& mcfg,
                                        const TrainConfig& tcfg, const GraphInputs& in,
                                        const HomogeneousGraphs& graphs, std::span<const Triplet> batch) {
  const ForwardTrace t = forward(params, mcfg, in, graphs);
  OutputGrads og = make_output_grads(t);
  GradientResult r;
  r.loss = adaptive_bpr_loss(params, t, batch, tcfg, &og);
  r.grads = backward(params, mcfg, in, graphs, t, og);
  regularizer(params, batch, &r.grads, tcfg.reg_lambda);
  return r;
}

// ---------------------------------------------------------------------------

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

// Bias-corrected Adam over every tensor of params, in for_each order.
inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& st, double lr) {
  std::vector<const Matrix*> gl;
  grads.for_each([&](const std::string&, const Matrix& g) { gl.push_back(&g); });
  if (st.m.empty()) {
    for (const Matrix* g : gl) {
      st.m.emplace_back(g->rows(), g->cols());
      st.v.emplace_back(g->rows(), g->cols());
    }
  }
  if (st.m.size() != gl.size()) throw ShapeError("adam_step: state does not match parameters");
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  std::size_t idx = 0;
  params.for_each([&](const std::string& name, Matrix& p) {
    const Matrix& g = *gl[idx];
    if (!p.same_shape(g)) throw ShapeError("adam_step: gradient shape mismatch for " + name);
    auto pm = p.values();
    auto gv = g.values();
    auto mv = st.m[idx].values();
    auto vv = st.v[idx].values();
    for (std::size_t k = 0; k < pm.size(); ++k) {
      mv[k] = st.beta1 * mv[k] + (1.0 - st.beta1) * gv[k];
      vv[k] = st.beta2 * vv[k] + (1.0 - st.beta2) * gv[k] * gv[k];
      const double mhat = mv[k] / bc1;
      const double vhat = vv[k] / bc2;
      pm[k] -= lr * mhat / (std::sqrt(vhat) + st.eps);
    }
    ++idx;
  });
}

// ---------------------------------------------------------------------------

// Patience-based stopping on a maximized metric.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  // Records an epoch's metric; true if it is a new best.
  bool update(std::size_t epoch, double metric) {
    if (best_epoch_ == 0 || metric > best_) {
      best_ = metric;
      best_epoch_ = epoch;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }
  bool should_stop() const { return stale_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  double best_ = -std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;  // 0 until the first update
  std::size_t stale_ = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;  // mean total loss per triplet
  double val_recall20 = 0.0;
  double val_ndcg20 = 0.0;
  double seconds = 0.0;
};

struct Dataset {
  DatasetSplit split;
  std::vector<FeatureMatrix> features;  // content modalities
};

struct FitResult {
  ModelParams best;
  HomogeneousGraphs best_graphs;
  std::size_t best_epoch = 0;
  double best_val_recall20 = 0.0;
  double initial_val_recall20 = 0.0;
  std::vector<EpochLog> log;
  bool diverged = false;
  std::string divergence_message;
};

// Embeddings used for ranking: final user and item rows.
struct RankingEmbeddings {
  Matrix users;
  Matrix items;
};

inline RankingEmbeddings ranking_embeddings(const ModelParams& params, const ModelConfig& cfg,
                                            const GraphInputs& in, const HomogeneousGraphs& g) {
  const ForwardTrace t = forward(params, cfg, in, g);
  return {t.final_users(), t.final_items()};
}

inline bool needs_graphs(const ModelConfig& cfg) { return cfg.use_uu || cfg.use_ii; }

inline HomogeneousGraphs build_graphs(const ModelParams& params, const ModelConfig& cfg, const GraphInputs& in) {
  if (!needs_graphs(cfg)) return {};
  return rebuild_knn_graphs(forward_fused(params, cfg, in), cfg);
}

using EpochCallback = std::function<void(const EpochLog&)>;

// The epoch loop: optional kNN rebuild, minibatch Adam steps, validation
// Recall@20, best-checkpoint tracking and early stopping.
inline FitResult fit(const Dataset& data, const ModelConfig& mcfg, const TrainConfig& tcfg,
                     const EpochCallback& on_epoch = {}) {
  mcfg.validate();
  tcfg.validate();
  const auto& split = data.split;
  const GraphInputs in = make_inputs(split.train, data.features);
  const TripletSampler sampler(split.train);

  Rng rng(tcfg.seed);
  ModelParams params = init_params(in.n_users, in.n_items, data.features, mcfg, rng);
  HomogeneousGraphs graphs = build_graphs(params, mcfg, in);

  auto validate = [&](const ModelParams& p, const HomogeneousGraphs& g) {
    const auto emb = ranking_embeddings(p, mcfg, in, g);
    EvalOptions opt;
    opt.ks = {20};
    return evaluate(emb.users, emb.items, split.train, split.val, opt);
  };

  FitResult res;
  res.initial_val_recall20 = validate(params, graphs).recall.at(20);
  res.best = params;
  res.best_graphs = graphs;

  AdamState adam;
  EarlyStopper stopper(tcfg.patience);
  const std::size_t steps =
      std::max<std::size_t>(1, (split.train.pairs.size() + tcfg.batch_size - 1) / tcfg.batch_size);

  for (std::size_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    if (needs_graphs(mcfg) && mcfg.knn_refresh_interval > 0 && epoch > 1 &&
        (epoch - 1) % mcfg.knn_refresh_interval == 0)
      graphs = build_graphs(params, mcfg, in);

    double loss_sum = 0.0;
    std::size_t seen = 0;
    try {
      for (std::size_t s = 0; s < steps; ++s) {
        const auto batch = sampler.sample(tcfg.batch_size, rng);
        auto r = compute_gradients(params, mcfg, tcfg, in, graphs, batch);
        if (!std::isfinite(r.loss.total)) throw DataError("non-finite batch loss");
        adam_step(params, r.grads, adam, tcfg.lr);
        if (!params.all_finite()) throw DataError("non-finite parameters after update");
        loss_sum += r.loss.total;
        seen += batch.size();
      }
    } catch (const DataError& e) {
      res.diverged = true;
      res.divergence_message = "epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }

    const auto rep = validate(params, graphs);
    EpochLog log;
    log.epoch = epoch;
    log.loss = loss_sum / static_cast<double>(seen);
    log.val_recall20 = rep.recall.at(20);
    log.val_ndcg20 = rep.ndcg.at(20);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    res.log.push_back(log);
    if (on_epoch) on_epoch(log);

    if (stopper.update(epoch, log.val_recall20)) {
      res.best = params;
      res.best_graphs = graphs;
      res.best_epoch = epoch;
      res.best_val_recall20 = log.val_recall20;
    }
    if (stopper.should_stop()) break;
  }
  return res;
}

inline void write_train_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "epoch,loss,val_recall@20,val_ndcg@20,seconds\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.6f\n", e.epoch, e.loss, e.val_recall20, e.val_ndcg20,
                  e.seconds);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: one CMF1 file per tensor, kNN graphs as TSV, plus checkpoint.json.

inline std::string tensor_file(const std::string& name) { return name + ".cmf"; }

inline void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params,
                            const HomogeneousGraphs& graphs, nlohmann::json meta) {
  std::filesystem::create_directories(dir);
  auto tensors = nlohmann::json::array();
  params.for_each([&](const std::string& name, const Matrix& t) {
    cmf::write(dir / tensor_file(name), t);
    tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  });
  auto mods = nlohmann::json::array();
  for (Modality m : params.modalities) mods.push_back(std::string(to_string(m)));
  meta["tensors"] = tensors;
  meta["modalities"] = mods;
  meta["knn_users"] = static_cast<bool>(graphs.users);
  meta["knn_items"] = static_cast<bool>(graphs.items);
  if (graphs.users) write_knn(dir / "knn_users.tsv", *graphs.users);
  if (graphs.items) write_knn(dir / "knn_items.tsv", *graphs.items);
  std::ofstream out(dir / "checkpoint.json", std::ios::trunc);
  out << meta.dump(2) << '\n';
}

struct Checkpoint {
  ModelParams params;
  HomogeneousGraphs graphs;
  nlohmann::json meta;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "checkpoint.json");
  if (!in) throw Error("missing " + (dir / "checkpoint.json").string());
  Checkpoint ck;
  try {
    ck.meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint.json: " + std::string(e.what()));
  }
  for (const auto& m : ck.meta.at("modalities")) ck.params.modalities.push_back(parse_modality(m.get<std::string>()));
  if (ck.params.modalities.empty() || ck.params.modalities.front() != Modality::behavior)
    throw FormatError("checkpoint: first modality must be behavior");
  const std::size_t nm = ck.params.modalities.size();
  ck.params.user_emb.resize(nm);
  ck.params.mlp.resize(nm - 1);

  std::map<std::string, std::pair<std::size_t, std::size_t>> shapes;
  for (const auto& t : ck.meta.at("tensors"))
    shapes[t.at("name").get<std::string>()] = {t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>()};
  ck.params.for_each([&](const std::string& name, Matrix& t) {
    const auto it = shapes.find(name);
    if (it == shapes.end()) throw FormatError("checkpoint: tensor " + name + " missing from manifest");
    t = cmf::read(dir / tensor_file(name));
    if (t.rows() != it->second.first || t.cols() != it->second.second)
      throw FormatError("checkpoint: tensor " + name + " has an unexpected shape");
    if (!t.all_finite()) throw DataError("checkpoint: tensor " + name + " holds non-finite values");
  });
  if (ck.meta.value("knn_users", false)) ck.graphs.users = read_knn(dir / "knn_users.tsv");
  if (ck.meta.value("knn_items", false)) ck.graphs.items = read_knn(dir / "knn_items.tsv");
  return ck;
}

// Parameters as they survive a checkpoint round trip (float32 storage).
inline ModelParams round_to_storage(const ModelParams& p) {
  ModelParams out = p;
  out.for_each([](const std::string&, Matrix& t) {
    for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
  });
  return out;
}

}  // namespace cohesion
