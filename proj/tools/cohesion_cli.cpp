// cohesion: prepare data, train, evaluate, grid-search and export embeddings.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cohesion/cohesion.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cohesion;

namespace {

constexpr const char* kVersion = "1.0.0";

std::mutex log_mutex;
bool quiet = false;

void log(const std::string& msg) {
  if (quiet) return;
  std::lock_guard lock(log_mutex);
  std::cerr << msg << '\n';
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

template <typename T>
std::vector<T> parse_list(const std::string& s) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    std::istringstream one(tok);
    T v{};
    if (!(one >> v) || !one.eof()) throw CLI::ValidationError("list", "cannot parse '" + tok + "'");
    out.push_back(v);
  }
  if (out.empty()) throw CLI::ValidationError("list", "empty list");
  return out;
}

// ---------------------------------------------------------------------------
// Config flags shared by train and grid

struct ConfigFlags {
  std::string config_path;
  std::optional<std::size_t> d, layers, user_layers, item_layers, k, k_uu, k_ii, knn_refresh;
  std::optional<std::size_t> batch_size, max_epochs, patience;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr, reg, fused_loss_weight;
  std::optional<std::string> fusion_mode, knn_source;
  bool no_refine_i = false, no_refine_t = false, no_refine_v = false;
  bool no_uu = false, no_ii = false, plain_bpr = false;
  bool item_row_normalize = false, weights_through = false;
  std::vector<std::string> ablate;

  void add(CLI::App* app, bool with_grid_axes) {
    app->add_option("--config", config_path, "Flat JSON config, or a manifest.json from an earlier run");
    app->add_option("--d", d, "Embedding size");
    if (with_grid_axes) {
      app->add_option("--L", layers, "Heterogeneous propagation depth (1-4)");
      app->add_option("--lr", lr, "Learning rate");
      app->add_option("--reg", reg, "Regularization weight lambda");
    }
    app->add_option("--L-u", user_layers, "User-user graph depth");
    app->add_option("--L-i", item_layers, "Item-item graph depth");
    app->add_option("--k", k, "Neighbours for both kNN graphs");
    app->add_option("--k-uu", k_uu, "Neighbours in the user-user graph");
    app->add_option("--k-ii", k_ii, "Neighbours in the item-item graph");
    app->add_option("--knn-refresh", knn_refresh, "Epochs between kNN rebuilds (0 = build once)");
    app->add_option("--batch-size", batch_size, "Triplets per step");
    app->add_option("--max-epochs", max_epochs, "Epoch cap");
    app->add_option("--patience", patience, "Early-stopping patience in epochs");
    app->add_option("--seed", seed, "Training seed");
    app->add_option("--fused-loss-weight", fused_loss_weight, "Weight of the fused-score BPR term");
    app->add_option("--fusion-mode", fusion_mode, "weighted_sum or concat")
        ->check(CLI::IsMember({"weighted_sum", "sum", "concat"}));
    app->add_option("--knn-source", knn_source, "Embeddings the kNN graphs are built from")
        ->check(CLI::IsMember({"fused", "behavior"}));
    app->add_flag("--no-refine-i", no_refine_i, "Disable early fusion for the behavior modality");
    app->add_flag("--no-refine-t", no_refine_t, "Disable early fusion for the textual modality");
    app->add_flag("--no-refine-v", no_refine_v, "Disable early fusion for the visual modality");
    app->add_flag("--no-uu", no_uu, "Drop the user-user graph");
    app->add_flag("--no-ii", no_ii, "Drop the item-item graph");
    app->add_flag("--plain-bpr", plain_bpr, "Use plain BPR on the fused score");
    app->add_flag("--item-row-normalize", item_row_normalize, "Row-normalize item-item weights");
    app->add_flag("--weights-through", weights_through, "Back-propagate through the adaptive loss weights");
    app->add_option("--ablate", ablate, "Comma list of ablations")
        ->delimiter(',')
        ->check(CLI::IsMember({"no-refine-i", "no-refine-t", "no-refine-v", "no-uu", "no-ii", "plain-bpr", "ui"}));
  }

  // Defaults, then the config file, then explicit flags.
  RunConfig resolve(json* loaded = nullptr) const {
    RunConfig rc;
    if (!config_path.empty()) {
      json j = read_json(config_path);
      if (j.contains("config")) j = j.at("config");
      apply_flat_json(rc, j);
      if (loaded) *loaded = read_json(config_path);
    }
    auto& m = rc.model;
    auto& t = rc.train;
    if (d) m.d = *d;
    if (layers) m.layers = *layers;
    if (user_layers) m.user_layers = *user_layers;
    if (item_layers) m.item_layers = *item_layers;
    if (k) m.k_uu = m.k_ii = *k;
    if (k_uu) m.k_uu = *k_uu;
    if (k_ii) m.k_ii = *k_ii;
    if (knn_refresh) m.knn_refresh_interval = *knn_refresh;
    if (fusion_mode) m.fusion_mode = parse_fusion_mode(*fusion_mode);
    if (knn_source) m.knn_source = parse_knn_source(*knn_source);
    if (item_row_normalize) m.item_row_normalize = true;
    if (batch_size) t.batch_size = *batch_size;
    if (max_epochs) t.max_epochs = *max_epochs;
    if (patience) t.patience = *patience;
    if (seed) t.seed = *seed;
    if (lr) t.lr = *lr;
    if (reg) t.reg_lambda = *reg;
    if (fused_loss_weight) t.fused_loss_weight = *fused_loss_weight;
    if (weights_through) t.weights_through = true;

    auto has = [&](const char* a) { return std::find(ablate.begin(), ablate.end(), a) != ablate.end(); };
    if (no_refine_i || has("no-refine-i")) m.refine[0] = false;
    if (no_refine_t || has("no-refine-t")) m.refine[1] = false;
    if (no_refine_v || has("no-refine-v")) m.refine[2] = false;
    if (no_uu || has("no-uu") || has("ui")) m.use_uu = false;
    if (no_ii || has("no-ii") || has("ui")) m.use_ii = false;
    if (plain_bpr || has("plain-bpr")) t.adaptive_loss = false;
    m.validate();
    t.validate();
    return rc;
  }
};

// ---------------------------------------------------------------------------
// Training run shared by train and grid

struct LoadedData {
  fs::path dir;
  prepared::Data data;
  json fingerprint;
};

LoadedData load_data(const fs::path& dir) {
  LoadedData d{fs::absolute(dir).lexically_normal(), prepared::load(dir), {}};
  if (d.data.features.empty())
    throw DataError(dir.string() + ": no feature files (feat_textual.cmf / feat_visual.cmf)");
  d.fingerprint = dataset_fingerprint(dir);
  return d;
}

json metrics_from_checkpoint(const fs::path& ckpt_dir, const LoadedData& d, const ModelConfig& mcfg,
                             const InteractionTable& target, const EvalOptions& opt, MetricsReport* report = nullptr) {
  const Checkpoint ck = load_checkpoint(ckpt_dir);
  const GraphInputs in = make_inputs(d.data.split.train, d.data.features);
  const auto emb = ranking_embeddings(ck.params, mcfg, in, ck.graphs);
  const auto rep = evaluate(emb.users, emb.items, d.data.split.train, target, opt);
  if (report) *report = rep;
  return to_json(rep);
}

struct RunOutcome {
  bool ok = false;
  std::string status;
  std::string error;
  double val_recall20 = 0.0;
  double val_ndcg20 = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
};

RunOutcome run_training(const LoadedData& d, const RunConfig& rc, const fs::path& out, const std::string& tag,
                        const json& extra) {
  fs::create_directories(out);
  json manifest{{"command", "train"},
                {"version", kVersion},
                {"config", to_flat_json(rc)},
                {"data_dir", d.dir.string()},
                {"dataset", d.fingerprint},
                {"seed", rc.train.seed},
                {"git_describe", git_describe()},
                {"started_at", utc_timestamp()},
                {"status", "running"}};
  for (const auto& [k, v] : extra.items()) manifest[k] = v;
  write_json(out / "manifest.json", manifest);

  RunOutcome res;
  try {
    const Dataset ds{d.data.split, d.data.features};
    const FitResult fr = fit(ds, rc.model, rc.train, [&](const EpochLog& e) {
      log(tag + "epoch " + std::to_string(e.epoch) + " loss " + fmt("%.5f", e.loss) + " val R@20 " +
          fmt("%.4f", e.val_recall20) + " (" + fmt("%.2f", e.seconds) + "s)");
    });
    write_train_log(out / "train_log.csv", fr.log);
    res.epochs_run = fr.log.size();
    res.best_epoch = fr.best_epoch;

    json meta{{"config", to_flat_json(rc)},
              {"data_dir", d.dir.string()},
              {"dataset", d.fingerprint},
              {"best_epoch", fr.best_epoch},
              {"n_users", d.data.split.train.n_users()},
              {"n_items", d.data.split.train.n_items()},
              {"partial", fr.diverged}};
    save_checkpoint(out / "checkpoint", fr.best, fr.best_graphs, meta);

    if (fr.diverged) {
      res.status = "diverged";
      res.error = fr.divergence_message;
    } else {
      EvalOptions opt;
      const json metrics = metrics_from_checkpoint(out / "checkpoint", d, rc.model, d.data.split.val, opt);
      write_json(out / "metrics_val.json", metrics);
      res.val_recall20 = metrics.at("recall@20").get<double>();
      res.val_ndcg20 = metrics.at("ndcg@20").get<double>();
      res.status = "ok";
      res.ok = true;
    }
  } catch (const std::exception& e) {
    res.status = "failed";
    res.error = e.what();
  }
  manifest["status"] = res.status;
  if (!res.error.empty()) manifest["error"] = res.error;
  manifest["best_epoch"] = res.best_epoch;
  manifest["epochs_run"] = res.epochs_run;
  manifest["finished_at"] = utc_timestamp();
  write_json(out / "manifest.json", manifest);
  return res;
}

// ---------------------------------------------------------------------------
// Commands

struct SynthArgs {
  fs::path out;
  SyntheticSpec spec;
  std::string dims = "16,8";
};

int cmd_synth(SynthArgs a) {
  a.spec.feat_dims = parse_list<std::size_t>(a.dims);
  if (a.spec.feat_dims.size() > 2) throw Error("at most two feature modalities (textual, visual)");
  const auto s = generate_synthetic(a.spec);
  fs::create_directories(a.out);
  write_interactions(a.out / "interactions.tsv", s.table);
  json files = json::array();
  for (const auto& f : s.features) {
    const std::string name = "features_" + std::string(to_string(f.modality)) + ".cmf";
    save_features(a.out / name, f);
    files.push_back(name);
  }
  {
    std::ofstream out(a.out / "item_clusters.tsv", std::ios::trunc);
    for (Index i = 0; i < s.item_cluster.size(); ++i) out << i << '\t' << s.item_cluster[i] << '\n';
  }
  write_json(a.out / "manifest.json", {{"command", "synth"},
                                       {"version", kVersion},
                                       {"n_users", a.spec.n_users},
                                       {"n_items", a.spec.n_items},
                                       {"n_clusters", a.spec.n_clusters},
                                       {"feat_dims", a.spec.feat_dims},
                                       {"interactions_per_user", a.spec.interactions_per_user},
                                       {"noise", a.spec.noise},
                                       {"in_cluster_share", a.spec.in_cluster_share},
                                       {"seed", a.spec.seed},
                                       {"features", files},
                                       {"created_at", utc_timestamp()}});
  log("synth: " + std::to_string(s.table.pairs.size()) + " interactions -> " + a.out.string());
  return 0;
}

struct PrepareArgs {
  fs::path interactions;
  fs::path out;
  bool header = false;
  std::size_t kcore = 5;
  std::string ratios = "0.8,0.1,0.1";
  std::uint64_t seed = 1;
  std::vector<std::string> features;
};

int cmd_prepare(const PrepareArgs& a) {
  const auto r = parse_list<double>(a.ratios);
  if (r.size() != 3) throw CLI::ValidationError("--ratios", "expected train,val,test");
  std::vector<std::pair<Modality, fs::path>> feats;
  for (const auto& spec : a.features) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw CLI::ValidationError("--features", "expected modality=path, got " + spec);
    const Modality m = parse_modality(spec.substr(0, eq));
    if (m == Modality::behavior) throw CLI::ValidationError("--features", "behavior has no feature file");
    feats.emplace_back(m, spec.substr(eq + 1));
  }

  const auto raw = load_interactions(a.interactions, a.header);
  log("prepare: " + std::to_string(raw.pairs.size()) + " unique interactions, " + std::to_string(raw.n_users()) +
      " users, " + std::to_string(raw.n_items()) + " items");
  const auto filtered = kcore_filter(raw, a.kcore);
  if (filtered.empty_warning) throw DataError(std::to_string(a.kcore) + "-core filter removed every interaction");
  const auto& t = filtered.table;
  log("prepare: " + std::to_string(a.kcore) + "-core keeps " + std::to_string(t.pairs.size()) + " interactions, " +
      std::to_string(t.n_users()) + " users, " + std::to_string(t.n_items()) + " items");

  const auto split = split_dataset(t, {r[0], r[1], r[2]}, a.seed);
  prepared::write(a.out, split);
  json inputs{{"interactions", {{"path", fs::absolute(a.interactions).string()}, {"fingerprint", file_fingerprint(a.interactions)}}}};
  for (const auto& [m, path] : feats) {
    const auto aligned = align_features(cmf::read(path), t.items, m);
    if (!aligned.values.all_finite()) throw DataError(path.string() + ": non-finite feature values");
    save_features(prepared::feature_path(a.out, m), aligned);
    inputs[std::string(to_string(m))] = {{"path", fs::absolute(path).string()}, {"fingerprint", file_fingerprint(path)}};
  }
  write_json(a.out / "manifest.json", {{"command", "prepare"},
                                       {"version", kVersion},
                                       {"inputs", inputs},
                                       {"kcore", a.kcore},
                                       {"seed", a.seed},
                                       {"ratios", r},
                                       {"raw_interactions", raw.pairs.size()},
                                       {"interactions", t.pairs.size()},
                                       {"n_users", t.n_users()},
                                       {"n_items", t.n_items()},
                                       {"split", split_manifest(split)},
                                       {"dataset", dataset_fingerprint(a.out)},
                                       {"git_describe", git_describe()},
                                       {"created_at", utc_timestamp()}});
  return 0;
}

struct TrainArgs {
  fs::path data;
  fs::path out;
  ConfigFlags cfg;
};

int cmd_train(TrainArgs a) {
  json loaded;
  const RunConfig rc = a.cfg.resolve(&loaded);
  if (a.data.empty()) {
    if (!loaded.contains("data_dir")) throw CLI::RequiredError("--data");
    a.data = loaded.at("data_dir").get<std::string>();
  }
  const auto d = load_data(a.data);
  log("train: " + std::to_string(d.data.split.train.n_users()) + " users, " +
      std::to_string(d.data.split.train.n_items()) + " items, " + std::to_string(d.data.features.size() + 1) +
      " modalities");
  const auto res = run_training(d, rc, a.out, "", json::object());
  if (!res.ok) throw Error("training " + res.status + ": " + res.error);
  log("train: best epoch " + std::to_string(res.best_epoch) + ", val Recall@20 " + fmt("%.4f", res.val_recall20));
  return 0;
}

struct EvalArgs {
  fs::path run;
  fs::path checkpoint;
  fs::path data;
  fs::path out;
  std::string split = "test";
  bool buckets = false;
  std::string bucket_edges = "5,10,15,20";
  bool mask_val = false;
};

// Loads the checkpoint's config and data, refusing mismatched datasets.
struct Restored {
  fs::path ckpt;
  Checkpoint ck;
  RunConfig rc;
  LoadedData d;
};

Restored restore(const fs::path& run, fs::path ckpt, fs::path data) {
  if (ckpt.empty()) {
    if (run.empty()) throw CLI::RequiredError("--run or --checkpoint");
    ckpt = run / "checkpoint";
  }
  Restored r{ckpt, load_checkpoint(ckpt), {}, {}};
  apply_flat_json(r.rc, r.ck.meta.at("config"));
  if (data.empty()) data = r.ck.meta.at("data_dir").get<std::string>();
  r.d = load_data(data);
  if (r.d.fingerprint != r.ck.meta.at("dataset"))
    throw DataError("dataset fingerprint of " + data.string() + " does not match the checkpoint");
  const auto& p = r.ck.params;
  const auto& tr = r.d.data.split.train;
  if (p.n_users() != tr.n_users() || p.n_items() != tr.n_items())
    throw ShapeError("checkpoint shape does not match the dataset");
  if (p.n_modalities() != r.d.data.features.size() + 1) throw ShapeError("checkpoint modalities do not match");
  for (std::size_t m = 0; m < r.d.data.features.size(); ++m)
    if (p.modalities[m + 1] != r.d.data.features[m].modality || p.mlp[m].w_in.rows() != r.d.data.features[m].dim())
      throw ShapeError("checkpoint MLP for " + std::string(to_string(p.modalities[m + 1])) +
                       " does not match the feature file");
  return r;
}

int cmd_evaluate(const EvalArgs& a) {
  Restored r = restore(a.run, a.checkpoint, a.data);
  const fs::path out = !a.out.empty() ? a.out : (!a.run.empty() ? a.run : r.ckpt.parent_path());
  fs::create_directories(out);
  const auto& split = r.d.data.split;
  const InteractionTable& target = a.split == "val" ? split.val : split.test;
  EvalOptions opt;
  if (a.mask_val && a.split == "test") opt.extra_mask = &split.val;
  if (a.buckets) opt.bucket_edges = parse_list<std::size_t>(a.bucket_edges);
  MetricsReport rep;
  const json metrics = metrics_from_checkpoint(r.ckpt, r.d, r.rc.model, target, opt, &rep);
  write_json(out / ("metrics_" + a.split + ".json"), metrics);
  if (a.buckets) write_bucket_csv(out / ("buckets_" + a.split + ".csv"), rep);
  log("evaluate (" + a.split + "): Recall@10 " + fmt("%.4f", rep.recall.at(10)) + " Recall@20 " +
      fmt("%.4f", rep.recall.at(20)) + " NDCG@10 " + fmt("%.4f", rep.ndcg.at(10)) + " NDCG@20 " +
      fmt("%.4f", rep.ndcg.at(20)) + " over " + std::to_string(rep.n_eval_users) + " users (" +
      fmt("%.2f", rep.seconds) + "s)");
  return 0;
}

struct GridArgs {
  fs::path data;
  fs::path out;
  std::string lrs = "1e-1,1e-2,1e-3,1e-4";
  std::string regs = "1e-1,1e-2,1e-3,1e-4";
  std::string layers = "1,2,3,4";
  std::size_t jobs = 1;
  ConfigFlags cfg;
};

int cmd_grid(const GridArgs& a) {
  const auto lrs = parse_list<double>(a.lrs);
  const auto regs = parse_list<double>(a.regs);
  const auto ls = parse_list<std::size_t>(a.layers);
  const RunConfig base = a.cfg.resolve();
  const auto d = load_data(a.data);
  fs::create_directories(a.out);

  struct Cell {
    double lr, reg;
    std::size_t L;
    std::string name;
    RunOutcome outcome;
  };
  std::vector<Cell> cells;
  for (double lr : lrs)
    for (double reg : regs)
      for (std::size_t L : ls) {
        std::ostringstream name;
        name << "lr" << lr << "_reg" << reg << "_L" << L;
        cells.push_back({lr, reg, L, name.str(), {}});
      }

  write_json(a.out / "manifest.json", {{"command", "grid"},
                                       {"version", kVersion},
                                       {"config", to_flat_json(base)},
                                       {"grid", {{"lr", lrs}, {"reg_lambda", regs}, {"L", ls}}},
                                       {"data_dir", d.dir.string()},
                                       {"dataset", d.fingerprint},
                                       {"seed", base.train.seed},
                                       {"git_describe", git_describe()},
                                       {"started_at", utc_timestamp()}});

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t c = next++; c < cells.size(); c = next++) {
      Cell& cell = cells[c];
      RunConfig rc = base;
      rc.train.lr = cell.lr;
      rc.train.reg_lambda = cell.reg;
      rc.model.layers = cell.L;
      const std::string tag = "[" + cell.name + "] ";
      try {
        rc.model.validate();
        cell.outcome = run_training(d, rc, a.out / "cells" / cell.name, tag, {{"grid_cell", cell.name}});
      } catch (const std::exception& e) {
        cell.outcome.status = "failed";
        cell.outcome.error = e.what();
      }
      log(tag + cell.outcome.status + (cell.outcome.ok ? " val R@20 " + fmt("%.4f", cell.outcome.val_recall20)
                                                        : ": " + cell.outcome.error));
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < std::max<std::size_t>(1, std::min(a.jobs, cells.size())); ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  std::vector<std::size_t> order(cells.size());
  for (std::size_t c = 0; c < order.size(); ++c) order[c] = c;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    const auto& a1 = cells[x].outcome;
    const auto& b1 = cells[y].outcome;
    if (a1.ok != b1.ok) return a1.ok;
    return a1.ok && a1.val_recall20 > b1.val_recall20;
  });

  std::ofstream csv(a.out / "grid.csv", std::ios::trunc);
  csv << "rank,lr,reg_lambda,L,status,val_recall@20,val_ndcg@20,best_epoch,epochs_run,cell_dir,error\n";
  char buf[512];
  for (std::size_t rnk = 0; rnk < order.size(); ++rnk) {
    const auto& c = cells[order[rnk]];
    const auto& o = c.outcome;
    std::snprintf(buf, sizeof buf, "%zu,%g,%g,%zu,%s,", rnk + 1, c.lr, c.reg, c.L, o.status.c_str());
    csv << buf;
    if (o.ok) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g", o.val_recall20, o.val_ndcg20);
      csv << buf;
    } else {
      csv << ',';
    }
    std::string err = o.error;
    std::replace_if(err.begin(), err.end(), [](char ch) { return ch == ',' || ch == '\n' || ch == '"'; }, ';');
    csv << ',' << o.best_epoch << ',' << o.epochs_run << ",cells/" << c.name << ',' << err << '\n';
  }
  csv.close();

  const auto& best = cells[order.front()];
  if (!best.outcome.ok) throw Error("every grid cell failed");
  write_json(a.out / "best.json", {{"cell_dir", "cells/" + best.name},
                                   {"lr", best.lr},
                                   {"reg_lambda", best.reg},
                                   {"L", best.L},
                                   {"val_recall@20", best.outcome.val_recall20}});
  log("grid: best " + best.name + " val R@20 " + fmt("%.4f", best.outcome.val_recall20));
  return 0;
}

struct ExportArgs {
  fs::path run;
  fs::path checkpoint;
  fs::path data;
  fs::path out;
};

int cmd_export(const ExportArgs& a) {
  Restored r = restore(a.run, a.checkpoint, a.data);
  const fs::path out = !a.out.empty() ? a.out : (!a.run.empty() ? a.run / "export" : r.ckpt.parent_path() / "export");
  fs::create_directories(out);
  const GraphInputs in = make_inputs(r.d.data.split.train, r.d.data.features);
  const ForwardTrace t = forward(r.ck.params, r.rc.model, in, r.ck.graphs);
  cmf::write(out / "users_final.cmf", t.final_users());
  cmf::write(out / "items_final.cmf", t.final_items());
  for (std::size_t m = 0; m < r.ck.params.n_modalities(); ++m)
    cmf::write(out / ("modality_" + std::string(to_string(r.ck.params.modalities[m])) + ".cmf"), t.summed(m));
  log("export: " + std::to_string(r.ck.params.n_modalities() + 2) + " files -> " + out.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"COHESION multimodal recommender"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();
  app.add_flag("-q,--quiet", quiet, "Suppress progress logs");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate planted-cluster synthetic data");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--users", synth.spec.n_users);
  s->add_option("--items", synth.spec.n_items);
  s->add_option("--clusters", synth.spec.n_clusters);
  s->add_option("--dims", synth.dims, "Comma list of feature sizes (textual,visual)");
  s->add_option("--per-user", synth.spec.interactions_per_user);
  s->add_option("--noise", synth.spec.noise);
  s->add_option("--in-cluster", synth.spec.in_cluster_share, "Share of draws from the preferred cluster");
  s->add_option("--seed", synth.spec.seed);

  PrepareArgs prep;
  auto* p = app.add_subcommand("prepare", "k-core filter and split an interaction file");
  p->add_option("--interactions", prep.interactions, "TSV of user<TAB>item")->required();
  p->add_option("--out", prep.out, "Prepared directory")->required();
  p->add_flag("--header", prep.header, "Skip the first line");
  p->add_option("--kcore", prep.kcore, "Minimum degree")->capture_default_str();
  p->add_option("--ratios", prep.ratios, "train,val,test")->capture_default_str();
  p->add_option("--seed", prep.seed)->capture_default_str();
  p->add_option("--features", prep.features, "modality=path.cmf, rows indexed by integer item id");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train on a prepared directory");
  t->add_option("--data", train.data, "Prepared directory");
  t->add_option("--out", train.out, "Run directory")->required();
  train.cfg.add(t, true);

  EvalArgs ev;
  auto* e = app.add_subcommand("evaluate", "Rank all items with a checkpoint");
  e->add_option("--run", ev.run, "Run directory");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory");
  e->add_option("--data", ev.data, "Prepared directory (default: the one used for training)");
  e->add_option("--out", ev.out, "Where to write metrics (default: run directory)");
  e->add_option("--split", ev.split)->check(CLI::IsMember({"val", "test"}))->capture_default_str();
  e->add_flag("--buckets", ev.buckets, "Also write Recall@20 per train-degree bucket");
  e->add_option("--bucket-edges", ev.bucket_edges)->capture_default_str();
  e->add_flag("--mask-val", ev.mask_val, "Mask validation items when ranking the test split");

  GridArgs grid;
  auto* g = app.add_subcommand("grid", "Grid search over lr, lambda and L");
  g->add_option("--data", grid.data, "Prepared directory")->required();
  g->add_option("--out", grid.out, "Grid directory")->required();
  g->add_option("--lr", grid.lrs)->capture_default_str();
  g->add_option("--reg", grid.regs)->capture_default_str();
  g->add_option("--L", grid.layers)->capture_default_str();
  g->add_option("--jobs", grid.jobs, "Cells trained concurrently")->check(CLI::PositiveNumber);
  grid.cfg.add(g, false);

  ExportArgs ex;
  auto* x = app.add_subcommand("export", "Write final and per-modality embeddings");
  x->add_option("--run", ex.run, "Run directory");
  x->add_option("--checkpoint", ex.checkpoint, "Checkpoint directory");
  x->add_option("--data", ex.data, "Prepared directory");
  x->add_option("--out", ex.out, "Output directory (default: <run>/export)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForVersion& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 2;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*p) return cmd_prepare(prep);
    if (*t) return cmd_train(train);
    if (*e) return cmd_evaluate(ev);
    if (*g) return cmd_grid(grid);
    if (*x) return cmd_export(ex);
  } catch (const CLI::Error& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 2;
}
