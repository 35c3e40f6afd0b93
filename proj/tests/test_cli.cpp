#include <gtest/gtest.h>
#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cohesion/cohesion.hpp"

namespace fs = std::filesystem;
using namespace cohesion;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "cohesion_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string(COHESION_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

std::vector<std::string> lines(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

const std::string kTrainFlags = " --d 16 --max-epochs 3 --batch-size 128 --k 5 -q";

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    const auto syn = kRoot / "syn";
    ASSERT_EQ(run("synth --out " + syn.string() +
                  " --users 60 --items 40 --clusters 4 --dims 6,4 --per-user 6 --seed 3 -q"),
              0);
    ASSERT_EQ(run("prepare --interactions " + (syn / "interactions.tsv").string() + " --features textual=" +
                  (syn / "features_textual.cmf").string() + " --features v=" + (syn / "features_visual.cmf").string() +
                  " --out " + (kRoot / "prep").string() + " --seed 5 -q"),
              0);
    ASSERT_EQ(run("train --data " + (kRoot / "prep").string() + " --out " + (kRoot / "run").string() + kTrainFlags), 0);
  }
  static fs::path prep() { return kRoot / "prep"; }
  static fs::path run_dir() { return kRoot / "run"; }
};

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("prepare --out /tmp/x"), 2);
  EXPECT_EQ(run("train --data /tmp/x"), 2);
  EXPECT_EQ(run("evaluate --split holdout --run /tmp/x"), 2);
  EXPECT_EQ(run("train --out /tmp/x --ablate no-everything"), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST(Cli, RuntimeErrorsExitOne) {
  EXPECT_EQ(run("prepare --interactions /nonexistent/file.tsv --out " + (kRoot / "nothing").string()), 1);
  EXPECT_EQ(run("train --data /nonexistent/dir --out " + (kRoot / "nothing").string()), 1);
}

TEST_F(CliPipeline, PrepareIsReproducible) {
  const auto syn = kRoot / "syn";
  const auto again = kRoot / "prep_again";
  ASSERT_EQ(run("prepare --interactions " + (syn / "interactions.tsv").string() + " --features textual=" +
                (syn / "features_textual.cmf").string() + " --features v=" + (syn / "features_visual.cmf").string() +
                " --out " + again.string() + " --seed 5 -q"),
            0);
  for (const char* f : {"train.tsv", "val.tsv", "test.tsv", "users.tsv", "items.tsv", "feat_textual.cmf",
                        "feat_visual.cmf", "split_manifest.json"})
    EXPECT_EQ(slurp(prep() / f), slurp(again / f)) << f;
  const auto m = read_json(prep() / "manifest.json");
  EXPECT_GT(m.at("interactions").get<std::size_t>(), 0u);
  EXPECT_LE(m.at("interactions").get<std::size_t>(), 360u);
  EXPECT_EQ(m.at("kcore"), 5);
}

TEST_F(CliPipeline, TrainWritesArtifacts) {
  for (const char* f : {"manifest.json", "train_log.csv", "metrics_val.json", "checkpoint/checkpoint.json"})
    EXPECT_TRUE(fs::exists(run_dir() / f)) << f;
  const auto m = read_json(run_dir() / "manifest.json");
  EXPECT_EQ(m.at("status"), "ok");
  EXPECT_EQ(m.at("config").at("model.d"), 16);
  EXPECT_EQ(m.at("config").at("model.k_ii"), 5);
  EXPECT_TRUE(m.contains("dataset"));
  EXPECT_EQ(lines(run_dir() / "train_log.csv").size(), 4u);
  const auto metrics = read_json(run_dir() / "metrics_val.json");
  EXPECT_GE(metrics.at("recall@20").get<double>(), 0.0);
  EXPECT_LE(metrics.at("recall@20").get<double>(), 1.0);
}

TEST_F(CliPipeline, SameManifestSameMetrics) {
  const auto again = kRoot / "run_again";
  ASSERT_EQ(run("train --config " + (run_dir() / "manifest.json").string() + " --out " + again.string() + " -q"), 0);
  EXPECT_EQ(slurp(run_dir() / "metrics_val.json"), slurp(again / "metrics_val.json"));
  EXPECT_EQ(read_json(again / "manifest.json").at("config"), read_json(run_dir() / "manifest.json").at("config"));
}

TEST_F(CliPipeline, FlagsOverrideConfigFile) {
  const auto out = kRoot / "run_override";
  ASSERT_EQ(run("train --config " + (run_dir() / "manifest.json").string() + " --out " + out.string() +
                " --lr 0.02 --ablate ui --max-epochs 1 -q"),
            0);
  const auto cfg = read_json(out / "manifest.json").at("config");
  EXPECT_DOUBLE_EQ(cfg.at("train.lr").get<double>(), 0.02);
  EXPECT_EQ(cfg.at("model.d"), 16);
  EXPECT_EQ(cfg.at("model.use_uu"), false);
  EXPECT_EQ(cfg.at("model.use_ii"), false);
  EXPECT_FALSE(fs::exists(out / "checkpoint" / "knn_users.tsv"));
}

TEST_F(CliPipeline, EvaluateReproducesValidationMetrics) {
  const auto out = kRoot / "eval_val";
  ASSERT_EQ(run("evaluate --run " + run_dir().string() + " --split val --out " + out.string() + " -q"), 0);
  EXPECT_EQ(slurp(out / "metrics_val.json"), slurp(run_dir() / "metrics_val.json"));
}

TEST_F(CliPipeline, EvaluateTestWithBuckets) {
  const auto out = kRoot / "eval_test";
  ASSERT_EQ(run("evaluate --run " + run_dir().string() + " --buckets --out " + out.string() + " -q"), 0);
  const auto m = read_json(out / "metrics_test.json");
  for (const char* k : {"recall@10", "recall@20", "ndcg@10", "ndcg@20"}) EXPECT_TRUE(m.contains(k)) << k;
  const auto rows = lines(out / "buckets_test.csv");
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0], "range,lo,hi,users,recall@20");
  std::size_t total = 0;
  for (const auto& b : m.at("buckets")) total += b.at("users").get<std::size_t>();
  EXPECT_EQ(total, m.at("n_eval_users").get<std::size_t>());
}

TEST_F(CliPipeline, EvaluateRejectsBadInputs) {
  // Corrupted tensor.
  const auto broken = kRoot / "run_broken";
  fs::remove_all(broken);
  fs::copy(run_dir(), broken, fs::copy_options::recursive);
  std::ofstream(broken / "checkpoint" / "item_id_emb.cmf", std::ios::trunc) << "garbage";
  EXPECT_EQ(run("evaluate --run " + broken.string()), 1);

  // Same ids, different split: fingerprint mismatch.
  const auto other = kRoot / "prep_other";
  fs::remove_all(other);
  fs::copy(prep(), other, fs::copy_options::recursive);
  {
    auto tr = lines(other / "train.tsv");
    auto va = lines(other / "val.tsv");
    std::swap(tr.front(), va.front());
    std::ofstream t(other / "train.tsv", std::ios::trunc), v(other / "val.tsv", std::ios::trunc);
    for (const auto& l : tr) t << l << '\n';
    for (const auto& l : va) v << l << '\n';
  }
  EXPECT_EQ(run("evaluate --run " + run_dir().string() + " --data " + other.string()), 1);
  EXPECT_EQ(run("evaluate --run " + run_dir().string() + " --data " + prep().string() + " --out " +
                (kRoot / "eval_ok").string()),
            0);
}

TEST_F(CliPipeline, ExportShapes) {
  const auto out = kRoot / "export";
  ASSERT_EQ(run("export --run " + run_dir().string() + " --out " + out.string() + " -q"), 0);
  const auto sm = read_json(prep() / "split_manifest.json");
  const std::size_t nu = sm.at("n_users"), ni = sm.at("n_items");
  const auto items = cmf::read_raw(out / "items_final.cmf");
  const auto users = cmf::read_raw(out / "users_final.cmf");
  EXPECT_EQ(items.rows, ni);
  EXPECT_EQ(users.rows, nu);
  EXPECT_EQ(items.cols, 16u);
  std::size_t modality_files = 0;
  for (const auto& e : fs::directory_iterator(out))
    if (e.path().filename().string().rfind("modality_", 0) == 0) {
      ++modality_files;
      EXPECT_EQ(cmf::read_raw(e.path()).rows, nu + ni);
    }
  EXPECT_EQ(modality_files, 3u);
  // Re-import and re-export is bit-exact.
  cmf::write_raw(kRoot / "items_copy.cmf", items);
  EXPECT_EQ(slurp(kRoot / "items_copy.cmf"), slurp(out / "items_final.cmf"));
}

TEST_F(CliPipeline, DegenerateGridMatchesTrain) {
  const auto out = kRoot / "grid1";
  const auto cfg = read_json(run_dir() / "manifest.json").at("config");
  ASSERT_EQ(run("grid --data " + prep().string() + " --out " + out.string() + " --config " +
                (run_dir() / "manifest.json").string() + " --lr " + std::to_string(cfg.at("train.lr").get<double>()) +
                " --reg " + std::to_string(cfg.at("train.reg_lambda").get<double>()) + " --L 2 -q"),
            0);
  const auto rows = lines(out / "grid.csv");
  ASSERT_EQ(rows.size(), 2u);
  const auto best = read_json(out / "best.json");
  EXPECT_EQ(slurp(out / best.at("cell_dir").get<std::string>() / "metrics_val.json"),
            slurp(run_dir() / "metrics_val.json"));
}

TEST_F(CliPipeline, GridRanksCellsAndRecordsFailures) {
  const auto out = kRoot / "grid2";
  ASSERT_EQ(run("grid --data " + prep().string() + " --out " + out.string() +
                " --lr 0.01,0.001 --reg 0.001 --L 1,7 --d 8 --max-epochs 1 --batch-size 256 --jobs 2 -q"),
            0);
  const auto rows = lines(out / "grid.csv");
  ASSERT_EQ(rows.size(), 5u);  // header + 2 x 1 x 2
  std::size_t failed = 0;
  double best_seen = -1.0;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    std::vector<std::string> cols;
    std::stringstream ss(rows[r]);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
    if (cols[4] == "failed") {
      ++failed;
      continue;
    }
    best_seen = std::max(best_seen, std::stod(cols[5]));
  }
  EXPECT_EQ(failed, 2u);
  EXPECT_DOUBLE_EQ(read_json(out / "best.json").at("val_recall@20").get<double>(), best_seen);
}
