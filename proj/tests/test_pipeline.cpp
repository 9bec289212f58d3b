#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "vitmerge/pipeline.hpp"

using namespace vitmerge;
namespace fs = std::filesystem;

namespace {

nlohmann::json tiny_json() {
  return nlohmann::json::parse(R"({
    "schema_version": 1,
    "seed": 5,
    "model": {"image_size": 8, "patch_size": 4, "channels": 1, "dim": 8, "depth": 2, "heads": 2, "mlp_ratio": 2},
    "tasks": [
      {"task_id": 1, "family": "bars", "num_classes": 3},
      {"task_id": 2, "family": "rings", "num_classes": 3},
      {"task_id": 3, "family": "checker", "num_classes": 4}
    ],
    "data": {"train_per_task": 24, "test_per_task": 40, "gate_fraction": 0.25},
    "pretrain": {"epochs": 2, "batch_size": 8, "learning_rate": 0.05},
    "finetune": {"epochs": 1, "batch_size": 8, "learning_rate": 0.02},
    "gate": {"hidden": [8], "train": {"epochs": 3, "batch_size": 8, "learning_rate": 0.05}},
    "merge": {"m": [0, 1, 2, 5]}
  })");
}

fs::path scratch_root() { return fs::temp_directory_path() / "vitmerge_pipeline_test"; }

std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

double finetune_accuracy(const Run& run, int id) {
  return read_json(run.path("models/finetune.json")).at(std::to_string(id)).at("accuracy");
}

}  // namespace

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(scratch_root());
    run_ = new vitmerge::Run(config_from_json(tiny_json()), scratch_root() / "a");
    run_pipeline(*run_);
  }
  static void TearDownTestSuite() {
    delete run_;
    fs::remove_all(scratch_root());
  }
  static vitmerge::Run* run_;
};

vitmerge::Run* Pipeline::run_ = nullptr;

TEST_F(Pipeline, WritesEveryArtifact) {
  const auto& r = *run_;
  for (const char* rel :
       {"config.json", "data/task1_train.bin", "data/task3_heldout.bin", "data/task2_pool.bin",
        "models/base.ckpt", "models/task2.ckpt", "models/scratch_task3.ckpt", "models/gate.ckpt",
        "models/gate.json", "grams/task1.gram", "reports/similarity_concat-combined.json",
        "reports/similarity_separate-separate.json", "merged/avgmean.ckpt", "merged/regmean.json",
        "merged/gated-regmean-m2.json", "eval/individual.json", "eval/gated-avgmean-m5.json",
        "eval/scratch-avgmean.json", "reports/report.txt", "reports/report.json"})
    EXPECT_TRUE(fs::exists(r.path(rel))) << rel;
}

TEST_F(Pipeline, PoolAndHeldOutPartitionTheTestSplit) {
  const auto test = load_dataset(run_->path("data/task1_test.bin"));
  const auto pool = load_dataset(run_->path("data/task1_pool.bin"));
  const auto held = load_dataset(run_->path("data/task1_heldout.bin"));
  EXPECT_EQ(pool.size(), 10u);
  EXPECT_EQ(pool.size() + held.size(), test.size());
}

TEST_F(Pipeline, LineageTags) {
  EXPECT_EQ(load_vit(run_->path("models/task1.ckpt")).meta.lineage, "pretrained");
  EXPECT_EQ(load_vit(run_->path("models/scratch_task1.ckpt")).meta.lineage, "from-scratch");
  EXPECT_EQ(load_vit(run_->path("models/task3.ckpt")).meta.task_id, 3);
}

TEST_F(Pipeline, EvalOfTaskModelMatchesFinetuneRecord) {
  for (int id : {1, 2, 3}) {
    const auto row = eval_step(*run_, "task" + std::to_string(id));
    ASSERT_EQ(row.per_task.size(), 1u);
    EXPECT_EQ(row.per_task.at(id), finetune_accuracy(*run_, id));
  }
}

TEST_F(Pipeline, AvgMeanOfCopiesEvaluatesLikeTheOriginal) {
  auto req = merge_request(run_->config(), "avgmean");
  req.inputs = {"models/task2.ckpt", "models/task2.ckpt", "models/task2.ckpt"};
  req.name = "copies";
  merge_step(*run_, req);
  const auto row = eval_step(*run_, "copies");
  EXPECT_EQ(row.per_task.at(2), finetune_accuracy(*run_, 2));
  EXPECT_EQ(load_vit(run_->path("merged/copies.ckpt")).params,
            load_vit(run_->path("models/task2.ckpt")).params);
  fs::remove(run_->path("eval/copies.json"));
}

TEST_F(Pipeline, ManifestsUseRunRelativePaths) {
  const auto j = read_json(run_->path("merged/gated-regmean-m1.json"));
  EXPECT_EQ(j.at("gate"), "models/gate.ckpt");
  EXPECT_EQ(j.at("inputs")[0], "models/task1.ckpt");
  EXPECT_EQ(j.at("grams")[2], "grams/task3.gram");
  EXPECT_EQ(j.at("alpha"), 0.9);
}

TEST_F(Pipeline, ClampedPlanIsRecorded) {
  const auto j = read_json(run_->path("merged/gated-avgmean-m5.json"));
  EXPECT_EQ(j.at("m"), 2);
  EXPECT_EQ(j.at("requested_m"), 5);
  EXPECT_TRUE(j.at("clamped").get<bool>());
}

TEST_F(Pipeline, SimilarityReportKeyedByBlock) {
  const auto j = read_json(run_->path("reports/similarity_concat-combined.json"));
  EXPECT_EQ(j.at("num_models"), 3);
  EXPECT_EQ(j.at("blocks").size(), 2u);
  EXPECT_TRUE(j.at("blocks").contains("0"));
  EXPECT_TRUE(j.at("blocks").at("1").contains("mlp"));
  const auto back = similarity_from_json(j, "x");
  EXPECT_EQ(back, similarity(detail::load_models(*run_, detail::task_models(*run_), "finetune")));
}

TEST_F(Pipeline, ReportRowsCarryTheSchema) {
  const auto j = read_json(run_->path("reports/report.json"));
  ASSERT_GE(j.at("rows").size(), 14u);
  for (const auto& row : j.at("rows")) {
    for (const char* key : {"method", "m", "per_task", "avg", "params", "flops", "seed"})
      EXPECT_TRUE(row.contains(key)) << key;
    EXPECT_EQ(row.at("seed"), 5);
  }
  const std::string text = io::read_file(run_->path("reports/report.txt"));
  EXPECT_NE(text.find("gated-regmean-m2"), std::string::npos);
  EXPECT_NE(text.find("task3"), std::string::npos);
}

TEST_F(Pipeline, GatedAccounting) {
  for (const char* method : {"gated-avgmean", "gated-regmean"}) {
    std::vector<EvalRow> rows;
    for (int m : {0, 1, 2})
      rows.push_back(eval_row_from_json(
          read_json(run_->path("eval/" + gated_name(method, m) + ".json"))));
    for (std::size_t i = 1; i < rows.size(); ++i) {
      EXPECT_GT(rows[i].params, rows[i - 1].params);
      EXPECT_EQ(rows[i].flops, rows[0].flops);
    }
  }
}

TEST_F(Pipeline, StaticParamsCountBackboneOnceAndEveryHead) {
  const auto row = eval_row_from_json(read_json(run_->path("eval/avgmean.json")));
  const auto m = load_vit(run_->path("models/task1.ckpt"));
  const std::size_t d = m.config.dim;
  const std::size_t heads = (d + 1) * (3 + 3 + 4);
  EXPECT_EQ(row.params, param_count(m) - (d + 1) * 3 + heads);
}

TEST_F(Pipeline, ReRunIsByteIdentical) {
  const vitmerge::Run again(config_from_json(tiny_json()), scratch_root() / "b");
  run_pipeline(again);
  // Other tests may add extra evals to the first run; everything the second
  // run wrote must match.
  const auto b = files_under(again.dir());
  ASSERT_GE(b.size(), 40u);
  for (const auto& rel : b)
    EXPECT_EQ(io::read_file(run_->dir() / rel), io::read_file(again.dir() / rel)) << rel;
}

TEST_F(Pipeline, DifferentSeedChangesArtifacts) {
  auto c = config_from_json(tiny_json());
  c.seed = 6;
  const vitmerge::Run other(c, scratch_root() / "c");
  gen_data(other);
  EXPECT_NE(io::read_file(other.path("data/task1_train.bin")),
            io::read_file(run_->path("data/task1_train.bin")));
}

TEST_F(Pipeline, CommandsAreIdempotent) {
  const auto before = io::read_file(run_->path("merged/regmean.ckpt"));
  merge_step(*run_, merge_request(run_->config(), "regmean"));
  EXPECT_EQ(io::read_file(run_->path("merged/regmean.ckpt")), before);
  const auto eval_before = io::read_file(run_->path("eval/gated-regmean-m1.json"));
  eval_step(*run_, "gated-regmean-m1");
  EXPECT_EQ(io::read_file(run_->path("eval/gated-regmean-m1.json")), eval_before);
}

TEST_F(Pipeline, MultiRunReportAddsMeans) {
  const auto rep = collect_report({run_->dir(), run_->dir()});
  EXPECT_EQ(rep.means.size() * 2, rep.rows.size());
  EXPECT_TRUE(report_json(rep).contains("mean_over_seeds"));
}

TEST(PipelineErrors, MissingArtifactNamesFileAndProducer) {
  const vitmerge::Run run(config_from_json(tiny_json()), scratch_root() / "empty");
  try {
    pretrain_step(run);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("config.json"), std::string::npos) << e.what();
  }
  write_json(run.path("config.json"), to_json(run.config()));
  try {
    pretrain_step(run);
    FAIL();
  } catch (const IoError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("data/task1_train.bin"), std::string::npos) << msg;
    EXPECT_NE(msg.find("gen-data"), std::string::npos) << msg;
  }
  EXPECT_THROW(eval_step(run, "nothing"), IoError);
  EXPECT_THROW(merge_step(run, merge_request(run.config(), "median")), ConfigError);
  fs::remove_all(scratch_root() / "empty");
}

// The CLI binary end to end: a schema violation exits with a config error
// naming the key, and the copy-merge example works through the flags.
TEST(Cli, RejectsUnknownKeyWithPath) {
  const fs::path dir = fs::temp_directory_path() / "vitmerge_cli_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto j = tiny_json();
  j["merge"]["lamda"] = 0.5;
  std::ofstream(dir / "bad.json") << j.dump();
  const std::string cmd = std::string(VITMERGE_CLI) + " gen-data --config " + (dir / "bad.json").string() +
                          " --out " + (dir / "run").string() + " 2> " + (dir / "err.txt").string();
  const int status = std::system(cmd.c_str());
  EXPECT_NE(status, 0);
  EXPECT_NE(io::read_file(dir / "err.txt").find("merge.lamda"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, CopyMergeThroughFlags) {
  const fs::path dir = fs::temp_directory_path() / "vitmerge_cli_copy";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "cfg.json") << tiny_json().dump();
  const std::string base = std::string(VITMERGE_CLI) + " --config " + (dir / "cfg.json").string() +
                           " --out " + (dir / "run").string() + " ";
  for (const char* step : {"gen-data", "pretrain", "finetune"})
    ASSERT_EQ(std::system((base + step + " 2>/dev/null").c_str()), 0) << step;
  ASSERT_EQ(std::system((base + "merge --method avgmean --name copies --inputs "
                                "models/task1.ckpt,models/task1.ckpt >/dev/null")
                            .c_str()),
            0);
  ASSERT_EQ(std::system((base + "eval --model copies,task1 >/dev/null").c_str()), 0);
  const auto copies = read_json(dir / "run/eval/copies.json");
  const auto task1 = read_json(dir / "run/eval/task1.json");
  EXPECT_EQ(copies.at("per_task").at("1"), task1.at("per_task").at("1"));
  EXPECT_NE(std::system((base + "train-gate --seed 9 2>/dev/null >/dev/null").c_str()), 0)
      << "a different seed must not reuse the other run's data";
  fs::remove_all(dir);
}
