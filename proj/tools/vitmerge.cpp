// vitmerge: command-line driver for the merging experiments.
//
//   vitmerge pipeline --config configs/desk3.json --seed 2
//   vitmerge merge --config C --method gated-regmean --m 0,1,2,4
//   vitmerge merge --config C --method avgmean --inputs models/task1.ckpt,models/task1.ckpt --name copies
//   vitmerge eval --config C --model copies

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <optional>

#include "vitmerge/pipeline.hpp"

namespace {

using namespace vitmerge;

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::size_t> m;
  std::string method = "avgmean";
  std::optional<double> lambda;
  std::optional<double> alpha;
  std::optional<double> gate_frac;
  std::string strategy;
  std::optional<int> classifier;
  std::vector<std::string> inputs;
  std::string name;
  std::vector<std::string> models;
  std::vector<std::string> runs;
};

Run make_run(const Flags& f) {
  ExperimentConfig c = load_config(f.config);
  if (f.seed) c.seed = *f.seed;
  if (!f.out.empty()) c.output_dir = f.out;
  if (f.gate_frac) c.data.gate_fraction = *f.gate_frac;
  if (f.alpha) c.merge.alpha = *f.alpha;
  if (f.lambda) c.merge.lambda = *f.lambda;
  if (!f.strategy.empty()) c.merge.strategy = parse_strategy(f.strategy);
  if (!f.m.empty()) c.merge.m = f.m;
  if (f.classifier) c.merge.classifier_task = *f.classifier;
  c.validate();
  return Run(c, c.output_dir, &std::cerr);
}

std::vector<std::string> all_eval_targets(const Run& run) {
  std::vector<std::string> names{"individual", "scratch-individual"};
  const auto merged = run.path("merged");
  if (!std::filesystem::is_directory(merged)) return names;
  std::vector<std::string> found;
  for (const auto& e : std::filesystem::directory_iterator(merged))
    if (e.path().extension() == ".json") found.push_back(e.path().stem().string());
  std::sort(found.begin(), found.end());
  names.insert(names.end(), found.begin(), found.end());
  return names;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Merge task-specific vision transformers with a task-ID gate"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  app.add_option("--out", f.out, "Run directory (overrides output_dir)");
  app.add_option("--seed", f.seed, "Base seed (overrides seed)");
  app.add_option("--m", f.m, "Gated block counts, e.g. 0,1,2,4")->delimiter(',');
  app.add_option("--method", f.method, "Merge method")
      ->check(CLI::IsMember(known_methods()));
  app.add_option("--lambda", f.lambda, "Task Arithmetic scale");
  app.add_option("--alpha", f.alpha, "RegMean off-diagonal scale (default 0.9)");
  app.add_option("--gate-frac", f.gate_frac, "Share of each test split used for gate and grams (default 0.15)");
  app.add_option("--strategy", f.strategy, "Similarity strategy")
      ->check(CLI::IsMember({"concat-combined", "concat-separate", "separate-combined",
                             "separate-separate"}));
  app.add_option("--classifier", f.classifier, "Task whose head static merges keep");

  auto* gen = app.add_subcommand("gen-data", "Generate train, test, pool and held-out splits");
  auto* pre = app.add_subcommand("pretrain", "Train the shared base on all tasks");
  auto* ft = app.add_subcommand("finetune", "Fine-tune per task, plus from-scratch controls");
  auto* gate = app.add_subcommand("train-gate", "Train the task-ID gate on the pool");
  auto* grams = app.add_subcommand("grams", "Collect RegMean gram statistics on the pool");
  auto* sim = app.add_subcommand("similarity", "Per-block weight similarity report");
  auto* merge = app.add_subcommand("merge", "Merge models (static checkpoint or gated manifest)");
  merge->add_option("--inputs", f.inputs, "Checkpoints to merge (default: the task models)")
      ->delimiter(',');
  merge->add_option("--name", f.name, "Output name under merged/");
  auto* eval = app.add_subcommand("eval", "Evaluate models on held-out data");
  eval->add_option("--model", f.models, "Model names (default: every merged model plus individuals)")
      ->delimiter(',');
  auto* report = app.add_subcommand("report", "Aggregate eval results into a table");
  report->add_option("--runs", f.runs, "Run directories to aggregate (default: --out)")->delimiter(',');
  auto* all = app.add_subcommand("pipeline", "Run every step with the default sweep");

  CLI11_PARSE(app, argc, argv);

  try {
    const Run run = make_run(f);
    if (*gen) gen_data(run);
    if (*pre) pretrain_step(run);
    if (*ft) finetune_step(run);
    if (*gate) train_gate_step(run);
    if (*grams) grams_step(run);
    if (*sim) {
      const auto r = similarity_step(run, run.config().merge.strategy);
      std::cout << similarity_json(r).dump(2) << '\n';
    }
    if (*merge) {
      MergeRequest req = merge_request(run.config(), f.method);
      req.inputs = f.inputs;
      req.name = f.name;
      req.classifier_task = f.classifier;
      for (const auto& n : merge_step(run, req)) std::cout << "merged/" << n << ".json\n";
    }
    if (*eval) {
      const auto targets = f.models.empty() ? all_eval_targets(run) : f.models;
      for (const auto& n : targets) {
        const auto row = eval_step(run, n);
        std::cout << row.name << ": avg " << detail::pct(row.avg) << "%\n";
      }
    }
    if (*report) {
      std::vector<std::filesystem::path> dirs(f.runs.begin(), f.runs.end());
      if (dirs.empty()) dirs.push_back(run.dir());
      std::cout << report_text(report_step(dirs, run.dir()));
    }
    if (*all) {
      run_pipeline(run);
      std::cout << io::read_file(run.path("reports/report.txt"));
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
