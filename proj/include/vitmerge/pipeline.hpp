#pragma once

// On-disk experiment pipeline. One run directory holds every artifact:
//
//   config.json                       resolved configuration
//   data/task<id>_{train,test,pool,heldout}.bin
//   models/base.ckpt, task<id>.ckpt, scratch_task<id>.ckpt, gate.ckpt (+ JSON logs)
//   grams/task<id>.gram
//   reports/similarity_<strategy>.json, report.txt, report.json
//   merged/<name>.json (+ <name>.ckpt for static merges)
//   eval/<name>.json
//
// The pool is the gate/gram budget carved from each test split; every
// accuracy is measured on the held-out remainder. Paths inside manifests are
// relative to the run directory so two runs can be compared byte for byte.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "vitmerge/checkpoint.hpp"
#include "vitmerge/config.hpp"
#include "vitmerge/gating.hpp"
#include "vitmerge/merge.hpp"
#include "vitmerge/train.hpp"

namespace vitmerge {

namespace fs = std::filesystem;
using nlohmann::json;

class Run {
 public:
  Run(ExperimentConfig config, fs::path dir, std::ostream* log = nullptr)
      : config_(std::move(config)), dir_(std::move(dir)), log_(log) {
    config_.validate();
  }

  const ExperimentConfig& config() const { return config_; }
  const fs::path& dir() const { return dir_; }
  fs::path path(const std::string& rel) const { return dir_ / rel; }

  /// Absolute path of an upstream artifact; throws IoError naming the file
  /// and the command that produces it.
  fs::path require(const std::string& rel, const char* producer) const {
    const fs::path p = resolve(rel);
    if (!fs::exists(p))
      throw IoError("missing artifact " + p.string() + " (run `vitmerge " + producer + "` first)");
    return p;
  }

  fs::path resolve(const std::string& rel) const {
    const fs::path p(rel);
    return p.is_absolute() ? p : dir_ / p;
  }

  void note(const std::string& msg) const {
    if (log_) *log_ << msg << '\n' << std::flush;
  }

  std::size_t num_tasks() const { return config_.tasks.size(); }
  int task_id(std::size_t k) const { return config_.tasks[k].task_id; }

  std::size_t task_index(int id) const {
    for (std::size_t k = 0; k < num_tasks(); ++k)
      if (task_id(k) == id) return k;
    throw ConfigError("task " + std::to_string(id) + " is not part of the configuration");
  }

 private:
  ExperimentConfig config_;
  fs::path dir_;
  std::ostream* log_;
};

namespace paths {
inline std::string data(int id, const char* part) {
  return "data/task" + std::to_string(id) + "_" + part + ".bin";
}
inline std::string task_model(int id) { return "models/task" + std::to_string(id) + ".ckpt"; }
inline std::string scratch_model(int id) {
  return "models/scratch_task" + std::to_string(id) + ".ckpt";
}
inline std::string grams(int id) { return "grams/task" + std::to_string(id) + ".gram"; }
inline std::string similarity(SimilarityStrategy s) {
  return std::string("reports/similarity_") + strategy_name(s) + ".json";
}
inline const std::string kBase = "models/base.ckpt";
inline const std::string kGate = "models/gate.ckpt";
}  // namespace paths

inline void write_json(const fs::path& path, const json& j) {
  io::write_file(path, j.dump(2) + "\n");
}

inline json read_json(const fs::path& path) {
  try {
    return json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

namespace detail {

inline TrainConfig seeded(TrainConfig tc, std::uint64_t seed) {
  tc.seed = seed;
  return tc;
}

/// Settings that change upstream artifacts. Merge settings and the output
/// directory may differ between commands on the same run.
inline json upstream_settings(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("merge");
  j.erase("output_dir");
  return j;
}

/// Refuses to mix artifacts produced under different settings.
inline void check_run_config(const Run& run) {
  const fs::path echo = run.require("config.json", "gen-data");
  json recorded = read_json(echo);
  recorded.erase("merge");
  recorded.erase("output_dir");
  const json patch = json::diff(recorded, upstream_settings(run.config()));
  if (!patch.empty())
    throw ConfigError(echo.string() + " was written with different settings (first difference at " +
                      patch[0].at("path").get<std::string>() +
                      "); rerun gen-data or choose another --out");
}

inline Dataset load_split(const Run& run, int id, const char* part) {
  return load_dataset(run.require(paths::data(id, part), "gen-data"));
}

inline std::vector<Dataset> load_splits(const Run& run, const char* part) {
  std::vector<Dataset> out;
  for (std::size_t k = 0; k < run.num_tasks(); ++k) out.push_back(load_split(run, run.task_id(k), part));
  return out;
}

inline std::vector<ViTParams> load_models(const Run& run, const std::vector<std::string>& rels,
                                          const char* producer) {
  std::vector<ViTParams> out;
  for (const auto& r : rels) out.push_back(load_vit(run.require(r, producer)));
  return out;
}

inline std::vector<std::string> task_models(const Run& run) {
  std::vector<std::string> out;
  for (std::size_t k = 0; k < run.num_tasks(); ++k) out.push_back(paths::task_model(run.task_id(k)));
  return out;
}

inline std::vector<std::string> scratch_models(const Run& run) {
  std::vector<std::string> out;
  for (std::size_t k = 0; k < run.num_tasks(); ++k)
    out.push_back(paths::scratch_model(run.task_id(k)));
  return out;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline json loss_log(const TrainLog& log) { return log.epoch_loss; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Steps

/// Generates every task's train and test split, then splits each test set
/// into the gate/gram pool and the held-out evaluation set.
inline void gen_data(const Run& run) {
  const auto& c = run.config();
  write_json(run.path("config.json"), to_json(c));
  for (std::size_t k = 0; k < run.num_tasks(); ++k) {
    const auto spec = c.task_spec(k);
    const Dataset train = generate(spec, Split::Train, c.data.train_per_task, c.model.image_size,
                                   c.model.channels);
    const Dataset test = generate(spec, Split::Test, c.data.test_per_task, c.model.image_size,
                                  c.model.channels);
    const auto pool_idx = sample_indices(test.size(), c.data.gate_fraction, c.pool_seed());
    save_dataset(run.path(paths::data(spec.task_id, "train")), train);
    save_dataset(run.path(paths::data(spec.task_id, "test")), test);
    save_dataset(run.path(paths::data(spec.task_id, "pool")), subset(test, pool_idx));
    save_dataset(run.path(paths::data(spec.task_id, "heldout")),
                 subset(test, complement_indices(test.size(), pool_idx)));
  }
  run.note("gen-data: " + std::to_string(run.num_tasks()) + " tasks");
}

inline void pretrain_step(const Run& run) {
  detail::check_run_config(run);
  const auto& c = run.config();
  const auto t0 = std::chrono::steady_clock::now();
  const auto trained =
      pretrain(c.model, detail::load_splits(run, "train"), detail::seeded(c.pretrain, c.pretrain_seed()));
  save_vit(run.path(paths::kBase), trained.model);
  write_json(run.path("models/base.json"),
             {{"seed", c.pretrain_seed()}, {"epoch_loss", detail::loss_log(trained.log)}});
  run.note("pretrain: " + detail::fixed(detail::seconds_since(t0), 1) + "s");
}

/// Fine-tunes the shared base on each task, and trains the from-scratch
/// controls from independent initialisations with the same recipe.
inline void finetune_step(const Run& run) {
  detail::check_run_config(run);
  const auto& c = run.config();
  const auto t0 = std::chrono::steady_clock::now();
  const ViTParams base = load_vit(run.require(paths::kBase, "pretrain"));
  json record = json::object();
  for (std::size_t k = 0; k < run.num_tasks(); ++k) {
    const int id = run.task_id(k);
    const Dataset train = detail::load_split(run, id, "train");
    const Dataset heldout = detail::load_split(run, id, "heldout");
    const TrainConfig tc = detail::seeded(c.finetune, c.finetune_seed(k));

    auto ft = finetune(base, train, tc);
    ft.model.meta.lineage = "pretrained";
    save_vit(run.path(paths::task_model(id)), ft.model);

    ViTConfig sc = c.model;
    sc.num_classes = train.num_classes;
    auto scratch = finetune(init_vit(sc, c.scratch_init_seed(k)), train, tc);
    scratch.model.meta.lineage = "from-scratch";
    save_vit(run.path(paths::scratch_model(id)), scratch.model);

    record[std::to_string(id)] = {{"accuracy", accuracy(ft.model, heldout)},
                                  {"scratch_accuracy", accuracy(scratch.model, heldout)},
                                  {"epoch_loss", detail::loss_log(ft.log)},
                                  {"scratch_epoch_loss", detail::loss_log(scratch.log)}};
  }
  write_json(run.path("models/finetune.json"), record);
  run.note("finetune: " + detail::fixed(detail::seconds_since(t0), 1) + "s");
}

/// Trains the task-ID gate on the pool and records its held-out accuracy.
inline void train_gate_step(const Run& run) {
  detail::check_run_config(run);
  const auto& c = run.config();
  const auto t0 = std::chrono::steady_clock::now();
  GateConfig gc;
  gc.input_dim = c.image_elems();
  gc.hidden = c.gate.hidden;
  gc.num_tasks = run.num_tasks();
  const TrainConfig tc = detail::seeded(c.gate.train, c.gate_seed());
  const auto trained = train_gate(init_gate(gc, tc.seed), detail::load_splits(run, "pool"), tc);
  save_gate(run.path(paths::kGate), trained.gate, tc.seed);
  const double acc = gate_accuracy(trained.gate, detail::load_splits(run, "heldout"));
  write_json(run.path("models/gate.json"), {{"heldout_accuracy", acc},
                                            {"seed", tc.seed},
                                            {"epoch_loss", detail::loss_log(trained.log)}});
  run.note("train-gate: held-out accuracy " + detail::fixed(100 * acc, 2) + "% in " +
           detail::fixed(detail::seconds_since(t0), 1) + "s");
}

/// Gram statistics of every fine-tuned model on its task's pool.
inline void grams_step(const Run& run) {
  detail::check_run_config(run);
  for (std::size_t k = 0; k < run.num_tasks(); ++k) {
    const int id = run.task_id(k);
    const ViTParams model = load_vit(run.require(paths::task_model(id), "finetune"));
    save_grams(run.path(paths::grams(id)), collect_grams(model, detail::load_split(run, id, "pool")));
  }
  run.note("grams: " + std::to_string(run.num_tasks()) + " models");
}

inline json similarity_json(const SimilarityReport& r) {
  json blocks = json::object();
  for (std::size_t b = 0; b < r.attention.size(); ++b)
    blocks[std::to_string(b)] = {{"attention", r.attention[b]}, {"mlp", r.mlp[b]}};
  return {{"strategy", strategy_name(r.strategy)}, {"num_models", r.num_models}, {"blocks", blocks}};
}

inline SimilarityReport similarity_from_json(const json& j, const std::string& source) {
  try {
    SimilarityReport r;
    r.strategy = parse_strategy(j.at("strategy"));
    r.num_models = j.at("num_models");
    const auto& blocks = j.at("blocks");
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const auto& e = blocks.at(std::to_string(b));
      r.attention.push_back(e.at("attention"));
      r.mlp.push_back(e.at("mlp"));
    }
    return r;
  } catch (const json::exception& e) {
    throw IoError(source + ": malformed similarity report (" + e.what() + ")");
  }
}

inline SimilarityReport similarity_step(const Run& run, SimilarityStrategy strategy) {
  detail::check_run_config(run);
  const auto models = detail::load_models(run, detail::task_models(run), "finetune");
  const auto report = similarity(models, strategy);
  write_json(run.path(paths::similarity(strategy)), similarity_json(report));
  return report;
}

// ---------------------------------------------------------------------------
// Merging

struct MergeRequest {
  std::string method;             // avgmean | taskarith | regmean | gated-avgmean | gated-regmean
  std::vector<std::size_t> m;     // gated methods only
  double lambda = 0.3;
  double alpha = 0.9;
  SimilarityStrategy strategy = SimilarityStrategy::ConcatCombined;
  std::optional<int> classifier_task;  // unset: config value, else the first input's task
  std::vector<std::string> inputs;     // empty: the fine-tuned task models
  std::string name;                 // empty: derived from the method (and m)
};

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m{"avgmean", "taskarith", "regmean", "gated-avgmean",
                                          "gated-regmean"};
  return m;
}

inline MergeRequest merge_request(const ExperimentConfig& c, std::string method) {
  MergeRequest r;
  r.method = std::move(method);
  r.m = c.merge.m;
  r.lambda = c.merge.lambda;
  r.alpha = c.merge.alpha;
  r.strategy = c.merge.strategy;
  return r;
}

inline std::string gated_name(const std::string& method, std::size_t m) {
  return method + "-m" + std::to_string(m);
}

namespace detail {

/// Grams for each input: the stored file for a default task model, otherwise
/// collected on the pool of the input's task.
inline std::vector<GramStats> grams_for(const Run& run, const std::vector<std::string>& rels,
                                        const std::vector<ViTParams>& models) {
  std::vector<GramStats> out;
  for (std::size_t i = 0; i < rels.size(); ++i) {
    const int id = models[i].meta.task_id;
    if (rels[i] == paths::task_model(id)) {
      out.push_back(load_grams(run.require(paths::grams(id), "grams")));
    } else {
      out.push_back(collect_grams(models[i], load_split(run, id, "pool")));
    }
  }
  return out;
}

inline json string_list(const std::vector<std::string>& v) { return v; }

}  // namespace detail

/// Runs one merge request and returns the names written under merged/.
inline std::vector<std::string> merge_step(const Run& run, const MergeRequest& req) {
  if (std::find(known_methods().begin(), known_methods().end(), req.method) == known_methods().end())
    throw ConfigError("unknown merge method '" + req.method + "'");
  detail::check_run_config(run);
  const auto rels = req.inputs.empty() ? detail::task_models(run) : req.inputs;
  const auto models = detail::load_models(run, rels, "finetune");
  std::vector<std::string> written;

  if (!req.method.starts_with("gated-")) {
    MergeRecipe recipe;
    recipe.method = req.method == "avgmean"     ? MergeMethod::AvgMean
                    : req.method == "taskarith" ? MergeMethod::TaskArithmetic
                                                : MergeMethod::RegMean;
    recipe.lambda = req.lambda;
    recipe.alpha = req.alpha;
    recipe.classifier_task = req.classifier_task.value_or(run.config().merge.classifier_task);
    if (!req.classifier_task &&
        std::none_of(models.begin(), models.end(),
                     [&](const ViTParams& m) { return m.meta.task_id == recipe.classifier_task; }))
      recipe.classifier_task = models.front().meta.task_id;
    ViTParams base;
    std::vector<GramStats> grams;
    if (recipe.method == MergeMethod::TaskArithmetic) base = load_vit(run.require(paths::kBase, "pretrain"));
    if (recipe.method == MergeMethod::RegMean) grams = detail::grams_for(run, rels, models);
    const ViTParams merged = merge_static(recipe, models, &base, &grams);
    const std::string name = req.name.empty() ? req.method : req.name;
    save_vit(run.path("merged/" + name + ".ckpt"), merged);
    write_json(run.path("merged/" + name + ".json"),
               {{"kind", "static"},
                {"method", req.method},
                {"inputs", detail::string_list(rels)},
                {"checkpoint", "merged/" + name + ".ckpt"},
                {"lambda", req.lambda},
                {"alpha", req.alpha},
                {"classifier_task", recipe.classifier_task}});
    written.push_back(name);
    return written;
  }

  if (req.m.empty()) throw ConfigError("gated merges need at least one m value");
  const StaticMethod sm = req.method == "gated-regmean" ? StaticMethod::RegMean : StaticMethod::AvgMean;
  const auto report = similarity_from_json(
      read_json(run.require(paths::similarity(req.strategy), "similarity")),
      paths::similarity(req.strategy));
  if (report.num_models != models.size())
    throw MergeError("similarity report covers " + std::to_string(report.num_models) +
                     " models, merge has " + std::to_string(models.size()));
  run.require(paths::kGate, "train-gate");
  std::vector<std::string> gram_rels;
  if (sm == StaticMethod::RegMean) {
    for (std::size_t i = 0; i < rels.size(); ++i) {
      const int id = models[i].meta.task_id;
      if (rels[i] != paths::task_model(id))
        throw ConfigError("gated-regmean uses stored grams and accepts only the task models");
      run.require(paths::grams(id), "grams");
      gram_rels.push_back(paths::grams(id));
    }
  }
  for (std::size_t m : req.m) {
    const MergePlan plan = plan_from_m(report, m, sm);
    const std::string name = req.name.empty() ? gated_name(req.method, m)
                                              : (req.m.size() == 1 ? req.name : gated_name(req.name, m));
    write_json(run.path("merged/" + name + ".json"),
               {{"kind", "gated"},
                {"method", req.method},
                {"m", plan.m},
                {"requested_m", plan.requested_m},
                {"clamped", plan.clamped},
                {"static_method", static_method_name(sm)},
                {"strategy", strategy_name(req.strategy)},
                {"gated_attention", plan.gated_attention},
                {"gated_mlp", plan.gated_mlp},
                {"inputs", detail::string_list(rels)},
                {"gate", paths::kGate},
                {"grams", detail::string_list(gram_rels)},
                {"alpha", req.alpha}});
    written.push_back(name);
  }
  return written;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRow {
  std::string name;
  std::string method;
  int m = -1;  // -1: not a gated model
  std::map<int, double> per_task;
  std::map<int, double> selection;  // gated models only
  double avg = 0.0;
  std::size_t params = 0;
  std::uint64_t flops = 0;
  std::uint64_t seed = 0;
};

inline json to_json(const EvalRow& r) {
  json per_task = json::object(), selection = json::object();
  for (const auto& [id, a] : r.per_task) per_task[std::to_string(id)] = a;
  for (const auto& [id, a] : r.selection) selection[std::to_string(id)] = a;
  json j = {{"name", r.name},   {"method", r.method}, {"per_task", per_task}, {"avg", r.avg},
            {"params", r.params}, {"flops", r.flops},   {"seed", r.seed}};
  j["m"] = r.m < 0 ? json(nullptr) : json(r.m);
  if (!r.selection.empty()) j["selection_accuracy"] = selection;
  return j;
}

inline EvalRow eval_row_from_json(const json& j) {
  EvalRow r;
  r.name = j.at("name");
  r.method = j.at("method");
  r.m = j.at("m").is_null() ? -1 : j.at("m").get<int>();
  for (const auto& [k, v] : j.at("per_task").items()) r.per_task[std::stoi(k)] = v.get<double>();
  if (j.contains("selection_accuracy"))
    for (const auto& [k, v] : j.at("selection_accuracy").items())
      r.selection[std::stoi(k)] = v.get<double>();
  r.avg = j.at("avg");
  r.params = j.at("params");
  r.flops = j.at("flops");
  r.seed = j.at("seed");
  return r;
}

namespace detail {

inline void finish_row(EvalRow& r) {
  double s = 0;
  for (const auto& [_, a] : r.per_task) s += a;
  r.avg = r.per_task.empty() ? 0.0 : s / static_cast<double>(r.per_task.size());
}

inline std::size_t head_params(const ViTParams& m) {
  return m.params[names::kHeadWeight].size() + m.params[names::kHeadBias].size();
}

/// Every model on its own task; params count the N separate models.
inline EvalRow eval_individuals(const Run& run, const std::string& name,
                                const std::vector<std::string>& rels) {
  EvalRow r;
  r.name = name;
  r.method = name;
  for (const auto& rel : rels) {
    const ViTParams m = load_vit(run.require(rel, "finetune"));
    r.per_task[m.meta.task_id] = accuracy(m, load_split(run, m.meta.task_id, "heldout"));
    r.params += param_count(m);
    r.flops = std::max(r.flops, flops_estimate(m.config));
  }
  return r;
}

/// Static merge: one backbone, each task evaluated with its own head swapped
/// in. Params count the backbone once plus every distinct task head.
inline EvalRow eval_static(const Run& run, const std::string& name, const json& manifest) {
  EvalRow r;
  r.name = name;
  r.method = manifest.at("method");
  const ViTParams merged = load_vit(run.require(manifest.at("checkpoint"), "merge"));
  const auto inputs = load_models(run, manifest.at("inputs").get<std::vector<std::string>>(), "finetune");
  r.params = param_count(merged) - head_params(merged);
  r.flops = flops_estimate(merged.config);
  for (const auto& src : inputs) {
    const int id = src.meta.task_id;
    if (r.per_task.contains(id)) continue;
    ViTParams m = merged;
    copy_classifier(m, src);
    r.per_task[id] = accuracy(m, load_split(run, id, "heldout"));
    r.params += head_params(src);
  }
  return r;
}

inline EvalRow eval_gated(const Run& run, const std::string& name, const json& manifest) {
  EvalRow r;
  r.name = name;
  r.method = manifest.at("method");
  r.m = manifest.at("m");
  const auto rels = manifest.at("inputs").get<std::vector<std::string>>();
  auto models = load_models(run, rels, "finetune");
  GateNet gate = load_gate(run.require(manifest.at("gate"), "train-gate"));
  MergePlan plan;
  plan.m = manifest.at("m");
  plan.requested_m = manifest.at("requested_m");
  plan.clamped = manifest.at("clamped");
  plan.gated_attention = manifest.at("gated_attention").get<std::set<std::size_t>>();
  plan.gated_mlp = manifest.at("gated_mlp").get<std::set<std::size_t>>();
  plan.static_method =
      manifest.at("static_method") == "regmean" ? StaticMethod::RegMean : StaticMethod::AvgMean;
  std::vector<GramStats> grams;
  for (const auto& g : manifest.at("grams").get<std::vector<std::string>>())
    grams.push_back(load_grams(run.require(g, "grams")));
  std::vector<int> ids;
  for (const auto& m : models) ids.push_back(m.meta.task_id);
  const auto mm = MergedModel::build(std::move(models), std::move(gate), plan,
                                     grams.empty() ? nullptr : &grams, manifest.at("alpha"));
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto e = evaluate_gated(mm, load_split(run, ids[k], "heldout"), k);
    r.per_task[ids[k]] = e.accuracy;
    r.selection[ids[k]] = e.selection_accuracy;
  }
  r.params = mm.param_count();
  r.flops = mm.flops();
  return r;
}

}  // namespace detail

/// Evaluates a named model and writes eval/<name>.json. Names resolve as:
/// "individual" or "scratch-individual" (every task model on its task), a
/// merged/<name>.json manifest, a models/<name>.ckpt, or a checkpoint path.
inline EvalRow eval_step(const Run& run, const std::string& name) {
  detail::check_run_config(run);
  EvalRow r;
  if (name == "individual") {
    r = detail::eval_individuals(run, name, detail::task_models(run));
  } else if (name == "scratch-individual") {
    r = detail::eval_individuals(run, name, detail::scratch_models(run));
  } else if (fs::exists(run.path("merged/" + name + ".json"))) {
    const json manifest = read_json(run.path("merged/" + name + ".json"));
    r = manifest.at("kind") == "gated" ? detail::eval_gated(run, name, manifest)
                                       : detail::eval_static(run, name, manifest);
  } else if (fs::exists(run.path("models/" + name + ".ckpt"))) {
    r = detail::eval_individuals(run, name, {"models/" + name + ".ckpt"});
    r.method = "individual";
  } else if (name.ends_with(".ckpt")) {
    r = detail::eval_individuals(run, fs::path(name).stem().string(), {name});
    r.method = "individual";
  } else {
    throw IoError("no model named '" + name + "': expected " +
                  run.path("merged/" + name + ".json").string() + " or " +
                  run.path("models/" + name + ".ckpt").string());
  }
  detail::finish_row(r);
  r.seed = run.config().seed;
  write_json(run.path("eval/" + r.name + ".json"), to_json(r));
  return r;
}

// ---------------------------------------------------------------------------
// Reporting

namespace detail {

inline int method_rank(const std::string& method) {
  static const std::vector<std::string> order{"individual", "scratch-individual", "scratch-avgmean",
                                              "avgmean",    "taskarith",          "regmean",
                                              "gated-avgmean", "gated-regmean"};
  const auto it = std::find(order.begin(), order.end(), method);
  return static_cast<int>(it - order.begin());
}

inline bool row_less(const EvalRow& a, const EvalRow& b) {
  return std::tuple(method_rank(a.method), a.m, a.name, a.seed) <
         std::tuple(method_rank(b.method), b.m, b.name, b.seed);
}

inline std::string pct(double v) { return fixed(100.0 * v, 2); }

}  // namespace detail

struct Report {
  std::vector<EvalRow> rows;   // one per (run, evaluated model)
  std::vector<EvalRow> means;  // mean over seeds per name, when several runs
};

inline Report collect_report(const std::vector<fs::path>& run_dirs) {
  Report rep;
  for (const auto& dir : run_dirs) {
    const fs::path eval_dir = dir / "eval";
    if (!fs::is_directory(eval_dir))
      throw IoError("missing artifact " + eval_dir.string() + " (run `vitmerge eval` first)");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(eval_dir))
      if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) rep.rows.push_back(eval_row_from_json(read_json(f)));
  }
  std::sort(rep.rows.begin(), rep.rows.end(), detail::row_less);
  if (run_dirs.size() > 1) {
    std::map<std::string, std::vector<const EvalRow*>> by_name;
    for (const auto& r : rep.rows) by_name[r.name].push_back(&r);
    for (const auto& [name, group] : by_name) {
      EvalRow mean = *group.front();
      mean.seed = 0;
      std::map<int, double> sums;
      for (const auto* r : group)
        for (const auto& [id, a] : r->per_task) sums[id] += a;
      for (auto& [id, a] : mean.per_task) a = sums[id] / static_cast<double>(group.size());
      mean.selection.clear();
      double avg = 0;
      for (const auto* r : group) avg += r->avg;
      mean.avg = avg / static_cast<double>(group.size());
      rep.means.push_back(mean);
    }
    std::sort(rep.means.begin(), rep.means.end(), detail::row_less);
  }
  return rep;
}

inline std::string report_text(const Report& rep) {
  std::set<int> ids;
  for (const auto& r : rep.rows)
    for (const auto& [id, _] : r.per_task) ids.insert(id);
  std::ostringstream os;
  auto header = [&](const char* title) {
    os << title << '\n' << std::left << std::setw(24) << "method" << std::setw(4) << "m";
    for (int id : ids) os << std::right << std::setw(9) << ("task" + std::to_string(id));
    os << std::setw(9) << "avg" << std::setw(12) << "params" << std::setw(14) << "flops"
       << std::setw(22) << "seed" << '\n';
  };
  auto line = [&](const EvalRow& r, bool show_seed) {
    os << std::left << std::setw(24) << r.name << std::setw(4) << (r.m < 0 ? "-" : std::to_string(r.m));
    for (int id : ids)
      os << std::right << std::setw(9) << (r.per_task.contains(id) ? detail::pct(r.per_task.at(id)) : "-");
    os << std::setw(9) << detail::pct(r.avg) << std::setw(12) << r.params << std::setw(14) << r.flops
       << std::setw(22) << (show_seed ? std::to_string(r.seed) : "mean") << '\n';
  };
  header("Accuracy (%) on held-out test data");
  for (const auto& r : rep.rows) line(r, true);
  if (!rep.means.empty()) {
    os << '\n';
    header("Mean over seeds");
    for (const auto& r : rep.means) line(r, false);
  }
  return os.str();
}

inline json report_json(const Report& rep) {
  json rows = json::array(), means = json::array();
  for (const auto& r : rep.rows) rows.push_back(to_json(r));
  for (const auto& r : rep.means) {
    json j = to_json(r);
    j.erase("seed");
    means.push_back(j);
  }
  json out = {{"rows", rows}};
  if (!rep.means.empty()) out["mean_over_seeds"] = means;
  return out;
}

/// Aggregates eval rows of one or more runs into reports/report.{txt,json}
/// under `out_dir`.
inline Report report_step(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
  const Report rep = collect_report(run_dirs);
  io::write_file(out_dir / "reports" / "report.txt", report_text(rep));
  write_json(out_dir / "reports" / "report.json", report_json(rep));
  return rep;
}

// ---------------------------------------------------------------------------
// Full pipeline

/// Every step in order, with the default merge sweep: static AvgMean, Task
/// Arithmetic and RegMean, the from-scratch AvgMean control, and both gated
/// variants across the configured m list.
inline void run_pipeline(const Run& run) {
  const auto t0 = std::chrono::steady_clock::now();
  gen_data(run);
  pretrain_step(run);
  finetune_step(run);
  train_gate_step(run);
  grams_step(run);
  for (auto s : {SimilarityStrategy::ConcatCombined, SimilarityStrategy::ConcatSeparate,
                 SimilarityStrategy::SeparateCombined, SimilarityStrategy::SeparateSeparate})
    similarity_step(run, s);

  const auto& c = run.config();
  std::vector<std::string> names{"individual", "scratch-individual"};
  for (const char* method : {"avgmean", "taskarith", "regmean", "gated-avgmean", "gated-regmean"})
    for (auto& n : merge_step(run, merge_request(c, method))) names.push_back(n);
  auto scratch = merge_request(c, "avgmean");
  scratch.inputs = detail::scratch_models(run);
  scratch.name = "scratch-avgmean";
  merge_step(run, scratch);
  names.push_back("scratch-avgmean");

  for (const auto& n : names) eval_step(run, n);
  report_step({run.dir()}, run.dir());
  run.note("pipeline: " + detail::fixed(detail::seconds_since(t0), 1) + "s");
}

}  // namespace vitmerge
