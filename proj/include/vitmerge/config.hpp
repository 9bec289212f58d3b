#pragma once

// Experiment configuration. Every field has a default; a config file only
// lists what it changes. Unknown keys and wrong types are ConfigErrors naming
// the key path (e.g. "merge.alpha").

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "vitmerge/data.hpp"
#include "vitmerge/gatenet.hpp"
#include "vitmerge/gating.hpp"
#include "vitmerge/train.hpp"
#include "vitmerge/vit.hpp"

namespace vitmerge {

inline constexpr int kSchemaVersion = 1;

struct TaskEntry {
  int task_id = 1;
  std::string family = "bars";
  std::size_t num_classes = 4;
  double noise_std = 0.3;
};

struct DataSettings {
  std::size_t train_per_task = 300;
  std::size_t test_per_task = 600;
  double gate_fraction = 0.15;
};

struct GateSettings {
  std::vector<std::size_t> hidden{64};
  TrainConfig train;
};

struct MergeSettings {
  double alpha = 0.9;
  double lambda = 0.3;
  SimilarityStrategy strategy = SimilarityStrategy::ConcatCombined;
  std::vector<std::size_t> m{0, 1, 2, 4};
  int classifier_task = 1;
};

struct ExperimentConfig {
  ViTConfig model;  // num_classes is ignored; heads are sized per task
  std::vector<TaskEntry> tasks;
  DataSettings data;
  TrainConfig pretrain;
  TrainConfig finetune;
  GateSettings gate;
  MergeSettings merge;
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";

  void validate() const {
    ViTConfig probe = model;
    probe.num_classes = 1;
    probe.validate();
    if (tasks.size() < 2) throw ConfigError("tasks: at least two tasks are required");
    std::set<int> ids;
    for (const auto& t : tasks) {
      if (t.task_id < 1) throw ConfigError("tasks: task_id must be positive");
      if (!ids.insert(t.task_id).second)
        throw ConfigError("tasks: duplicate task_id " + std::to_string(t.task_id));
      if (t.num_classes < 2) throw ConfigError("tasks: num_classes must be at least 2");
      if (std::find(known_families().begin(), known_families().end(), t.family) ==
          known_families().end())
        throw ConfigError("tasks: unknown family '" + t.family + "'");
      if (!(t.noise_std >= 0.0)) throw ConfigError("tasks: noise_std must be non-negative");
    }
    if (!(data.gate_fraction > 0.0 && data.gate_fraction < 1.0))
      throw ConfigError("data.gate_fraction must lie in (0, 1)");
    for (const auto& t : tasks)
      if (data.train_per_task < t.num_classes || data.test_per_task < t.num_classes)
        throw ConfigError("data: split sizes must cover every class");
    if (static_cast<std::size_t>(data.gate_fraction * static_cast<double>(data.test_per_task)) < 1)
      throw ConfigError("data.gate_fraction leaves no gate samples");
    pretrain.validate();
    finetune.validate();
    gate.train.validate();
    MergeRecipe{MergeMethod::RegMean, merge.lambda, merge.alpha, merge.classifier_task}.validate();
    if (!ids.contains(merge.classifier_task))
      throw ConfigError("merge.classifier_task does not name a configured task");
    if (merge.m.empty()) throw ConfigError("merge.m must list at least one value");
  }

  /// Named seeds. Each stream is a pure function of the base seed.
  std::uint64_t data_seed(int task_id) const {
    return derive_seed(seed, static_cast<std::uint64_t>(task_id));
  }
  std::uint64_t pool_seed() const { return seed; }
  std::uint64_t pretrain_seed() const { return seed; }
  std::uint64_t finetune_seed(std::size_t k) const { return derive_seed(seed, 100 + k); }
  std::uint64_t scratch_init_seed(std::size_t k) const { return derive_seed(seed, 200 + k); }
  std::uint64_t gate_seed() const { return derive_seed(seed, 7); }

  SyntheticTaskSpec task_spec(std::size_t k) const {
    const auto& t = tasks.at(k);
    return {t.task_id, t.num_classes, t.family, t.noise_std, data_seed(t.task_id)};
  }

  std::size_t image_elems() const { return model.channels * model.image_size * model.image_size; }
};

namespace detail {

class JsonReader {
 public:
  JsonReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
    for (const auto& [key, _] : j_.items()) pending_.insert(key);
  }

  template <class V>
  void get(const char* key, V& out) {
    if (!j_.contains(key)) return;
    pending_.erase(key);
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_unsigned_v<V>) {
        if (!v.is_number_unsigned()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<V>) {
        if (!v.is_number_integer()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.template get<V>();
    } catch (const std::exception&) {
      throw ConfigError(child(key) + " has the wrong type (" + v.dump() + ")");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  JsonReader sub(const char* key) {
    pending_.erase(key);
    return JsonReader(j_.at(key), child(key));
  }
  const nlohmann::json& raw(const char* key) {
    pending_.erase(key);
    return j_.at(key);
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "config" : path_; }

  /// Rejects every key that no get/sub call consumed.
  void finish() const {
    if (!pending_.empty()) throw ConfigError("unknown key " + child(*pending_.begin()));
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> pending_;
};

inline void read_train(JsonReader r, TrainConfig& tc) {
  r.get("epochs", tc.epochs);
  r.get("batch_size", tc.batch_size);
  r.get("learning_rate", tc.learning_rate);
  r.get("momentum", tc.momentum);
  r.get("weight_decay", tc.weight_decay);
  r.finish();
}

inline nlohmann::json write_train(const TrainConfig& tc) {
  return {{"epochs", tc.epochs},
          {"batch_size", tc.batch_size},
          {"learning_rate", tc.learning_rate},
          {"momentum", tc.momentum},
          {"weight_decay", tc.weight_decay}};
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::JsonReader r(j, "");
  int version = 0;
  if (!r.has("schema_version")) throw ConfigError("schema_version is required");
  r.get("schema_version", version);
  if (version != kSchemaVersion)
    throw ConfigError("schema_version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kSchemaVersion) + ")");
  r.get("seed", c.seed);
  r.get("output_dir", c.output_dir);
  if (r.has("model")) {
    auto m = r.sub("model");
    m.get("image_size", c.model.image_size);
    m.get("patch_size", c.model.patch_size);
    m.get("channels", c.model.channels);
    m.get("dim", c.model.dim);
    m.get("depth", c.model.depth);
    m.get("heads", c.model.heads);
    m.get("mlp_ratio", c.model.mlp_ratio);
    m.finish();
  }
  if (r.has("tasks")) {
    const auto& arr = r.raw("tasks");
    if (!arr.is_array()) throw ConfigError("tasks must be an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      detail::JsonReader t(arr[i], "tasks[" + std::to_string(i) + "]");
      TaskEntry e;
      t.get("task_id", e.task_id);
      t.get("family", e.family);
      t.get("num_classes", e.num_classes);
      t.get("noise_std", e.noise_std);
      t.finish();
      c.tasks.push_back(e);
    }
  }
  if (r.has("data")) {
    auto d = r.sub("data");
    d.get("train_per_task", c.data.train_per_task);
    d.get("test_per_task", c.data.test_per_task);
    d.get("gate_fraction", c.data.gate_fraction);
    d.finish();
  }
  if (r.has("pretrain")) detail::read_train(r.sub("pretrain"), c.pretrain);
  if (r.has("finetune")) detail::read_train(r.sub("finetune"), c.finetune);
  if (r.has("gate")) {
    auto g = r.sub("gate");
    g.get("hidden", c.gate.hidden);
    if (g.has("train")) detail::read_train(g.sub("train"), c.gate.train);
    g.finish();
  }
  if (r.has("merge")) {
    auto m = r.sub("merge");
    m.get("alpha", c.merge.alpha);
    m.get("lambda", c.merge.lambda);
    std::string strategy = strategy_name(c.merge.strategy);
    m.get("strategy", strategy);
    try {
      c.merge.strategy = parse_strategy(strategy);
    } catch (const ConfigError& e) {
      throw ConfigError("merge.strategy: " + std::string(e.what()));
    }
    m.get("m", c.merge.m);
    m.get("classifier_task", c.merge.classifier_task);
    m.finish();
  }
  r.finish();
  c.validate();
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : c.tasks)
    tasks.push_back({{"task_id", t.task_id},
                     {"family", t.family},
                     {"num_classes", t.num_classes},
                     {"noise_std", t.noise_std}});
  return {{"schema_version", kSchemaVersion},
          {"seed", c.seed},
          {"output_dir", c.output_dir},
          {"model",
           {{"image_size", c.model.image_size},
            {"patch_size", c.model.patch_size},
            {"channels", c.model.channels},
            {"dim", c.model.dim},
            {"depth", c.model.depth},
            {"heads", c.model.heads},
            {"mlp_ratio", c.model.mlp_ratio}}},
          {"tasks", tasks},
          {"data",
           {{"train_per_task", c.data.train_per_task},
            {"test_per_task", c.data.test_per_task},
            {"gate_fraction", c.data.gate_fraction}}},
          {"pretrain", detail::write_train(c.pretrain)},
          {"finetune", detail::write_train(c.finetune)},
          {"gate", {{"hidden", c.gate.hidden}, {"train", detail::write_train(c.gate.train)}}},
          {"merge",
           {{"alpha", c.merge.alpha},
            {"lambda", c.merge.lambda},
            {"strategy", strategy_name(c.merge.strategy)},
            {"m", c.merge.m},
            {"classifier_task", c.merge.classifier_task}}}};
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing config file: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace vitmerge
