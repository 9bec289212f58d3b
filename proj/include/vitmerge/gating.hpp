#pragma once

#include <algorithm>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "vitmerge/gatenet.hpp"
#include "vitmerge/merge.hpp"
#include "vitmerge/vit.hpp"

namespace vitmerge {

/// P(x) = softmax(G(x)) for one image (any shape flattening to input_dim).
inline std::vector<double> gate_probs(const GateNet& gate, const Tensor<float>& image) {
  audit_gate(gate);
  if (image.size() != gate.config.input_dim)
    throw GateError("gate expects " + std::to_string(gate.config.input_dim) +
                    " input values, got " + std::to_string(image.size()));
  const Tensor<float> logits =
      gate_logits(gate, Tensor<float>({1, image.size()}, {image.data().begin(), image.data().end()}));
  Tensor<double> z({logits.size()});
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = logits[i];
  const auto p = softmax(z);
  return {p.data().begin(), p.data().end()};
}

// ---------------------------------------------------------------------------
// Weight similarity

enum class SimilarityStrategy { ConcatCombined, ConcatSeparate, SeparateCombined, SeparateSeparate };

inline const char* strategy_name(SimilarityStrategy s) {
  switch (s) {
    case SimilarityStrategy::ConcatCombined: return "concat-combined";
    case SimilarityStrategy::ConcatSeparate: return "concat-separate";
    case SimilarityStrategy::SeparateCombined: return "separate-combined";
    case SimilarityStrategy::SeparateSeparate: return "separate-separate";
  }
  return "?";
}

inline SimilarityStrategy parse_strategy(const std::string& s) {
  for (auto v : {SimilarityStrategy::ConcatCombined, SimilarityStrategy::ConcatSeparate,
                 SimilarityStrategy::SeparateCombined, SimilarityStrategy::SeparateSeparate})
    if (s == strategy_name(v)) return v;
  throw ConfigError("unknown similarity strategy '" + s + "'");
}

struct SimilarityReport {
  SimilarityStrategy strategy = SimilarityStrategy::ConcatCombined;
  std::size_t num_models = 0;
  std::vector<double> attention;  // one score per block
  std::vector<double> mlp;

  friend bool operator==(const SimilarityReport&, const SimilarityReport&) = default;
};

namespace detail {

// Sum over pairs i < j of cos(v_i, v_j), in canonical model order.
inline double pairwise_cosine_sum(const std::vector<std::vector<float>>& v) {
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = i + 1; j < v.size(); ++j) sum += cosine_similarity<float>(v[i], v[j]).value;
  return sum;
}

// Score of one module: either the concatenation of its matrices or the mean
// of per-matrix scores (the mean keeps both forms on the same scale).
inline double module_similarity(const std::vector<ViTParams>& models,
                                const std::vector<std::size_t>& order,
                                const std::vector<std::string>& tensor_names, bool concat) {
  auto collect = [&](const std::vector<std::string>& names) {
    std::vector<std::vector<float>> out;
    for (auto m : order) {
      std::vector<float> flat;
      for (const auto& n : names) {
        const auto d = models[m].params[n].data();
        flat.insert(flat.end(), d.begin(), d.end());
      }
      out.push_back(std::move(flat));
    }
    return out;
  };
  if (concat) return pairwise_cosine_sum(collect(tensor_names));
  double sum = 0.0;
  for (const auto& n : tensor_names) sum += pairwise_cosine_sum(collect({n}));
  return sum / static_cast<double>(tensor_names.size());
}

}  // namespace detail

/// Per-block similarity of attention and MLP weights across models. Biases
/// are excluded.
inline SimilarityReport similarity(const std::vector<ViTParams>& models,
                                   SimilarityStrategy strategy = SimilarityStrategy::ConcatCombined) {
  if (models.size() < 2) throw MergeError("similarity needs at least two models");
  detail::check_mergeable(models, 2);
  const auto order = detail::canonical_order(models);
  const bool concat_attn = strategy == SimilarityStrategy::ConcatCombined ||
                           strategy == SimilarityStrategy::ConcatSeparate;
  const bool combined_mlp = strategy == SimilarityStrategy::ConcatCombined ||
                            strategy == SimilarityStrategy::SeparateCombined;
  SimilarityReport r;
  r.strategy = strategy;
  r.num_models = models.size();
  for (std::size_t b = 0; b < models.front().config.depth; ++b) {
    std::vector<std::string> attn, mlp;
    for (const char* leaf : names::kAttnWeights) attn.push_back(names::block(b, leaf));
    for (const char* leaf : names::kMlpWeights) mlp.push_back(names::block(b, leaf));
    r.attention.push_back(detail::module_similarity(models, order, attn, concat_attn));
    r.mlp.push_back(detail::module_similarity(models, order, mlp, combined_mlp));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Merge plan

enum class StaticMethod { AvgMean, RegMean };

inline const char* static_method_name(StaticMethod s) {
  return s == StaticMethod::AvgMean ? "avgmean" : "regmean";
}

/// Which attention and MLP blocks are gated. Embedding, norms and classifier
/// selection are always gated.
struct MergePlan {
  std::size_t m = 0;
  std::size_t requested_m = 0;
  bool clamped = false;
  std::set<std::size_t> gated_attention;  // 0-based block indices
  std::set<std::size_t> gated_mlp;
  StaticMethod static_method = StaticMethod::AvgMean;

  bool is_gated(const GroupTag& tag) const {
    switch (tag.kind) {
      case GroupKind::Attention: return gated_attention.count(static_cast<std::size_t>(tag.block)) > 0;
      case GroupKind::MLP: return gated_mlp.count(static_cast<std::size_t>(tag.block)) > 0;
      case GroupKind::Classifier: return false;  // selected, not merged
      default: return true;
    }
  }

  friend bool operator==(const MergePlan&, const MergePlan&) = default;
};

namespace detail {

inline std::set<std::size_t> lowest_m(const std::vector<double>& scores, std::size_t m) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return {idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m)};
}

}  // namespace detail

/// Gates the m lowest-similarity attention and MLP blocks (ties to the lower
/// block index). m beyond the depth is clamped and flagged.
inline MergePlan plan_from_m(const SimilarityReport& report, std::size_t m, StaticMethod method) {
  const std::size_t depth = report.attention.size();
  if (report.mlp.size() != depth) throw ConfigError("similarity report is inconsistent");
  MergePlan plan;
  plan.requested_m = m;
  plan.clamped = m > depth;
  plan.m = std::min(m, depth);
  plan.gated_attention = detail::lowest_m(report.attention, plan.m);
  plan.gated_mlp = detail::lowest_m(report.mlp, plan.m);
  plan.static_method = method;
  return plan;
}

// ---------------------------------------------------------------------------
// Gated model

struct InferResult {
  Tensor<float> logits;    // in the selected task's label space
  std::size_t task_index;  // argmax P(x), 0-based position in the model list
  std::vector<double> probs;
};

class MergedModel {
 public:
  /// Precomputes the static merge for every non-gated tensor. Model k must
  /// correspond to gate output k.
  static MergedModel build(std::vector<ViTParams> models, GateNet gate, MergePlan plan,
                           const std::vector<GramStats>* grams = nullptr, double alpha = 0.9) {
    detail::check_mergeable(models, 1);
    audit_gate(gate);
    if (gate.config.num_tasks != models.size())
      throw GateError("gate has " + std::to_string(gate.config.num_tasks) + " outputs for " +
                      std::to_string(models.size()) + " models");
    if (gate.config.input_dim != models.front().config.channels *
                                     models.front().config.image_size *
                                     models.front().config.image_size)
      throw GateError("gate input width does not match the image size");
    const std::size_t depth = models.front().config.depth;
    for (auto b : plan.gated_attention)
      if (b >= depth) throw ConfigError("plan gates attention block beyond model depth");
    for (auto b : plan.gated_mlp)
      if (b >= depth) throw ConfigError("plan gates MLP block beyond model depth");

    MergedModel mm;
    const int first_task = models.front().meta.task_id;
    ViTParams merged;
    if (plan.static_method == StaticMethod::RegMean) {
      if (!grams) throw ConfigError("RegMean static merge needs gram statistics");
      merged = regmean(models, *grams, alpha, first_task);
    } else {
      merged = avg_mean(models, first_task);
    }
    mm.template_ = merged;
    for (std::size_t i = 0; i < merged.params.size(); ++i) {
      const auto& item = merged.params.item(i);
      if (item.group.kind == GroupKind::Classifier) continue;
      if (plan.is_gated(item.group)) {
        mm.gated_.push_back(i);
      } else {
        mm.static_.push_back(i);
      }
    }
    mm.models_ = std::make_shared<const std::vector<ViTParams>>(std::move(models));
    mm.gate_ = std::move(gate);
    mm.plan_ = std::move(plan);
    return mm;
  }

  const MergePlan& plan() const { return plan_; }
  const GateNet& gate() const { return gate_; }
  const std::vector<ViTParams>& models() const { return *models_; }
  std::size_t num_models() const { return models_->size(); }

  /// Static-cache tensors by name (the complement of the gated groups).
  std::vector<std::string> static_names() const {
    std::vector<std::string> out;
    for (auto i : static_) out.push_back(template_.params.item(i).name);
    return out;
  }
  std::vector<std::string> gated_names() const {
    std::vector<std::string> out;
    for (auto i : gated_) out.push_back(template_.params.item(i).name);
    return out;
  }
  const Tensor<float>& static_tensor(const std::string& name) const {
    const auto i = template_.params.index_of(name);
    if (std::find(static_.begin(), static_.end(), i) == static_.end())
      throw MergeError("tensor '" + name + "' is gated, not cached");
    return template_.params.item(i).value;
  }

  /// static cache + N x gated groups + gate + every classifier head.
  std::size_t param_count() const {
    std::size_t n = 0;
    for (auto i : static_) n += template_.params.item(i).value.size();
    for (auto i : gated_) n += models_->size() * template_.params.item(i).value.size();
    n += gate_.params.element_count();
    for (const auto& m : *models_)
      n += m.params[names::kHeadWeight].size() + m.params[names::kHeadBias].size();
    return n;
  }

  /// Gate forward plus one assembled-ViT forward; independent of m.
  std::uint64_t flops() const {
    return gate_flops(gate_.config) + flops_estimate(models_->front().config);
  }

  /// Full parameter set for probabilities `p`: gated tensors become sum p_i W_i,
  /// the classifier is that of argmax p (ties to the lowest index).
  ViTParams assemble(std::span<const double> p) const {
    if (p.size() != models_->size()) throw GateError("probability vector has the wrong length");
    const auto& models = *models_;
    ViTParams out = template_;
    for (auto i : gated_) {
      auto dst = out.params.item(i).value.data();
      for (std::size_t k = 0; k < dst.size(); ++k) {
        double sum = 0.0;
        for (std::size_t j = 0; j < models.size(); ++j)
          sum += p[j] * static_cast<double>(models[j].params.item(i).value[k]);
        dst[k] = static_cast<float>(sum);
      }
    }
    const std::size_t sel = argmax<double>(p);
    copy_classifier(out, models[sel]);
    out.meta.task_id = models[sel].meta.task_id;
    return out;
  }

  /// Eval with externally supplied probabilities (stub gates, shared P).
  InferResult infer_with(const Tensor<float>& image, std::vector<double> p) const {
    const ViTParams assembled = assemble(p);
    const auto& c = assembled.config;
    const Tensor<float> batch({1, c.channels, c.image_size, c.image_size},
                              {image.data().begin(), image.data().end()});
    InferResult r;
    const Tensor<float> logits = forward(assembled, batch);
    r.logits = Tensor<float>({logits.size()}, {logits.data().begin(), logits.data().end()});
    r.task_index = argmax<double>(p);
    r.probs = std::move(p);
    return r;
  }

  /// Per-input merge and forward for one image [C x H x W] (or [1 x C x H x W]).
  InferResult infer(const Tensor<float>& image) const {
    const auto& c = models_->front().config;
    if (image.size() != c.channels * c.image_size * c.image_size)
      throw DimensionError("infer expects one image of " +
                           std::to_string(c.channels * c.image_size * c.image_size) + " values");
    return infer_with(image, gate_probs(gate_, image));
  }

  /// Batch inference. With `share_probs`, one P (the batch mean) is used for
  /// every image; otherwise each image is merged separately.
  std::vector<InferResult> infer_batch(const Tensor<float>& images, bool share_probs = false) const {
    const std::size_t n = images.dim(0), elems = images.size() / std::max<std::size_t>(n, 1);
    auto image_at = [&](std::size_t b) {
      return Tensor<float>({elems}, {images.data().begin() + static_cast<std::ptrdiff_t>(b * elems),
                                     images.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * elems)});
    };
    std::vector<InferResult> out;
    if (!share_probs) {
      for (std::size_t b = 0; b < n; ++b) out.push_back(infer(image_at(b)));
      return out;
    }
    std::vector<double> mean(models_->size(), 0.0);
    for (std::size_t b = 0; b < n; ++b) {
      const auto p = gate_probs(gate_, image_at(b));
      for (std::size_t j = 0; j < p.size(); ++j) mean[j] += p[j] / static_cast<double>(n);
    }
    const ViTParams assembled = assemble(mean);
    const auto& c = assembled.config;
    Tensor<float> batch({n, c.channels, c.image_size, c.image_size},
                        {images.data().begin(), images.data().end()});
    const Tensor<float> logits = forward(assembled, batch);
    const std::size_t nc = c.num_classes;
    for (std::size_t b = 0; b < n; ++b) {
      InferResult r;
      r.logits = Tensor<float>({nc}, {logits.data().begin() + static_cast<std::ptrdiff_t>(b * nc),
                                      logits.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * nc)});
      r.task_index = argmax<double>(mean);
      r.probs = mean;
      out.push_back(std::move(r));
    }
    return out;
  }

 private:
  std::shared_ptr<const std::vector<ViTParams>> models_;
  GateNet gate_;
  MergePlan plan_;
  ViTParams template_;  // static merge; gated entries are overwritten per input
  std::vector<std::size_t> static_;
  std::vector<std::size_t> gated_;
};

/// Accuracy of a gated model on the test split of task `task_index` (its
/// position in the model list): a sample counts when the gate selects that
/// task and the selected head predicts the label.
struct GatedEval {
  double accuracy = 0.0;
  double selection_accuracy = 0.0;
};

inline GatedEval evaluate_gated(const MergedModel& mm, const Dataset& test, std::size_t task_index) {
  GatedEval e;
  if (test.size() == 0) return e;
  std::size_t correct = 0, selected = 0;
  const auto results = mm.infer_batch(test.images);
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    if (r.task_index != task_index) continue;
    ++selected;
    correct += static_cast<int>(argmax<float>(r.logits.data())) == test.labels[i];
  }
  e.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  e.selection_accuracy = static_cast<double>(selected) / static_cast<double>(test.size());
  return e;
}

}  // namespace vitmerge
