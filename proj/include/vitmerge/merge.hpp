#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "vitmerge/data.hpp"
#include "vitmerge/numkit.hpp"
#include "vitmerge/vit.hpp"

namespace vitmerge {

enum class MergeMethod { AvgMean, TaskArithmetic, RegMean };

struct MergeRecipe {
  MergeMethod method = MergeMethod::AvgMean;
  double lambda = 1.0;  // task arithmetic scale
  double alpha = 0.9;   // RegMean off-diagonal gram scale
  int classifier_task = 1;  // static methods take this task's head

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1]");
  }
};

/// Accumulated X^T X of one linear layer's inputs.
struct GramEntry {
  Tensor<double> gram;
  std::uint64_t samples = 0;

  friend bool operator==(const GramEntry&, const GramEntry&) = default;
};

/// Grams keyed by the canonical name of the layer's weight.
struct GramStats {
  std::map<std::string, GramEntry> layers;

  friend bool operator==(const GramStats&, const GramStats&) = default;
};

/// Attention and MLP weight matrices: the layers RegMean solves for.
template <class T>
bool is_regmean_layer(const Param<T>& p) {
  return (p.group.kind == GroupKind::Attention || p.group.kind == GroupKind::MLP) &&
         p.value.rank() == 2;
}

namespace detail {

template <class T>
std::uint64_t content_hash(const BasicViTParams<T>& m) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& p : m.params)
    for (T v : p.value.data()) {
      unsigned char bytes[sizeof(T)];
      std::memcpy(bytes, &v, sizeof(T));
      for (unsigned char b : bytes) h = (h ^ b) * 0x100000001B3ULL;
    }
  return h;
}

/// Canonical processing order: by task id, then by weight content. Makes
/// every merge bitwise invariant to the order models are passed in.
template <class T>
std::vector<std::size_t> canonical_order(const std::vector<BasicViTParams<T>>& models) {
  std::vector<std::pair<std::pair<int, std::uint64_t>, std::size_t>> keys;
  for (std::size_t i = 0; i < models.size(); ++i)
    keys.push_back({{models[i].meta.task_id, content_hash(models[i])}, i});
  std::stable_sort(keys.begin(), keys.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::size_t> out;
  for (const auto& k : keys) out.push_back(k.second);
  return out;
}

template <class T>
void check_mergeable(const std::vector<BasicViTParams<T>>& models, std::size_t min_models) {
  if (models.size() < min_models)
    throw MergeError("need at least " + std::to_string(min_models) + " models to merge");
  for (const auto& m : models) audit_shapes(m);
  const auto& ref = models.front();
  for (std::size_t k = 1; k < models.size(); ++k) {
    const auto& other = models[k];
    for (std::size_t i = 0; i < ref.params.size(); ++i) {
      const auto& a = ref.params.item(i);
      if (a.group.kind == GroupKind::Classifier) continue;
      if (!other.params.contains(a.name))
        throw MergeError("model " + std::to_string(k) + " lacks tensor '" + a.name + "'");
      const auto& b = other.params[a.name];
      if (a.value.shape() != b.shape())
        throw MergeError("tensor '" + a.name + "' has shape " + shape_string(b.shape()) +
                         " in model " + std::to_string(k) + " but " +
                         shape_string(a.value.shape()) + " in model 0");
    }
  }
}

template <class T>
std::size_t classifier_source(const std::vector<BasicViTParams<T>>& models, int task_id) {
  for (std::size_t i = 0; i < models.size(); ++i)
    if (models[i].meta.task_id == task_id) return i;
  throw MergeError("no model carries task id " + std::to_string(task_id) +
                   " for classifier selection");
}

}  // namespace detail

/// Element-wise mean of every non-classifier tensor; the classifier is the
/// head of the model whose task id is `classifier_task`.
template <class T>
BasicViTParams<T> avg_mean(const std::vector<BasicViTParams<T>>& models, int classifier_task) {
  detail::check_mergeable(models, 1);
  const auto order = detail::canonical_order(models);
  BasicViTParams<T> out = models[detail::classifier_source(models, classifier_task)];
  out.meta.task_id = 0;
  const double inv_n = 1.0 / static_cast<double>(models.size());
  for (std::size_t i = 0; i < out.params.size(); ++i) {
    auto& item = out.params.item(i);
    if (item.group.kind == GroupKind::Classifier) continue;
    auto dst = item.value.data();
    // Anchored on the first model so N identical copies reproduce it bitwise.
    const auto& anchor = models[order.front()].params.item(i).value;
    for (std::size_t k = 0; k < dst.size(); ++k) {
      const double x0 = anchor[k];
      double delta = 0.0;
      for (auto m : order) delta += static_cast<double>(models[m].params.item(i).value[k]) - x0;
      dst[k] = static_cast<T>(x0 + delta * inv_n);
    }
  }
  return out;
}

/// W = W_base + lambda * sum_i (W_i - W_base) for every non-classifier tensor.
template <class T>
BasicViTParams<T> task_arithmetic(const BasicViTParams<T>& base,
                                  const std::vector<BasicViTParams<T>>& models, double lambda,
                                  int classifier_task) {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  std::vector<BasicViTParams<T>> all{base};
  all.insert(all.end(), models.begin(), models.end());
  detail::check_mergeable(all, 2);
  const auto order = detail::canonical_order(models);
  BasicViTParams<T> out = models[detail::classifier_source(models, classifier_task)];
  out.meta.task_id = 0;
  for (std::size_t i = 0; i < out.params.size(); ++i) {
    auto& item = out.params.item(i);
    if (item.group.kind == GroupKind::Classifier) continue;
    const auto& wb = base.params.item(i).value;
    auto dst = item.value.data();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      double tau = 0.0;
      for (auto m : order)
        tau += static_cast<double>(models[m].params.item(i).value[k]) - static_cast<double>(wb[k]);
      dst[k] = static_cast<T>(static_cast<double>(wb[k]) + lambda * tau);
    }
  }
  return out;
}

/// Layer inputs captured from a forward pass, one matrix per linear weight.
/// Rows are tokens of every image in the batch.
template <class T>
std::map<std::string, std::pair<const std::vector<T>*, std::size_t>> captured_inputs(
    const ForwardCache<T>& fc, const ViTConfig& c) {
  std::map<std::string, std::pair<const std::vector<T>*, std::size_t>> out;
  const std::size_t rows = fc.batch * c.tokens();
  for (std::size_t l = 0; l < fc.blocks.size(); ++l) {
    const auto& bc = fc.blocks[l];
    out[names::block(l, "attn.q.weight")] = {&bc.ln1.out, rows};
    out[names::block(l, "attn.k.weight")] = {&bc.ln1.out, rows};
    out[names::block(l, "attn.v.weight")] = {&bc.ln1.out, rows};
    out[names::block(l, "attn.o.weight")] = {&bc.attn_out, rows};
    out[names::block(l, "mlp.fc1.weight")] = {&bc.ln2.out, rows};
    out[names::block(l, "mlp.fc2.weight")] = {&bc.hidden_act, rows};
  }
  return out;
}

/// Accumulates X^T X (in double) of every attention and MLP linear layer's
/// input over the dataset, processed in fixed batches in dataset order.
template <class T>
GramStats collect_grams(const BasicViTParams<T>& model, const Dataset& unlabeled,
                        std::size_t batch = 64) {
  if (unlabeled.size() == 0) throw DataError("gram collection needs a nonempty dataset");
  GramStats out;
  for (const auto& p : model.params)
    if (is_regmean_layer(p))
      out.layers[p.name] = {Tensor<double>({p.value.dim(0), p.value.dim(0)}), 0};
  std::vector<std::size_t> idx;
  std::vector<double> x64;
  for (std::size_t start = 0; start < unlabeled.size(); start += batch) {
    const std::size_t len = std::min(batch, unlabeled.size() - start);
    idx.resize(len);
    std::iota(idx.begin(), idx.end(), start);
    ForwardCache<T> fc;
    forward(model, gather_images(unlabeled, idx).template cast<T>(), &fc);
    for (const auto& [name, capture] : captured_inputs(fc, model.config)) {
      auto& entry = out.layers.at(name);
      const std::size_t d = entry.gram.dim(0), rows = capture.second;
      x64.assign(capture.first->begin(), capture.first->end());
      kernels::gemm_tn<double>(x64, x64, entry.gram.data(), d, rows, d, /*accumulate=*/true);
      entry.samples += rows;
    }
  }
  return out;
}

/// Sums two gram sets over the same layers.
inline GramStats add_grams(const GramStats& a, const GramStats& b) {
  GramStats out = a;
  for (auto& [name, entry] : out.layers) {
    const auto it = b.layers.find(name);
    if (it == b.layers.end() || it->second.gram.shape() != entry.gram.shape())
      throw MergeError("gram sets disagree on layer '" + name + "'");
    for (std::size_t k = 0; k < entry.gram.size(); ++k) entry.gram[k] += it->second.gram[k];
    entry.samples += it->second.samples;
  }
  return out;
}

/// Per-layer closed-form merge W = (sum G~_i)^-1 (sum G~_i W_i) where G~_i is
/// G_i with off-diagonal entries scaled by alpha (each model's gram scaled
/// before summation). Everything that is not an attention or MLP weight
/// matrix, biases included, is averaged.
template <class T>
BasicViTParams<T> regmean(const std::vector<BasicViTParams<T>>& models,
                          const std::vector<GramStats>& grams, double alpha, int classifier_task,
                          std::vector<std::string>* regularized_layers = nullptr) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1]");
  if (grams.size() != models.size()) throw MergeError("need exactly one gram set per model");
  BasicViTParams<T> out = avg_mean(models, classifier_task);
  const auto order = detail::canonical_order(models);
  for (std::size_t i = 0; i < out.params.size(); ++i) {
    auto& item = out.params.item(i);
    if (!is_regmean_layer(item)) continue;
    const std::size_t din = item.value.dim(0), dout = item.value.dim(1);
    Tensor<double> sum_g({din, din});
    Tensor<double> sum_gw({din, dout});
    std::vector<double> scaled(din * din), w64(din * dout);
    for (auto m : order) {
      const auto it = grams[m].layers.find(item.name);
      if (it == grams[m].layers.end())
        throw MergeError("gram for layer '" + item.name + "' missing for model " +
                         std::to_string(m));
      const auto& entry = it->second;
      if (entry.samples == 0) throw MergeError("gram for layer '" + item.name + "' is empty");
      if (entry.gram.shape() != Shape{din, din})
        throw MergeError("gram for layer '" + item.name + "' has shape " +
                         shape_string(entry.gram.shape()));
      for (std::size_t r = 0; r < din; ++r)
        for (std::size_t c = 0; c < din; ++c)
          scaled[r * din + c] = entry.gram(r, c) * (r == c ? 1.0 : alpha);
      const auto& w = models[m].params.item(i).value;
      std::transform(w.data().begin(), w.data().end(), w64.begin(),
                     [](T v) { return static_cast<double>(v); });
      for (std::size_t k = 0; k < scaled.size(); ++k) sum_g[k] += scaled[k];
      kernels::gemm_nn<double>(scaled, w64, sum_gw.data(), din, din, dout, /*accumulate=*/true);
    }
    SolveResult sol;
    try {
      sol = solve(sum_g, sum_gw);
    } catch (const SingularError& e) {
      throw MergeError("RegMean system for layer '" + item.name + "' is singular: " + e.what());
    }
    if (sol.regularized && regularized_layers) regularized_layers->push_back(item.name);
    auto dst = item.value.data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(sol.solution[k]);
  }
  return out;
}

template <class T>
BasicViTParams<T> merge_static(const MergeRecipe& recipe,
                               const std::vector<BasicViTParams<T>>& models,
                               const BasicViTParams<T>* base, const std::vector<GramStats>* grams) {
  recipe.validate();
  switch (recipe.method) {
    case MergeMethod::AvgMean: return avg_mean(models, recipe.classifier_task);
    case MergeMethod::TaskArithmetic:
      if (!base) throw ConfigError("task arithmetic needs the base model");
      return task_arithmetic(*base, models, recipe.lambda, recipe.classifier_task);
    case MergeMethod::RegMean:
      if (!grams) throw ConfigError("RegMean needs gram statistics");
      return regmean(models, *grams, recipe.alpha, recipe.classifier_task);
  }
  throw ConfigError("unknown merge method");
}

}  // namespace vitmerge
