#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <sstream>
#include <vector>

#include "vitmerge/data.hpp"
#include "vitmerge/gatenet.hpp"
#include "vitmerge/grad.hpp"
#include "vitmerge/vit.hpp"

namespace vitmerge {

/// SGD with momentum, coupled weight decay, and a cosine learning-rate decay
/// over all steps.
struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (learning_rate < 0.0 || momentum < 0.0 || momentum >= 1.0 || weight_decay < 0.0)
      throw ConfigError("learning_rate, momentum and weight_decay must be non-negative "
                        "(momentum below 1)");
  }
};

struct TrainLog {
  std::vector<double> epoch_loss;  // mean total loss per epoch
};

/// Callback computing loss and gradients for one minibatch of sample indices.
using BatchGradFn =
    std::function<LossAndGrads<float>(const ParamSet<float>&, std::span<const std::size_t>)>;

/// Generic minibatch loop shared by model and gate training. Sample order is
/// reshuffled every epoch from `tc.seed`.
inline TrainLog sgd_train(ParamSet<float>& params, std::size_t num_samples,
                          const TrainConfig& tc, const BatchGradFn& batch_grads) {
  tc.validate();
  TrainLog log;
  if (tc.epochs == 0 || num_samples == 0) return log;
  const std::size_t steps_per_epoch = (num_samples + tc.batch_size - 1) / tc.batch_size;
  const double total_steps = static_cast<double>(steps_per_epoch * tc.epochs);
  std::vector<std::vector<float>> velocity;
  for (const auto& p : params) velocity.emplace_back(p.value.size(), 0.0f);

  Rng rng(derive_seed(tc.seed, "sgd-order"));
  std::vector<std::size_t> order(num_samples);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle<std::size_t>(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < num_samples; start += tc.batch_size) {
      const std::size_t len = std::min(tc.batch_size, num_samples - start);
      const auto lg = batch_grads(params, std::span<const std::size_t>(order).subspan(start, len));
      if (!std::isfinite(lg.loss)) {
        std::ostringstream os;
        os << "training diverged at epoch " << epoch << ", step " << step << " (loss " << lg.loss
           << ", lr " << tc.learning_rate << ")";
        throw TrainingError(os.str());
      }
      loss_sum += lg.loss;
      const double lr = 0.5 * tc.learning_rate *
                        (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params.item(i).value.data();
        auto g = lg.grads.item(i).value.data();
        auto& v = velocity[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
          v[k] = static_cast<float>(tc.momentum * v[k] + g[k]);
          w[k] = static_cast<float>(w[k] - lr * v[k]);
        }
      }
      ++step;
    }
    log.epoch_loss.push_back(loss_sum / static_cast<double>(steps_per_epoch));
  }
  return log;
}

/// Trains all parameters of `model` on `data` (labels must fit its head).
inline TrainLog train_model(ViTParams& model, const Dataset& data, const TrainConfig& tc) {
  audit_shapes(model);
  if (data.num_classes > model.config.num_classes)
    throw DataError("dataset has more classes than the classifier");
  return sgd_train(model.params, data.size(), tc,
                   [&](const ParamSet<float>&, std::span<const std::size_t> idx) {
                     // sgd_train updates model.params in place.
                     std::vector<int> labels(idx.size());
                     for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = data.labels[idx[i]];
                     return loss_and_grads(model, gather_images(data, idx), labels,
                                           tc.weight_decay);
                   });
}

/// Concatenates task train splits into one joint label space; task k's
/// labels are offset by the class counts of tasks before it.
inline Dataset joint_dataset(const std::vector<Dataset>& sets) {
  if (sets.empty()) throw ConfigError("no datasets to join");
  std::size_t total = 0, offset = 0;
  for (const auto& s : sets) total += s.size();
  Shape shape = sets.front().images.shape();
  shape[0] = total;
  Dataset out;
  out.images = Tensor<float>(shape);
  out.labels.reserve(total);
  std::size_t pos = 0;
  for (const auto& s : sets) {
    if (s.image_elems() != sets.front().image_elems())
      throw DataError("datasets disagree on image shape");
    std::copy(s.images.data().begin(), s.images.data().end(), out.images.data().begin() +
                                                                 static_cast<std::ptrdiff_t>(pos));
    pos += s.images.size();
    for (int y : s.labels) out.labels.push_back(y + static_cast<int>(offset));
    offset += s.num_classes;
  }
  out.num_classes = offset;
  out.split = sets.front().split;
  return out;
}

/// Result of a training entry point.
struct Trained {
  ViTParams model;
  TrainLog log;
};

/// Trains one shared base on the union of all tasks' train splits.
inline Trained pretrain(ViTConfig config, const std::vector<Dataset>& train_sets,
                        const TrainConfig& tc) {
  if (train_sets.size() < 2) throw ConfigError("pretraining needs at least two tasks");
  Dataset joint = joint_dataset(train_sets);
  config.num_classes = joint.num_classes;
  Trained out{init_vit(config, tc.seed), {}};
  out.model.meta.lineage = "pretrained";
  out.model.meta.seed = tc.seed;
  out.log = train_model(out.model, joint, tc);
  return out;
}

/// Fine-tunes every parameter of `base` on one task after replacing the
/// classifier with a fresh head sized for the task.
inline Trained finetune(const ViTParams& base, const Dataset& train_set, const TrainConfig& tc) {
  audit_shapes(base);
  Trained out{base, {}};
  reset_classifier(out.model, train_set.num_classes, derive_seed(tc.seed, "finetune-head"));
  out.model.meta.task_id = train_set.task_id;
  out.model.meta.seed = tc.seed;
  out.log = train_model(out.model, train_set, tc);
  return out;
}

template <class Forward>
double batched_accuracy(std::size_t n, std::size_t batch, Forward&& predict_batch,
                        const std::vector<int>& labels) {
  if (n == 0) return 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t len = std::min(batch, n - start);
    idx.resize(len);
    std::iota(idx.begin(), idx.end(), start);
    const std::vector<int> pred = predict_batch(std::span<const std::size_t>(idx));
    for (std::size_t i = 0; i < len; ++i) correct += pred[i] == labels[start + i];
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

inline std::vector<int> predict(const ViTParams& model, const Tensor<float>& images) {
  const Tensor<float> logits = forward(model, images);
  const std::size_t nc = model.config.num_classes;
  std::vector<int> out(images.dim(0));
  for (std::size_t b = 0; b < out.size(); ++b)
    out[b] = static_cast<int>(argmax<float>(logits.data().subspan(b * nc, nc)));
  return out;
}

/// Fraction of correctly classified samples.
inline double accuracy(const ViTParams& model, const Dataset& data, std::size_t batch = 256) {
  return batched_accuracy(
      data.size(), batch,
      [&](std::span<const std::size_t> idx) { return predict(model, gather_images(data, idx)); },
      data.labels);
}

// ---------------------------------------------------------------------------
// Gate training

/// Builds the task-id classification set: every sample of entry k gets label
/// k (its position in the list, which is also the gate output index).
inline Dataset task_id_dataset(const std::vector<Dataset>& unlabeled) {
  std::vector<Dataset> relabeled = unlabeled;
  for (std::size_t k = 0; k < relabeled.size(); ++k) {
    std::fill(relabeled[k].labels.begin(), relabeled[k].labels.end(), 0);
    relabeled[k].num_classes = 1;
  }
  return joint_dataset(relabeled);
}

struct TrainedGate {
  GateNet gate;
  TrainLog log;
};

/// Trains `gate` to predict which entry of `unlabeled` an image came from.
/// Class labels inside the datasets are ignored.
inline TrainedGate train_gate(GateNet gate, const std::vector<Dataset>& unlabeled,
                              const TrainConfig& tc) {
  if (unlabeled.size() < 2) throw ConfigError("gate training needs at least two tasks");
  audit_gate(gate);
  if (gate.config.num_tasks != unlabeled.size())
    throw ConfigError("gate width does not match the number of tasks");
  const Dataset joint = task_id_dataset(unlabeled);
  TrainedGate out{std::move(gate), {}};
  out.log = sgd_train(out.gate.params, joint.size(), tc,
                      [&](const ParamSet<float>&, std::span<const std::size_t> idx) {
                        std::vector<int> labels(idx.size());
                        for (std::size_t i = 0; i < idx.size(); ++i)
                          labels[i] = joint.labels[idx[i]];
                        return gate_loss_and_grads(out.gate, gather_images(joint, idx), labels,
                                                   tc.weight_decay);
                      });
  return out;
}

/// Fraction of samples whose gate argmax equals their list position.
inline double gate_accuracy(const GateNet& gate, const std::vector<Dataset>& sets) {
  const Dataset joint = task_id_dataset(sets);
  return batched_accuracy(
      joint.size(), 256,
      [&](std::span<const std::size_t> idx) {
        const auto logits = gate_logits(gate, gather_images(joint, idx));
        const std::size_t n = gate.config.num_tasks;
        std::vector<int> pred(idx.size());
        for (std::size_t b = 0; b < idx.size(); ++b)
          pred[b] = static_cast<int>(argmax<float>(logits.data().subspan(b * n, n)));
        return pred;
      },
      joint.labels);
}

}  // namespace vitmerge
