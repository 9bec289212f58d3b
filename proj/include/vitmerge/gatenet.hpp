#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "vitmerge/grad.hpp"
#include "vitmerge/params.hpp"
#include "vitmerge/rng.hpp"

namespace vitmerge {

/// Task-probability classifier over the raw, flattened image. The default
/// is flatten -> linear(64) -> GELU -> linear(N); `hidden` may list any
/// number of layers (empty gives a linear gate).
struct GateConfig {
  std::size_t input_dim = 256;
  std::vector<std::size_t> hidden{64};
  std::size_t num_tasks = 2;

  void validate() const {
    if (input_dim == 0) throw ConfigError("gate input_dim must be positive");
    if (num_tasks < 2) throw ConfigError("a gate needs at least two tasks");
    for (auto h : hidden)
      if (h == 0) throw ConfigError("gate hidden widths must be positive");
  }

  std::size_t layers() const { return hidden.size() + 1; }
  std::size_t in_width(std::size_t layer) const { return layer == 0 ? input_dim : hidden[layer - 1]; }
  std::size_t out_width(std::size_t layer) const {
    return layer < hidden.size() ? hidden[layer] : num_tasks;
  }

  friend bool operator==(const GateConfig&, const GateConfig&) = default;
};

template <class T>
struct BasicGateNet {
  GateConfig config;
  ParamSet<T> params;

  bool empty() const { return params.size() == 0; }

  template <class U>
  BasicGateNet<U> cast() const {
    return {config, params.template cast<U>()};
  }

  friend bool operator==(const BasicGateNet&, const BasicGateNet&) = default;
};

using GateNet = BasicGateNet<float>;

namespace names {
inline std::string gate_weight(std::size_t layer) {
  return "gate.layer" + std::to_string(layer) + ".weight";
}
inline std::string gate_bias(std::size_t layer) {
  return "gate.layer" + std::to_string(layer) + ".bias";
}
}  // namespace names

/// Truncated normal with std 1/sqrt(fan_in), zero biases.
inline GateNet init_gate(const GateConfig& config, std::uint64_t seed) {
  config.validate();
  GateNet g;
  g.config = config;
  Rng rng(derive_seed(seed, "gate-init"));
  const GroupTag tag{GroupKind::Gate, -1};
  for (std::size_t l = 0; l < config.layers(); ++l) {
    const std::size_t in = config.in_width(l), out = config.out_width(l);
    Tensor<float> w({in, out});
    fill_init(w, InitKind::TruncNormal, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    g.params.add(names::gate_weight(l), tag, std::move(w), true);
    g.params.add(names::gate_bias(l), tag, Tensor<float>({out}), false);
  }
  return g;
}

template <class T>
void audit_gate(const BasicGateNet<T>& g) {
  if (g.empty()) throw GateError("gate has no parameters (not initialised or trained)");
  g.config.validate();
  if (g.params.size() != 2 * g.config.layers())
    throw GateError("gate parameter count does not match its config");
  for (std::size_t l = 0; l < g.config.layers(); ++l) {
    const Shape w{g.config.in_width(l), g.config.out_width(l)};
    if (!g.params.contains(names::gate_weight(l)) || g.params[names::gate_weight(l)].shape() != w ||
        !g.params.contains(names::gate_bias(l)) ||
        g.params[names::gate_bias(l)].shape() != Shape{w[1]})
      throw GateError("gate layer " + std::to_string(l) + " has unexpected shape");
  }
}

template <class T>
struct GateCache {
  std::vector<std::vector<T>> inputs;  // input of each layer
  std::vector<std::vector<T>> pre;     // pre-activation of each hidden layer
};

/// Gate logits for a batch; images may have any shape whose trailing
/// elements flatten to input_dim per sample.
template <class T>
Tensor<T> gate_logits(const BasicGateNet<T>& g, const Tensor<T>& images,
                      GateCache<T>* cache = nullptr) {
  audit_gate(g);
  const std::size_t in = g.config.input_dim;
  if (images.rank() < 2 || images.size() != images.dim(0) * in)
    throw GateError("gate input of shape " + shape_string(images.shape()) +
                    " does not flatten to " + std::to_string(in) + " features per sample");
  const std::size_t batch = images.dim(0);
  GateCache<T> local;
  GateCache<T>& gc = cache ? *cache : local;
  gc.inputs.assign(1, std::vector<T>(images.data().begin(), images.data().end()));
  gc.pre.clear();
  for (std::size_t l = 0; l < g.config.layers(); ++l) {
    std::vector<T> y;
    detail::linear<T>(gc.inputs.back(), g.params[names::gate_weight(l)],
                      g.params[names::gate_bias(l)], y, batch);
    if (l + 1 == g.config.layers()) return Tensor<T>({batch, g.config.num_tasks}, std::move(y));
    gc.pre.push_back(y);
    for (auto& v : y) v = static_cast<T>(detail::gelu(v));
    gc.inputs.push_back(std::move(y));
  }
  return {};  // unreachable: layers() >= 1
}

/// Cross-entropy on task indices with exact gradients.
template <class T>
LossAndGrads<T> gate_loss_and_grads(const BasicGateNet<T>& g, const Tensor<T>& images,
                                    std::span<const int> task_index, double weight_decay) {
  GateCache<T> gc;
  const Tensor<T> logits = gate_logits(g, images, &gc);
  const std::size_t batch = images.dim(0), n = g.config.num_tasks;
  if (task_index.size() != batch) throw DataError("label count does not match batch size");
  LossAndGrads<T> out;
  out.grads = g.params.zeros_like();
  std::vector<T> dy(batch * n);
  double ce = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = task_index[b];
    if (y < 0 || static_cast<std::size_t>(y) >= n) throw DataError("task index out of range");
    const T* row = logits.data().data() + b * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    ce += lse - row[y];
    for (std::size_t j = 0; j < n; ++j)
      dy[b * n + j] = static_cast<T>((std::exp(row[j] - lse) - (static_cast<int>(j) == y)) /
                                     static_cast<double>(batch));
  }
  out.cross_entropy = ce / static_cast<double>(batch);
  for (std::size_t l = g.config.layers(); l-- > 0;) {
    std::vector<T> dx;
    detail::linear_backward<T>(gc.inputs[l], dy, g.params[names::gate_weight(l)], batch,
                               out.grads[names::gate_weight(l)], out.grads[names::gate_bias(l)],
                               l > 0 ? &dx : nullptr, false);
    if (l == 0) break;
    const auto& pre = gc.pre[l - 1];
    for (std::size_t i = 0; i < dx.size(); ++i)
      dx[i] = static_cast<T>(dx[i] * detail::gelu_grad(pre[i]));
    dy = std::move(dx);
  }
  double decay = 0.0;
  for (std::size_t i = 0; i < g.params.size(); ++i) {
    const auto& item = g.params.item(i);
    if (!item.decay) continue;
    auto gr = out.grads.item(i).value.data();
    for (std::size_t k = 0; k < item.value.size(); ++k) {
      decay += static_cast<double>(item.value[k]) * item.value[k];
      gr[k] += static_cast<T>(weight_decay * item.value[k]);
    }
  }
  out.decay = 0.5 * weight_decay * decay;
  out.loss = out.cross_entropy + out.decay;
  return out;
}

inline std::uint64_t gate_flops(const GateConfig& c) {
  std::uint64_t macs = 0;
  for (std::size_t l = 0; l < c.layers(); ++l) macs += c.in_width(l) * c.out_width(l);
  return 2 * macs;
}

}  // namespace vitmerge
