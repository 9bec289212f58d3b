#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "vitmerge/errors.hpp"
#include "vitmerge/numkit.hpp"
#include "vitmerge/params.hpp"
#include "vitmerge/rng.hpp"

namespace vitmerge {

struct ViTConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t dim = 32;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 10;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t head_dim() const { return dim / heads; }
  std::size_t hidden() const { return dim * mlp_ratio; }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw ConfigError("image_size must be a positive multiple of patch_size");
    if (heads == 0 || dim == 0 || dim % heads != 0)
      throw ConfigError("dim must be a positive multiple of heads");
    if (depth < 1) throw ConfigError("depth must be at least 1");
    if (channels < 1 || mlp_ratio < 1 || num_classes < 1)
      throw ConfigError("channels, mlp_ratio and num_classes must be positive");
  }

  /// Same backbone shapes; the classifier width may differ.
  bool same_backbone(const ViTConfig& o) const {
    return image_size == o.image_size && patch_size == o.patch_size && channels == o.channels &&
           dim == o.dim && depth == o.depth && heads == o.heads && mlp_ratio == o.mlp_ratio;
  }

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

struct ModelMeta {
  int task_id = 0;  // 0: not tied to a single task (base or merged)
  std::string lineage = "pretrained";
  std::uint64_t seed = 0;

  friend bool operator==(const ModelMeta&, const ModelMeta&) = default;
};

template <class T>
struct BasicViTParams {
  ViTConfig config;
  ParamSet<T> params;
  ModelMeta meta;

  template <class U>
  BasicViTParams<U> cast() const {
    return {config, params.template cast<U>(), meta};
  }

  friend bool operator==(const BasicViTParams&, const BasicViTParams&) = default;
};

using ViTParams = BasicViTParams<float>;

namespace names {

inline std::string block(std::size_t b, const char* leaf) {
  return "blocks." + std::to_string(b) + "." + leaf;
}

inline constexpr const char* kPatchWeight = "embed.patch.weight";
inline constexpr const char* kPatchBias = "embed.patch.bias";
inline constexpr const char* kClsToken = "embed.cls";
inline constexpr const char* kPosEmbed = "embed.pos";
inline constexpr const char* kFinalScale = "final_norm.scale";
inline constexpr const char* kFinalShift = "final_norm.shift";
inline constexpr const char* kHeadWeight = "head.weight";
inline constexpr const char* kHeadBias = "head.bias";

inline constexpr const char* kAttnWeights[] = {"attn.q.weight", "attn.k.weight", "attn.v.weight",
                                               "attn.o.weight"};
inline constexpr const char* kMlpWeights[] = {"mlp.fc1.weight", "mlp.fc2.weight"};

}  // namespace names

enum class InitKind { TruncNormal, Zeros, Ones };

struct LayoutEntry {
  std::string name;
  GroupTag group;
  Shape shape;
  InitKind init;
  bool decay;
};

/// Canonical parameter layout for a config. Linear weights are stored
/// [in x out] so a layer computes y = x W + b.
inline std::vector<LayoutEntry> vit_layout(const ViTConfig& c) {
  const std::size_t d = c.dim, f = c.hidden();
  const GroupTag emb{GroupKind::Embedding, -1};
  const GroupTag norm{GroupKind::Norm, -1};
  std::vector<LayoutEntry> out;
  out.push_back({names::kPatchWeight, emb, {c.patch_dim(), d}, InitKind::TruncNormal, true});
  out.push_back({names::kPatchBias, emb, {d}, InitKind::Zeros, false});
  out.push_back({names::kClsToken, emb, {d}, InitKind::TruncNormal, false});
  out.push_back({names::kPosEmbed, emb, {c.tokens(), d}, InitKind::TruncNormal, false});
  for (std::size_t b = 0; b < c.depth; ++b) {
    const GroupTag attn{GroupKind::Attention, static_cast<int>(b)};
    const GroupTag mlp{GroupKind::MLP, static_cast<int>(b)};
    out.push_back({names::block(b, "norm1.scale"), norm, {d}, InitKind::Ones, false});
    out.push_back({names::block(b, "norm1.shift"), norm, {d}, InitKind::Zeros, false});
    for (const char* proj : {"q", "k", "v", "o"}) {
      const std::string base = std::string("attn.") + proj;
      out.push_back({names::block(b, (base + ".weight").c_str()), attn, {d, d},
                     InitKind::TruncNormal, true});
      out.push_back({names::block(b, (base + ".bias").c_str()), attn, {d}, InitKind::Zeros, false});
    }
    out.push_back({names::block(b, "norm2.scale"), norm, {d}, InitKind::Ones, false});
    out.push_back({names::block(b, "norm2.shift"), norm, {d}, InitKind::Zeros, false});
    out.push_back({names::block(b, "mlp.fc1.weight"), mlp, {d, f}, InitKind::TruncNormal, true});
    out.push_back({names::block(b, "mlp.fc1.bias"), mlp, {f}, InitKind::Zeros, false});
    out.push_back({names::block(b, "mlp.fc2.weight"), mlp, {f, d}, InitKind::TruncNormal, true});
    out.push_back({names::block(b, "mlp.fc2.bias"), mlp, {d}, InitKind::Zeros, false});
  }
  out.push_back({names::kFinalScale, norm, {d}, InitKind::Ones, false});
  out.push_back({names::kFinalShift, norm, {d}, InitKind::Zeros, false});
  const GroupTag cls{GroupKind::Classifier, -1};
  out.push_back({names::kHeadWeight, cls, {d, c.num_classes}, InitKind::TruncNormal, true});
  out.push_back({names::kHeadBias, cls, {c.num_classes}, InitKind::Zeros, false});
  return out;
}

inline constexpr double kInitStd = 0.02;

template <class T>
void fill_init(Tensor<T>& t, InitKind kind, Rng& rng, double std = kInitStd) {
  switch (kind) {
    case InitKind::Zeros: t.fill(T{0}); break;
    case InitKind::Ones: t.fill(T{1}); break;
    case InitKind::TruncNormal:
      for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(std));
      break;
  }
}

/// Truncated-normal (std 0.02, cut at 2 std) weights, zero biases and shifts,
/// unit norm scales. Deterministic in `seed`.
inline ViTParams init_vit(const ViTConfig& config, std::uint64_t seed) {
  config.validate();
  ViTParams p;
  p.config = config;
  p.meta.seed = seed;
  Rng rng(derive_seed(seed, "vit-init"));
  for (auto& e : vit_layout(config)) {
    Tensor<float> t(e.shape);
    fill_init(t, e.init, rng);
    p.params.add(e.name, e.group, std::move(t), e.decay);
  }
  return p;
}

/// Verifies names, tags and shapes against the canonical layout.
template <class T>
void audit_shapes(const BasicViTParams<T>& p) {
  p.config.validate();
  const auto layout = vit_layout(p.config);
  if (layout.size() != p.params.size()) {
    throw DimensionError("parameter set has " + std::to_string(p.params.size()) +
                         " tensors, layout expects " + std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& have = p.params.item(i);
    const auto& want = layout[i];
    if (have.name != want.name) {
      throw DimensionError("parameter " + std::to_string(i) + " is '" + have.name +
                           "', expected '" + want.name + "'");
    }
    if (have.value.shape() != want.shape) {
      throw DimensionError("parameter '" + have.name + "' has shape " +
                           shape_string(have.value.shape()) + ", expected " +
                           shape_string(want.shape));
    }
    if (!(have.group == want.group)) {
      throw DimensionError("parameter '" + have.name + "' carries the wrong group tag");
    }
  }
}

/// Replaces the classifier with a freshly initialised head of `num_classes`.
inline void reset_classifier(ViTParams& p, std::size_t num_classes, std::uint64_t seed) {
  ViTConfig c = p.config;
  c.num_classes = num_classes;
  c.validate();
  Rng rng(derive_seed(seed, "vit-head"));
  Tensor<float> w({c.dim, num_classes});
  fill_init(w, InitKind::TruncNormal, rng);
  p.params[names::kHeadWeight] = std::move(w);
  p.params[names::kHeadBias] = Tensor<float>({num_classes});
  p.config = c;
}

/// Copies classifier weight and bias (and the class count) from `src`.
template <class T>
void copy_classifier(BasicViTParams<T>& dst, const BasicViTParams<T>& src) {
  dst.params[names::kHeadWeight] = src.params[names::kHeadWeight];
  dst.params[names::kHeadBias] = src.params[names::kHeadBias];
  dst.config.num_classes = src.config.num_classes;
}

template <class T>
std::size_t param_count(const BasicViTParams<T>& p) {
  return p.params.element_count();
}

/// Closed-form parameter count from the config alone.
inline std::size_t param_count(const ViTConfig& c) {
  const std::size_t d = c.dim, f = c.hidden();
  const std::size_t embed = c.patch_dim() * d + d + d + c.tokens() * d;
  const std::size_t block = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
  return embed + c.depth * block + 2 * d + d * c.num_classes + c.num_classes;
}

/// 2 x multiply-accumulates of every matrix product in one batch-1 forward
/// pass, attention score and value products included.
inline std::uint64_t flops_estimate(const ViTConfig& c) {
  const std::uint64_t s = c.tokens(), d = c.dim, f = c.hidden();
  std::uint64_t macs = static_cast<std::uint64_t>(c.num_patches()) * c.patch_dim() * d;
  const std::uint64_t per_block = 4 * s * d * d  // q, k, v, o
                                  + 2 * s * s * d  // scores and weighted values
                                  + 2 * s * d * f;  // fc1, fc2
  macs += c.depth * per_block;
  macs += d * c.num_classes;
  return 2 * macs;
}

// ---------------------------------------------------------------------------
// Forward pass

namespace detail {

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

inline constexpr double kLayerNormEps = 1e-6;

template <class T>
struct LayerNormCache {
  std::vector<T> xhat;
  std::vector<T> rstd;
  std::vector<T> out;
};

template <class T>
void layernorm_forward(std::span<const T> x, std::span<const T> scale, std::span<const T> shift,
                       std::size_t rows, std::size_t d, LayerNormCache<T>& c) {
  c.xhat.resize(rows * d);
  c.rstd.resize(rows);
  c.out.resize(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double z = xr[j] - mean;
      var += z * z;
    }
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    c.rstd[r] = static_cast<T>(rstd);
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xr[j] - mean) * rstd;
      c.xhat[r * d + j] = static_cast<T>(xh);
      c.out[r * d + j] = static_cast<T>(xh * scale[j] + shift[j]);
    }
  }
}

}  // namespace detail

template <class T>
struct BlockCache {
  std::vector<T> input;  // residual stream entering the block [rows x d]
  detail::LayerNormCache<T> ln1;
  std::vector<T> q, k, v;  // [rows x d]
  std::vector<T> attn;     // [batch x heads x S x S]
  std::vector<T> attn_out; // concatenated heads [rows x d]
  std::vector<T> mid;      // residual after attention [rows x d]
  detail::LayerNormCache<T> ln2;
  std::vector<T> hidden_pre;  // [rows x f]
  std::vector<T> hidden_act;  // [rows x f]
};

/// Activations kept for backpropagation and gram capture.
template <class T>
struct ForwardCache {
  std::size_t batch = 0;
  std::vector<T> patches;  // [batch*P x patch_dim]
  std::vector<BlockCache<T>> blocks;
  std::vector<T> output;   // residual stream after the last block [rows x d]
  std::vector<T> cls;      // class-token rows of `output` [batch x d]
  detail::LayerNormCache<T> final_ln;
};

namespace detail {

template <class T>
void check_images(const ViTConfig& c, const Tensor<T>& images) {
  if (images.rank() != 4 || images.dim(1) != c.channels || images.dim(2) != c.image_size ||
      images.dim(3) != c.image_size) {
    throw DimensionError("images of shape " + shape_string(images.shape()) +
                         " do not match [batch x " + std::to_string(c.channels) + " x " +
                         std::to_string(c.image_size) + " x " + std::to_string(c.image_size) +
                         "]");
  }
}

/// Rows are patches in row-major grid order; each row lists channel, then
/// row-in-patch, then column-in-patch.
template <class T>
std::vector<T> patchify(const ViTConfig& c, const Tensor<T>& images) {
  const std::size_t batch = images.dim(0), ps = c.patch_size, g = c.grid(), hw = c.image_size;
  const std::size_t pd = c.patch_dim(), np = c.num_patches();
  std::vector<T> out(batch * np * pd);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx) {
        T* row = out.data() + ((b * np) + gy * g + gx) * pd;
        std::size_t col = 0;
        for (std::size_t ch = 0; ch < c.channels; ++ch)
          for (std::size_t py = 0; py < ps; ++py)
            for (std::size_t px = 0; px < ps; ++px)
              row[col++] = images.data()[((b * c.channels + ch) * hw + gy * ps + py) * hw +
                                         gx * ps + px];
      }
  return out;
}

template <class T>
void add_bias(std::span<T> y, std::span<const T> bias, std::size_t rows) {
  const std::size_t n = bias.size();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] += bias[j];
}

template <class T>
void linear(std::span<const T> x, const Tensor<T>& w, const Tensor<T>& b, std::vector<T>& y,
            std::size_t rows) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  y.resize(rows * out);
  kernels::gemm_nn<T>(x, w.data(), y, rows, in, out);
  add_bias<T>(y, b.data(), rows);
}

}  // namespace detail

/// Runs the model on a batch [batch x channels x H x W] and returns logits
/// [batch x num_classes]. Pre-norm blocks; the classifier reads the class
/// token after the final norm.
template <class T>
Tensor<T> forward(const BasicViTParams<T>& p, const Tensor<T>& images,
                  ForwardCache<T>* cache = nullptr) {
  audit_shapes(p);
  const ViTConfig& c = p.config;
  detail::check_images(c, images);
  ForwardCache<T> local;
  ForwardCache<T>& fc = cache ? *cache : local;

  const std::size_t batch = images.dim(0), s = c.tokens(), d = c.dim, np = c.num_patches();
  const std::size_t rows = batch * s, heads = c.heads, hd = c.head_dim(), f = c.hidden();
  const auto& P = p.params;
  fc.batch = batch;
  fc.patches = detail::patchify(c, images);

  std::vector<T> embedded;
  detail::linear<T>(fc.patches, P[names::kPatchWeight], P[names::kPatchBias], embedded,
                    batch * np);
  std::vector<T> x(rows * d);
  const auto& cls = P[names::kClsToken];
  const auto& pos = P[names::kPosEmbed];
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < d; ++j) x[(b * s) * d + j] = cls[j] + pos[j];
    for (std::size_t t = 1; t < s; ++t)
      for (std::size_t j = 0; j < d; ++j)
        x[(b * s + t) * d + j] = embedded[(b * np + t - 1) * d + j] + pos[t * d + j];
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  fc.blocks.resize(c.depth);
  for (std::size_t l = 0; l < c.depth; ++l) {
    BlockCache<T>& bc = fc.blocks[l];
    bc.input = x;
    detail::layernorm_forward<T>(x, P[names::block(l, "norm1.scale")].data(),
                                 P[names::block(l, "norm1.shift")].data(), rows, d, bc.ln1);
    detail::linear<T>(bc.ln1.out, P[names::block(l, "attn.q.weight")],
                      P[names::block(l, "attn.q.bias")], bc.q, rows);
    detail::linear<T>(bc.ln1.out, P[names::block(l, "attn.k.weight")],
                      P[names::block(l, "attn.k.bias")], bc.k, rows);
    detail::linear<T>(bc.ln1.out, P[names::block(l, "attn.v.weight")],
                      P[names::block(l, "attn.v.bias")], bc.v, rows);

    bc.attn.assign(batch * heads * s * s, T{0});
    bc.attn_out.assign(rows * d, T{0});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        T* a = bc.attn.data() + ((b * heads + h) * s) * s;
        for (std::size_t i = 0; i < s; ++i) {
          const T* qi = bc.q.data() + (b * s + i) * d + h * hd;
          for (std::size_t j = 0; j < s; ++j) {
            const T* kj = bc.k.data() + (b * s + j) * d + h * hd;
            double acc = 0.0;
            for (std::size_t e = 0; e < hd; ++e) acc += static_cast<double>(qi[e]) * kj[e];
            a[i * s + j] = static_cast<T>(acc * scale);
          }
          softmax_inplace<T>(std::span<T>(a + i * s, s));
          T* oi = bc.attn_out.data() + (b * s + i) * d + h * hd;
          for (std::size_t e = 0; e < hd; ++e) {
            double acc = 0.0;
            for (std::size_t j = 0; j < s; ++j)
              acc += static_cast<double>(a[i * s + j]) * bc.v[(b * s + j) * d + h * hd + e];
            oi[e] = static_cast<T>(acc);
          }
        }
      }

    std::vector<T> proj;
    detail::linear<T>(bc.attn_out, P[names::block(l, "attn.o.weight")],
                      P[names::block(l, "attn.o.bias")], proj, rows);
    bc.mid.resize(rows * d);
    for (std::size_t i = 0; i < rows * d; ++i) bc.mid[i] = x[i] + proj[i];

    detail::layernorm_forward<T>(bc.mid, P[names::block(l, "norm2.scale")].data(),
                                 P[names::block(l, "norm2.shift")].data(), rows, d, bc.ln2);
    detail::linear<T>(bc.ln2.out, P[names::block(l, "mlp.fc1.weight")],
                      P[names::block(l, "mlp.fc1.bias")], bc.hidden_pre, rows);
    bc.hidden_act.resize(rows * f);
    for (std::size_t i = 0; i < rows * f; ++i)
      bc.hidden_act[i] = static_cast<T>(detail::gelu(bc.hidden_pre[i]));
    std::vector<T> mlp_out;
    detail::linear<T>(bc.hidden_act, P[names::block(l, "mlp.fc2.weight")],
                      P[names::block(l, "mlp.fc2.bias")], mlp_out, rows);
    for (std::size_t i = 0; i < rows * d; ++i) x[i] = bc.mid[i] + mlp_out[i];
  }
  fc.output = x;

  fc.cls.resize(batch * d);
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(b * s * d), d,
                fc.cls.begin() + static_cast<std::ptrdiff_t>(b * d));
  detail::layernorm_forward<T>(fc.cls, P[names::kFinalScale].data(),
                               P[names::kFinalShift].data(), batch, d, fc.final_ln);
  std::vector<T> logits;
  detail::linear<T>(fc.final_ln.out, P[names::kHeadWeight], P[names::kHeadBias], logits, batch);
  return Tensor<T>({batch, c.num_classes}, std::move(logits));
}

/// Index of the largest entry; ties go to the lowest index.
template <class T>
std::size_t argmax(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace vitmerge
