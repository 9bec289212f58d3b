#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "vitmerge/vit.hpp"

namespace vitmerge {

template <class T>
struct LossAndGrads {
  double loss = 0.0;           // cross_entropy + decay
  double cross_entropy = 0.0;  // mean over the batch
  double decay = 0.0;          // 0.5 * weight_decay * sum of squared decayed weights
  ParamSet<T> grads;           // same names and shapes as the parameters
};

namespace detail {

template <class T>
void layernorm_backward(std::span<const T> dy, const LayerNormCache<T>& c,
                        std::span<const T> scale, std::size_t rows, std::size_t d,
                        std::span<T> dx, std::span<T> dscale, std::span<T> dshift) {
  std::vector<double> dxh(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dyr = dy.data() + r * d;
    const T* xh = c.xhat.data() + r * d;
    double sum1 = 0.0, sum2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dxh[j] = static_cast<double>(dyr[j]) * scale[j];
      sum1 += dxh[j];
      sum2 += dxh[j] * xh[j];
      dscale[j] += static_cast<T>(static_cast<double>(dyr[j]) * xh[j]);
      dshift[j] += dyr[j];
    }
    const double inv_d = 1.0 / static_cast<double>(d);
    const double rstd = c.rstd[r];
    for (std::size_t j = 0; j < d; ++j)
      dx[r * d + j] += static_cast<T>(rstd * (dxh[j] - sum1 * inv_d - xh[j] * sum2 * inv_d));
  }
}

template <class T>
void bias_grad(std::span<const T> dy, std::size_t rows, std::span<T> db) {
  const std::size_t n = db.size();
  std::vector<double> acc(n, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) acc[j] += dy[r * n + j];
  for (std::size_t j = 0; j < n; ++j) db[j] += static_cast<T>(acc[j]);
}

/// Backward through y = x W + b: accumulates dW, db and (optionally) dx.
template <class T>
void linear_backward(std::span<const T> x, std::span<const T> dy, const Tensor<T>& w,
                     std::size_t rows, Tensor<T>& dw, Tensor<T>& db, std::vector<T>* dx,
                     bool dx_accumulate) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  kernels::gemm_tn<T>(x, dy, dw.data(), in, rows, out, /*accumulate=*/true);
  bias_grad<T>(dy, rows, db.data());
  if (dx) {
    if (!dx_accumulate) dx->assign(rows * in, T{0});
    kernels::gemm_nt<T>(dy, w.data(), *dx, rows, out, in, /*accumulate=*/true);
  }
}

}  // namespace detail

/// Mean cross-entropy over the batch plus 0.5 * weight_decay * ||W||^2 over
/// the decayed weight matrices, with exact reverse-mode gradients.
template <class T>
LossAndGrads<T> loss_and_grads(const BasicViTParams<T>& p, const Tensor<T>& images,
                               std::span<const int> labels, double weight_decay) {
  const ViTConfig& c = p.config;
  if (images.rank() == 0 || images.dim(0) == 0) throw DataError("empty batch");
  if (labels.size() != images.dim(0)) throw DataError("label count does not match batch size");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c.num_classes)
      throw DataError("label " + std::to_string(y) + " out of range [0, " +
                      std::to_string(c.num_classes) + ")");

  ForwardCache<T> fc;
  const Tensor<T> logits = forward(p, images, &fc);

  const std::size_t batch = images.dim(0), s = c.tokens(), d = c.dim, np = c.num_patches();
  const std::size_t rows = batch * s, heads = c.heads, hd = c.head_dim(), f = c.hidden();
  const std::size_t nc = c.num_classes;
  const auto& P = p.params;

  LossAndGrads<T> out;
  out.grads = P.zeros_like();
  auto& G = out.grads;

  // Softmax cross-entropy.
  std::vector<T> dlogits(batch * nc);
  double ce = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = logits.data().data() + b * nc;
    double mx = row[0];
    for (std::size_t j = 1; j < nc; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < nc; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    ce += lse - row[labels[b]];
    for (std::size_t j = 0; j < nc; ++j) {
      const double prob = std::exp(row[j] - lse);
      dlogits[b * nc + j] =
          static_cast<T>((prob - (static_cast<int>(j) == labels[b] ? 1.0 : 0.0)) / batch);
    }
  }
  out.cross_entropy = ce / static_cast<double>(batch);

  // Classifier and final norm (class-token rows only).
  std::vector<T> dnorm_out;
  detail::linear_backward<T>(fc.final_ln.out, dlogits, P[names::kHeadWeight], batch,
                             G[names::kHeadWeight], G[names::kHeadBias], &dnorm_out, false);
  std::vector<T> dcls(batch * d, T{0});
  detail::layernorm_backward<T>(dnorm_out, fc.final_ln, P[names::kFinalScale].data(), batch, d,
                                dcls, G[names::kFinalScale].data(), G[names::kFinalShift].data());
  std::vector<T> dx(rows * d, T{0});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < d; ++j) dx[(b * s) * d + j] = dcls[b * d + j];

  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<T> dhidden(rows * f), dln(rows * d), dattn_out, dq(rows * d), dk(rows * d),
      dv(rows * d), dln1;
  std::vector<double> da(s), ds(s);
  for (std::size_t l = c.depth; l-- > 0;) {
    const BlockCache<T>& bc = fc.blocks[l];
    auto W = [&](const char* leaf) -> const Tensor<T>& { return P[names::block(l, leaf)]; };
    auto dW = [&](const char* leaf) -> Tensor<T>& { return G[names::block(l, leaf)]; };

    // MLP branch: x_out = mid + fc2(gelu(fc1(ln2(mid)))).
    std::vector<T> dmid = dx;
    std::vector<T> dact;
    detail::linear_backward<T>(bc.hidden_act, dx, W("mlp.fc2.weight"), rows,
                               dW("mlp.fc2.weight"), dW("mlp.fc2.bias"), &dact, false);
    for (std::size_t i = 0; i < rows * f; ++i)
      dhidden[i] = static_cast<T>(dact[i] * detail::gelu_grad(bc.hidden_pre[i]));
    std::vector<T> dln2;
    detail::linear_backward<T>(bc.ln2.out, dhidden, W("mlp.fc1.weight"), rows,
                               dW("mlp.fc1.weight"), dW("mlp.fc1.bias"), &dln2, false);
    detail::layernorm_backward<T>(dln2, bc.ln2, W("norm2.scale").data(), rows, d, dmid,
                                  dW("norm2.scale").data(), dW("norm2.shift").data());

    // Attention branch: mid = input + o(attn(q, k, v)).
    std::vector<T> dinput = dmid;
    detail::linear_backward<T>(bc.attn_out, dmid, W("attn.o.weight"), rows,
                               dW("attn.o.weight"), dW("attn.o.bias"), &dattn_out, false);
    std::fill(dq.begin(), dq.end(), T{0});
    std::fill(dk.begin(), dk.end(), T{0});
    std::fill(dv.begin(), dv.end(), T{0});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const T* a = bc.attn.data() + ((b * heads + h) * s) * s;
        for (std::size_t i = 0; i < s; ++i) {
          const T* doi = dattn_out.data() + (b * s + i) * d + h * hd;
          double dot = 0.0;
          for (std::size_t j = 0; j < s; ++j) {
            const T* vj = bc.v.data() + (b * s + j) * d + h * hd;
            T* dvj = dv.data() + (b * s + j) * d + h * hd;
            double acc = 0.0;
            for (std::size_t e = 0; e < hd; ++e) {
              acc += static_cast<double>(doi[e]) * vj[e];
              dvj[e] += static_cast<T>(static_cast<double>(a[i * s + j]) * doi[e]);
            }
            da[j] = acc;
            dot += acc * a[i * s + j];
          }
          for (std::size_t j = 0; j < s; ++j) ds[j] = a[i * s + j] * (da[j] - dot) * scale;
          const T* qi = bc.q.data() + (b * s + i) * d + h * hd;
          T* dqi = dq.data() + (b * s + i) * d + h * hd;
          for (std::size_t j = 0; j < s; ++j) {
            const T* kj = bc.k.data() + (b * s + j) * d + h * hd;
            T* dkj = dk.data() + (b * s + j) * d + h * hd;
            for (std::size_t e = 0; e < hd; ++e) {
              dqi[e] += static_cast<T>(ds[j] * kj[e]);
              dkj[e] += static_cast<T>(ds[j] * qi[e]);
            }
          }
        }
      }
    detail::linear_backward<T>(bc.ln1.out, dq, W("attn.q.weight"), rows, dW("attn.q.weight"),
                               dW("attn.q.bias"), &dln1, false);
    detail::linear_backward<T>(bc.ln1.out, dk, W("attn.k.weight"), rows, dW("attn.k.weight"),
                               dW("attn.k.bias"), &dln1, true);
    detail::linear_backward<T>(bc.ln1.out, dv, W("attn.v.weight"), rows, dW("attn.v.weight"),
                               dW("attn.v.bias"), &dln1, true);
    detail::layernorm_backward<T>(dln1, bc.ln1, W("norm1.scale").data(), rows, d, dinput,
                                  dW("norm1.scale").data(), dW("norm1.shift").data());
    dx = std::move(dinput);
  }

  // Token assembly: x0 = [cls; patch_embed] + pos.
  auto& dcls_tok = G[names::kClsToken];
  auto& dpos = G[names::kPosEmbed];
  std::vector<T> dembedded(batch * np * d);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < s; ++t)
      for (std::size_t j = 0; j < d; ++j) {
        const T g = dx[(b * s + t) * d + j];
        dpos[t * d + j] += g;
        if (t == 0)
          dcls_tok[j] += g;
        else
          dembedded[(b * np + t - 1) * d + j] = g;
      }
  detail::linear_backward<T>(fc.patches, dembedded, P[names::kPatchWeight], batch * np,
                             G[names::kPatchWeight], G[names::kPatchBias], nullptr, false);

  double decay = 0.0;
  if (weight_decay != 0.0) {
    for (std::size_t i = 0; i < P.size(); ++i) {
      const auto& item = P.item(i);
      if (!item.decay) continue;
      auto g = G.item(i).value.data();
      auto w = item.value.data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        decay += static_cast<double>(w[k]) * w[k];
        g[k] += static_cast<T>(weight_decay * w[k]);
      }
    }
  }
  out.decay = 0.5 * weight_decay * decay;
  out.loss = out.cross_entropy + out.decay;
  return out;
}

}  // namespace vitmerge
