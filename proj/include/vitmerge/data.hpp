#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "vitmerge/errors.hpp"
#include "vitmerge/numkit.hpp"
#include "vitmerge/rng.hpp"

namespace vitmerge {

enum class Split { Train, Test };

inline const char* split_name(Split s) { return s == Split::Train ? "train" : "test"; }

/// Procedural task description. Each family is a different class-conditional
/// generator: oriented bars, displaced blobs, checkerboards of varying cell
/// size, or concentric rings.
struct SyntheticTaskSpec {
  int task_id = 1;
  std::size_t num_classes = 4;
  std::string family = "bars";
  double noise_std = 0.3;
  std::uint64_t seed = 0;
};

inline const std::vector<std::string>& known_families() {
  static const std::vector<std::string> f{"bars", "blobs", "checker", "rings"};
  return f;
}

struct Dataset {
  Tensor<float> images;  // [n x channels x H x W]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  int task_id = 0;
  Split split = Split::Train;

  std::size_t size() const { return labels.size(); }
  std::size_t image_elems() const { return images.size() / std::max<std::size_t>(size(), 1); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Noise-free image of class `cls`, [channels x size x size], values in [0, 1].
inline std::vector<float> class_template(const SyntheticTaskSpec& spec, std::size_t cls,
                                         std::size_t size, std::size_t channels) {
  const auto& fam = spec.family;
  if (std::find(known_families().begin(), known_families().end(), fam) ==
      known_families().end())
    throw ConfigError("unknown task family '" + fam + "'");
  if (cls >= spec.num_classes) throw DataError("class index out of range");

  const double n = static_cast<double>(spec.num_classes);
  const double c = static_cast<double>(cls);
  const double half = (static_cast<double>(size) - 1.0) / 2.0;
  std::vector<float> plane(size * size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) - half, dy = static_cast<double>(y) - half;
      double v = 0.0;
      if (fam == "bars") {
        const double theta = std::numbers::pi * c / n;
        const double dist = std::abs(-std::sin(theta) * dx + std::cos(theta) * dy);
        v = std::exp(-dist * dist / 2.0);
      } else if (fam == "blobs") {
        const double phi = 2.0 * std::numbers::pi * c / n;
        const double r = static_cast<double>(size) / 4.0, sigma = static_cast<double>(size) / 8.0;
        const double ex = dx - r * std::cos(phi), ey = dy - r * std::sin(phi);
        v = std::exp(-(ex * ex + ey * ey) / (2.0 * sigma * sigma));
      } else if (fam == "checker") {
        const std::size_t cell = cls + 1;
        v = ((x / cell + y / cell) % 2 == 0) ? 1.0 : 0.0;
      } else {  // rings
        const double radius = (c + 1.0) * (static_cast<double>(size) / 2.0) / (n + 1.0);
        const double rho = std::sqrt(dx * dx + dy * dy) - radius;
        v = std::exp(-rho * rho / (2.0 * 0.8 * 0.8));
      }
      plane[y * size + x] = static_cast<float>(v);
    }
  std::vector<float> out;
  out.reserve(channels * size * size);
  for (std::size_t ch = 0; ch < channels; ++ch) out.insert(out.end(), plane.begin(), plane.end());
  return out;
}

/// Deterministic in (spec, split, n). Image i has label i mod num_classes and
/// equals its class template plus Gaussian noise seeded by (seed, split, i).
inline Dataset generate(const SyntheticTaskSpec& spec, Split split, std::size_t n,
                        std::size_t image_size = 16, std::size_t channels = 1) {
  if (spec.num_classes < 2) throw ConfigError("a task needs at least two classes");
  if (n < spec.num_classes) throw ConfigError("dataset size below num_classes");
  if (spec.noise_std < 0.0) throw ConfigError("noise_std must be non-negative");
  std::vector<std::vector<float>> templates;
  for (std::size_t k = 0; k < spec.num_classes; ++k)
    templates.push_back(class_template(spec, k, image_size, channels));

  const std::size_t elems = channels * image_size * image_size;
  Dataset ds;
  ds.images = Tensor<float>({n, channels, image_size, image_size});
  ds.labels.resize(n);
  ds.num_classes = spec.num_classes;
  ds.task_id = spec.task_id;
  ds.split = split;
  const std::uint64_t split_seed = derive_seed(spec.seed, split_name(split));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % spec.num_classes;
    ds.labels[i] = static_cast<int>(label);
    float* dst = ds.images.data().data() + i * elems;
    std::copy(templates[label].begin(), templates[label].end(), dst);
    if (spec.noise_std > 0.0) {
      Rng rng(derive_seed(split_seed, static_cast<std::uint64_t>(i)));
      for (std::size_t e = 0; e < elems; ++e)
        dst[e] = static_cast<float>(dst[e] + spec.noise_std * rng.normal());
    }
  }
  return ds;
}

inline Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices) {
  const std::size_t elems = ds.image_elems();
  Shape shape = ds.images.shape();
  shape[0] = indices.size();
  Dataset out;
  out.images = Tensor<float>(shape);
  out.labels.resize(indices.size());
  out.num_classes = ds.num_classes;
  out.task_id = ds.task_id;
  out.split = ds.split;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= ds.size()) throw DataError("subset index out of range");
    std::copy_n(ds.images.data().begin() + static_cast<std::ptrdiff_t>(src * elems), elems,
                out.images.data().begin() + static_cast<std::ptrdiff_t>(i * elems));
    out.labels[i] = ds.labels[src];
  }
  return out;
}

/// Random subset of floor(fraction * n) indices (at least one), sorted.
inline std::vector<std::size_t> sample_indices(std::size_t n, double fraction,
                                               std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fraction must be in (0, 1]");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle<std::size_t>(idx);
  const auto k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9)));
  idx.resize(std::min(k, n));
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<std::size_t> complement_indices(std::size_t n,
                                                   const std::vector<std::size_t>& taken) {
  std::vector<bool> used(n, false);
  for (auto i : taken) used.at(i) = true;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i)
    if (!used[i]) out.push_back(i);
  return out;
}

/// Stacks the given samples into a batch tensor.
inline Tensor<float> gather_images(const Dataset& ds, std::span<const std::size_t> indices) {
  const std::size_t elems = ds.image_elems();
  Shape shape = ds.images.shape();
  shape[0] = indices.size();
  Tensor<float> out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(ds.images.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * elems), elems,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * elems));
  return out;
}

}  // namespace vitmerge
