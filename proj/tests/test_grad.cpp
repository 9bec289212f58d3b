#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "vitmerge/data.hpp"
#include "vitmerge/gatenet.hpp"
#include "vitmerge/grad.hpp"
#include "vitmerge/train.hpp"

using namespace vitmerge;

namespace {

// Model with non-trivial norms and biases so every component carries signal.
BasicViTParams<double> perturbed_model(const ViTConfig& cfg, std::uint64_t seed) {
  auto p = init_vit(cfg, seed).cast<double>();
  Rng rng(seed + 99);
  for (auto& item : p.params)
    for (auto& v : item.value.data()) v += 0.1 * rng.normal();
  return p;
}

Tensor<double> random_images(const ViTConfig& cfg, std::size_t batch, std::uint64_t seed) {
  Tensor<double> x({batch, cfg.channels, cfg.image_size, cfg.image_size});
  Rng rng(seed);
  for (auto& v : x.data()) v = rng.normal();
  return x;
}

double loss_at(const BasicViTParams<double>& p, const Tensor<double>& x,
               const std::vector<int>& y, double wd) {
  return loss_and_grads(p, x, y, wd).loss;
}

struct GradCheck {
  std::size_t checked = 0;
  double worst = 0.0;
  std::map<GroupKind, std::size_t> per_group;
};

// Central differences, h = 1e-4, in double precision.
GradCheck finite_difference_check(BasicViTParams<double> p, const Tensor<double>& x,
                                  const std::vector<int>& y, double wd, std::size_t samples,
                                  std::uint64_t seed) {
  const auto analytic = loss_and_grads(p, x, y, wd);
  GradCheck out;
  Rng rng(seed);
  const double h = 1e-4;
  // Round-robin over tensors so every group gets coordinates.
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t ti = s % p.params.size();
    auto& t = p.params.item(ti).value;
    const std::size_t k = static_cast<std::size_t>(rng.below(t.size()));
    const double orig = t[k];
    t[k] = orig + h;
    const double up = loss_at(p, x, y, wd);
    t[k] = orig - h;
    const double down = loss_at(p, x, y, wd);
    t[k] = orig;
    const double fd = (up - down) / (2 * h);
    const double g = analytic.grads.item(ti).value[k];
    const double rel = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-6});
    out.worst = std::max(out.worst, rel);
    ++out.checked;
    ++out.per_group[p.params.item(ti).group.kind];
  }
  return out;
}

}  // namespace

TEST(LossAndGrads, MatchesFiniteDifferencesAcrossAllGroups) {
  ViTConfig cfg;
  cfg.num_classes = 5;
  const auto p = perturbed_model(cfg, 3);
  const auto x = random_images(cfg, 3, 4);
  const std::vector<int> y{0, 3, 4};
  auto res = finite_difference_check(p, x, y, 1e-3, 260, 5);
  EXPECT_GE(res.checked, 200u);
  for (auto kind : {GroupKind::Embedding, GroupKind::Norm, GroupKind::Attention, GroupKind::MLP,
                    GroupKind::Classifier})
    EXPECT_GT(res.per_group[kind], 0u) << group_kind_name(kind);
  EXPECT_LE(res.worst, 1e-4);
}

TEST(LossAndGrads, UniformLogitsGiveLogNumClasses) {
  ViTConfig cfg;
  cfg.num_classes = 7;
  auto p = init_vit(cfg, 1);
  p.params[names::kHeadWeight].fill(0.0f);
  Tensor<float> x({2, 1, 16, 16});
  const std::vector<int> y{1, 6};
  const auto lg = loss_and_grads(p, x, y, 0.0);
  EXPECT_NEAR(lg.cross_entropy, std::log(7.0), 1e-6);
}

TEST(LossAndGrads, DuplicatedBatchGivesSameLossAndGrads) {
  ViTConfig cfg;
  cfg.num_classes = 3;
  const auto p = perturbed_model(cfg, 8);
  const auto x = random_images(cfg, 2, 9);
  Tensor<double> xx({4, 1, 16, 16});
  std::copy(x.data().begin(), x.data().end(), xx.data().begin());
  std::copy(x.data().begin(), x.data().end(), xx.data().begin() + x.size());
  const auto a = loss_and_grads(p, x, std::vector<int>{0, 2}, 1e-4);
  const auto b = loss_and_grads(p, xx, std::vector<int>{0, 2, 0, 2}, 1e-4);
  EXPECT_NEAR(a.loss, b.loss, 1e-12);
  for (std::size_t i = 0; i < a.grads.size(); ++i) {
    const auto& ga = a.grads.item(i).value;
    const auto& gb = b.grads.item(i).value;
    for (std::size_t k = 0; k < ga.size(); ++k) ASSERT_NEAR(ga[k], gb[k], 1e-12);
  }
}

TEST(LossAndGrads, RejectsOutOfRangeLabels) {
  ViTConfig cfg;
  cfg.num_classes = 3;
  const auto p = init_vit(cfg, 1);
  Tensor<float> x({1, 1, 16, 16});
  EXPECT_THROW(loss_and_grads(p, x, std::vector<int>{3}, 0.0), DataError);
  EXPECT_THROW(loss_and_grads(p, x, std::vector<int>{-1}, 0.0), DataError);
}

TEST(GateGrads, MatchFiniteDifferences) {
  GateConfig gc{64, {16, 8}, 3};
  auto g = init_gate(gc, 2).cast<double>();
  Tensor<double> x({4, 64});
  Rng rng(1);
  for (auto& v : x.data()) v = rng.normal();
  const std::vector<int> y{0, 1, 2, 1};
  const auto an = gate_loss_and_grads(g, x, y, 1e-3);
  double worst = 0.0;
  for (std::size_t i = 0; i < g.params.size(); ++i) {
    auto& t = g.params.item(i).value;
    for (std::size_t s = 0; s < 10; ++s) {
      const std::size_t k = rng.below(t.size());
      const double orig = t[k];
      t[k] = orig + 1e-4;
      const double up = gate_loss_and_grads(g, x, y, 1e-3).loss;
      t[k] = orig - 1e-4;
      const double down = gate_loss_and_grads(g, x, y, 1e-3).loss;
      t[k] = orig;
      const double fd = (up - down) / 2e-4;
      const double a = an.grads.item(i).value[k];
      worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-6}));
    }
  }
  EXPECT_LE(worst, 1e-4);
}
