#include <gtest/gtest.h>

#include "oracles.hpp"
#include "vitmerge/gating.hpp"

using namespace vitmerge;
using oracle::perturbed;
using oracle::tiny_config;

namespace {

std::vector<ViTParams> models_for(std::size_t n, std::uint64_t seed, double scale = 0.3) {
  std::vector<ViTParams> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(perturbed<float>(tiny_config(3 + i), seed + i, static_cast<int>(i + 1), scale));
  return out;
}

GateNet tiny_gate(std::size_t n, std::uint64_t seed) { return init_gate({64, {16}, n}, seed); }

Tensor<float> random_image(std::uint64_t seed) {
  Tensor<float> x({1, 8, 8});
  Rng rng(seed);
  for (auto& v : x.data()) v = static_cast<float>(rng.normal());
  return x;
}

std::vector<double> one_hot(std::size_t n, std::size_t k) {
  std::vector<double> p(n, 0.0);
  p[k] = 1.0;
  return p;
}

std::vector<std::string> block_weights(std::size_t b, bool attention) {
  std::vector<std::string> out;
  if (attention) {
    for (const char* leaf : names::kAttnWeights) out.push_back(names::block(b, leaf));
  } else {
    for (const char* leaf : names::kMlpWeights) out.push_back(names::block(b, leaf));
  }
  return out;
}

// Pairwise loop over i < j with the cosine oracle, per strategy.
double oracle_score(const std::vector<ViTParams>& ms, const std::vector<std::string>& names,
                    bool concat) {
  auto cos = [](const std::vector<double>& a, const std::vector<double>& b) {
    long double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      dot += static_cast<long double>(a[i]) * b[i];
      na += static_cast<long double>(a[i]) * a[i];
      nb += static_cast<long double>(b[i]) * b[i];
    }
    return static_cast<double>(dot / std::sqrt(na * nb));
  };
  auto flat = [&](const ViTParams& m, const std::vector<std::string>& ns) {
    std::vector<double> v;
    for (const auto& n : ns)
      for (float x : m.params[n].data()) v.push_back(x);
    return v;
  };
  auto pairs = [&](const std::vector<std::string>& ns) {
    double s = 0;
    for (std::size_t i = 0; i < ms.size(); ++i)
      for (std::size_t j = i + 1; j < ms.size(); ++j) s += cos(flat(ms[i], ns), flat(ms[j], ns));
    return s;
  };
  if (concat) return pairs(names);
  double s = 0;
  for (const auto& n : names) s += pairs({n});
  return s / static_cast<double>(names.size());
}

const SimilarityStrategy kStrategies[] = {
    SimilarityStrategy::ConcatCombined, SimilarityStrategy::ConcatSeparate,
    SimilarityStrategy::SeparateCombined, SimilarityStrategy::SeparateSeparate};

}  // namespace

TEST(GateProbs, ZeroOutputLayerIsUniform) {
  auto g = tiny_gate(4, 1);
  g.params[names::gate_weight(1)].fill(0.0f);
  const auto p = gate_probs(g, random_image(2));
  for (double v : p) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(GateProbs, AlwaysADistribution) {
  const auto g = tiny_gate(3, 3);
  Rng rng(4);
  for (int t = 0; t < 1000; ++t) {
    Tensor<float> x({64});
    for (auto& v : x.data()) v = static_cast<float>(5.0 * rng.normal());
    const auto p = gate_probs(g, x);
    ASSERT_EQ(p.size(), 3u);
    double sum = 0;
    for (double v : p) {
      ASSERT_GT(v, 0.0);
      sum += v;
    }
    ASSERT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(GateProbs, RejectsEmptyOrMisshapedGate) {
  EXPECT_THROW(gate_probs(GateNet{}, random_image(1)), GateError);
  EXPECT_THROW(gate_probs(tiny_gate(3, 1), Tensor<float>({1, 16, 16})), GateError);
  auto g = tiny_gate(3, 1);
  g.params[names::gate_weight(0)] = Tensor<float>({63, 16});
  EXPECT_THROW(gate_probs(g, random_image(1)), GateError);
}

TEST(GateProbs, ArgmaxInvariantToTemperature) {
  const auto g = tiny_gate(3, 5);
  for (float temperature : {0.1f, 0.5f, 3.0f, 40.0f}) {
    auto scaled = g;
    for (const auto& n : {names::gate_weight(1), names::gate_bias(1)})
      for (auto& v : scaled.params[n].data()) v /= temperature;
    for (std::uint64_t s = 0; s < 50; ++s) {
      const auto x = random_image(100 + s);
      EXPECT_EQ(argmax<double>(gate_probs(g, x)), argmax<double>(gate_probs(scaled, x)));
    }
  }
}

TEST(Similarity, IdenticalModelsScoreAllPairs) {
  const auto m = perturbed<float>(tiny_config(), 1, 1);
  for (auto s : kStrategies) {
    const auto r = similarity(std::vector<ViTParams>{m, m, m}, s);
    for (double v : r.attention) EXPECT_EQ(v, 3.0) << strategy_name(s);
    for (double v : r.mlp) EXPECT_EQ(v, 3.0) << strategy_name(s);
  }
}

TEST(Similarity, OrthogonalAttentionScoresZero) {
  auto a = perturbed<float>(tiny_config(), 1, 1);
  auto b = perturbed<float>(tiny_config(), 2, 2);
  // Disjoint supports: a keeps even coordinates, b keeps odd ones.
  for (const auto& n : block_weights(1, true))
    for (std::size_t k = 0; k < a.params[n].size(); ++k) (k % 2 ? a : b).params[n][k] = 0.0f;
  for (auto s : kStrategies)
    EXPECT_NEAR(similarity(std::vector<ViTParams>{a, b}, s).attention[1], 0.0, 1e-10);
}

TEST(Similarity, MatchesPairwiseOracle) {
  const auto ms = models_for(3, 10);
  for (auto s : kStrategies) {
    const auto r = similarity(ms, s);
    const bool concat_attn = s == SimilarityStrategy::ConcatCombined || s == SimilarityStrategy::ConcatSeparate;
    const bool combined_mlp = s == SimilarityStrategy::ConcatCombined || s == SimilarityStrategy::SeparateCombined;
    for (std::size_t b = 0; b < 2; ++b) {
      EXPECT_NEAR(r.attention[b], oracle_score(ms, block_weights(b, true), concat_attn), 1e-10);
      EXPECT_NEAR(r.mlp[b], oracle_score(ms, block_weights(b, false), combined_mlp), 1e-10);
      EXPECT_LE(std::abs(r.attention[b]), 3.0);
      EXPECT_LE(std::abs(r.mlp[b]), 3.0);
    }
  }
}

TEST(Similarity, PermutationAndScaleInvariant) {
  const auto ms = models_for(3, 20, 0.05);
  for (auto s : kStrategies) {
    const auto ref = similarity(ms, s);
    EXPECT_EQ(similarity(std::vector<ViTParams>{ms[2], ms[0], ms[1]}, s), ref);
    auto scaled = ms;
    for (auto& item : scaled[1].params)
      for (auto& v : item.value.data()) v *= 4.0f;  // exact in binary
    const auto sr = similarity(scaled, s);
    for (std::size_t b = 0; b < 2; ++b) {
      EXPECT_NEAR(sr.attention[b], ref.attention[b], 1e-10);
      EXPECT_NEAR(sr.mlp[b], ref.mlp[b], 1e-10);
    }
    auto odd = ms;
    for (auto& item : odd[0].params)
      for (auto& v : item.value.data()) v *= 0.37f;
    const auto orr = similarity(odd, s);
    for (std::size_t b = 0; b < 2; ++b) {
      EXPECT_NEAR(orr.attention[b], ref.attention[b], 1e-6);
      EXPECT_NEAR(orr.mlp[b], ref.mlp[b], 1e-6);
    }
  }
}

TEST(Similarity, ScaleInvariantInDoubleArithmetic) {
  // Float storage rounds c * w; in exact arithmetic on the stored values the
  // score is unchanged to 1e-10.
  const auto ms = models_for(2, 30, 0.05);
  const auto names = block_weights(0, true);
  auto flat = [&](const ViTParams& m, double c) {
    std::vector<double> v;
    for (const auto& n : names)
      for (float x : m.params[n].data()) v.push_back(c * x);
    return v;
  };
  const auto a = flat(ms[0], 1.0), b = flat(ms[1], 1.0), ca = flat(ms[0], 0.37);
  EXPECT_NEAR(cosine_similarity<double>(ca, b).value, cosine_similarity<double>(a, b).value, 1e-10);
}

TEST(Similarity, Errors) {
  const auto ms = models_for(2, 40);
  EXPECT_THROW(similarity(std::vector<ViTParams>{ms[0]}), MergeError);
  auto c = tiny_config();
  c.mlp_ratio = 3;
  EXPECT_THROW(similarity(std::vector<ViTParams>{ms[0], perturbed<float>(c, 1, 2)}), MergeError);
  EXPECT_THROW(parse_strategy("concat"), ConfigError);
  for (auto s : kStrategies) EXPECT_EQ(parse_strategy(strategy_name(s)), s);
}

TEST(Plan, SelectsLowestScores) {
  SimilarityReport r;
  r.attention = {0.4, 0.1, 0.3, 0.2};
  r.mlp = {0.1, 0.2, 0.3, 0.4};
  const auto p = plan_from_m(r, 2, StaticMethod::AvgMean);
  EXPECT_EQ(p.gated_attention, (std::set<std::size_t>{1, 3}));
  EXPECT_EQ(p.gated_mlp, (std::set<std::size_t>{0, 1}));
}

TEST(Plan, ZeroStillGatesEmbeddingNormAndHead) {
  SimilarityReport r;
  r.attention = r.mlp = {0.4, 0.1};
  const auto p = plan_from_m(r, 0, StaticMethod::RegMean);
  EXPECT_TRUE(p.gated_attention.empty());
  EXPECT_TRUE(p.gated_mlp.empty());
  EXPECT_TRUE(p.is_gated({GroupKind::Embedding, -1}));
  EXPECT_TRUE(p.is_gated({GroupKind::Norm, 0}));
  EXPECT_FALSE(p.is_gated({GroupKind::Attention, 1}));
}

TEST(Plan, NestedInMAndClamped) {
  SimilarityReport r;
  Rng rng(5);
  for (int i = 0; i < 6; ++i) {
    r.attention.push_back(rng.uniform());
    r.mlp.push_back(std::floor(3 * rng.uniform()));  // forces ties
  }
  MergePlan prev = plan_from_m(r, 0, StaticMethod::AvgMean);
  for (std::size_t m = 1; m <= 6; ++m) {
    const auto p = plan_from_m(r, m, StaticMethod::AvgMean);
    EXPECT_EQ(p.gated_attention.size(), m);
    EXPECT_EQ(p.gated_mlp.size(), m);
    EXPECT_TRUE(std::includes(p.gated_attention.begin(), p.gated_attention.end(),
                              prev.gated_attention.begin(), prev.gated_attention.end()));
    EXPECT_TRUE(std::includes(p.gated_mlp.begin(), p.gated_mlp.end(), prev.gated_mlp.begin(),
                              prev.gated_mlp.end()));
    prev = p;
  }
  const auto big = plan_from_m(r, 9, StaticMethod::AvgMean);
  EXPECT_TRUE(big.clamped);
  EXPECT_EQ(big.m, 6u);
  EXPECT_EQ(big.gated_attention.size(), 6u);
}

TEST(Plan, TiesGoToLowerBlockDeterministically) {
  SimilarityReport r;
  r.attention = {0.5, 0.2, 0.2, 0.2};
  r.mlp = {1.0, 1.0, 1.0, 1.0};
  for (int rep = 0; rep < 3; ++rep) {
    const auto p = plan_from_m(r, 2, StaticMethod::AvgMean);
    EXPECT_EQ(p.gated_attention, (std::set<std::size_t>{1, 2}));
    EXPECT_EQ(p.gated_mlp, (std::set<std::size_t>{0, 1}));
  }
}

TEST(MergedModel, OneHotRecoversModelTensorsAndHead) {
  const auto ms = models_for(3, 50);
  const auto rep = similarity(ms);
  for (std::size_t m : {0, 1, 2}) {
    const auto mm = MergedModel::build(ms, tiny_gate(3, 1), plan_from_m(rep, m, StaticMethod::AvgMean));
    for (std::size_t k = 0; k < 3; ++k) {
      const auto a = mm.assemble(one_hot(3, k));
      for (const auto& n : mm.gated_names()) ASSERT_EQ(a.params[n], ms[k].params[n]) << n;
      EXPECT_EQ(a.params[names::kHeadWeight], ms[k].params[names::kHeadWeight]);
      EXPECT_EQ(a.params[names::kHeadBias], ms[k].params[names::kHeadBias]);
      EXPECT_EQ(a.config.num_classes, ms[k].config.num_classes);
    }
  }
}

TEST(MergedModel, OneHotOnCopiesEqualsSingleModel) {
  auto m = perturbed<float>(tiny_config(), 60, 1);
  std::vector<ViTParams> ms{m, m, m};
  ms[1].meta.task_id = 2;
  ms[2].meta.task_id = 3;
  const auto mm = MergedModel::build(ms, tiny_gate(3, 1), plan_from_m(similarity(ms), 1, StaticMethod::AvgMean));
  const auto x = random_image(61);
  const auto expect = forward(m, Tensor<float>({1, 1, 8, 8}, {x.data().begin(), x.data().end()}));
  for (std::size_t k = 0; k < 3; ++k) {
    const auto r = mm.infer_with(x, one_hot(3, k));
    EXPECT_EQ(r.task_index, k);
    for (std::size_t j = 0; j < expect.size(); ++j) EXPECT_EQ(r.logits[j], expect[j]);
  }
}

TEST(MergedModel, UniformGatingAtFullDepthIsAvgMean) {
  const auto ms = models_for(3, 70);
  const auto mm = MergedModel::build(ms, tiny_gate(3, 1), plan_from_m(similarity(ms), 2, StaticMethod::AvgMean));
  const auto avg = avg_mean(ms, 1);
  const std::vector<double> uniform(3, 1.0 / 3.0);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto x = random_image(80 + s);
    const auto r = mm.infer_with(x, uniform);
    EXPECT_EQ(r.task_index, 0u);
    const auto expect = forward(avg, Tensor<float>({1, 1, 8, 8}, {x.data().begin(), x.data().end()}));
    ASSERT_EQ(r.logits.size(), expect.size());
    for (std::size_t j = 0; j < expect.size(); ++j) EXPECT_NEAR(r.logits[j], expect[j], 1e-6);
  }
}

TEST(MergedModel, GatedTensorsAreExactWeightedSums) {
  const auto ms = models_for(3, 90);
  const auto mm = MergedModel::build(ms, tiny_gate(3, 1), plan_from_m(similarity(ms), 2, StaticMethod::AvgMean));
  Rng rng(91);
  for (int t = 0; t < 5; ++t) {
    std::vector<double> p(3);
    double z = 0;
    for (auto& v : p) z += (v = rng.uniform() + 1e-3);
    for (auto& v : p) v /= z;
    const auto a = mm.assemble(p);
    for (const auto& n : mm.gated_names()) {
      const auto& w = a.params[n];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double ref = p[0] * ms[0].params[n][k] + p[1] * ms[1].params[n][k] + p[2] * ms[2].params[n][k];
        ASSERT_NEAR(w[k], ref, 1e-10 + 1e-7 * std::abs(ref)) << n;
        ASSERT_EQ(w[k], static_cast<float>(ref)) << n;
      }
    }
  }
}

TEST(MergedModel, StaticCacheIsTheComplementOfGatedGroups) {
  const auto ms = models_for(3, 100);
  const auto plan = plan_from_m(similarity(ms), 1, StaticMethod::AvgMean);
  const auto mm = MergedModel::build(ms, tiny_gate(3, 1), plan);
  std::set<std::string> all;
  for (const auto& n : mm.static_names()) EXPECT_TRUE(all.insert(n).second) << n;
  for (const auto& n : mm.gated_names()) EXPECT_TRUE(all.insert(n).second) << n;
  std::size_t backbone = 0;
  for (const auto& item : ms[0].params) {
    if (item.group.kind == GroupKind::Classifier) continue;
    ++backbone;
    EXPECT_EQ(plan.is_gated(item.group), !std::count(mm.static_names().begin(), mm.static_names().end(), item.name))
        << item.name;
  }
  EXPECT_EQ(all.size(), backbone);
}

TEST(MergedModel, RegMeanStaticPartEqualsRegMean) {
  const auto ms = models_for(3, 110);
  std::vector<GramStats> grams;
  for (std::size_t i = 0; i < 3; ++i) grams.push_back(collect_grams(ms[i], oracle::random_images(tiny_config(), 4, 111 + i)));
  const auto rm = regmean(ms, grams, 0.9, 1);
  const auto mm = MergedModel::build(ms, tiny_gate(3, 1), plan_from_m(similarity(ms), 0, StaticMethod::RegMean), &grams);
  for (const auto& n : mm.static_names()) EXPECT_EQ(mm.static_tensor(n), rm.params[n]) << n;
  EXPECT_THROW(MergedModel::build(ms, tiny_gate(3, 1), plan_from_m(similarity(ms), 0, StaticMethod::RegMean)),
               ConfigError);
}

TEST(MergedModel, BuildIsDeterministic) {
  const auto ms = models_for(3, 120);
  const auto plan = plan_from_m(similarity(ms), 1, StaticMethod::AvgMean);
  const auto a = MergedModel::build(ms, tiny_gate(3, 1), plan);
  const auto b = MergedModel::build(ms, tiny_gate(3, 1), plan);
  EXPECT_EQ(a.static_names(), b.static_names());
  for (const auto& n : a.static_names()) EXPECT_EQ(a.static_tensor(n), b.static_tensor(n));
  const auto x = random_image(121);
  EXPECT_EQ(a.infer(x).logits, b.infer(x).logits);
}

TEST(MergedModel, ParamsGrowWithMAndFlopsDoNot) {
  const auto ms = models_for(3, 130);
  const auto rep = similarity(ms);
  const auto gate = tiny_gate(3, 1);
  std::size_t prev = 0;
  std::uint64_t flops = 0;
  for (std::size_t m = 0; m <= 2; ++m) {
    const auto mm = MergedModel::build(ms, gate, plan_from_m(rep, m, StaticMethod::AvgMean));
    std::size_t expect = gate.params.element_count();
    for (const auto& n : mm.static_names()) expect += ms[0].params[n].size();
    for (const auto& n : mm.gated_names()) expect += 3 * ms[0].params[n].size();
    for (const auto& x : ms) expect += x.params[names::kHeadWeight].size() + x.params[names::kHeadBias].size();
    EXPECT_EQ(mm.param_count(), expect);
    EXPECT_GT(mm.param_count(), prev);
    prev = mm.param_count();
    if (m == 0) flops = mm.flops();
    EXPECT_EQ(mm.flops(), flops);
  }
}

TEST(MergedModel, SharedProbabilityBatchMode) {
  const auto ms = models_for(3, 140);
  const auto mm = MergedModel::build(ms, tiny_gate(3, 2), plan_from_m(similarity(ms), 1, StaticMethod::AvgMean));
  Tensor<float> batch({3, 1, 8, 8});
  std::vector<double> mean(3, 0.0);
  for (std::size_t b = 0; b < 3; ++b) {
    const auto x = random_image(150 + b);
    std::copy(x.data().begin(), x.data().end(), batch.data().begin() + static_cast<std::ptrdiff_t>(b * 64));
    const auto p = gate_probs(mm.gate(), x);
    for (std::size_t j = 0; j < 3; ++j) mean[j] += p[j] / 3.0;
  }
  const auto per_input = mm.infer_batch(batch);
  const auto shared = mm.infer_batch(batch, true);
  for (std::size_t b = 0; b < 3; ++b) {
    const auto x = random_image(150 + b);
    EXPECT_EQ(per_input[b].logits, mm.infer(x).logits);
    const auto ref = mm.infer_with(x, mean);
    for (std::size_t j = 0; j < ref.logits.size(); ++j) EXPECT_NEAR(shared[b].logits[j], ref.logits[j], 1e-5);
  }
}

TEST(MergedModel, RejectsGateWidthMismatch) {
  const auto ms = models_for(3, 160);
  EXPECT_THROW(MergedModel::build(ms, tiny_gate(2, 1), plan_from_m(similarity(ms), 0, StaticMethod::AvgMean)),
               GateError);
}
