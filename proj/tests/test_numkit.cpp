#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "vitmerge/numkit.hpp"
#include "vitmerge/rng.hpp"

using namespace vitmerge;
using oracle::explicit_inverse;
using oracle::rel_diff;
using oracle::triple_loop;

namespace {

Tensor<double> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Tensor<double> t({r, c});
  Rng rng(seed);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

Tensor<double> random_spd(std::size_t d, std::uint64_t seed) {
  const auto r = random_matrix(d, d, seed);
  auto a = matmul(transpose(r), r);
  for (std::size_t i = 0; i < d; ++i) a(i, i) += 1.0;
  return a;
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), DimensionError);
  EXPECT_EQ(Tensor<float>({2, 3}).size(), 6u);
}

TEST(Matmul, Identity) {
  const auto a = Tensor<double>::matrix({{1, 0}, {0, 1}});
  const auto b = Tensor<double>::matrix({{3, 4}, {5, 6}});
  EXPECT_EQ(matmul(a, b), b);
}

TEST(Matmul, RowTimesColumn) {
  const auto r = matmul(Tensor<double>::matrix({{1, 2}}), Tensor<double>::matrix({{3}, {4}}));
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r[0], 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
  const auto a = random_matrix(5, 7, 1), b = random_matrix(7, 3, 2);
  EXPECT_LE(rel_diff(matmul(a, b), triple_loop(a, b)), 1e-12);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor<double>({2, 3}), Tensor<double>({2, 3})), DimensionError);
}

TEST(Matmul, Associative) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto a = random_matrix(4, 6, 10 + s), b = random_matrix(6, 5, 20 + s),
               c = random_matrix(5, 3, 30 + s);
    EXPECT_LE(rel_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-10);
  }
}

TEST(Kernels, TransposedVariantsAgreeWithMatmul) {
  const auto a = random_matrix(4, 6, 3), b = random_matrix(6, 5, 4);
  Tensor<double> tn({4, 5}), nt({4, 5});
  const auto at = transpose(a), bt = transpose(b);
  kernels::gemm_tn<double>(at.data(), b.data(), tn.data(), 4, 6, 5);
  kernels::gemm_nt<double>(a.data(), bt.data(), nt.data(), 4, 6, 5);
  const auto ref = triple_loop(a, b);
  EXPECT_LE(rel_diff(tn, ref), 1e-12);
  EXPECT_LE(rel_diff(nt, ref), 1e-12);
}

TEST(Solve, IdentitySystem) {
  const auto b = random_matrix(3, 2, 5);
  const auto r = solve(Tensor<double>::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}), b);
  EXPECT_FALSE(r.regularized);
  EXPECT_EQ(r.solution, b);
}

TEST(Solve, DiagonalSystem) {
  const auto r = solve(Tensor<double>::matrix({{2, 0}, {0, 4}}), Tensor<double>::matrix({{2}, {8}}));
  EXPECT_EQ(r.solution, Tensor<double>::matrix({{1}, {2}}));
}

TEST(Solve, RandomSpdMatchesExplicitInverse) {
  const auto a = random_spd(6, 7);
  const auto b = random_matrix(6, 3, 8);
  const auto w = solve(a, b).solution;
  EXPECT_LE(rel_diff(matmul(a, w), b), 1e-8);
  EXPECT_LE(rel_diff(w, matmul(explicit_inverse(a), b)), 1e-8);
}

TEST(Solve, RoundTrip) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto a = random_spd(8, 40 + s);
    const auto w = random_matrix(8, 4, 50 + s);
    EXPECT_LE(rel_diff(solve(a, matmul(a, w)).solution, w), 1e-8);
  }
}

TEST(Solve, SingularSystemIsRegularized) {
  // Rank-1 PSD matrix: plain LU fails, the ridge retry succeeds.
  const auto a = Tensor<double>::matrix({{1, 1}, {1, 1}});
  const auto r = solve(a, Tensor<double>::matrix({{2}, {2}}));
  EXPECT_TRUE(r.regularized);
  EXPECT_TRUE(r.solution.all_finite());
  EXPECT_NEAR(r.solution[0] + r.solution[1], 2.0, 1e-5);
}

TEST(Solve, ZeroMatrixIsSingular) {
  EXPECT_THROW(solve(Tensor<double>({3, 3}), Tensor<double>({3, 1})), SingularError);
}

TEST(Solve, ShapeErrors) {
  EXPECT_THROW(solve(Tensor<double>({2, 3}), Tensor<double>({2, 1})), DimensionError);
  EXPECT_THROW(solve(Tensor<double>({2, 2}), Tensor<double>({3, 1})), DimensionError);
}

TEST(Softmax, Symmetric) {
  const auto p = softmax(Tensor<double>::vector({0, 0, 0}));
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const auto p = softmax(Tensor<double>::vector({1000, 0}));
  EXPECT_TRUE(p.all_finite());
  EXPECT_NEAR(p[0], 1.0, 1e-12);
  EXPECT_NEAR(p[1], 0.0, 1e-12);
}

TEST(Softmax, MatchesDirectFormula) {
  const auto p = softmax(Tensor<double>::vector({1, 2, 3}));
  const double z = std::exp(-2.0) + std::exp(-1.0) + 1.0;
  EXPECT_NEAR(p[0], std::exp(-2.0) / z, 1e-12);
  EXPECT_NEAR(p[1], std::exp(-1.0) / z, 1e-12);
  EXPECT_NEAR(p[2], 1.0 / z, 1e-12);
}

TEST(Softmax, SumsToOneAndIsShiftInvariant) {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor<double> v({1 + rng.below(10)});
    for (auto& x : v.data()) x = 50.0 * rng.normal();
    const auto p = softmax(v);
    double sum = 0;
    for (double x : p.data()) {
      EXPECT_GT(x, -1e-300);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    auto shifted = v;
    const double c = 100.0 * rng.normal();
    for (auto& x : shifted.data()) x += c;
    const auto q = softmax(shifted);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-9);
  }
}

TEST(Softmax, EmptyThrows) { EXPECT_THROW(softmax(Tensor<double>({0})), DimensionError); }

TEST(Cosine, SelfSimilarityIsOne) {
  const auto a = random_matrix(1, 50, 11);
  EXPECT_EQ(cosine_similarity(a, a).value, 1.0);
}

TEST(Cosine, Orthogonal) {
  EXPECT_EQ(cosine_similarity(Tensor<double>::vector({1, 0}), Tensor<double>::vector({0, 1})).value,
            0.0);
}

TEST(Cosine, MatchesDirectFormula) {
  const double expect = 32.0 / (std::sqrt(14.0) * std::sqrt(77.0));
  EXPECT_NEAR(
      cosine_similarity(Tensor<double>::vector({1, 2, 3}), Tensor<double>::vector({4, 5, 6})).value,
      expect, 1e-12);
}

TEST(Cosine, DegenerateAndErrors) {
  const auto r = cosine_similarity(Tensor<double>::vector({0, 0}), Tensor<double>::vector({1, 2}));
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_THROW(cosine_similarity(Tensor<double>::vector({1}), Tensor<double>::vector({1, 2})),
               DimensionError);
}

TEST(Cosine, PositiveScaleInvariant) {
  Rng rng(12);
  for (int t = 0; t < 50; ++t) {
    const auto a = random_matrix(1, 20, 100 + t), b = random_matrix(1, 20, 200 + t);
    auto ca = a;
    const double c = std::exp(3.0 * rng.normal());
    for (auto& v : ca.data()) v *= c;
    EXPECT_NEAR(cosine_similarity(ca, b).value, cosine_similarity(a, b).value, 1e-10);
  }
}
