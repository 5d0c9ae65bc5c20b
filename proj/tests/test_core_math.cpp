#include <gtest/gtest.h>

#include <numeric>

#include "latte/core_math.hpp"
#include "latte/errors.hpp"
#include "latte/random.hpp"
#include "support/oracles.hpp"

using namespace latte;

TEST(L2Normalize, PythagoreanTriple) {
  const Vector v = l2_normalize(Vector{3, 4});
  EXPECT_NEAR(v[0], 0.6, 1e-15);
  EXPECT_NEAR(v[1], 0.8, 1e-15);
}

TEST(L2Normalize, UnitVectorIsFixed) {
  EXPECT_EQ(l2_normalize(Vector{1, 0, 0}), (Vector{1, 0, 0}));
}

TEST(L2Normalize, MatchesScalarLoop) {
  oracle::Gen g(11);
  for (int t = 0; t < 50; ++t) {
    const Vector v = g.vec(8);
    const Vector got = l2_normalize(v), want = oracle::naive_normalize(v);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
    EXPECT_NEAR(norm(got), 1.0, 1e-6);
  }
}

TEST(L2Normalize, Idempotent) {
  oracle::Gen g(12);
  for (int t = 0; t < 50; ++t) {
    const Vector once = l2_normalize(g.vec(8));
    const Vector twice = l2_normalize(once);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(once[i], twice[i], 1e-6);
  }
}

TEST(L2Normalize, ZeroVectorIsDegenerate) {
  EXPECT_THROW(l2_normalize(Vector{0, 0, 0}), DegenerateEmbedding);
  EXPECT_THROW(l2_normalize(Vector{}), DegenerateEmbedding);
  EXPECT_THROW(l2_normalize(Vector{1, std::nan("")}), DegenerateEmbedding);
}

TEST(Cosine, BasisVectors) {
  EXPECT_DOUBLE_EQ(cosine(Vector{1, 0}, Vector{1, 0}), 1.0);
  EXPECT_DOUBLE_EQ(cosine(Vector{1, 0}, Vector{0, 1}), 0.0);
}

TEST(Cosine, MatchesNaiveLoopAndIsSymmetric) {
  oracle::Gen g(13);
  for (int t = 0; t < 100; ++t) {
    const Vector a = g.vec(8), b = g.vec(8);
    EXPECT_NEAR(cosine(a, b), oracle::naive_cosine(a, b), 1e-12);
    EXPECT_EQ(cosine(a, b), cosine(b, a));
  }
}

TEST(Cosine, PositiveScaleInvariance) {
  oracle::Gen g(14);
  for (int t = 0; t < 200; ++t) {
    const Vector a = g.vec(8), b = g.vec(8);
    const double s = std::exp(g.uniform(-5, 5));
    Vector sa = a;
    for (double& x : sa) x *= s;
    EXPECT_NEAR(cosine(sa, b), cosine(a, b), 1e-9);
    EXPECT_NEAR(cosine(a, sa), 1.0, 1e-9);
  }
}

TEST(Cosine, StaysInRangeForParallelVectors) {
  const Vector a{1e-3, 7.0, -2.5};
  Vector b = a;
  for (double& x : b) x *= 3.0;
  const double c = cosine(a, b);
  EXPECT_LE(c, 1.0);
  EXPECT_GE(c, -1.0);
}

TEST(Cosine, DegenerateArgument) {
  EXPECT_THROW(cosine(Vector{0, 0}, Vector{1, 0}), DegenerateEmbedding);
  EXPECT_THROW(cosine(Vector{1, 0}, Vector{0, 0}), DegenerateEmbedding);
}

TEST(BankSimilarities, OrthonormalBankPicksRow) {
  Matrix bank(4, 4);
  for (std::size_t i = 0; i < 4; ++i) bank(i, i) = 1.0;
  const auto sims = bank_similarities(Vector{0, 0, 1, 0}, bank);
  EXPECT_EQ(sims, (SimilarityRow{0, 0, 1, 0}));
}

TEST(BankSimilarities, UniformQueryGivesConstantRow) {
  Matrix bank(4, 4);
  for (std::size_t i = 0; i < 4; ++i) bank(i, i) = 1.0;
  const auto sims = bank_similarities(Vector{1, 1, 1, 1}, bank);
  for (double s : sims) EXPECT_DOUBLE_EQ(s, sims[0]);
  EXPECT_NEAR(sims[0], 0.5, 1e-15);
}

TEST(BankSimilarities, MatchesCosineLoop) {
  oracle::Gen g(15);
  const Matrix bank = g.mat(5, 8);
  const Vector q = g.vec(8);
  const auto sims = bank_similarities(q, bank);
  ASSERT_EQ(sims.size(), 5u);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(sims[c], cosine(q, bank.row(c)));
}

TEST(BankSimilarities, PermutationEquivariant) {
  oracle::Gen g(16);
  const Matrix bank = g.mat(6, 8);
  const Vector q = g.vec(8);
  std::vector<std::size_t> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(3);
  rng.shuffle(perm);
  Matrix permuted(6, 8);
  for (std::size_t c = 0; c < 6; ++c) permuted.set_row(c, bank.row(perm[c]));
  const auto a = bank_similarities(q, bank), b = bank_similarities(q, permuted);
  for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(b[c], a[perm[c]]);
}

TEST(BankSimilarities, DegeneratePrototypeIsReported) {
  Matrix bank(2, 2);
  bank(0, 0) = 1.0;
  try {
    bank_similarities(Vector{1, 0}, bank);
    FAIL() << "expected DegenerateEmbedding";
  } catch (const DegenerateEmbedding& e) {
    EXPECT_NE(std::string(e.what()).find("prototype 1"), std::string::npos);
  }
}

TEST(Argmax, LowestIndexWinsTies) {
  EXPECT_EQ(argmax(Vector{0.2, 0.7, 0.7, 0.1}), 1u);
  EXPECT_EQ(argmax(Vector{0.5, 0.5, 0.5}), 0u);
}

TEST(NormalizeBackward, MatchesFiniteDifference) {
  oracle::Gen g(17);
  for (int t = 0; t < 20; ++t) {
    const Vector x = g.vec(6), upstream = g.vec(6);
    auto f = [&](const Vector& v) {
      const Vector y = oracle::naive_normalize(v);
      double s = 0;
      for (std::size_t i = 0; i < 6; ++i) s += upstream[i] * y[i];
      return s;
    };
    const Vector analytic = normalize_backward(l2_normalize(x), norm(x), upstream);
    std::vector<double> numeric;
    for (std::size_t i = 0; i < 6; ++i) {
      Vector up = x, down = x;
      up[i] += 1e-6;
      down[i] -= 1e-6;
      numeric.push_back((f(up) - f(down)) / 2e-6);
    }
    EXPECT_LT(oracle::relative_error(analytic, numeric), 1e-6);
  }
}

TEST(Rng, ReproducibleAndSeedSensitive) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    (void)c;
  }
  EXPECT_NE(Rng(42).next_u64(), Rng(43).next_u64());
  EXPECT_NE(mix_seed(1, 2), mix_seed(2, 1));
}

TEST(Rng, BelowStaysInRange) {
  Rng r(5);
  for (int i = 0; i < 10000; ++i) EXPECT_LT(r.below(7), 7u);
}
