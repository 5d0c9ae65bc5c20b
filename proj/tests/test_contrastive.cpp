#include <gtest/gtest.h>

#include "latte/contrastive.hpp"
#include "support/oracles.hpp"

using namespace latte;

namespace {

/// Central differences over every entry of `m`, holding everything else fixed.
std::vector<double> fd_matrix(Matrix m, const std::function<double(const Matrix&)>& f, double h = 1e-6) {
  std::vector<double> g;
  for (double& x : m.data()) {
    const double keep = x;
    x = keep + h;
    const double up = f(m);
    x = keep - h;
    const double down = f(m);
    x = keep;
    g.push_back((up - down) / (2 * h));
  }
  return g;
}

}  // namespace

TEST(Contrastive, SinglePairHasZeroLoss) {
  oracle::Gen g(71);
  EXPECT_NEAR(contrastive_loss(g.mat(1, 8), g.mat(1, 8), 0.07), 0.0, 1e-15);
}

TEST(Contrastive, PerfectAlignmentAtLowTemperature) {
  Matrix eye(4, 4);
  for (std::size_t i = 0; i < 4; ++i) eye(i, i) = 1.0;
  EXPECT_LT(contrastive_loss(eye, eye, 0.01), 1e-8);
}

TEST(Contrastive, UniformSimilaritiesGiveTwoLogN) {
  Matrix ones(5, 3);
  for (double& x : ones.data()) x = 1.0;
  EXPECT_NEAR(contrastive_loss(ones, ones, 0.07), 2 * std::log(5.0), 1e-12);
}

TEST(Contrastive, MatchesDoubleLoopOracle) {
  oracle::Gen g(72);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = g.between(1, 12), d = g.between(2, 16);
    const Matrix a = g.mat(n, d), b = g.mat(n, d);
    const double tau = g.uniform(0.01, 1.0);
    const double got = contrastive_loss(a, b, tau);
    EXPECT_NEAR(got, oracle::double_loop_infonce(a, b, tau), 1e-9);
    EXPECT_GE(got, 0.0);
  }
}

TEST(Contrastive, JointPermutationInvariant) {
  oracle::Gen g(73);
  const Matrix a = g.mat(6, 8), b = g.mat(6, 8);
  Matrix pa(6, 8), pb(6, 8);
  const std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  for (std::size_t i = 0; i < 6; ++i) {
    pa.set_row(i, oracle::row_of(a, perm[i]));
    pb.set_row(i, oracle::row_of(b, perm[i]));
  }
  EXPECT_NEAR(contrastive_loss(a, b, 0.07), contrastive_loss(pa, pb, 0.07), 1e-12);
}

TEST(Contrastive, RowScalingDoesNotMatter) {
  oracle::Gen g(74);
  const Matrix a = g.mat(4, 8), b = g.mat(4, 8);
  Matrix a2 = a;
  for (std::size_t k = 0; k < 8; ++k) a2(2, k) *= 9.0;
  EXPECT_NEAR(contrastive_loss(a, b, 0.1), contrastive_loss(a2, b, 0.1), 1e-12);
}

TEST(Contrastive, Errors) {
  oracle::Gen g(75);
  Matrix a = g.mat(3, 4), b = g.mat(3, 4);
  EXPECT_THROW(contrastive_loss(Matrix(0, 4), Matrix(0, 4), 0.07), ConfigError);
  EXPECT_THROW(contrastive_loss(a, g.mat(2, 4), 0.07), ConfigError);
  EXPECT_THROW(contrastive_loss(a, b, 0.0), ConfigError);
  Matrix bad = a;
  bad(1, 2) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(contrastive_loss(bad, b, 0.07), DegenerateEmbedding);
  Matrix zero = a;
  for (std::size_t k = 0; k < 4; ++k) zero(0, k) = 0.0;
  EXPECT_THROW(contrastive_loss(zero, b, 0.07), DegenerateEmbedding);
}

TEST(Contrastive, NonFiniteSimilarityIsNumericError) {
  Matrix a(2, 2), b(2, 2);
  // Finite rows whose products overflow.
  a(0, 0) = 1e300;
  a(0, 1) = 1e300;
  a(1, 0) = 1.0;
  b(0, 0) = 1.0;
  b(1, 1) = 1.0;
  EXPECT_THROW(contrastive_loss(a, b, 0.07), NumericError);
}

TEST(ContrastiveGradient, ImageRowsMatchFiniteDifferences) {
  oracle::Gen g(76);
  for (int t = 0; t < 10; ++t) {
    const Matrix a = g.mat(5, 6), b = g.mat(5, 6);
    const double tau = g.uniform(0.05, 0.5);
    const auto r = contrastive_loss_with_grad(a, b, tau);
    const auto fd = fd_matrix(a, [&](const Matrix& m) { return contrastive_loss(m, b, tau); });
    EXPECT_LT(oracle::relative_error(r.grad_image.data(), fd), 1e-4);
  }
}

TEST(ContrastiveGradient, TextRowsMatchFiniteDifferences) {
  oracle::Gen g(77);
  for (int t = 0; t < 10; ++t) {
    const Matrix a = g.mat(5, 6), b = g.mat(5, 6);
    const double tau = g.uniform(0.05, 0.5);
    const auto r = contrastive_loss_with_grad(a, b, tau);
    const auto fd = fd_matrix(b, [&](const Matrix& m) { return contrastive_loss(a, m, tau); });
    EXPECT_LT(oracle::relative_error(r.grad_text.data(), fd), 1e-4);
  }
}

TEST(ContrastiveGradient, InverseTemperature) {
  oracle::Gen g(78);
  for (int t = 0; t < 10; ++t) {
    const Matrix a = g.mat(6, 4), b = g.mat(6, 4);
    const double s = g.uniform(2.0, 50.0), h = 1e-6;
    const auto r = contrastive_loss_with_grad(a, b, 1 / s);
    const double fd = (contrastive_loss(a, b, 1 / (s + h)) - contrastive_loss(a, b, 1 / (s - h))) / (2 * h);
    EXPECT_LT(oracle::relative_error({r.grad_inv_temperature}, {fd}), 1e-4);
  }
}
