#include <gtest/gtest.h>

#include <numeric>

#include "latte/prototype_bank.hpp"
#include "support/oracles.hpp"

using namespace latte;

TEST(InitFromClassTexts, OrthonormalEmbeddings) {
  const std::vector<std::string> names = {"forest", "river", "highway"};
  EncoderParams p(3, 3, 64);
  for (std::size_t c = 0; c < 3; ++c) p.text_weights(token_bucket(names[c], 64), c) = 2.0;
  const PrototypeBank bank = init_from_class_texts(p, names);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(bank.vectors(c, k), c == k ? 1.0 : 0.0);
  EXPECT_EQ(bank.step, 0);
}

TEST(InitFromClassTexts, DeterministicUnitRows) {
  const EncoderParams p = random_encoder(8, 4, 128, 31);
  const std::vector<std::string> names = {"a", "b", "c", "d"};
  const PrototypeBank x = init_from_class_texts(p, names), y = init_from_class_texts(p, names);
  EXPECT_EQ(x, y);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(norm(x.prototype(c)), 1.0, 1e-6);
}

TEST(InitFromClassTexts, RejectsBadClassLists) {
  const EncoderParams p = random_encoder(8, 4, 64, 32);
  EXPECT_THROW(init_from_class_texts(p, {"a", "a"}), ConfigError);
  EXPECT_THROW(init_from_class_texts(p, {"a"}), ConfigError);
  EXPECT_THROW(init_from_class_texts(p, {"a", ""}), ConfigError);
}

TEST(MomentumUpdate, MuOneLeavesBankUnchanged) {
  oracle::Gen g(33);
  PrototypeBank bank = oracle::random_bank(g, 4, 8, 1.0);
  const PrototypeBank before = bank;
  const std::vector<Assignment> as = {{0, g.vec(8)}, {2, g.vec(8)}};
  batch_momentum_update(bank, as);
  EXPECT_EQ(bank.vectors, before.vectors);
}

TEST(MomentumUpdate, MuZeroReplacesWithBatchMean) {
  oracle::Gen g(34);
  PrototypeBank bank = oracle::random_bank(g, 4, 8, 0.0);
  const Vector a = g.vec(8), b = g.vec(8);
  const std::vector<Assignment> as = {{1, a}, {1, b}};
  EXPECT_EQ(batch_momentum_update(bank, as), 1u);
  for (std::size_t k = 0; k < 8; ++k) EXPECT_DOUBLE_EQ(bank.vectors(1, k), (a[k] + b[k]) / 2);
}

TEST(MomentumUpdate, EmaClosedForm) {
  oracle::Gen g(35);
  for (int t = 0; t < 100; ++t) {
    PrototypeBank bank = oracle::random_bank(g, 3, 8, 0.99);
    const Vector p0(bank.prototype(0).begin(), bank.prototype(0).end());
    const Vector target = oracle::naive_normalize(g.vec(8));
    const std::vector<Assignment> as = {{0, target}};
    for (int k = 0; k < 100; ++k) batch_momentum_update(bank, as);
    const double mk = std::pow(0.99, 100);
    double err = 0;
    for (std::size_t i = 0; i < 8; ++i) {
      const double want = mk * p0[i] + (1 - mk) * target[i];
      err += (bank.vectors(0, i) - want) * (bank.vectors(0, i) - want);
    }
    EXPECT_LE(std::sqrt(err), 1e-6);
  }
}

TEST(MomentumUpdate, AbsentClassesBitwiseUntouched) {
  oracle::Gen g(36);
  PrototypeBank bank = oracle::random_bank(g, 6, 8);
  const PrototypeBank before = bank;
  const std::vector<Assignment> as = {{2, g.vec(8)}, {4, g.vec(8)}, {2, g.vec(8)}};
  EXPECT_EQ(batch_momentum_update(bank, as), 2u);
  for (std::size_t c : {0, 1, 3, 5})
    for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(bank.vectors(c, k), before.vectors(c, k));
}

TEST(MomentumUpdate, OrderWithinStreamDoesNotMatter) {
  oracle::Gen g(37);
  PrototypeBank a = oracle::random_bank(g, 3, 8), b = a;
  std::vector<Assignment> as;
  for (int i = 0; i < 9; ++i) as.push_back({std::size_t(i % 3), g.vec(8)});
  std::vector<Assignment> reversed(as.rbegin(), as.rend());
  batch_momentum_update(a, as);
  batch_momentum_update(b, reversed);
  for (std::size_t i = 0; i < a.vectors.data().size(); ++i) EXPECT_NEAR(a.vectors.data()[i], b.vectors.data()[i], 1e-15);
}

TEST(MomentumUpdate, UnitBallContainment) {
  oracle::Gen g(38);
  PrototypeBank bank = oracle::random_bank(g, 5, 8, 0.9);
  for (int step = 0; step < 10000; ++step) {
    std::vector<Assignment> as;
    const std::size_t n = g.between(1, 6);
    for (std::size_t i = 0; i < n; ++i) {
      Vector t = oracle::naive_normalize(g.vec(8));
      const double r = g.uniform(0, 1);
      for (double& x : t) x *= r;
      as.push_back({g.between(0, 4), t});
    }
    batch_momentum_update(bank, as);
  }
  for (std::size_t c = 0; c < 5; ++c) {
    EXPECT_LE(norm(bank.prototype(c)), 1.0 + 1e-6);
    EXPECT_GT(norm(bank.prototype(c)), 0.0);
  }
}

TEST(MomentumUpdate, Errors) {
  oracle::Gen g(39);
  PrototypeBank bank = oracle::random_bank(g, 3, 4);
  EXPECT_THROW(batch_momentum_update(bank, std::vector<Assignment>{{3, g.vec(4)}}), ConfigError);
  EXPECT_THROW(batch_momentum_update(bank, std::vector<Assignment>{{0, Vector{1, std::nan(""), 0, 0}}}), NumericError);
  EXPECT_THROW(batch_momentum_update(bank, std::vector<Assignment>{{0, g.vec(5)}}), ConfigError);
}

TEST(BankPersistence, RoundTripIsExact) {
  oracle::TempDir dir("bank");
  oracle::Gen g(40);
  PrototypeBank bank = oracle::random_bank(g, 4, 8, 0.97, 0.5);
  bank.step = 123;
  save_bank(bank, dir.path / "p.json");
  EXPECT_EQ(load_bank(dir.path / "p.json"), bank);
}

TEST(BankPersistence, ChecksumStableAcrossSaves) {
  oracle::TempDir dir("bank2");
  oracle::Gen g(41);
  const PrototypeBank bank = oracle::random_bank(g, 4, 8);
  save_bank(bank, dir.path / "a.json");
  save_bank(bank, dir.path / "b.json");
  EXPECT_EQ(oracle::reference_fnv1a(oracle::file_bytes(dir.path / "a.json")),
            oracle::reference_fnv1a(oracle::file_bytes(dir.path / "b.json")));
}

TEST(BankPersistence, EditedClassCountRejected) {
  oracle::Gen g(42);
  auto j = bank_to_json(oracle::random_bank(g, 4, 8));
  j["class_names"].push_back("extra");
  EXPECT_THROW(bank_from_json(j), FormatError);
}

TEST(BankPersistence, VersionMismatchRejected) {
  oracle::Gen g(43);
  auto j = bank_to_json(oracle::random_bank(g, 4, 8));
  j["format_version"] = 2;
  EXPECT_THROW(bank_from_json(j), FormatError);
}
