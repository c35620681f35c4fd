#include <gtest/gtest.h>

#include <random>

#include "mixdiff/classify.hpp"

using namespace mixdiff;

namespace {

const std::vector<std::size_t> kToyCards = {3, 2};

Dataset toy(std::size_t n, std::uint64_t seed, std::size_t len = 24) {
  ToyConfig c;
  c.n = n;
  c.seq_len = len;
  c.seed = seed;
  return gen_toy(c);
}

// random labels, x0 pushed by +-2 for the whole sequence: a linear threshold on mean x0 separates the classes
SequenceBatch separable(std::size_t n, std::uint64_t seed) {
  auto b = toy(n, seed, 12).data;
  std::mt19937_64 rng(seed + 1000);
  for (std::size_t i = 0; i < n; ++i) {
    b.labels[i] = std::uint8_t(rng() & 1);
    for (std::size_t l = 0; l < b.seq_len; ++l) b.num(i, l, 0) += b.labels[i] ? 2.0f : -2.0f;
  }
  return b;
}

}  // namespace

TEST(Auc, HandComputed) {
  const std::vector<double> s = {0.1, 0.4, 0.35, 0.8};
  const std::vector<std::uint8_t> y = {0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(auc(s, y), 0.75);
  const std::vector<double> perfect = {0, 1, 2, 3};
  EXPECT_EQ(auc(perfect, y), 1.0);
}

TEST(Auc, TiesCountHalf) {
  const std::vector<double> s = {0.5, 0.5, 0.5, 0.5};
  const std::vector<std::uint8_t> y = {0, 1, 0, 1};
  EXPECT_EQ(auc(s, y), 0.5);
  const std::vector<double> t = {0.2, 0.5, 0.5, 0.9};
  const std::vector<std::uint8_t> z = {0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(auc(t, z), 0.875);
}

TEST(Auc, LabelSwapGivesComplement) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0, 1);
  for (int k = 0; k < 50; ++k) {
    std::vector<double> s(40);
    std::vector<std::uint8_t> y(40), f(40);
    for (std::size_t i = 0; i < 40; ++i) {
      y[i] = std::uint8_t(i % 3 == 0);
      f[i] = 1 - y[i];
      s[i] = std::round(g(rng) * 4) / 4 + 0.5 * y[i];  // coarse grid forces ties
    }
    const double a = auc(s, y);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
    EXPECT_NEAR(a + auc(s, f), 1.0, 1e-12);
  }
}

TEST(Auc, BinaryProbabilityColumnsSwapWithLabels) {
  const std::vector<double> p = {0.9, 0.1, 0.3, 0.7, 0.6, 0.4, 0.2, 0.8};
  const std::vector<std::uint8_t> y = {0, 1, 1, 1};
  std::vector<double> q(p.size());
  std::vector<std::uint8_t> f(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    q[2 * i] = p[2 * i + 1];
    q[2 * i + 1] = p[2 * i];
    f[i] = 1 - y[i];
  }
  EXPECT_DOUBLE_EQ(multiclass_auc(p, 2, y), multiclass_auc(q, 2, f));
}

TEST(Auc, SingleClassEvaluationThrows) {
  const std::vector<double> s = {0.1, 0.2};
  const std::vector<std::uint8_t> y = {1, 1};
  EXPECT_THROW(auc(s, y), ArgumentError);
}

TEST(Summary, MeanAndSampleStddev) {
  const auto s = summarize({0.5, 0.7, 0.6, 0.8, 0.4});
  EXPECT_DOUBLE_EQ(s.mean, 0.6);
  EXPECT_NEAR(s.stddev, std::sqrt(0.1 / 4), 1e-12);
  EXPECT_EQ(s.per_seed.size(), 5u);
}

TEST(Logistic, FitsLinearBoundary) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0, 1);
  std::vector<double> x(400 * 2);
  std::vector<std::uint8_t> y(400);
  for (std::size_t i = 0; i < 400; ++i) {
    x[2 * i] = g(rng);
    x[2 * i + 1] = g(rng);
    y[i] = x[2 * i] + x[2 * i + 1] > 0;
  }
  const auto p = logistic_fit_predict(x, y, x, 2);
  EXPECT_GT(auc(p, y), 0.99);
}

// ---------------------------------------------------------------------------

TEST(C2st, SameGeneratorIsChance) {
  const auto a = toy(1000, 11).data, b = toy(1000, 12).data;
  const auto r = c2st(a, b, kToyCards, Discriminator::logistic);
  EXPECT_NEAR(r.mean, 0.5, 0.05);
  EXPECT_EQ(r.per_seed.size(), 5u);
  EXPECT_GT(r.stddev, 0.0);
  for (double v : r.per_seed) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(C2st, TenSigmaShiftIsSeparable) {
  const auto a = toy(400, 13).data;
  auto b = toy(400, 14).data;
  // pooled per-feature sd is at most ~1 on the toy data; +10 is beyond 10 sd
  for (auto& v : b.numerical) v += 10.0f;
  EXPECT_GT(c2st(a, b, kToyCards, Discriminator::logistic).mean, 0.99);
  C2stOptions o;
  o.seeds = 2;
  EXPECT_GT(c2st(a, b, kToyCards, Discriminator::gru, o).mean, 0.99);
}

TEST(C2st, SelfComparisonIsExactlyHalf) {
  const auto a = toy(200, 15).data;
  const auto r = c2st(a, a, kToyCards, Discriminator::logistic);
  EXPECT_EQ(r.mean, 0.5);
}

TEST(C2st, SwappingRolesKeepsTheAuc) {
  // the retrained discriminator mirrors its scores, so relabelling does not change the held-out AUC
  const auto a = toy(300, 16).data;
  auto b = toy(300, 17).data;
  for (auto& v : b.numerical) v += 0.3f;
  C2stOptions o;
  o.seeds = 2;
  const double ab = c2st(a, b, kToyCards, Discriminator::logistic, o).mean;
  const double ba = c2st(b, a, kToyCards, Discriminator::logistic, o).mean;
  EXPECT_NEAR(ab, ba, 1e-3);
  EXPECT_GT(ab, 0.6);
}

TEST(C2st, ArgumentErrors) {
  const auto a = toy(3, 1).data;
  EXPECT_THROW(c2st(a, a, kToyCards, Discriminator::logistic), ArgumentError);
  const auto b = toy(20, 1).data;
  C2stOptions o;
  o.seeds = 0;
  EXPECT_THROW(c2st(b, b, kToyCards, Discriminator::logistic, o), ArgumentError);
  const std::vector<std::size_t> wrong = {3};
  EXPECT_THROW(c2st(b, b, wrong, Discriminator::logistic), ArgumentError);
}

// ---------------------------------------------------------------------------

TEST(Tstr, TrtrOnSeparableVariant) {
  const auto train = separable(600, 21), test = separable(600, 22);
  TstrOptions o;
  o.seeds = 2;
  EXPECT_GT(tstr(train, test, kToyCards, 2, o).mean, 0.99);
}

TEST(Tstr, ShuffledLabelsAreChance) {
  // both sides shuffled: with only the training side permuted, the toy label still sits on the dominant
  // axis of the test data and any scorer ranks along it with a chance sign
  auto train = toy(1000, 23).data, test = toy(2000, 24).data;
  std::mt19937_64 rng(5);
  std::shuffle(train.labels.begin(), train.labels.end(), rng);
  std::shuffle(test.labels.begin(), test.labels.end(), rng);
  TstrOptions o;
  o.seeds = 3;
  EXPECT_NEAR(tstr(train, test, kToyCards, 2, o).mean, 0.5, 0.05);
}

TEST(Tstr, ToyLabelIsLearnable) {
  const auto train = toy(1000, 25).data, test = toy(1000, 26).data;
  TstrOptions o;
  o.seeds = 1;
  EXPECT_GT(tstr(train, test, kToyCards, 2, o).mean, 0.9);
}

TEST(Tstr, SeedsAreReproducible) {
  const auto train = toy(200, 27).data, test = toy(200, 28).data;
  TstrOptions o;
  o.seeds = 2;
  o.gru.epochs = 2;
  const auto a = tstr(train, test, kToyCards, 2, o), b = tstr(train, test, kToyCards, 2, o);
  EXPECT_EQ(a.per_seed, b.per_seed);
  EXPECT_NE(a.per_seed[0], a.per_seed[1]);
}

TEST(Tstr, SingleClassTrainingThrows) {
  auto train = toy(50, 29).data;
  std::fill(train.labels.begin(), train.labels.end(), 1);
  const auto test = toy(50, 30).data;
  EXPECT_THROW(tstr(train, test, kToyCards, 2), ArgumentError);
  train.labels[0] = 2;
  EXPECT_THROW(tstr(train, test, kToyCards, 2), ArgumentError);
}
