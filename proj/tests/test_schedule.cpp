#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mixdiff/schedule.hpp"

using namespace mixdiff;

namespace {

ScheduleParams<double> numeric_schedule(std::size_t f = 3, std::size_t l = 5) {
  return ScheduleParams<double>::make("s", f, l, 80.0, 1.0);
}

}  // namespace

TEST(Schedule, EffectiveRhoExamples) {
  auto p = numeric_schedule();
  EXPECT_DOUBLE_EQ(p.effective_rho(0, 0), 1.0);
  p.rho_feature.value[1] = 0.2;
  p.rho_time.value[2] = -0.1;
  EXPECT_NEAR(p.effective_rho(1, 2), 1.1, 1e-12);
  p.rho_feature.value[0] = -5.0;
  EXPECT_NEAR(p.effective_rho(0, 0), 0.1, 1e-12);
}

TEST(Schedule, IndexOutOfRangeThrows) {
  auto p = numeric_schedule(3, 5);
  EXPECT_THROW(p.effective_rho(3, 0), ArgumentError);
  EXPECT_THROW(p.effective_rho(0, 5), ArgumentError);
}

TEST(Schedule, SigmaExamples) {
  auto p = numeric_schedule();
  EXPECT_NEAR(p.sigma(0.0, 0, 0), 0.002, 1e-12);
  EXPECT_NEAR(p.sigma(1.0, 0, 0), 80.0, 1e-12);
  EXPECT_NEAR(p.sigma(0.5, 0, 0), 40.001, 1e-12);
  // high-precision reference values
  EXPECT_NEAR(power_mean_sigma(0.5, 7.0, 0.002, 80.0), 2.5152189761471585788, 1e-12);
  EXPECT_NEAR(power_mean_sigma(0.25, 3.0, 0.002, 100.0), 1.9761427431034369986, 1e-12);
}

TEST(Schedule, SigmaRejectsTimeOutsideUnitInterval) {
  auto p = numeric_schedule();
  EXPECT_THROW(p.sigma(-1e-12, 0, 0), ArgumentError);
  EXPECT_THROW(p.sigma(1.0 + 1e-12, 0, 0), ArgumentError);
  EXPECT_THROW(p.sigma(std::nan(""), 0, 0), ArgumentError);
}

TEST(Schedule, BoundaryIdentityForRandomRho) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> rho(0.1, 15.0);
  for (int i = 0; i < 1000; ++i) {
    const double r = rho(rng);
    EXPECT_LT(std::abs(power_mean_sigma(0.0, r, 0.002, 80.0) - 0.002), 1e-9) << r;
    EXPECT_LT(std::abs(power_mean_sigma(1.0, r, 0.002, 80.0) - 80.0), 1e-9) << r;
  }
}

TEST(Schedule, StrictlyIncreasingOnFineGrid) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> rho(0.1, 15.0);
  for (int k = 0; k < 50; ++k) {
    const double r = rho(rng);
    double prev = power_mean_sigma(0.0, r, 0.002, 80.0);
    for (int i = 1; i < 1024; ++i) {
      const double s = power_mean_sigma(i / 1023.0, r, 0.002, 80.0);
      ASSERT_GT(s, prev) << "rho=" << r << " i=" << i;
      prev = s;
    }
  }
}

TEST(Schedule, RhoOneIsLinear) {
  auto p = numeric_schedule();
  double worst = 0;
  for (int i = 0; i < 1024; ++i) {
    const double t = i / 1023.0;
    worst = std::max(worst, std::abs(p.sigma(t, 1, 1) - (0.002 + t * (80.0 - 0.002))));
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Schedule, ParameterCountIsOnePlusFPlusL) {
  for (std::size_t f : {1u, 3u, 7u})
    for (std::size_t l : {1u, 24u}) {
      auto p = ScheduleParams<double>::make("s", f, l, 100.0, 7.0);
      EXPECT_EQ(p.parameter_count(), 1 + f + l);
      std::size_t n = 0;
      for (auto* q : p.parameters()) n += q->value.size();
      EXPECT_EQ(n, 1 + f + l);
    }
}

TEST(Schedule, AdjustmentsStartAtZero) {
  auto p = ScheduleParams<double>::make("s", 4, 6, 100.0, 7.0);
  EXPECT_EQ(p.rho_global.value[0], 7.0);
  for (double v : p.rho_feature.value.storage()) EXPECT_EQ(v, 0.0);
  for (double v : p.rho_time.value.storage()) EXPECT_EQ(v, 0.0);
}

TEST(Schedule, InvalidRangeThrows) {
  EXPECT_THROW(ScheduleParams<double>::make("s", 1, 1, 0.001, 1.0), ArgumentError);
  EXPECT_THROW(ScheduleParams<double>::make("s", 1, 0, 80.0, 1.0), ArgumentError);
}

TEST(Schedule, GridExamples) {
  auto p = ScheduleParams<double>::make("s", 2, 3, 80.0, 7.0);
  const auto g1 = p.sigma_grid(1);
  ASSERT_EQ(g1.shape(), (Shape{2, 3, 2}));
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_NEAR(g1[k], 80.0, 1e-12);
    EXPECT_NEAR(g1[6 + k], 0.002, 1e-12);
  }
  const auto g = p.sigma_grid(50);
  EXPECT_EQ(g.dim(0), 51u);
  EXPECT_LT(g[6], g[0] * 0.9);
  EXPECT_NEAR(g[6], 71.663102948406894296, 1e-9);
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t k = 0; k < 6; ++k) EXPECT_GT(g[i * 6 + k], g[(i + 1) * 6 + k]);
  EXPECT_THROW(p.sigma_grid(0), ArgumentError);
}

TEST(Schedule, SoftClampStaysInRangeWithPositiveSlope) {
  SoftClamp c;
  for (double x = -10; x <= 25; x += 0.01) {  // beyond this the slope underflows double
    const double y = c(x);
    ASSERT_GE(y, c.lower - 1e-12);
    ASSERT_LE(y, c.upper + 1e-12);
    ASSERT_GT(c.derivative(x), 0.0) << x;
  }
  EXPECT_NEAR(c(3.7), 3.7, 1e-12);
}

TEST(Schedule, SoftClampDerivativeMatchesFiniteDifferences) {
  SoftClamp c;
  for (double x : {-1.0, 0.08, 0.1, 0.13, 2.0, 14.95, 15.0, 15.2, 40.0}) {
    const double h = 1e-6;
    const double num = (c(x + h) - c(x - h)) / (2 * h);
    EXPECT_NEAR(c.derivative(x), num, 1e-6 * std::max(1.0, std::abs(num))) << x;
  }
}

TEST(Schedule, DsigmaDrhoMatchesHighPrecisionOracle) {
  EXPECT_NEAR(power_mean_dsigma_drho(0.3, 2.5, 0.002, 80.0), -4.4245315425104787486, 1e-9);
}

TEST(Schedule, TapeGradientReachesAllRhoComponents) {
  auto p = numeric_schedule(3, 4);
  p.rho_global.value[0] = 2.0;
  p.rho_feature.value[1] = 0.4;
  p.rho_time.value[2] = -0.3;
  const std::vector<double> t = {0.1, 0.55, 0.9};
  const std::size_t l = 2;
  auto loss = [&](ad::Tape<double>& tape) {
    auto sv = ScheduleVars<double>::bind(tape, p);
    auto s = sigma_at(sv, t, l, 2);
    return ad::sum(ad::mul(s, s));
  };
  for (auto* q : p.parameters()) q->zero_grad();
  {
    ad::Tape<double> tape;
    tape.backward(loss(tape));
  }
  for (auto* q : p.parameters()) {
    const std::vector<double> g(q->grad.storage()), x(q->value.storage());
    auto f = [&](std::span<const double> v) {
      std::copy(v.begin(), v.end(), q->value.storage().begin());
      ad::Tape<double> tape(false);
      return loss(tape).value()[0];
    };
    const auto r = ad::grad_check(f, g, x, 1e-6);
    std::copy(x.begin(), x.end(), q->value.storage().begin());
    EXPECT_LT(r.max_rel_error, 1e-6) << q->name;
  }
  // untouched time positions get exactly zero gradient, every feature gets some
  EXPECT_EQ(p.rho_time.grad[0], 0.0);
  EXPECT_NE(p.rho_time.grad[2], 0.0);
  for (std::size_t f = 0; f < 3; ++f) EXPECT_NE(p.rho_feature.grad[f], 0.0);
}

TEST(Schedule, SigmaAtLayoutRepeatsPerFeature) {
  auto p = ScheduleParams<double>::make("s", 2, 3, 100.0, 7.0);
  p.rho_feature.value[1] = 1.0;
  ad::Tape<double> tape(false);
  auto sv = ScheduleVars<double>::bind(tape, p);
  const std::vector<double> t = {0.5};
  const auto s = sigma_at(sv, t, 0, 3).value();
  ASSERT_EQ(s.shape(), (Shape{1, 6}));
  for (int r = 0; r < 3; ++r) {
    EXPECT_DOUBLE_EQ(s[r], p.sigma(0.5, 0, 0));
    EXPECT_DOUBLE_EQ(s[3 + r], p.sigma(0.5, 1, 0));
  }
}

TEST(Schedule, CastPreservesValues) {
  auto p = numeric_schedule();
  p.rho_time.value[3] = 0.25;
  const auto q = p.cast<float>();
  EXPECT_FLOAT_EQ(float(q.effective_rho(0, 3)), float(p.effective_rho(0, 3)));
  EXPECT_EQ(q.sigma_max, p.sigma_max);
}
