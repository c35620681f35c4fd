#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mixdiff/autodiff.hpp"
#include "test_util.hpp"

using namespace mixdiff;
using testutil::op_grad_error;
using testutil::random_tensor;

namespace {

constexpr double kTol = 1e-6;

std::vector<Parameter<double>> params(std::initializer_list<Shape> shapes, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::vector<Parameter<double>> ps;
  int k = 0;
  for (const auto& s : shapes) ps.emplace_back("p" + std::to_string(k++), random_tensor(s, rng));
  return ps;
}

}  // namespace

TEST(Autodiff, ElementwiseOpsMatchFiniteDifferences) {
  auto ps = params({{3, 4}, {3, 4}});
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::add(v[0], v[1]); }), kTol);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::sub(v[0], v[1]); }), kTol);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::mul(v[0], v[1]); }), kTol);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::scale(v[0], 2.5); }), kTol);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::add_scalar(v[0], -1.0); }), kTol);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::tanh(v[0]); }), kTol);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::sigmoid(v[0]); }), kTol);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::exp(v[0]); }), kTol);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::silu(v[0]); }), kTol);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::log(ad::add_scalar(ad::mul(v[0], v[0]), 0.5)); }),
            kTol);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::pow(ad::add_scalar(ad::mul(v[0], v[0]), 0.5), 1.5); }),
            kTol);
}

TEST(Autodiff, MatrixOpsMatchFiniteDifferences) {
  auto ps = params({{3, 4}, {4, 5}, {5}});
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::matmul(v[0], v[1]); }), kTol);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::add_row(ad::matmul(v[0], v[1]), v[2]); }), kTol);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::broadcast_rows(v[2], 3); }), kTol);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::concat_cols<double>({v[0], ad::matmul(v[0], v[1])}); }),
            kTol);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::slice_cols(v[1], 1, 3); }), kTol);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::layer_norm_rows(v[0]); }), 1e-5);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::normalize_rows(v[1], 2.0); }), kTol);
}

TEST(Autodiff, GatherRowsAccumulatesRepeatedIndices) {
  auto ps = params({{4, 3}});
  const std::vector<std::size_t> idx = {2, 0, 2, 3, 2};
  EXPECT_LT(op_grad_error(ps, [&](auto&, auto& v) { return ad::gather_rows(v[0], idx); }), kTol);
}

TEST(Autodiff, SoftmaxCrossEntropyGradient) {
  auto ps = params({{4, 3}});
  const std::vector<std::size_t> tg = {0, 2, 1, 2};
  EXPECT_LT(op_grad_error(ps, [&](auto& tape, auto& v) {
              return ad::mul(ad::softmax_xent(v[0], tg).loss, tape.constant(Tensor<double>({1}, 1.0)));
            }),
            kTol);
}

TEST(Autodiff, SoftmaxCrossEntropyUniformLogitsIsLogC) {
  ad::Tape<double> tape;
  auto z = tape.constant(Tensor<double>({5, 3}, 0.7));
  const std::vector<std::size_t> tg = {0, 1, 2, 0, 1};
  auto r = ad::softmax_xent(z, tg);
  EXPECT_NEAR(r.loss.value()[0], std::log(3.0), 1e-15);
  for (double p : r.probs.storage()) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
}

TEST(Autodiff, GruStepMatchesFiniteDifferences) {
  auto ps = params({{3, 12}, {3, 4}, {4, 12}}, 9);
  EXPECT_LT(op_grad_error(ps, [](auto&, auto& v) { return ad::gru_step(v[0], v[1], v[2]); }), 1e-5);
}

TEST(Autodiff, GruStepForwardFormula) {
  // Hand evaluation with H = 1: z = s(xz + hUz), r = s(xr + hUr),
  // n = tanh(xn + r * (h Un)), h' = (1 - z) n + z h.
  ad::Tape<double> tape;
  auto xw = tape.constant(Tensor<double>({1, 3}, {0.3, -0.2, 0.5}));
  auto h = tape.constant(Tensor<double>({1, 1}, {0.4}));
  auto u = tape.constant(Tensor<double>({1, 3}, {0.7, -1.1, 0.9}));
  const double hv = ad::gru_step(xw, h, u).value()[0];
  auto s = [](double x) { return 1 / (1 + std::exp(-x)); };
  const double z = s(0.3 + 0.4 * 0.7), r = s(-0.2 + 0.4 * -1.1), n = std::tanh(0.5 + r * (0.4 * 0.9));
  EXPECT_NEAR(hv, (1 - z) * n + z * 0.4, 1e-15);
}

TEST(Autodiff, ChainedUseAccumulatesGradient) {
  // d/dx sum(x*x + x) = 2x + 1
  Parameter<double> p("x", Tensor<double>({3}, {1.0, -2.0, 0.5}));
  p.zero_grad();
  ad::Tape<double> tape;
  auto x = tape.param(p);
  tape.backward(ad::sum(ad::add(ad::mul(x, x), x)));
  EXPECT_DOUBLE_EQ(p.grad[0], 3.0);
  EXPECT_DOUBLE_EQ(p.grad[1], -3.0);
  EXPECT_DOUBLE_EQ(p.grad[2], 2.0);
}

TEST(Autodiff, FrozenParameterReceivesNoGradient) {
  Parameter<double> p("x", Tensor<double>({2}, {1.0, 2.0}));
  p.trainable = false;
  p.zero_grad();
  ad::Tape<double> tape;
  tape.backward(ad::sum(ad::mul(tape.param(p), tape.param(p))));
  EXPECT_EQ(p.grad[0], 0.0);
  EXPECT_EQ(p.grad[1], 0.0);
}

TEST(Autodiff, BackwardRequiresScalarRoot) {
  Parameter<double> p("x", Tensor<double>({2}, {1.0, 2.0}));
  ad::Tape<double> tape;
  EXPECT_THROW(tape.backward(ad::tanh(tape.param(p))), ArgumentError);
}

TEST(Autodiff, ShapeMismatchIsAnArgumentError) {
  ad::Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({3, 2}));
  EXPECT_THROW(ad::add(a, b), ArgumentError);
  EXPECT_THROW(ad::matmul(a, a), ArgumentError);
}

TEST(Autodiff, GradCheckFlagsWrongGradient) {
  auto f = [](std::span<const double> x) { return x[0] * x[0]; };
  const std::vector<double> wrong = {1.0};  // true gradient at 1 is 2
  EXPECT_GT(ad::grad_check(f, wrong, {1.0}, 1e-6).max_rel_error, 0.4);
  const std::vector<double> right = {2.0};
  EXPECT_LT(ad::grad_check(f, right, {1.0}, 1e-6).max_rel_error, 1e-8);
}

TEST(Autodiff, GradCheckRejectsNonFiniteValues) {
  auto f = [](std::span<const double> x) { return std::log(x[0]); };
  const std::vector<double> g = {1.0};
  EXPECT_THROW(ad::grad_check(f, g, {0.0}, 1e-3), NumericError);
}

TEST(Autodiff, NonRecordingTapeStoresNoBackward) {
  Parameter<double> p("x", Tensor<double>({2}, {1.0, 2.0}));
  ad::Tape<double> tape(false);
  auto y = ad::sum(ad::mul(tape.param(p), tape.param(p)));
  EXPECT_FALSE(y.requires_grad());
  EXPECT_DOUBLE_EQ(y.value()[0], 5.0);
}

TEST(Autodiff, FloatAndDoubleAgreeOnMatmul) {
  std::mt19937_64 rng(3);
  auto a = random_tensor({8, 16}, rng), b = random_tensor({16, 4}, rng);
  ad::Tape<double> td;
  ad::Tape<float> tf;
  const auto yd = ad::matmul(td.constant(a), td.constant(b)).value();
  const auto yf = ad::matmul(tf.constant(a.cast<float>()), tf.constant(b.cast<float>())).value();
  for (std::size_t i = 0; i < yd.size(); ++i) EXPECT_NEAR(yd[i], yf[i], 1e-4);
}
