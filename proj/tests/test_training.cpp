#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "mixdiff/dataio.hpp"
#include "mixdiff/training.hpp"
#include "test_util.hpp"

using namespace mixdiff;

namespace {

ModelSpec mini_spec() {
  ModelSpec s;
  s.num_numerical = 2;
  s.cat_cards = {3, 2};
  s.label_card = 2;
  s.seq_len = 4;
  s.hidden = 8;
  s.layers = 1;
  s.embed_dim = 4;
  s.label_dim = 4;
  s.time_dim = 8;
  return s;
}

SequenceBatch random_batch(std::size_t n, const ModelSpec& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 0.5);
  auto b = SequenceBatch::zeros(n, s.seq_len, s.num_numerical, s.num_categorical());
  for (auto& v : b.numerical) v = float(g(rng));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < s.seq_len; ++l)
      for (std::size_t j = 0; j < s.num_categorical(); ++j) b.cat(i, l, j) = std::uint8_t(rng() % s.cat_cards[j]);
    b.labels[i] = std::uint8_t(rng() % 2);
  }
  return b;
}

std::vector<ad::Var<double>> blocks(ad::Tape<double>& tape, std::initializer_list<Tensor<double>> ts) {
  std::vector<ad::Var<double>> out;
  for (const auto& t : ts) out.push_back(tape.constant(t));
  return out;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.hidden = 8;
  c.layers = 1;
  c.embed_dim = 4;
  c.batch_size = 16;
  c.epochs = 3;
  c.seed = 5;
  c.eval_samples = 32;
  return c;
}

Dataset toy(std::size_t n, std::size_t len, std::uint64_t seed) {
  ToyConfig tc;
  tc.n = n;
  tc.seq_len = len;
  tc.seed = seed;
  return gen_toy(tc);
}

}  // namespace

TEST(NumericalLoss, PerfectPredictionIsZero) {
  ad::Tape<double> tape;
  std::mt19937_64 rng(1);
  const auto x = testutil::random_tensor({3, 2}, rng);
  auto l = numerical_loss(blocks(tape, {x}), blocks(tape, {x}), blocks(tape, {Tensor<double>({3, 2}, 0.7)}));
  EXPECT_EQ(l.value()[0], 0.0);
}

TEST(NumericalLoss, WeightAtSigmaData) {
  ad::Tape<double> tape;
  // unit residual everywhere at sigma = 0.5: lambda = 8
  auto l = numerical_loss(blocks(tape, {Tensor<double>({2, 3}, 1.0)}), blocks(tape, {Tensor<double>({2, 3}, 0.0)}),
                          blocks(tape, {Tensor<double>({2, 3}, 0.5)}));
  EXPECT_DOUBLE_EQ(l.value()[0], 8.0);
}

TEST(NumericalLoss, AveragesOverPositions) {
  ad::Tape<double> tape;
  auto l = numerical_loss(blocks(tape, {Tensor<double>({1, 1}, 1.0), Tensor<double>({1, 1}, 0.0)}),
                          blocks(tape, {Tensor<double>({1, 1}, 0.0), Tensor<double>({1, 1}, 0.0)}),
                          blocks(tape, {Tensor<double>({1, 1}, 0.5), Tensor<double>({1, 1}, 0.5)}));
  EXPECT_DOUBLE_EQ(l.value()[0], 4.0);
}

TEST(CategoricalLoss, SaturatedLogitsGiveNearZero) {
  const std::vector<std::size_t> cards = {3, 2};
  Tensor<double> z({2, 5});
  const std::vector<std::vector<std::size_t>> tg = {{2, 0}, {1, 1}};  // per feature, per sample
  for (std::size_t b = 0; b < 2; ++b) {
    z(b, tg[0][b]) = 30.0;
    z(b, 3 + tg[1][b]) = 30.0;
  }
  ad::Tape<double> tape;
  auto l = categorical_loss<double>(blocks(tape, {z}), cards, [&](std::size_t, std::size_t j) { return tg[j]; });
  EXPECT_LT(l.value()[0], 1e-9);
  EXPECT_GE(l.value()[0], 0.0);
}

TEST(CategoricalLoss, UniformLogits) {
  const std::vector<std::size_t> cards = {3, 2};
  ad::Tape<double> tape;
  auto l = categorical_loss<double>(blocks(tape, {Tensor<double>({4, 5}, 0.3), Tensor<double>({4, 5}, -1.0)}), cards,
                                    [](std::size_t, std::size_t) { return std::vector<std::size_t>{0, 1, 1, 0}; });
  EXPECT_NEAR(l.value()[0], (std::log(3.0) + std::log(2.0)) / 2, 1e-14);
}

TEST(FullObjective, RhoGradientIsNonzeroAndMatchesFiniteDifferences) {
  const auto spec = mini_spec();
  auto m = Model<double>::init(spec, 3);
  const auto batch = random_batch(6, spec, 4);
  std::mt19937_64 rng(9);
  const auto draw = draw_noise<double>(rng, batch.n, spec, 0.1);
  for (auto* p : m.parameters()) p->zero_grad();
  {
    ad::Tape<double> tape;
    tape.backward(compute_loss(tape, m, batch, draw).total);
  }
  for (auto* p : {&m.sched_num.rho_global, &m.sched_emb.rho_global, &m.sched_num.rho_feature, &m.sched_emb.rho_time}) {
    const std::vector<double> g(p->grad.storage()), x(p->value.storage());
    double mag = 0;
    for (double v : g) mag = std::max(mag, std::abs(v));
    EXPECT_GT(mag, 0.0) << p->name;
    auto f = [&](std::span<const double> v) {
      std::copy(v.begin(), v.end(), p->value.storage().begin());
      ad::Tape<double> tape(false);
      return compute_loss(tape, m, batch, draw).total.value()[0];
    };
    const auto r = ad::grad_check(f, g, x, 1e-5);
    std::copy(x.begin(), x.end(), p->value.storage().begin());
    EXPECT_LT(r.max_rel_error, 1e-4) << p->name;
  }
}

TEST(FullObjective, LossWeightsCombineTerms) {
  const auto spec = mini_spec();
  auto m = Model<double>::init(spec, 3);
  const auto batch = random_batch(4, spec, 4);
  std::mt19937_64 rng(2);
  const auto draw = draw_noise<double>(rng, batch.n, spec, 0.0);
  ad::Tape<double> tape(false);
  const auto a = compute_loss(tape, m, batch, draw, 1.0, 1.0);
  const auto b = compute_loss(tape, m, batch, draw, 2.0, 0.5);
  EXPECT_NEAR(b.total.value()[0], 2.0 * a.num_value() + 0.5 * a.emb_value(), 1e-12);
  EXPECT_NEAR(a.total.value()[0], a.num_value() + a.emb_value(), 1e-12);
}

TEST(LabelDrop, Endpoints) {
  std::mt19937_64 rng(1);
  const auto never = draw_label_keep(rng, 10000, 0.0);
  const auto always = draw_label_keep(rng, 10000, 1.0);
  EXPECT_EQ(std::count(never.begin(), never.end(), 1), 10000);
  EXPECT_EQ(std::count(always.begin(), always.end(), 0), 10000);
  const auto some = draw_label_keep(rng, 10000, 0.1);
  // 3 standard errors of a Bernoulli(0.1) mean
  EXPECT_NEAR(std::count(some.begin(), some.end(), 0) / 10000.0, 0.1, 3 * std::sqrt(0.09 / 10000));
}

TEST(Ema, SingleUpdate) {
  EXPECT_NEAR(ema_update(0.0, 1.0, 0.997), 0.003, 1e-15);
}

TEST(Ema, ConvergesGeometrically) {
  double m = 0.5;
  for (int k = 1; k <= 2000; ++k) {
    m = ema_update(m, 1.0, 0.997);
    ASSERT_LT(std::abs(m - 1.0), std::pow(0.997, k)) << k;
  }
}

TEST(Ema, ModelShadowsFollowSource) {
  auto a = Model<double>::init(mini_spec(), 1), b = Model<double>::init(mini_spec(), 2);
  auto shadow = a;
  ema_update(shadow, b, 0.9);
  auto ps = shadow.parameters(), pa = a.parameters(), pb = b.parameters();
  for (std::size_t k = 0; k < ps.size(); ++k)
    for (std::size_t i = 0; i < ps[k]->value.size(); ++i)
      ASSERT_NEAR(ps[k]->value[i], 0.9 * pa[k]->value[i] + 0.1 * pb[k]->value[i], 1e-15);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter<double> p("w", Tensor<double>({3}, {1.0, -2.0, 0.0}));
  p.grad = Tensor<double>({3}, {0.5, -3.0, 0.0});
  Adam<double> opt(0.01);
  opt.step({&p});
  EXPECT_NEAR(p.value[0], 0.99, 1e-9);
  EXPECT_NEAR(p.value[1], -1.99, 1e-9);
  EXPECT_EQ(p.value[2], 0.0);
  Parameter<double> q("frozen", Tensor<double>({1}, 1.0));
  q.grad = Tensor<double>({1}, 1.0);
  q.trainable = false;
  Adam<double> opt2(0.01);
  opt2.step({&q});
  EXPECT_EQ(q.value[0], 1.0);
}

TEST(Config, DefaultsAndJson) {
  TrainConfig c;
  EXPECT_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.ema_decay, 0.997);
  EXPECT_EQ(c.p_drop, 0.1);
  EXPECT_EQ(c.lambda_num, 1.0);
  EXPECT_EQ(c.lambda_emb, 1.0);
  const auto j = nlohmann::json{{"epochs", 7}, {"p_drop", 0.2}, {"learn_schedule", false}};
  const auto d = train_config_from_json(j);
  EXPECT_EQ(d.epochs, 7u);
  EXPECT_EQ(d.p_drop, 0.2);
  EXPECT_FALSE(d.learn_schedule);
  EXPECT_EQ(train_config_from_json(to_json(d)).epochs, 7u);
}

TEST(Config, Errors) {
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"epoch", 3}}), ArgumentError);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"epochs", "many"}}), ArgumentError);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"p_drop", 1.5}}), ArgumentError);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"ema_decay", 1.0}}), ArgumentError);
  EXPECT_THROW(train_config_from_json(nlohmann::json::array()), ArgumentError);
}

TEST(Train, BitReproducible) {
  const auto ds = toy(64, 6, 1);
  const auto data = normalize(ds.data, compute_stats(ds.data));
  const auto cfg = tiny_config();
  const auto spec = model_spec_for(ds.manifest, cfg);
  std::ostringstream la, lb;
  const auto a = train<float>(data, spec, cfg, &la);
  const auto b = train<float>(data, spec, cfg, &lb);
  EXPECT_EQ(la.str(), lb.str());
  auto pa = a.ema.parameters(), pb = b.ema.parameters();
  for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_EQ(pa[k]->value.storage(), pb[k]->value.storage());
  EXPECT_EQ(a.total_steps, 12u);
  EXPECT_EQ(la.str().substr(0, la.str().find('\n')), "step,loss_num,loss_emb,ema_loss");
}

TEST(Train, SelectsLowestEmaLoss) {
  const auto ds = toy(64, 6, 2);
  const auto data = normalize(ds.data, compute_stats(ds.data));
  auto cfg = tiny_config();
  cfg.eval_every = 2;
  const auto spec = model_spec_for(ds.manifest, cfg);
  const auto r = train<float>(data, spec, cfg);
  double best = 1e300;
  std::size_t at = 0, evals = 0;
  for (const auto& row : r.log)
    if (!std::isnan(row.ema_loss)) {
      ++evals;
      if (row.ema_loss < best) best = row.ema_loss, at = row.step;
    }
  EXPECT_EQ(evals, 6u);
  EXPECT_EQ(r.selected_ema_loss, best);
  EXPECT_EQ(r.selected_step, at);
}

TEST(Train, FrozenScheduleKeepsRho) {
  const auto ds = toy(32, 6, 3);
  const auto data = normalize(ds.data, compute_stats(ds.data));
  auto cfg = tiny_config();
  cfg.learn_schedule = false;
  const auto spec = model_spec_for(ds.manifest, cfg);
  const auto r = train<float>(data, spec, cfg);
  EXPECT_EQ(r.params.sched_num.rho_global.value[0], 1.0f);
  EXPECT_EQ(r.params.sched_emb.rho_global.value[0], 7.0f);
  for (float v : r.params.sched_num.rho_time.value.storage()) EXPECT_EQ(v, 0.0f);
  for (float v : r.ema.sched_emb.rho_feature.value.storage()) EXPECT_EQ(v, 0.0f);

  cfg.learn_schedule = true;
  const auto l = train<float>(data, spec, cfg);
  EXPECT_NE(l.params.sched_num.rho_global.value[0], 1.0f);
}

TEST(Train, NonFiniteLossNamesTheStep) {
  const auto ds = toy(32, 6, 4);
  auto data = normalize(ds.data, compute_stats(ds.data));
  data.numerical[0] = std::numeric_limits<float>::infinity();
  auto cfg = tiny_config();
  cfg.batch_size = 32;
  const auto spec = model_spec_for(ds.manifest, cfg);
  try {
    train<float>(data, spec, cfg);
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}

TEST(Train, ShapeMismatchIsRejected) {
  const auto ds = toy(16, 6, 4);
  auto spec = model_spec_for(ds.manifest, tiny_config());
  spec.seq_len = 7;
  EXPECT_THROW(train<float>(ds.data, spec, tiny_config()), ManifestMismatch);
}

TEST(Train, LossDecreasesOverFirst200Steps) {
  const auto ds = toy(1024, 24, 7);
  const auto data = normalize(ds.data, compute_stats(ds.data));
  TrainConfig cfg;
  cfg.hidden = 16;
  cfg.layers = 2;
  cfg.batch_size = 64;
  cfg.epochs = 13;  // 16 steps per epoch -> 208 steps
  cfg.seed = 1;
  cfg.eval_every = 1000;
  const auto spec = model_spec_for(ds.manifest, cfg);
  const auto r = train<float>(data, spec, cfg);
  ASSERT_GE(r.log.size(), 200u);
  std::vector<double> win;
  for (std::size_t w = 0; w < 10; ++w) {
    double s = 0;
    for (std::size_t i = 0; i < 20; ++i) s += r.log[w * 20 + i].loss_num + r.log[w * 20 + i].loss_emb;
    win.push_back(s / 20);
  }
  for (std::size_t w = 1; w < win.size(); ++w) EXPECT_LT(win[w], win[w - 1]) << "window " << w;
}
