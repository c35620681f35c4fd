#pragma once

// Whole-objective gradient check on a miniature double-precision model:
// every network, embedding and schedule parameter against central differences.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mixdiff/autodiff.hpp"
#include "mixdiff/dataio.hpp"
#include "mixdiff/model.hpp"
#include "mixdiff/training.hpp"

namespace mixdiff {

struct GradCheckEntry {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0;
  double worst_analytic = 0, worst_numeric = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 1e-4;
  double max_rel_error() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  bool passed() const { return max_rel_error() < tolerance; }
};

struct GradCheckConfig {
  std::size_t hidden = 8, seq_len = 4, batch = 2, embed_dim = 4, layers = 3;
  std::uint64_t seed = 7;
  double step = 1e-5;  // smaller steps drown the small GRU gradients in rounding noise
  double tolerance = 1e-4;
};

/// Miniature spec: 2 numerical features, categoricals with C = {3, 2}, binary label.
inline ModelSpec miniature_spec(const GradCheckConfig& c) {
  ModelSpec s;
  s.num_numerical = 2;
  s.cat_cards = {3, 2};
  s.label_card = 2;
  s.seq_len = c.seq_len;
  s.embed_dim = c.embed_dim;
  s.hidden = c.hidden;
  s.layers = c.layers;
  s.label_dim = 4;
  s.time_dim = 8;
  return s;
}

inline GradCheckReport run_gradcheck_suite(const GradCheckConfig& cfg = {}) {
  const ModelSpec spec = miniature_spec(cfg);
  Model<double> model = Model<double>::init(spec, cfg.seed);
  std::mt19937_64 rng(cfg.seed + 1);
  // Move zero-initialized weights (label embedding, FiLM) off zero so every
  // path carries gradient, and spread the rho parameters.
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (auto* p : model.parameters())
    for (auto& v : p->value.storage()) v += jitter(rng);

  SequenceBatch batch = SequenceBatch::zeros(cfg.batch, spec.seq_len, spec.num_numerical, spec.num_categorical());
  std::normal_distribution<double> gauss(0.0, 0.5);
  for (auto& v : batch.numerical) v = float(gauss(rng));
  for (std::size_t i = 0; i < batch.n; ++i) {
    for (std::size_t l = 0; l < spec.seq_len; ++l)
      for (std::size_t j = 0; j < spec.num_categorical(); ++j) batch.cat(i, l, j) = std::uint8_t((i + l + j) % spec.cat_cards[j]);
    batch.labels[i] = std::uint8_t(i % 2);
  }
  NoiseDraw<double> draw = draw_noise<double>(rng, batch.n, spec, 0.0);
  // keep t away from 0 where lambda(sigma) ~ 1/sigma^2 dominates the scale
  for (std::size_t b = 0; b < batch.n; ++b) draw.t[b] = 0.2 + 0.6 * double(b) / double(std::max<std::size_t>(1, batch.n - 1));
  draw.keep_label.assign(batch.n, 1);
  draw.keep_label.back() = 0;  // exercise the dropped-label path

  auto params = model.parameters();
  for (auto* p : params) p->zero_grad();
  {
    ad::Tape<double> tape;
    auto loss = compute_loss(tape, model, batch, draw);
    tape.backward(loss.total);
  }

  GradCheckReport rep;
  rep.tolerance = cfg.tolerance;
  for (auto* p : params) {
    const std::vector<double> analytic(p->grad.storage().begin(), p->grad.storage().end());
    const std::vector<double> point(p->value.storage().begin(), p->value.storage().end());
    auto f = [&](std::span<const double> x) {
      std::copy(x.begin(), x.end(), p->value.storage().begin());
      ad::Tape<double> tape(false);
      return compute_loss(tape, model, batch, draw).total.value()[0];
    };
    const auto r = ad::grad_check(f, analytic, point, cfg.step);
    std::copy(point.begin(), point.end(), p->value.storage().begin());
    rep.entries.push_back({p->name, point.size(), r.max_rel_error, r.worst_analytic, r.worst_numeric});
  }
  return rep;
}

}  // namespace mixdiff
