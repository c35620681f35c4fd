#pragma once

// Losses, Adam, EMA and the training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixdiff/autodiff.hpp"
#include "mixdiff/dataio.hpp"
#include "mixdiff/model.hpp"
#include "mixdiff/schedule.hpp"

namespace mixdiff {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  std::size_t epochs = 100;
  double ema_decay = 0.997;
  double lambda_num = 1.0;
  double lambda_emb = 1.0;
  double p_drop = 0.1;
  std::uint64_t seed = 0;
  bool learn_schedule = true;      ///< false freezes every rho component at its initial value
  std::size_t eval_every = 0;      ///< steps between EMA-loss evaluations; 0 = once per epoch
  std::size_t eval_samples = 512;  ///< size of the fixed EMA-loss evaluation subset
  // model size
  std::size_t hidden = 64;
  std::size_t layers = 3;
  std::size_t embed_dim = 16;

  void validate() const {
    if (!(learning_rate > 0)) throw ArgumentError("config: learning_rate must be positive");
    if (batch_size == 0 || epochs == 0) throw ArgumentError("config: batch_size and epochs must be positive");
    if (!(ema_decay > 0 && ema_decay < 1)) throw ArgumentError("config: ema_decay must lie in (0,1)");
    if (!(lambda_num >= 0) || !(lambda_emb >= 0)) throw ArgumentError("config: loss weights must be nonnegative");
    if (!(p_drop >= 0 && p_drop <= 1)) throw ArgumentError("config: p_drop must lie in [0,1]");
    if (hidden == 0 || layers == 0 || embed_dim == 0) throw ArgumentError("config: model sizes must be positive");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},   {"epochs", c.epochs},
          {"ema_decay", c.ema_decay},         {"lambda_num", c.lambda_num},   {"lambda_emb", c.lambda_emb},
          {"p_drop", c.p_drop},               {"seed", c.seed},               {"learn_schedule", c.learn_schedule},
          {"eval_every", c.eval_every},       {"eval_samples", c.eval_samples}, {"hidden", c.hidden},
          {"layers", c.layers},               {"embed_dim", c.embed_dim}};
}

/// Overlays keys from `j` on the defaults; unknown keys are an ArgumentError.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ArgumentError("config: expected a JSON object");
  TrainConfig c;
  const auto known = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ArgumentError("config: unknown key '" + it.key() + "'");
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.ema_decay = j.value("ema_decay", c.ema_decay);
    c.lambda_num = j.value("lambda_num", c.lambda_num);
    c.lambda_emb = j.value("lambda_emb", c.lambda_emb);
    c.p_drop = j.value("p_drop", c.p_drop);
    c.seed = j.value("seed", c.seed);
    c.learn_schedule = j.value("learn_schedule", c.learn_schedule);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_samples = j.value("eval_samples", c.eval_samples);
    c.hidden = j.value("hidden", c.hidden);
    c.layers = j.value("layers", c.layers);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Model hyperparameters implied by a dataset manifest and a training config.
inline ModelSpec model_spec_for(const DatasetManifest& m, const TrainConfig& c) {
  ModelSpec s;
  s.num_numerical = m.numerical.size();
  s.cat_cards = m.cardinalities();
  s.label_card = m.label.cardinality;
  s.seq_len = m.seq_len;
  s.hidden = c.hidden;
  s.layers = c.layers;
  s.embed_dim = c.embed_dim;
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Random draws per step

template <class T>
struct NoiseDraw {
  std::vector<double> t;                 ///< diffusion time per sample, U[0,1)
  std::vector<std::uint8_t> keep_label;  ///< 0 = label replaced by the zero vector
  std::vector<Tensor<T>> eps_num;        ///< per position [B, M_num]
  std::vector<Tensor<T>> eps_emb;        ///< per position [B, M_cat * d]
};

/// keep_label[b] = !(u_b < p_drop) with u_b ~ U[0,1), so p_drop = 0 never drops
/// and p_drop = 1 always drops.
inline std::vector<std::uint8_t> draw_label_keep(std::mt19937_64& rng, std::size_t n, double p_drop) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::uint8_t> keep(n);
  for (auto& k : keep) k = unif(rng) < p_drop ? 0 : 1;
  return keep;
}

template <class T>
NoiseDraw<T> draw_noise(std::mt19937_64& rng, std::size_t batch, const ModelSpec& spec, double p_drop) {
  NoiseDraw<T> d;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  d.t.resize(batch);
  for (auto& t : d.t) t = unif(rng);
  d.keep_label = draw_label_keep(rng, batch, p_drop);
  for (std::size_t l = 0; l < spec.seq_len; ++l) {
    Tensor<T> en({batch, spec.num_numerical});
    for (auto& v : en.storage()) v = T(gauss(rng));
    Tensor<T> ee({batch, spec.embed_width()});
    for (auto& v : ee.storage()) v = T(gauss(rng));
    d.eps_num.push_back(std::move(en));
    d.eps_emb.push_back(std::move(ee));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Losses

/// mean over all elements of lambda(sigma) * (x0_hat - x0)^2
template <class T>
ad::Var<T> numerical_loss(const std::vector<ad::Var<T>>& x0_hat, const std::vector<ad::Var<T>>& x0,
                          const std::vector<ad::Var<T>>& sigma, double sigma_data = 0.5) {
  if (x0_hat.empty() || x0_hat.size() != x0.size() || x0.size() != sigma.size())
    throw ArgumentError("numerical_loss: inconsistent inputs");
  Edm edm{sigma_data};
  std::size_t count = 0;
  std::optional<ad::Var<T>> total;
  for (std::size_t l = 0; l < x0.size(); ++l) {
    auto diff = ad::sub(x0_hat[l], x0[l]);
    auto term = ad::sum(ad::mul(edm.loss_weight(sigma[l]), ad::mul(diff, diff)));
    total = total ? ad::add(*total, term) : term;
    count += x0[l].value().size();
  }
  return ad::scale(*total, T(1.0 / double(count)));
}

/// -(1/(M_cat L)) sum_{j,l} log p(x0^{(l,j)}), averaged over the batch.
/// targets(l, j) yields the batch's true categories of feature j at position l.
template <class T>
ad::Var<T> categorical_loss(const std::vector<ad::Var<T>>& logits, std::span<const std::size_t> cards,
                            const std::function<std::vector<std::size_t>(std::size_t, std::size_t)>& targets) {
  if (logits.empty() || cards.empty()) throw ArgumentError("categorical_loss: no categorical features");
  std::optional<ad::Var<T>> total;
  for (std::size_t l = 0; l < logits.size(); ++l) {
    std::size_t off = 0;
    for (std::size_t j = 0; j < cards.size(); ++j) {
      const auto tg = targets(l, j);
      auto term = ad::softmax_xent(ad::slice_cols(logits[l], off, cards[j]), tg).loss;
      total = total ? ad::add(*total, term) : term;
      off += cards[j];
    }
  }
  return ad::scale(*total, T(1.0 / double(cards.size() * logits.size())));
}

template <class T>
struct LossTerms {
  ad::Var<T> total;
  std::optional<ad::Var<T>> num, emb;
  double num_value() const { return num ? double(num->value()[0]) : 0.0; }
  double emb_value() const { return emb ? double(emb->value()[0]) : 0.0; }
};

/// Full objective lambda_num * L_num + lambda_emb * L_emb on a normalized batch.
template <class T>
LossTerms<T> compute_loss(ad::Tape<T>& tape, Model<T>& m, const SequenceBatch& batch, const NoiseDraw<T>& draw,
                          double lambda_num = 1.0, double lambda_emb = 1.0) {
  const ModelSpec& spec = m.spec;
  const std::size_t nb = batch.n, len = spec.seq_len, fn = spec.num_numerical, fc = spec.num_categorical();
  const std::size_t d = spec.embed_dim;
  if (batch.seq_len != len || batch.num_numerical != fn || batch.num_categorical != fc)
    throw ArgumentError("compute_loss: batch shape does not match the model");
  if (draw.t.size() != nb) throw ArgumentError("compute_loss: noise draw does not match batch size");

  auto sv_num = ScheduleVars<T>::bind(tape, m.sched_num);
  auto sv_emb = ScheduleVars<T>::bind(tape, m.sched_emb);
  std::vector<ad::Var<T>> tabs;
  for (std::size_t j = 0; j < fc; ++j) tabs.push_back(normalized_table_var(tape, m.embeddings, j));

  std::vector<ad::Var<T>> x0n, sn, xtn, se, xte;
  std::vector<std::size_t> idx(nb);
  for (std::size_t l = 0; l < len; ++l) {
    if (fn) {
      Tensor<T> x0({nb, fn});
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t f = 0; f < fn; ++f) x0(b, f) = T(batch.num(b, l, f));
      auto x0v = tape.constant(std::move(x0));
      auto s = sigma_at(sv_num, draw.t, l, 1);
      x0n.push_back(x0v);
      sn.push_back(s);
      xtn.push_back(ad::add(x0v, ad::mul(s, tape.view(draw.eps_num[l]))));
    }
    if (fc) {
      std::vector<ad::Var<T>> parts;
      for (std::size_t j = 0; j < fc; ++j) {
        for (std::size_t b = 0; b < nb; ++b) idx[b] = batch.cat(b, l, j);
        parts.push_back(ad::gather_rows(tabs[j], idx));
      }
      auto e = parts.size() == 1 ? parts[0] : ad::concat_cols(parts);
      auto s = sigma_at(sv_emb, draw.t, l, d);
      se.push_back(s);
      xte.push_back(ad::add(e, ad::mul(s, tape.view(draw.eps_emb[l]))));
    }
  }
  const Tensor<T> label = label_block<T>(batch.labels, spec.label_card, draw.keep_label);
  auto pass = denoise(tape, m, xtn, sn, xte, se, draw.t, label);

  LossTerms<T> out;
  std::optional<ad::Var<T>> total;
  if (fn) {
    out.num = numerical_loss(pass.x0_num, x0n, sn, spec.sigma_data);
    total = ad::scale(*out.num, T(lambda_num));
  }
  if (fc) {
    out.emb = categorical_loss<T>(pass.logits, spec.cat_cards, [&](std::size_t l, std::size_t j) {
      std::vector<std::size_t> tg(nb);
      for (std::size_t b = 0; b < nb; ++b) tg[b] = batch.cat(b, l, j);
      return tg;
    });
    auto w = ad::scale(*out.emb, T(lambda_emb));
    total = total ? ad::add(*total, w) : w;
  }
  out.total = *total;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer and EMA

/// Adam (beta1 = 0.9, beta2 = 0.999, eps = 1e-8) over a fixed parameter list.
/// Frozen parameters (trainable == false) are skipped.
template <class T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(const std::vector<Parameter<T>*>& params) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw ArgumentError("adam: parameter list changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter<T>& p = *params[k];
      if (!p.trainable || p.grad.empty()) continue;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = double(p.grad[i]);
        m[i] = b1_ * m[i] + (1 - b1_) * g;
        v[i] = b2_ * v[i] + (1 - b2_) * g * g;
        p.value[i] -= T(lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// shadow <- decay * shadow + (1 - decay) * value
inline double ema_update(double shadow, double value, double decay) { return decay * shadow + (1 - decay) * value; }

template <class T>
void ema_update(Model<T>& shadow, const Model<T>& src, double decay) {
  auto dst = shadow.parameters();
  auto from = src.parameters();
  for (std::size_t k = 0; k < dst.size(); ++k) {
    if (dst[k]->value.shape() != from[k]->value.shape()) throw ArgumentError("ema: shadow shape mismatch");
    for (std::size_t i = 0; i < dst[k]->value.size(); ++i)
      dst[k]->value[i] = T(ema_update(double(dst[k]->value[i]), double(from[k]->value[i]), decay));
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct MetricsRow {
  std::size_t step = 0;
  double loss_num = 0, loss_emb = 0;
  double ema_loss = std::numeric_limits<double>::quiet_NaN();  ///< NaN when not evaluated at this step
};

inline void write_metrics_header(std::ostream& os) { os << "step,loss_num,loss_emb,ema_loss\n"; }
inline void write_metrics_row(std::ostream& os, const MetricsRow& r) {
  os << r.step << ',' << r.loss_num << ',' << r.loss_emb << ',';
  if (!std::isnan(r.ema_loss)) os << r.ema_loss;
  os << '\n';
}

template <class T>
struct TrainResult {
  Model<T> params;  ///< raw parameters at the selected step
  Model<T> ema;     ///< EMA shadow at the selected step
  std::size_t selected_step = 0;
  double selected_ema_loss = std::numeric_limits<double>::infinity();
  std::size_t total_steps = 0;
  std::vector<MetricsRow> log;
};

/// Trains on a normalized batch. Every `eval_every` steps (and at the end) the
/// EMA model's loss on a fixed subset with fixed noise is recorded; the
/// snapshot with the lowest EMA loss is returned.
template <class T>
TrainResult<T> train(const SequenceBatch& data, const ModelSpec& spec, const TrainConfig& cfg,
                     std::ostream* metrics = nullptr) {
  cfg.validate();
  if (data.n == 0) throw ArgumentError("train: empty dataset");
  if (data.seq_len != spec.seq_len || data.num_numerical != spec.num_numerical ||
      data.num_categorical != spec.num_categorical())
    throw ManifestMismatch("train: dataset shape does not match model hyperparameters");

  Model<T> model = Model<T>::init(spec, cfg.seed ^ 0x9e3779b97f4a7c15ull);
  model.set_schedule_trainable(cfg.learn_schedule);
  Model<T> ema = model;
  Adam<T> opt(cfg.learning_rate);
  auto params = model.parameters();

  std::mt19937_64 rng(cfg.seed);
  std::mt19937_64 eval_rng(cfg.seed ^ 0x5bd1e995ull);
  std::vector<std::size_t> order(data.n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<std::size_t> eval_idx = order;
  std::shuffle(eval_idx.begin(), eval_idx.end(), eval_rng);
  eval_idx.resize(std::min(cfg.eval_samples ? cfg.eval_samples : data.n, data.n));
  const SequenceBatch eval_batch = data.subset(eval_idx);
  const NoiseDraw<T> eval_draw = draw_noise<T>(eval_rng, eval_batch.n, spec, cfg.p_drop);

  const std::size_t steps_per_epoch = (data.n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t eval_every = cfg.eval_every ? cfg.eval_every : steps_per_epoch;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;

  TrainResult<T> res;
  if (metrics) write_metrics_header(*metrics);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = s * cfg.batch_size, hi = std::min(data.n, lo + cfg.batch_size);
      const SequenceBatch batch = data.subset(std::span(order).subspan(lo, hi - lo));
      const NoiseDraw<T> draw = draw_noise<T>(rng, batch.n, spec, cfg.p_drop);
      for (auto* p : params) p->zero_grad();
      MetricsRow row;
      {
        ad::Tape<T> tape;
        auto loss = compute_loss(tape, model, batch, draw, cfg.lambda_num, cfg.lambda_emb);
        const double v = double(loss.total.value()[0]);
        if (!std::isfinite(v)) throw NumericError("train: non-finite loss at step " + std::to_string(step + 1));
        tape.backward(loss.total);
        row.loss_num = loss.num_value();
        row.loss_emb = loss.emb_value();
      }
      opt.step(params);
      ema_update(ema, model, cfg.ema_decay);
      ++step;
      row.step = step;
      if (step % eval_every == 0 || step == total_steps) {
        ad::Tape<T> tape(false);
        const double v = double(compute_loss(tape, ema, eval_batch, eval_draw, cfg.lambda_num, cfg.lambda_emb)
                                    .total.value()[0]);
        if (!std::isfinite(v)) throw NumericError("train: non-finite EMA loss at step " + std::to_string(step));
        row.ema_loss = v;
        if (v < res.selected_ema_loss) {
          res.selected_ema_loss = v;
          res.selected_step = step;
          res.params = model;
          res.ema = ema;
        }
      }
      if (metrics) write_metrics_row(*metrics, row);
      res.log.push_back(row);
    }
  }
  res.total_steps = step;
  return res;
}

}  // namespace mixdiff
