#pragma once

// Forward noising, the sigma-space Euler sampler and classifier-free guidance.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mixdiff/dataio.hpp"
#include "mixdiff/model.hpp"
#include "mixdiff/random.hpp"

namespace mixdiff {

enum class SampleMode { uncond, cfg_comb, cfg_bal };

inline SampleMode parse_sample_mode(std::string_view s) {
  if (s == "uncond") return SampleMode::uncond;
  if (s == "cfg-comb") return SampleMode::cfg_comb;
  if (s == "cfg-bal") return SampleMode::cfg_bal;
  throw ArgumentError("unknown sampling mode '" + std::string(s) + "' (expected uncond, cfg-comb or cfg-bal)");
}

inline std::string to_string(SampleMode m) {
  switch (m) {
    case SampleMode::uncond: return "uncond";
    case SampleMode::cfg_comb: return "cfg-comb";
    case SampleMode::cfg_bal: return "cfg-bal";
  }
  return "?";
}

struct SamplerConfig {
  std::size_t steps = 50;
  double w_num = 2.0;
  double w_cat = 2.0;
  SampleMode mode = SampleMode::cfg_comb;
  std::uint64_t seed = 0;
  std::size_t chunk = 256;  ///< samples per forward pass; does not affect results
};

// ---------------------------------------------------------------------------
// Elementwise pieces

struct Noised {
  std::vector<double> xt, eps;
};

/// x_t = x0 + sigma * eps with the given eps.
inline std::vector<double> forward_noise(std::span<const double> x0, std::span<const double> sigma,
                                         std::span<const double> eps) {
  if (x0.size() != sigma.size() || x0.size() != eps.size()) throw ArgumentError("forward_noise: shape mismatch");
  std::vector<double> xt(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) xt[i] = x0[i] + sigma[i] * eps[i];
  return xt;
}

inline Noised forward_noise(std::span<const double> x0, std::span<const double> sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Noised out;
  out.eps.resize(x0.size());
  for (auto& e : out.eps) e = gauss(rng);
  out.xt = forward_noise(x0, sigma, out.eps);
  return out;
}

inline void check_step(double s, double s_next) {
  if (!(s > s_next) || !(s_next >= 0.0))
    throw ArgumentError("euler_step: noise levels must strictly decrease (got " + std::to_string(s) + " -> " +
                        std::to_string(s_next) + ")");
}

/// x + ((s_next - s) / s) * (x - x0_hat); contracts toward x0_hat.
inline double euler_step(double x, double x0_hat, double s, double s_next) {
  check_step(s, s_next);
  return x + ((s_next - s) / s) * (x - x0_hat);
}

/// (1 + w) * cond - w * uncond
inline double cfg_combine(double cond, double uncond, double w) { return (1.0 + w) * cond - w * uncond; }

template <class T>
Tensor<T> cfg_combine(const Tensor<T>& cond, const Tensor<T>& uncond, double w) {
  if (cond.shape() != uncond.shape()) throw ArgumentError("cfg_combine: shape mismatch");
  Tensor<T> out(cond.shape());
  const T a = T(1.0 + w), b = T(w);
  for (std::size_t i = 0; i < cond.size(); ++i) out[i] = a * cond[i] - b * uncond[i];
  return out;
}

/// Scalar sampler with an arbitrary denoiser; sigmas is the decreasing grid
/// (S+1 values). Sample i starts at sigmas[0] * eps_i with eps_i drawn from
/// its own stream, so results do not depend on n.
template <class Denoise>
std::vector<double> euler_sample(std::span<const double> sigmas, std::size_t n, std::uint64_t seed, Denoise&& denoise) {
  if (sigmas.size() < 2) throw ArgumentError("euler_sample: need at least one step");
  for (std::size_t i = 0; i + 1 < sigmas.size(); ++i) check_step(sigmas[i], sigmas[i + 1]);
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::mt19937_64 rng(mix_seed(seed, k));
    std::normal_distribution<double> gauss(0.0, 1.0);
    double x = sigmas[0] * gauss(rng);
    for (std::size_t i = 0; i + 1 < sigmas.size(); ++i) x = euler_step(x, denoise(x, sigmas[i]), sigmas[i], sigmas[i + 1]);
    out[k] = x;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Labels

/// cfg-comb: i.i.d. draws from `freqs`; cfg-bal: class i mod C (equal counts
/// up to rounding); uncond: all zero and ignored by the model.
inline std::vector<std::uint8_t> synthesize_labels(SampleMode mode, std::size_t n, std::span<const double> freqs,
                                                   std::size_t card, std::uint64_t seed) {
  std::vector<std::uint8_t> y(n, 0);
  if (card < 2 || card > 256) throw ArgumentError("labels: cardinality must lie in [2,256]");
  if (mode == SampleMode::cfg_bal) {
    for (std::size_t i = 0; i < n; ++i) y[i] = std::uint8_t(i % card);
  } else if (mode == SampleMode::cfg_comb) {
    if (freqs.size() != card) throw ArgumentError("labels: frequency vector does not match label cardinality");
    double s = 0;
    for (double f : freqs) {
      if (!(f >= 0)) throw ArgumentError("labels: negative label frequency");
      s += f;
    }
    if (!(s > 0)) throw ArgumentError("labels: label frequencies sum to zero");
    std::mt19937_64 rng(mix_seed(seed, ~std::uint64_t{0}));
    std::discrete_distribution<std::size_t> dist(freqs.begin(), freqs.end());
    for (auto& v : y) v = std::uint8_t(dist(rng));
  }
  return y;
}

// ---------------------------------------------------------------------------
// Model sampler

namespace detail {

template <class T>
struct ChunkState {
  std::vector<Tensor<T>> num;  ///< per position [B, M_num]
  std::vector<Tensor<T>> emb;  ///< per position [B, M_cat * d]
};

template <class T>
DenoisePass<T> run_denoiser(ad::Tape<T>& tape, Model<T>& m, const ChunkState<T>& x, const std::vector<Tensor<T>>& sn,
                            const std::vector<Tensor<T>>& se, std::span<const double> t, const Tensor<T>& label) {
  std::vector<ad::Var<T>> xn, vn, xe, ve;
  for (std::size_t l = 0; l < x.num.size(); ++l) {
    xn.push_back(tape.constant(x.num[l]));
    vn.push_back(tape.constant(sn[l]));
  }
  for (std::size_t l = 0; l < x.emb.size(); ++l) {
    xe.push_back(tape.constant(x.emb[l]));
    ve.push_back(tape.constant(se[l]));
  }
  return denoise(tape, m, xn, vn, xe, ve, t, label);
}

}  // namespace detail

/// Draws n sequences. Numerical channels are de-normalized with `stats` when
/// given; labels are taken from `labels` when non-empty, else synthesized
/// per the mode (label_freqs is used by cfg-comb).
template <class T>
SequenceBatch sample(const Model<T>& model_in, const SamplerConfig& cfg, std::size_t n,
                     std::span<const std::uint8_t> labels = {}, std::span<const double> label_freqs = {},
                     const NormStats* stats = nullptr) {
  if (cfg.steps == 0) throw ArgumentError("sample: steps must be positive");
  if (cfg.chunk == 0) throw ArgumentError("sample: chunk must be positive");
  if (!std::isfinite(cfg.w_num) || !std::isfinite(cfg.w_cat)) throw ArgumentError("sample: guidance weights must be finite");
  Model<T> model = model_in;
  const ModelSpec& spec = model.spec;
  const std::size_t len = spec.seq_len, fn = spec.num_numerical, fc = spec.num_categorical(), d = spec.embed_dim;
  const std::size_t width_e = spec.embed_width();

  std::vector<std::uint8_t> y;
  if (!labels.empty()) {
    if (labels.size() != n) throw ArgumentError("sample: label count does not match n");
    for (auto v : labels)
      if (v >= spec.label_card) throw ArgumentError("sample: unknown label class " + std::to_string(int(v)));
    y.assign(labels.begin(), labels.end());
  } else {
    y = synthesize_labels(cfg.mode, n, label_freqs, spec.label_card, cfg.seed);
  }
  const bool guided = cfg.mode != SampleMode::uncond;

  const Tensor<double> gn = fn ? model.sched_num.sigma_grid(cfg.steps) : Tensor<double>();
  const Tensor<double> ge = fc ? model.sched_emb.sigma_grid(cfg.steps) : Tensor<double>();
  std::vector<Tensor<double>> tables;
  for (std::size_t j = 0; j < fc; ++j) tables.push_back(model.embeddings.normalized(j));
  auto sig_n = [&](std::size_t i, std::size_t l, std::size_t f) { return gn[(i * len + l) * fn + f]; };
  auto sig_e = [&](std::size_t i, std::size_t l, std::size_t j) { return ge[(i * len + l) * fc + j]; };

  SequenceBatch out = SequenceBatch::zeros(n, len, fn, fc);
  out.labels = y;

  for (std::size_t lo = 0; lo < n; lo += cfg.chunk) {
    const std::size_t nb = std::min(cfg.chunk, n - lo);
    detail::ChunkState<T> x;
    for (std::size_t l = 0; l < len; ++l) {
      if (fn) x.num.emplace_back(Shape{nb, fn});
      if (fc) x.emb.emplace_back(Shape{nb, width_e});
    }
    for (std::size_t b = 0; b < nb; ++b) {
      std::mt19937_64 rng(mix_seed(cfg.seed, lo + b));
      std::normal_distribution<double> gauss(0.0, 1.0);
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t f = 0; f < fn; ++f) x.num[l](b, f) = T(sig_n(0, l, f) * gauss(rng));
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t c = 0; c < width_e; ++c) x.emb[l](b, c) = T(sig_e(0, l, c / d) * gauss(rng));
    }
    const std::vector<std::uint8_t> yb(y.begin() + lo, y.begin() + lo + nb);
    const Tensor<T> label_c = guided ? label_block<T>(yb, spec.label_card, std::vector<std::uint8_t>(nb, 1))
                                     : label_block<T>(yb, spec.label_card, std::vector<std::uint8_t>(nb, 0));
    const Tensor<T> label_u = label_block<T>(yb, spec.label_card, std::vector<std::uint8_t>(nb, 0));

    for (std::size_t i = 0; i < cfg.steps; ++i) {
      const std::vector<double> t(nb, 1.0 - double(i) / double(cfg.steps));
      std::vector<Tensor<T>> sn, se;
      for (std::size_t l = 0; l < len; ++l) {
        if (fn) {
          Tensor<T> s({nb, fn});
          for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t f = 0; f < fn; ++f) s(b, f) = T(sig_n(i, l, f));
          sn.push_back(std::move(s));
        }
        if (fc) {
          Tensor<T> s({nb, width_e});
          for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t c = 0; c < width_e; ++c) s(b, c) = T(sig_e(i, l, c / d));
          se.push_back(std::move(s));
        }
      }
      std::vector<Tensor<T>> x0n, logits;
      {
        ad::Tape<T> tape(false);
        auto pc = detail::run_denoiser(tape, model, x, sn, se, t, label_c);
        for (auto& v : pc.x0_num) x0n.push_back(v.value());
        for (auto& v : pc.logits) logits.push_back(v.value());
      }
      if (guided) {
        ad::Tape<T> tape(false);
        auto pu = detail::run_denoiser(tape, model, x, sn, se, t, label_u);
        for (std::size_t l = 0; l < x0n.size(); ++l) x0n[l] = cfg_combine(x0n[l], pu.x0_num[l].value(), cfg.w_num);
        for (std::size_t l = 0; l < logits.size(); ++l)
          logits[l] = cfg_combine(logits[l], pu.logits[l].value(), cfg.w_cat);
      }
      for (std::size_t l = 0; l < len; ++l) {
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t f = 0; f < fn; ++f)
            x.num[l](b, f) = T(euler_step(double(x.num[l](b, f)), double(x0n[l](b, f)), sig_n(i, l, f),
                                          sig_n(i + 1, l, f)));
        if (!fc) continue;
        const Tensor<T>& z = logits[l];
        std::vector<double> p, e(d);
        for (std::size_t b = 0; b < nb; ++b) {
          std::size_t off = 0;
          for (std::size_t j = 0; j < fc; ++j) {
            const std::size_t cj = spec.cat_cards[j];
            // posterior-mean embedding from softmaxed (guided) logits
            p.assign(cj, 0.0);
            double mx = double(z(b, off));
            for (std::size_t k = 1; k < cj; ++k) mx = std::max(mx, double(z(b, off + k)));
            double s = 0;
            for (std::size_t k = 0; k < cj; ++k) s += p[k] = std::exp(double(z(b, off + k)) - mx);
            std::fill(e.begin(), e.end(), 0.0);
            for (std::size_t k = 0; k < cj; ++k)
              for (std::size_t c = 0; c < d; ++c) e[c] += (p[k] / s) * tables[j](k, c);
            for (std::size_t c = 0; c < d; ++c) {
              T& xv = x.emb[l](b, j * d + c);
              xv = T(euler_step(double(xv), e[c], sig_e(i, l, j), sig_e(i + 1, l, j)));
            }
            off += cj;
          }
        }
      }
    }
    std::vector<double> v(d);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t l = 0; l < len; ++l) {
        for (std::size_t f = 0; f < fn; ++f) out.num(lo + b, l, f) = float(x.num[l](b, f));
        for (std::size_t j = 0; j < fc; ++j) {
          for (std::size_t c = 0; c < d; ++c) v[c] = double(x.emb[l](b, j * d + c));
          out.cat(lo + b, l, j) = std::uint8_t(EmbeddingTable<T>::nearest_row(tables[j], v));
        }
      }
  }
  if (stats) out = denormalize(std::move(out), *stats);
  return out;
}

}  // namespace mixdiff
