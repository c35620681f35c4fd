#pragma once

// Bidirectional GRU denoiser with FiLM diffusion-time conditioning.
//
// Per timestep the network reads [c_in * x_t^num | c_in * x_t^emb | label
// embedding], projects it to width H, runs `layers` stacked bidirectional GRU
// layers (FiLM after each), and maps the [B, 2H] features to M_num numerical
// outputs followed by sum_j C_j categorical logits.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mixdiff/autodiff.hpp"
#include "mixdiff/error.hpp"
#include "mixdiff/tensor.hpp"

namespace mixdiff {

struct ModelSpec {
  std::size_t num_numerical = 0;           ///< M_num
  std::vector<std::size_t> cat_cards;      ///< C_j per categorical feature
  std::size_t label_card = 2;
  std::size_t seq_len = 1;                 ///< L
  std::size_t embed_dim = 16;              ///< d
  std::size_t hidden = 64;                 ///< H per direction
  std::size_t layers = 3;
  std::size_t label_dim = 16;
  std::size_t time_dim = 64;
  double sigma_data = 0.5;
  double sigma_min = 0.002;
  double sigma_max_num = 80.0;
  double sigma_max_emb = 100.0;
  double rho_init_num = 1.0;
  double rho_init_emb = 7.0;
  double rho_lower = 0.1;
  double rho_upper = 15.0;

  std::size_t num_categorical() const { return cat_cards.size(); }
  std::size_t embed_width() const { return cat_cards.size() * embed_dim; }
  std::size_t logit_width() const { return std::accumulate(cat_cards.begin(), cat_cards.end(), std::size_t{0}); }
  std::size_t state_width() const { return num_numerical + embed_width(); }
  std::size_t input_width() const { return state_width() + label_dim; }
  std::size_t output_width() const { return num_numerical + logit_width(); }

  void validate() const {
    if (seq_len == 0) throw ArgumentError("model: sequence length must be positive");
    if (num_numerical == 0 && cat_cards.empty()) throw ArgumentError("model: no features");
    if (hidden == 0 || layers == 0 || embed_dim == 0 || time_dim < 2 || time_dim % 2)
      throw ArgumentError("model: hidden/layers/embed_dim must be positive and time_dim even");
    if (label_card < 1) throw ArgumentError("model: label cardinality must be positive");
    for (auto c : cat_cards)
      if (c < 2 || c > 255) throw ArgumentError("model: categorical cardinality must lie in [2,255]");
    if (!(sigma_data > 0) || !(sigma_min > 0) || !(sigma_min < sigma_max_num) || !(sigma_min < sigma_max_emb))
      throw ArgumentError("model: invalid noise range");
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// ---------------------------------------------------------------------------
// Building blocks

template <class T>
struct Linear {
  Parameter<T> weight;  ///< [in, out]
  Parameter<T> bias;    ///< [out]

  /// Weights ~ U(-1/sqrt(in), 1/sqrt(in)) unless zero_init; bias zero.
  static Linear make(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng,
                     bool zero_init = false) {
    Linear l;
    Tensor<T> w({in, out});
    if (!zero_init) {
      const double a = 1.0 / std::sqrt(double(in));
      std::uniform_real_distribution<double> u(-a, a);
      for (auto& v : w.storage()) v = T(u(rng));
    }
    l.weight = Parameter<T>(name + ".weight", std::move(w));
    l.bias = Parameter<T>(name + ".bias", Tensor<T>({out}));
    return l;
  }

  struct Bound {
    ad::Var<T> w, b;
    ad::Var<T> operator()(ad::Var<T> x) const { return ad::add_row(ad::matmul(x, w), b); }
  };
  Bound bind(ad::Tape<T>& tape) { return {tape.param(weight), tape.param(bias)}; }

  void collect(std::vector<Parameter<T>*>& out) { out.insert(out.end(), {&weight, &bias}); }
};

/// One direction of a GRU layer: input projection [in, 3H] (+ bias) and
/// recurrent matrix U [H, 3H], gate blocks ordered (update | reset | candidate).
template <class T>
struct GruDirection {
  Linear<T> input;
  Parameter<T> recurrent;

  static GruDirection make(const std::string& name, std::size_t in, std::size_t hidden, std::mt19937_64& rng) {
    GruDirection g;
    const double a = 1.0 / std::sqrt(double(hidden));
    std::uniform_real_distribution<double> u(-a, a);
    Tensor<T> wx({in, 3 * hidden});
    for (auto& v : wx.storage()) v = T(u(rng));
    Tensor<T> wh({hidden, 3 * hidden});
    for (auto& v : wh.storage()) v = T(u(rng));
    g.input.weight = Parameter<T>(name + ".w_input", std::move(wx));
    g.input.bias = Parameter<T>(name + ".bias", Tensor<T>({3 * hidden}));
    g.recurrent = Parameter<T>(name + ".w_recurrent", std::move(wh));
    return g;
  }

  std::size_t hidden() const { return recurrent.value.dim(0); }

  struct Bound {
    typename Linear<T>::Bound input;
    ad::Var<T> u;
    std::size_t hidden;
  };
  Bound bind(ad::Tape<T>& tape) { return {input.bind(tape), tape.param(recurrent), hidden()}; }

  void collect(std::vector<Parameter<T>*>& out) {
    input.collect(out);
    out.push_back(&recurrent);
  }
};

/// Runs one direction over the sequence (reverse=true walks l = L-1..0);
/// returns hidden states indexed by sequence position.
template <class T>
std::vector<ad::Var<T>> gru_scan(ad::Tape<T>& tape, const typename GruDirection<T>::Bound& g,
                                 const std::vector<ad::Var<T>>& xs, bool reverse) {
  const std::size_t len = xs.size();
  std::vector<ad::Var<T>> hs(len);
  if (len == 0) return hs;
  ad::Var<T> h = tape.constant(Tensor<T>({xs.front().rows(), g.hidden}));
  for (std::size_t s = 0; s < len; ++s) {
    const std::size_t l = reverse ? len - 1 - s : s;
    h = ad::gru_step(g.input(xs[l]), h, g.u);
    hs[l] = h;
  }
  return hs;
}

/// Bidirectional layer: per position, [forward state | backward state].
template <class T>
std::vector<ad::Var<T>> bigru_layer(ad::Tape<T>& tape, const typename GruDirection<T>::Bound& fwd,
                                    const typename GruDirection<T>::Bound& bwd,
                                    const std::vector<ad::Var<T>>& xs) {
  auto f = gru_scan(tape, fwd, xs, false);
  auto b = gru_scan(tape, bwd, xs, true);
  std::vector<ad::Var<T>> out(xs.size());
  for (std::size_t l = 0; l < xs.size(); ++l) out[l] = ad::concat_cols<T>({f[l], b[l]});
  return out;
}

/// LayerNorm(h) * (1 + gamma) + omega
template <class T>
ad::Var<T> film(ad::Var<T> h, ad::Var<T> gamma, ad::Var<T> omega) {
  return ad::add(ad::mul(ad::layer_norm_rows(h), ad::add_scalar(gamma, T(1))), omega);
}

/// Sinusoidal features of the diffusion time, [B, dim]: sin(1000 t w_i) | cos(1000 t w_i)
/// with w_i = 10000^(-i/(dim/2)).
template <class T>
Tensor<T> time_features(std::span<const double> t, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor<T> out({t.size(), dim});
  for (std::size_t b = 0; b < t.size(); ++b)
    for (std::size_t i = 0; i < half; ++i) {
      const double w = std::exp(-std::log(10000.0) * double(i) / double(half));
      const double a = 1000.0 * t[b] * w;
      out(b, i) = T(std::sin(a));
      out(b, half + i) = T(std::cos(a));
    }
  return out;
}

template <class T>
struct DenoiserOutput {
  std::vector<ad::Var<T>> numerical;  ///< per position [B, M_num] raw network output F
  std::vector<ad::Var<T>> logits;     ///< per position [B, sum C_j]
};

template <class T>
struct Denoiser {
  ModelSpec spec;
  Linear<T> label_embed;  ///< one-hot -> label_dim (weights start at zero)
  Linear<T> input_proj;   ///< input_width -> H
  Linear<T> time1, time2;
  std::vector<GruDirection<T>> forward_dirs, backward_dirs;
  std::vector<Linear<T>> film_scale, film_shift;  ///< time_dim -> 2H, zero-initialized
  Linear<T> head;         ///< 2H -> output_width

  static Denoiser make(const ModelSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    Denoiser d;
    d.spec = spec;
    const std::size_t h = spec.hidden;
    d.label_embed = Linear<T>::make("label_embed", spec.label_card, spec.label_dim, rng, true);
    d.input_proj = Linear<T>::make("input_proj", spec.input_width(), h, rng);
    d.time1 = Linear<T>::make("time_mlp.0", spec.time_dim, spec.time_dim, rng);
    d.time2 = Linear<T>::make("time_mlp.1", spec.time_dim, spec.time_dim, rng);
    for (std::size_t k = 0; k < spec.layers; ++k) {
      const std::size_t in = k == 0 ? h : 2 * h;
      const std::string p = "gru." + std::to_string(k);
      d.forward_dirs.push_back(GruDirection<T>::make(p + ".fwd", in, h, rng));
      d.backward_dirs.push_back(GruDirection<T>::make(p + ".bwd", in, h, rng));
      d.film_scale.push_back(Linear<T>::make("film." + std::to_string(k) + ".scale", spec.time_dim, 2 * h, rng, true));
      d.film_shift.push_back(Linear<T>::make("film." + std::to_string(k) + ".shift", spec.time_dim, 2 * h, rng, true));
    }
    d.head = Linear<T>::make("head", 2 * h, spec.output_width(), rng);
    return d;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    label_embed.collect(out);
    input_proj.collect(out);
    time1.collect(out);
    time2.collect(out);
    for (std::size_t k = 0; k < forward_dirs.size(); ++k) {
      forward_dirs[k].collect(out);
      backward_dirs[k].collect(out);
      film_scale[k].collect(out);
      film_shift[k].collect(out);
    }
    head.collect(out);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

  struct Bound {
    typename Linear<T>::Bound label_embed, input_proj, time1, time2, head;
    std::vector<typename GruDirection<T>::Bound> fwd, bwd;
    std::vector<typename Linear<T>::Bound> scale, shift;
  };

  Bound bind(ad::Tape<T>& tape) {
    Bound b{label_embed.bind(tape), input_proj.bind(tape), time1.bind(tape), time2.bind(tape), head.bind(tape), {}, {}, {}, {}};
    for (std::size_t k = 0; k < forward_dirs.size(); ++k) {
      b.fwd.push_back(forward_dirs[k].bind(tape));
      b.bwd.push_back(backward_dirs[k].bind(tape));
      b.scale.push_back(film_scale[k].bind(tape));
      b.shift.push_back(film_shift[k].bind(tape));
    }
    return b;
  }

  ad::Var<T> time_embedding(ad::Tape<T>& tape, const Bound& b, std::span<const double> t) const {
    for (double v : t)
      if (!(v >= 0.0 && v <= 1.0)) throw ArgumentError("denoiser: t must lie in [0,1]");
    auto feats = tape.constant(time_features<T>(t, spec.time_dim));
    return b.time2(ad::silu(b.time1(feats)));
  }

  /// Input projection, stacked BiGRU layers with FiLM after each; per position [B, 2H].
  std::vector<ad::Var<T>> backbone(ad::Tape<T>& tape, const Bound& b, const std::vector<ad::Var<T>>& inputs,
                                   ad::Var<T> temb) const {
    for (const auto& x : inputs)
      if (x.cols() != spec.input_width())
        throw ArgumentError("denoiser: per-timestep input width " + std::to_string(x.cols()) +
                            " != expected " + std::to_string(spec.input_width()));
    std::vector<ad::Var<T>> seq(inputs.size());
    for (std::size_t l = 0; l < inputs.size(); ++l) seq[l] = b.input_proj(inputs[l]);
    for (std::size_t k = 0; k < b.fwd.size(); ++k) {
      auto out = bigru_layer(tape, b.fwd[k], b.bwd[k], seq);
      auto gamma = b.scale[k](temb);
      auto omega = b.shift[k](temb);
      for (std::size_t l = 0; l < out.size(); ++l) out[l] = film(out[l], gamma, omega);
      seq = std::move(out);
    }
    return seq;
  }

  /// x_scaled: per position [B, state_width] (already multiplied by c_in);
  /// label: [B, label_card] one-hot rows or zero rows for "no label".
  DenoiserOutput<T> forward(ad::Tape<T>& tape, const std::vector<ad::Var<T>>& x_scaled,
                            std::span<const double> t, const Tensor<T>& label) {
    if (x_scaled.size() != spec.seq_len)
      throw ArgumentError("denoiser: expected " + std::to_string(spec.seq_len) + " positions, got " +
                          std::to_string(x_scaled.size()));
    const std::size_t nb = t.size();
    if (label.shape() != Shape{nb, spec.label_card}) throw ArgumentError("denoiser: label block has wrong shape");
    Bound b = bind(tape);
    auto temb = time_embedding(tape, b, t);
    auto lab = b.label_embed(tape.constant(label));
    std::vector<ad::Var<T>> inputs(x_scaled.size());
    for (std::size_t l = 0; l < x_scaled.size(); ++l) {
      if (x_scaled[l].rows() != nb || x_scaled[l].cols() != spec.state_width())
        throw ArgumentError("denoiser: state block has shape " + shape_str(x_scaled[l].shape()));
      inputs[l] = ad::concat_cols<T>({x_scaled[l], lab});
    }
    auto feats = backbone(tape, b, inputs, temb);
    DenoiserOutput<T> out;
    for (auto& f : feats) {
      auto y = b.head(f);
      if (spec.num_numerical) out.numerical.push_back(ad::slice_cols(y, 0, spec.num_numerical));
      if (!spec.cat_cards.empty()) out.logits.push_back(ad::slice_cols(y, spec.num_numerical, spec.logit_width()));
    }
    return out;
  }

  template <class U>
  Denoiser<U> cast() const {
    Denoiser<U> o;
    o.spec = spec;
    auto lin = [](const Linear<T>& l) {
      Linear<U> r;
      r.weight = Parameter<U>(l.weight.name, l.weight.value.template cast<U>());
      r.bias = Parameter<U>(l.bias.name, l.bias.value.template cast<U>());
      return r;
    };
    auto dir = [&](const GruDirection<T>& g) {
      GruDirection<U> r;
      r.input = lin(g.input);
      r.recurrent = Parameter<U>(g.recurrent.name, g.recurrent.value.template cast<U>());
      return r;
    };
    o.label_embed = lin(label_embed);
    o.input_proj = lin(input_proj);
    o.time1 = lin(time1);
    o.time2 = lin(time2);
    for (std::size_t k = 0; k < forward_dirs.size(); ++k) {
      o.forward_dirs.push_back(dir(forward_dirs[k]));
      o.backward_dirs.push_back(dir(backward_dirs[k]));
      o.film_scale.push_back(lin(film_scale[k]));
      o.film_shift.push_back(lin(film_shift[k]));
    }
    o.head = lin(head);
    return o;
  }
};

/// One-hot rows for labels; rows with keep[b] == 0 are all zero.
template <class T>
Tensor<T> label_block(std::span<const std::uint8_t> labels, std::size_t card, std::span<const std::uint8_t> keep = {}) {
  Tensor<T> out({labels.size(), card});
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] >= card) throw ArgumentError("label " + std::to_string(labels[b]) + " out of range");
    if (keep.empty() || keep[b]) out(b, labels[b]) = T(1);
  }
  return out;
}

}  // namespace mixdiff
