#pragma once

// The full learnable state (network, embeddings, both schedules) plus EDM
// preconditioning around the raw network.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "mixdiff/autodiff.hpp"
#include "mixdiff/denoiser.hpp"
#include "mixdiff/embedspace.hpp"
#include "mixdiff/schedule.hpp"

namespace mixdiff {

/// EDM scalings for data with standard deviation sigma_data.
struct Edm {
  double sigma_data = 0.5;

  double c_in(double s) const { return 1.0 / std::sqrt(s * s + sigma_data * sigma_data); }
  double c_skip(double s) const { return sigma_data * sigma_data / (s * s + sigma_data * sigma_data); }
  double c_out(double s) const { return s * sigma_data / std::sqrt(s * s + sigma_data * sigma_data); }
  /// (s^2 + sd^2) / (s sd)^2
  double loss_weight(double s) const {
    return (s * s + sigma_data * sigma_data) / ((s * sigma_data) * (s * sigma_data));
  }

  template <class T>
  ad::Var<T> c_in(ad::Var<T> s) const {
    const T sd2 = T(sigma_data * sigma_data);
    return ad::unary(
        s, [sd2](T x) { return T(1) / std::sqrt(x * x + sd2); },
        [sd2](T x, T y) { return -x * y * y * y; });
  }
  template <class T>
  ad::Var<T> c_skip(ad::Var<T> s) const {
    const T sd2 = T(sigma_data * sigma_data);
    return ad::unary(
        s, [sd2](T x) { return sd2 / (x * x + sd2); },
        [sd2](T x, T) {
          const T d = x * x + sd2;
          return -T(2) * sd2 * x / (d * d);
        });
  }
  template <class T>
  ad::Var<T> c_out(ad::Var<T> s) const {
    const T sd = T(sigma_data), sd2 = T(sigma_data * sigma_data);
    return ad::unary(
        s, [sd, sd2](T x) { return x * sd / std::sqrt(x * x + sd2); },
        [sd, sd2](T x, T) {
          const T d = x * x + sd2;
          return sd * sd2 / (d * std::sqrt(d));
        });
  }
  template <class T>
  ad::Var<T> loss_weight(ad::Var<T> s) const {
    const T sd2 = T(sigma_data * sigma_data);
    // (x^2 + sd2) / (x^2 sd2) = 1/sd2 + 1/x^2
    return ad::unary(
        s, [sd2](T x) { return T(1) / sd2 + T(1) / (x * x); }, [](T x, T) { return -T(2) / (x * x * x); });
  }
};

/// c_in(sigma) * x elementwise.
inline std::vector<double> precondition_in(std::span<const double> x, std::span<const double> sigma,
                                           double sigma_data = 0.5) {
  if (x.size() != sigma.size()) throw ArgumentError("precondition_in: shape mismatch");
  Edm edm{sigma_data};
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(sigma[i] > 0)) throw ArgumentError("precondition_in: sigma must be positive");
    out[i] = edm.c_in(sigma[i]) * x[i];
  }
  return out;
}

template <class T>
struct Model {
  ModelSpec spec;
  Denoiser<T> net;
  EmbeddingTable<T> embeddings;
  ScheduleParams<T> sched_num;
  ScheduleParams<T> sched_emb;

  static Model init(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    Model m;
    m.spec = spec;
    m.net = Denoiser<T>::make(spec, rng);
    m.embeddings = EmbeddingTable<T>::init(spec.cat_cards, spec.embed_dim, rng);
    m.sched_num = ScheduleParams<T>::make("schedule_num", spec.num_numerical, spec.seq_len, spec.sigma_max_num,
                                          spec.rho_init_num, spec.sigma_min);
    m.sched_emb = ScheduleParams<T>::make("schedule_emb", spec.num_categorical(), spec.seq_len,
                                          spec.sigma_max_emb, spec.rho_init_emb, spec.sigma_min);
    m.sched_num.clamp.lower = m.sched_emb.clamp.lower = spec.rho_lower;
    m.sched_num.clamp.upper = m.sched_emb.clamp.upper = spec.rho_upper;
    return m;
  }

  /// Stable order: network, embeddings, numerical schedule, embedding schedule.
  std::vector<Parameter<T>*> parameters() {
    auto out = net.parameters();
    for (auto* p : embeddings.parameters()) out.push_back(p);
    for (auto* p : sched_num.parameters()) out.push_back(p);
    for (auto* p : sched_emb.parameters()) out.push_back(p);
    return out;
  }

  std::vector<const Parameter<T>*> parameters() const {
    auto* self = const_cast<Model*>(this);
    std::vector<const Parameter<T>*> out;
    for (auto* p : self->parameters()) out.push_back(p);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->value.size();
    return n;
  }

  void set_schedule_trainable(bool on) {
    sched_num.set_trainable(on);
    sched_emb.set_trainable(on);
  }

  template <class U>
  Model<U> cast() const {
    Model<U> o;
    o.spec = spec;
    o.net = net.template cast<U>();
    o.embeddings = embeddings.template cast<U>();
    o.sched_num = sched_num.template cast<U>();
    o.sched_emb = sched_emb.template cast<U>();
    return o;
  }
};

template <class T>
struct DenoisePass {
  std::vector<ad::Var<T>> x0_num;  ///< per position [B, M_num]
  std::vector<ad::Var<T>> logits;  ///< per position [B, sum C_j]
};

/// Preconditioned denoiser:
///   x0_num = c_skip(s) x_t + c_out(s) F(c_in(s) x_t, ...), logits unscaled.
/// Noise levels are per element and may be tape variables (training) or
/// constants (sampling).
template <class T>
DenoisePass<T> denoise(ad::Tape<T>& tape, Model<T>& m, const std::vector<ad::Var<T>>& xt_num,
                       const std::vector<ad::Var<T>>& sig_num, const std::vector<ad::Var<T>>& xt_emb,
                       const std::vector<ad::Var<T>>& sig_emb, std::span<const double> t, const Tensor<T>& label) {
  const ModelSpec& spec = m.spec;
  const std::size_t len = spec.seq_len;
  const bool has_num = spec.num_numerical > 0, has_cat = spec.num_categorical() > 0;
  if ((has_num && (xt_num.size() != len || sig_num.size() != len)) ||
      (has_cat && (xt_emb.size() != len || sig_emb.size() != len)))
    throw ArgumentError("denoise: expected one block per sequence position");
  Edm edm{spec.sigma_data};
  std::vector<ad::Var<T>> scaled(len);
  for (std::size_t l = 0; l < len; ++l) {
    std::vector<ad::Var<T>> parts;
    if (has_num) {
      if (xt_num[l].shape() != sig_num[l].shape()) throw ArgumentError("denoise: sigma/state shape mismatch");
      parts.push_back(ad::mul(edm.c_in(sig_num[l]), xt_num[l]));
    }
    if (has_cat) {
      if (xt_emb[l].shape() != sig_emb[l].shape()) throw ArgumentError("denoise: sigma/state shape mismatch");
      parts.push_back(ad::mul(edm.c_in(sig_emb[l]), xt_emb[l]));
    }
    scaled[l] = parts.size() == 1 ? parts[0] : ad::concat_cols(parts);
  }
  auto raw = m.net.forward(tape, scaled, t, label);
  DenoisePass<T> out;
  out.logits = std::move(raw.logits);
  if (has_num) {
    for (std::size_t l = 0; l < len; ++l)
      out.x0_num.push_back(ad::add(ad::mul(edm.c_skip(sig_num[l]), xt_num[l]),
                                   ad::mul(edm.c_out(sig_num[l]), raw.numerical[l])));
  }
  return out;
}

}  // namespace mixdiff
