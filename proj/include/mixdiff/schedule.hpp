#pragma once

// Factorized power-mean noise schedules.
//
// Each feature type (numerical values, categorical embeddings) owns one
// ScheduleParams. The shape exponent for feature f at sequence position l is
//   rho(f,l) = softclamp(rho_global + rho_feature[f] + rho_time[l])
// and the noise level at diffusion time t is
//   sigma(t) = (smin^(1/rho) + t * (smax^(1/rho) - smin^(1/rho)))^rho.

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mixdiff/autodiff.hpp"
#include "mixdiff/error.hpp"
#include "mixdiff/tensor.hpp"

namespace mixdiff {

/// Smooth clamp onto [lower, upper]:
///   f(x) = lower + softplus_k(x - lower) - softplus_k(x - upper)
/// Identity (to double precision) well inside the range, saturating at the
/// bounds, with derivative sigmoid(k(x-lower)) - sigmoid(k(x-upper)) > 0.
struct SoftClamp {
  double lower = 0.1;
  double upper = 15.0;
  double sharpness = 50.0;

  static double softplus(double x, double k) {
    const double kx = k * x;
    if (kx > 30.0) return x + std::log1p(std::exp(-kx)) / k;
    return std::log1p(std::exp(kx)) / k;
  }

  double operator()(double x) const {
    return lower + softplus(x - lower, sharpness) - softplus(x - upper, sharpness);
  }

  double derivative(double x) const {
    // mirrored form above the midpoint avoids 1 - 1 cancellation
    if (x > 0.5 * (lower + upper))
      return ad::sigmoid_scalar(-sharpness * (x - upper)) - ad::sigmoid_scalar(-sharpness * (x - lower));
    return ad::sigmoid_scalar(sharpness * (x - lower)) - ad::sigmoid_scalar(sharpness * (x - upper));
  }
};

/// sigma(t) for a fixed rho.
inline double power_mean_sigma(double t, double rho, double sigma_min, double sigma_max) {
  const double a = std::pow(sigma_min, 1.0 / rho);
  const double b = std::pow(sigma_max, 1.0 / rho);
  return std::pow(a + t * (b - a), rho);
}

/// d sigma / d rho at fixed t.
inline double power_mean_dsigma_drho(double t, double rho, double sigma_min, double sigma_max) {
  const double la = std::log(sigma_min), lb = std::log(sigma_max);
  const double a = std::exp(la / rho), b = std::exp(lb / rho);
  const double base = a + t * (b - a);
  const double sigma = std::pow(base, rho);
  const double dbase = -((1.0 - t) * a * la + t * b * lb) / (rho * rho);
  return sigma * (std::log(base) + rho * dbase / base);
}

template <class T>
struct ScheduleParams {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  SoftClamp clamp;
  Parameter<T> rho_global;
  Parameter<T> rho_feature;
  Parameter<T> rho_time;

  /// rho_feature and rho_time start at zero.
  static ScheduleParams make(std::string prefix, std::size_t features, std::size_t seq_len,
                             double sigma_max, double rho_init, double sigma_min = 0.002) {
    if (!(sigma_min > 0) || !(sigma_min < sigma_max))
      throw ArgumentError("schedule: require 0 < sigma_min < sigma_max");
    if (seq_len == 0) throw ArgumentError("schedule: sequence length must be positive");
    ScheduleParams p;
    p.sigma_min = sigma_min;
    p.sigma_max = sigma_max;
    p.rho_global = Parameter<T>(prefix + ".rho_global", Tensor<T>({1}, T(rho_init)));
    p.rho_feature = Parameter<T>(prefix + ".rho_feature", Tensor<T>({features}));
    p.rho_time = Parameter<T>(prefix + ".rho_time", Tensor<T>({seq_len}));
    return p;
  }

  std::size_t num_features() const { return rho_feature.value.size(); }
  std::size_t seq_len() const { return rho_time.value.size(); }
  std::size_t parameter_count() const { return 1 + num_features() + seq_len(); }

  std::vector<Parameter<T>*> parameters() { return {&rho_global, &rho_feature, &rho_time}; }
  std::vector<const Parameter<T>*> parameters() const {
    return {&rho_global, &rho_feature, &rho_time};
  }

  void set_trainable(bool on) {
    for (auto* p : parameters()) p->trainable = on;
  }

  double raw_rho(std::size_t f, std::size_t l) const {
    check_index(f, l);
    return double(rho_global.value[0]) + double(rho_feature.value[f]) + double(rho_time.value[l]);
  }

  double effective_rho(std::size_t f, std::size_t l) const { return clamp(raw_rho(f, l)); }

  double sigma(double t, std::size_t f, std::size_t l) const {
    if (!(t >= 0.0 && t <= 1.0)) throw ArgumentError("schedule: t must lie in [0,1]");
    return power_mean_sigma(t, effective_rho(f, l), sigma_min, sigma_max);
  }

  /// d sigma / d(any rho component): all three share the same partial
  /// because rho enters additively.
  double dsigma_drho_component(double t, std::size_t f, std::size_t l) const {
    const double raw = raw_rho(f, l);
    return power_mean_dsigma_drho(t, clamp(raw), sigma_min, sigma_max) * clamp.derivative(raw);
  }

  /// Noise levels on t_i = 1 - i/S, i = 0..S, laid out [S+1, L, F].
  Tensor<double> sigma_grid(std::size_t steps) const {
    if (steps == 0) throw ArgumentError("schedule: step count must be positive");
    const std::size_t nf = num_features(), nl = seq_len();
    Tensor<double> g({steps + 1, nl, nf});
    for (std::size_t i = 0; i <= steps; ++i) {
      const double t = 1.0 - double(i) / double(steps);
      for (std::size_t l = 0; l < nl; ++l)
        for (std::size_t f = 0; f < nf; ++f)
          g[(i * nl + l) * nf + f] = power_mean_sigma(t, effective_rho(f, l), sigma_min, sigma_max);
    }
    return g;
  }

  template <class U>
  ScheduleParams<U> cast() const {
    ScheduleParams<U> o;
    o.sigma_min = sigma_min;
    o.sigma_max = sigma_max;
    o.clamp = clamp;
    o.rho_global = Parameter<U>(rho_global.name, rho_global.value.template cast<U>());
    o.rho_feature = Parameter<U>(rho_feature.name, rho_feature.value.template cast<U>());
    o.rho_time = Parameter<U>(rho_time.name, rho_time.value.template cast<U>());
    o.rho_global.trainable = rho_global.trainable;
    o.rho_feature.trainable = rho_feature.trainable;
    o.rho_time.trainable = rho_time.trainable;
    return o;
  }

 private:
  void check_index(std::size_t f, std::size_t l) const {
    if (f >= num_features())
      throw ArgumentError("schedule: feature index " + std::to_string(f) + " out of range");
    if (l >= seq_len())
      throw ArgumentError("schedule: time index " + std::to_string(l) + " out of range");
  }
};

/// Tape handles for one schedule's learnable components.
template <class T>
struct ScheduleVars {
  const ScheduleParams<T>* params = nullptr;
  ad::Var<T> global, feature, time;

  static ScheduleVars bind(ad::Tape<T>& tape, ScheduleParams<T>& p) {
    return {&p, tape.param(p.rho_global), tape.param(p.rho_feature), tape.param(p.rho_time)};
  }
};

/// Noise levels at sequence position l for a batch of diffusion times:
/// output [B, F * repeat], where column f*repeat + r carries sigma(t_b; rho(f,l)).
/// Gradients flow to the three rho components.
template <class T>
ad::Var<T> sigma_at(const ScheduleVars<T>& sv, std::span<const double> t, std::size_t l,
                    std::size_t repeat = 1) {
  const ScheduleParams<T>& p = *sv.params;
  const std::size_t nb = t.size(), nf = p.num_features();
  const std::size_t w = nf * repeat;
  auto dsig = std::make_shared<std::vector<double>>(nb * nf);
  Tensor<T> out({nb, w});
  for (std::size_t f = 0; f < nf; ++f) {
    const double raw = p.raw_rho(f, l);
    const double rho = p.clamp(raw);
    const double dclamp = p.clamp.derivative(raw);
    for (std::size_t b = 0; b < nb; ++b) {
      if (!(t[b] >= 0.0 && t[b] <= 1.0)) throw ArgumentError("schedule: t must lie in [0,1]");
      const double s = power_mean_sigma(t[b], rho, p.sigma_min, p.sigma_max);
      (*dsig)[b * nf + f] = power_mean_dsigma_drho(t[b], rho, p.sigma_min, p.sigma_max) * dclamp;
      for (std::size_t r = 0; r < repeat; ++r) out[b * w + f * repeat + r] = T(s);
    }
  }
  ad::Tape<T>& tp = *sv.global.tape;
  const bool rg = sv.global.requires_grad() || sv.feature.requires_grad() || sv.time.requires_grad();
  const std::size_t o = tp.next_id();
  const auto gid = sv.global.id, fid = sv.feature.id, tid = sv.time.id;
  return tp.push(std::move(out), rg, [=](ad::Tape<T>& tape) {
    const Tensor<T>& g = tape.grad(o);
    std::vector<double> per_feature(nf, 0.0);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t f = 0; f < nf; ++f) {
        double acc = 0;
        for (std::size_t r = 0; r < repeat; ++r) acc += double(g[b * w + f * repeat + r]);
        per_feature[f] += acc * (*dsig)[b * nf + f];
      }
    double total = 0;
    for (double v : per_feature) total += v;
    if (tape.requires_grad(gid)) tape.grad(gid)[0] += T(total);
    if (tape.requires_grad(fid)) {
      Tensor<T>& gf = tape.grad(fid);
      for (std::size_t f = 0; f < nf; ++f) gf[f] += T(per_feature[f]);
    }
    if (tape.requires_grad(tid)) tape.grad(tid)[l] += T(total);
  });
}

}  // namespace mixdiff
