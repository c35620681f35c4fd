#pragma once

// Fidelity metrics between a real and a synthetic SequenceBatch.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mixdiff/dataio.hpp"
#include "mixdiff/error.hpp"
#include "mixdiff/random.hpp"

namespace mixdiff {

namespace detail {

inline void require_same_layout(const SequenceBatch& a, const SequenceBatch& b, const char* what) {
  if (a.seq_len != b.seq_len || a.num_numerical != b.num_numerical || a.num_categorical != b.num_categorical)
    throw ArgumentError(std::string(what) + ": real and synthetic data have different layouts");
}

/// Seeded subsample of at most `cap` indices out of n (identity when n <= cap).
inline std::vector<std::size_t> capped_indices(std::size_t n, std::size_t cap, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (cap == 0 || n <= cap) return idx;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t m = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(m), v.end());
  double hi = v[m];
  if (v.size() % 2) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + std::ptrdiff_t(m));
  return 0.5 * (lo + hi);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MMD

/// Biased (V-statistic) MMD^2 with k(x,y) = exp(-|x-y|^2 / (2 h^2)); rows of
/// x and y are points of dimension dim.
inline double mmd2_rbf(std::span<const double> x, std::span<const double> y, std::size_t dim, double h) {
  if (dim == 0 || x.size() % dim || y.size() % dim) throw ArgumentError("mmd: ragged input");
  if (!(h > 0)) throw ArgumentError("mmd: bandwidth must be positive");
  const std::size_t n = x.size() / dim, m = y.size() / dim;
  if (n == 0 || m == 0) throw ArgumentError("mmd: empty sample");
  const double g = 1.0 / (2 * h * h);
  auto kmean = [&](std::span<const double> a, std::size_t na, std::span<const double> b, std::size_t nb) {
    double s = 0;
    for (std::size_t i = 0; i < na; ++i)
      for (std::size_t j = 0; j < nb; ++j) {
        double d2 = 0;
        for (std::size_t c = 0; c < dim; ++c) {
          const double u = a[i * dim + c] - b[j * dim + c];
          d2 += u * u;
        }
        s += std::exp(-g * d2);
      }
    return s / (double(na) * double(nb));
  };
  return std::max(0.0, kmean(x, n, x, n) + kmean(y, m, y, m) - 2 * kmean(x, n, y, m));
}

/// Median pairwise Euclidean distance over the pooled sample (1 if all coincide).
inline double median_bandwidth(std::span<const double> x, std::span<const double> y, std::size_t dim) {
  std::vector<double> pooled(x.begin(), x.end());
  pooled.insert(pooled.end(), y.begin(), y.end());
  const std::size_t n = pooled.size() / dim;
  std::vector<double> dist;
  dist.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double d2 = 0;
      for (std::size_t c = 0; c < dim; ++c) {
        const double u = pooled[i * dim + c] - pooled[j * dim + c];
        d2 += u * u;
      }
      dist.push_back(std::sqrt(d2));
    }
  const double h = detail::median(std::move(dist));
  return h > 0 ? h : 1.0;
}

struct MmdResult {
  double value = 0;                 ///< sqrt of the feature-averaged MMD^2
  std::vector<double> bandwidths;   ///< per numerical feature
  std::size_t n_real = 0, n_synth = 0;
};

/// Each numerical feature's length-L trajectory is one point; at most
/// max_samples points per side (seeded subsample, same seed on both sides).
inline MmdResult mmd(const SequenceBatch& real, const SequenceBatch& synth, std::size_t max_samples = 1000,
                     std::uint64_t seed = 0) {
  detail::require_same_layout(real, synth, "mmd");
  if (real.n < 2 || synth.n < 2) throw ArgumentError("mmd: need at least 2 samples per side");
  if (real.num_numerical == 0) throw ArgumentError("mmd: no numerical features");
  const auto ir = detail::capped_indices(real.n, max_samples, seed);
  const auto is = detail::capped_indices(synth.n, max_samples, seed);
  const std::size_t len = real.seq_len;
  MmdResult r;
  r.n_real = ir.size();
  r.n_synth = is.size();
  double acc = 0;
  for (std::size_t f = 0; f < real.num_numerical; ++f) {
    auto gather = [&](const SequenceBatch& b, const std::vector<std::size_t>& idx) {
      std::vector<double> v;
      v.reserve(idx.size() * len);
      for (auto i : idx)
        for (std::size_t l = 0; l < len; ++l) v.push_back(b.num(i, l, f));
      return v;
    };
    const auto x = gather(real, ir), y = gather(synth, is);
    const double h = median_bandwidth(x, y, len);
    r.bandwidths.push_back(h);
    acc += mmd2_rbf(x, y, len, h);
  }
  r.value = std::sqrt(acc / double(real.num_numerical));
  return r;
}

// ---------------------------------------------------------------------------
// Correlation structure

/// Pearson correlation matrix [F,F] pooled over samples and timesteps;
/// NaN entries mark pairs with a zero-variance feature.
inline std::vector<double> correlation_matrix(const SequenceBatch& b) {
  const std::size_t nf = b.num_numerical, rows = b.n * b.seq_len;
  std::vector<double> mean(nf, 0.0), cov(nf * nf, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t f = 0; f < nf; ++f) mean[f] += b.numerical[r * nf + f];
  for (auto& m : mean) m /= double(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t f = 0; f < nf; ++f) {
      const double u = b.numerical[r * nf + f] - mean[f];
      for (std::size_t g = f; g < nf; ++g) cov[f * nf + g] += u * (b.numerical[r * nf + g] - mean[g]);
    }
  std::vector<double> corr(nf * nf);
  for (std::size_t f = 0; f < nf; ++f)
    for (std::size_t g = f; g < nf; ++g) {
      const double den = std::sqrt(cov[f * nf + f] * cov[g * nf + g]);
      const double c = den > 0 ? cov[f * nf + g] / den : std::nan("");
      corr[f * nf + g] = corr[g * nf + f] = c;
    }
  return corr;
}

struct CorrResult {
  double value = 0;
  std::vector<std::pair<std::size_t, std::size_t>> skipped;  ///< pairs with a zero-variance feature
};

inline CorrResult corr_mae(const SequenceBatch& real, const SequenceBatch& synth) {
  detail::require_same_layout(real, synth, "corr_mae");
  const std::size_t nf = real.num_numerical;
  if (nf < 2) throw ArgumentError("corr_mae: need at least 2 numerical features");
  if (real.n == 0 || synth.n == 0) throw ArgumentError("corr_mae: empty sample");
  const auto cr = correlation_matrix(real), cs = correlation_matrix(synth);
  CorrResult r;
  double s = 0;
  std::size_t cnt = 0;
  for (std::size_t f = 0; f < nf; ++f)
    for (std::size_t g = f + 1; g < nf; ++g) {
      const double a = cr[f * nf + g], b = cs[f * nf + g];
      if (std::isnan(a) || std::isnan(b)) {
        r.skipped.emplace_back(f, g);
        continue;
      }
      s += std::abs(a - b);
      ++cnt;
    }
  r.value = cnt ? s / double(cnt) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Autocorrelation

/// Sample autocorrelation of one sequence at lags 1..k; empty if constant.
inline std::vector<double> acf(std::span<const double> x, std::size_t k) {
  const std::size_t n = x.size();
  if (k >= n) throw ArgumentError("acf: lag must be below the sequence length");
  const double m = std::accumulate(x.begin(), x.end(), 0.0) / double(n);
  double den = 0;
  for (double v : x) den += (v - m) * (v - m);
  if (!(den > 1e-24)) return {};
  std::vector<double> out(k);
  for (std::size_t lag = 1; lag <= k; ++lag) {
    double s = 0;
    for (std::size_t t = 0; t + lag < n; ++t) s += (x[t] - m) * (x[t + lag] - m);
    out[lag - 1] = s / den;
  }
  return out;
}

struct MeanAcf {
  std::vector<double> curve;  ///< lags 1..K
  std::size_t constant_sequences = 0;
};

/// Mean over samples of the per-sample ACF of feature f; constant
/// sequences are left out and counted.
inline MeanAcf mean_acf(const SequenceBatch& b, std::size_t f, std::size_t k) {
  MeanAcf r;
  r.curve.assign(k, 0.0);
  std::vector<double> x(b.seq_len);
  std::size_t used = 0;
  for (std::size_t i = 0; i < b.n; ++i) {
    for (std::size_t l = 0; l < b.seq_len; ++l) x[l] = b.num(i, l, f);
    const auto a = acf(x, k);
    if (a.empty()) {
      ++r.constant_sequences;
      continue;
    }
    for (std::size_t j = 0; j < k; ++j) r.curve[j] += a[j];
    ++used;
  }
  if (used)
    for (auto& v : r.curve) v /= double(used);
  return r;
}

struct AcfResult {
  double value = 0;
  std::size_t max_lag = 0;
  std::size_t constant_real = 0, constant_synth = 0;
};

/// K = 0 selects min(10, L-1).
inline AcfResult acf_mse(const SequenceBatch& real, const SequenceBatch& synth, std::size_t max_lag = 0) {
  detail::require_same_layout(real, synth, "acf_mse");
  if (real.seq_len < 2) throw ArgumentError("acf_mse: sequence length must exceed 1");
  if (real.num_numerical == 0) throw ArgumentError("acf_mse: no numerical features");
  AcfResult r;
  r.max_lag = max_lag ? std::min(max_lag, real.seq_len - 1) : std::min<std::size_t>(10, real.seq_len - 1);
  double s = 0;
  for (std::size_t f = 0; f < real.num_numerical; ++f) {
    const auto a = mean_acf(real, f, r.max_lag), b = mean_acf(synth, f, r.max_lag);
    r.constant_real += a.constant_sequences;
    r.constant_synth += b.constant_sequences;
    double e = 0;
    for (std::size_t j = 0; j < r.max_lag; ++j) e += (a.curve[j] - b.curve[j]) * (a.curve[j] - b.curve[j]);
    s += e / double(r.max_lag);
  }
  r.value = s / double(real.num_numerical);
  return r;
}

// ---------------------------------------------------------------------------
// DTW

/// Classic DTW, local cost |a_i - b_j|, steps (1,0), (0,1), (1,1).
inline double dtw(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ArgumentError("dtw: empty sequence");
  const std::size_t n = a.size(), m = b.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
  prev[0] = 0;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = inf;
    for (std::size_t j = 1; j <= m; ++j)
      cur[j] = std::abs(a[i - 1] - b[j - 1]) + std::min({prev[j], cur[j - 1], prev[j - 1]});
    std::swap(prev, cur);
  }
  return prev[m];
}

struct DtwResult {
  double value = 0;
  std::size_t pairs = 0;
};

/// Averages DTW over features and `pairs` seeded random pairings. Pair k
/// uses one random index i into both sides (synthetic samples are i.i.d., so
/// this is a random pairing), which makes self-comparison exactly 0.
inline DtwResult dtw_metric(const SequenceBatch& real, const SequenceBatch& synth, std::size_t pairs = 200,
                            std::uint64_t seed = 0) {
  detail::require_same_layout(real, synth, "dtw");
  if (real.num_numerical == 0) throw ArgumentError("dtw: no numerical features");
  const std::size_t n = std::min(real.n, synth.n);
  if (n == 0 || pairs == 0) throw ArgumentError("dtw: need at least one pair");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<double> a(real.seq_len), b(real.seq_len);
  double s = 0;
  for (std::size_t k = 0; k < pairs; ++k) {
    const std::size_t i = pick(rng);
    for (std::size_t f = 0; f < real.num_numerical; ++f) {
      for (std::size_t l = 0; l < real.seq_len; ++l) {
        a[l] = real.num(i, l, f);
        b[l] = synth.num(i, l, f);
      }
      s += dtw(a, b);
    }
  }
  return {s / double(pairs * real.num_numerical), pairs};
}

// ---------------------------------------------------------------------------
// Categorical fidelity

/// 0.5 * sum_k |p_k - q_k|
inline double tvd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ArgumentError("tvd: distributions have different supports");
  double s = 0;
  for (std::size_t k = 0; k < p.size(); ++k) s += std::abs(p[k] - q[k]);
  // normalized inputs can sum to 1 +- ulp; disjoint supports would then land just past 1
  return std::clamp(0.5 * s, 0.0, 1.0);
}

/// Marginal TVD per categorical feature and timestep, averaged.
inline double tvd(const SequenceBatch& real, const SequenceBatch& synth, std::span<const std::size_t> cards) {
  detail::require_same_layout(real, synth, "tvd");
  if (cards.size() != real.num_categorical) throw ArgumentError("tvd: cardinality list does not match data");
  if (cards.empty()) throw ArgumentError("tvd: no categorical features");
  if (real.n == 0 || synth.n == 0) throw ArgumentError("tvd: empty sample");
  double s = 0;
  for (std::size_t j = 0; j < cards.size(); ++j)
    for (std::size_t l = 0; l < real.seq_len; ++l) {
      std::vector<double> p(cards[j], 0.0), q(cards[j], 0.0);
      for (std::size_t i = 0; i < real.n; ++i) p.at(real.cat(i, l, j)) += 1.0 / double(real.n);
      for (std::size_t i = 0; i < synth.n; ++i) q.at(synth.cat(i, l, j)) += 1.0 / double(synth.n);
      s += tvd(p, q);
    }
  return s / double(cards.size() * real.seq_len);
}

struct TransResult {
  double value = 0;
  std::size_t unobserved_rows = 0;  ///< rows seen on one side only (charged their real occupancy)
};

/// Per feature: sum over source states of occupancy_real(k) * TVD(row_real(k),
/// row_synth(k)); averaged over features. Occupancy comes from the real side,
/// so the metric is not symmetric.
inline TransResult trans_dist(const SequenceBatch& real, const SequenceBatch& synth, std::span<const std::size_t> cards) {
  detail::require_same_layout(real, synth, "trans_dist");
  if (real.seq_len < 2) throw ArgumentError("trans_dist: sequence length must exceed 1");
  if (cards.size() != real.num_categorical || cards.empty()) throw ArgumentError("trans_dist: bad cardinality list");
  TransResult r;
  double total = 0;
  for (std::size_t j = 0; j < cards.size(); ++j) {
    const std::size_t c = cards[j];
    auto counts = [&](const SequenceBatch& b) {
      std::vector<double> m(c * c, 0.0);
      for (std::size_t i = 0; i < b.n; ++i)
        for (std::size_t l = 0; l + 1 < b.seq_len; ++l) m.at(b.cat(i, l, j) * c + b.cat(i, l + 1, j)) += 1;
      return m;
    };
    const auto mr = counts(real), ms = counts(synth);
    const double all = double(real.n * (real.seq_len - 1));
    double s = 0;
    for (std::size_t k = 0; k < c; ++k) {
      const double nr = std::accumulate(mr.begin() + std::ptrdiff_t(k * c), mr.begin() + std::ptrdiff_t((k + 1) * c), 0.0);
      const double ns = std::accumulate(ms.begin() + std::ptrdiff_t(k * c), ms.begin() + std::ptrdiff_t((k + 1) * c), 0.0);
      if (nr == 0) {  // no real occupancy: weight 0, still logged when synth visits it
        if (ns > 0) ++r.unobserved_rows;
        continue;
      }
      const double occ = all > 0 ? nr / all : 0;
      if (ns == 0) {
        ++r.unobserved_rows;
        s += occ;
        continue;
      }
      double d = 0;
      for (std::size_t k2 = 0; k2 < c; ++k2) d += std::abs(mr[k * c + k2] / nr - ms[k * c + k2] / ns);
      s += occ * 0.5 * d;
    }
    total += s;
  }
  r.value = total / double(cards.size());
  return r;
}

}  // namespace mixdiff
