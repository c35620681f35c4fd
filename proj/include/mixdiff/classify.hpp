#pragma once

// Discriminators and downstream classifiers: AUC, C2ST, TSTR/TRTR.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mixdiff/autodiff.hpp"
#include "mixdiff/dataio.hpp"
#include "mixdiff/denoiser.hpp"
#include "mixdiff/random.hpp"
#include "mixdiff/training.hpp"

namespace mixdiff {

/// Mann-Whitney AUC of scores for positives (labels == 1) vs negatives; ties count 1/2.
inline double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ArgumentError("auc: size mismatch");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0, npos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * double(i + 1 + j);  // ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]]) {
        rank_sum += avg_rank;
        npos += 1;
      }
    i = j;
  }
  const double nneg = double(scores.size()) - npos;
  if (npos == 0 || nneg == 0) throw ArgumentError("auc: need both classes in the evaluation set");
  return (rank_sum - npos * (npos + 1) / 2) / (npos * nneg);
}

/// Binary: AUC of p(class 1). More classes: macro one-vs-rest over classes present.
inline double multiclass_auc(const std::vector<double>& probs, std::size_t classes, std::span<const std::uint8_t> y) {
  if (classes == 2) {
    std::vector<double> s(y.size());
    std::vector<std::uint8_t> t(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      s[i] = probs[i * 2 + 1];
      t[i] = y[i] == 1;
    }
    return auc(s, t);
  }
  double acc = 0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    std::vector<double> s(y.size());
    std::vector<std::uint8_t> t(y.size());
    std::size_t pos = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      s[i] = probs[i * classes + k];
      t[i] = y[i] == k;
      pos += t[i];
    }
    if (pos == 0 || pos == y.size()) continue;
    acc += auc(s, t);
    ++used;
  }
  if (!used) throw ArgumentError("auc: evaluation labels contain a single class");
  return acc / double(used);
}

struct AucSummary {
  double mean = 0, stddev = 0;
  std::vector<double> per_seed;
};

inline AucSummary summarize(std::vector<double> v) {
  AucSummary s;
  s.per_seed = std::move(v);
  const double n = double(s.per_seed.size());
  s.mean = std::accumulate(s.per_seed.begin(), s.per_seed.end(), 0.0) / n;
  double ss = 0;
  for (double x : s.per_seed) ss += (x - s.mean) * (x - s.mean);
  s.stddev = s.per_seed.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  return s;
}

/// Rows of a then rows of b.
inline SequenceBatch concat(const SequenceBatch& a, const SequenceBatch& b) {
  if (a.seq_len != b.seq_len || a.num_numerical != b.num_numerical || a.num_categorical != b.num_categorical)
    throw ArgumentError("concat: layouts differ");
  SequenceBatch c = a;
  c.n += b.n;
  c.numerical.insert(c.numerical.end(), b.numerical.begin(), b.numerical.end());
  c.categorical.insert(c.categorical.end(), b.categorical.begin(), b.categorical.end());
  c.labels.insert(c.labels.end(), b.labels.begin(), b.labels.end());
  return c;
}

/// Per-position features: standardized numerical values (statistics fitted on
/// the training side) followed by one-hot categoricals.
struct SeqEncoder {
  std::vector<double> mean, inv_std;
  std::vector<std::size_t> cards;

  static SeqEncoder fit(const SequenceBatch& b, std::span<const std::size_t> cards) {
    if (cards.size() != b.num_categorical) throw ArgumentError("encoder: cardinality list does not match data");
    SeqEncoder e;
    e.cards.assign(cards.begin(), cards.end());
    const std::size_t nf = b.num_numerical, rows = b.n * b.seq_len;
    e.mean.assign(nf, 0.0);
    e.inv_std.assign(nf, 1.0);
    std::vector<double> sq(nf, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t f = 0; f < nf; ++f) e.mean[f] += b.numerical[r * nf + f];
    for (auto& m : e.mean) m /= double(std::max<std::size_t>(rows, 1));
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t f = 0; f < nf; ++f) sq[f] += std::pow(b.numerical[r * nf + f] - e.mean[f], 2);
    for (std::size_t f = 0; f < nf; ++f) {
      const double sd = std::sqrt(sq[f] / double(std::max<std::size_t>(rows, 1)));
      e.inv_std[f] = sd > 1e-12 ? 1.0 / sd : 0.0;
    }
    return e;
  }

  std::size_t width() const { return mean.size() + std::accumulate(cards.begin(), cards.end(), std::size_t{0}); }

  void encode_row(const SequenceBatch& b, std::size_t i, std::size_t l, double* out) const {
    std::size_t c = 0;
    for (std::size_t f = 0; f < mean.size(); ++f) out[c++] = (b.num(i, l, f) - mean[f]) * inv_std[f];
    for (std::size_t j = 0; j < cards.size(); ++j) {
      const std::size_t k = b.cat(i, l, j);
      if (k >= cards[j]) throw ArgumentError("encoder: category out of range");
      for (std::size_t v = 0; v < cards[j]; ++v) out[c++] = v == k ? 1.0 : 0.0;
    }
  }

  /// [n, L * width]
  std::vector<double> flat(const SequenceBatch& b) const {
    const std::size_t w = width();
    std::vector<double> x(b.n * b.seq_len * w);
    for (std::size_t i = 0; i < b.n; ++i)
      for (std::size_t l = 0; l < b.seq_len; ++l) encode_row(b, i, l, x.data() + (i * b.seq_len + l) * w);
    return x;
  }

  /// Per position [|idx|, width] for the sequence models.
  std::vector<Tensor<float>> positions(const SequenceBatch& b, std::span<const std::size_t> idx) const {
    const std::size_t w = width();
    std::vector<Tensor<float>> xs;
    std::vector<double> row(w);
    for (std::size_t l = 0; l < b.seq_len; ++l) {
      Tensor<float> t({idx.size(), w});
      for (std::size_t r = 0; r < idx.size(); ++r) {
        encode_row(b, idx[r], l, row.data());
        for (std::size_t c = 0; c < w; ++c) t(r, c) = float(row[c]);
      }
      xs.push_back(std::move(t));
    }
    return xs;
  }
};

// ---------------------------------------------------------------------------
// Logistic regression (flattened sequences)

struct LogisticOptions {
  std::size_t iterations = 300;
  double learning_rate = 0.05;
  double l2 = 1e-3;
};

/// Full-batch Adam on the mean log-loss + l2/2 |w|^2, starting from zero;
/// returns p(y=1) for the test rows.
inline std::vector<double> logistic_fit_predict(std::span<const double> xtr, std::span<const std::uint8_t> ytr,
                                                std::span<const double> xte, std::size_t dim,
                                                const LogisticOptions& o = {}) {
  const std::size_t n = ytr.size(), m = xte.size() / dim;
  if (xtr.size() != n * dim) throw ArgumentError("logistic: ragged training matrix");
  std::vector<double> w(dim + 1, 0.0), g(dim + 1), mom(dim + 1, 0.0), vel(dim + 1, 0.0);
  const double b1 = 0.9, b2 = 0.999;
  for (std::size_t it = 1; it <= o.iterations; ++it) {
    std::fill(g.begin(), g.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double z = w[dim];
      for (std::size_t c = 0; c < dim; ++c) z += w[c] * xtr[i * dim + c];
      const double r = ad::sigmoid_scalar(z) - double(ytr[i]);
      for (std::size_t c = 0; c < dim; ++c) g[c] += r * xtr[i * dim + c];
      g[dim] += r;
    }
    for (std::size_t c = 0; c <= dim; ++c) {
      g[c] = g[c] / double(n) + (c < dim ? o.l2 * w[c] : 0.0);
      mom[c] = b1 * mom[c] + (1 - b1) * g[c];
      vel[c] = b2 * vel[c] + (1 - b2) * g[c] * g[c];
      const double mh = mom[c] / (1 - std::pow(b1, double(it))), vh = vel[c] / (1 - std::pow(b2, double(it)));
      w[c] -= o.learning_rate * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  std::vector<double> p(m);
  for (std::size_t i = 0; i < m; ++i) {
    double z = w[dim];
    for (std::size_t c = 0; c < dim; ++c) z += w[c] * xte[i * dim + c];
    p[i] = ad::sigmoid_scalar(z);
  }
  return p;
}

// ---------------------------------------------------------------------------
// GRU sequence classifier: bidirectional GRU, mean pooling, linear head.

struct GruClassifierOptions {
  std::size_t hidden = 16;
  std::size_t epochs = 12;
  std::size_t batch_size = 64;
  double learning_rate = 5e-3;
};

struct GruClassifier {
  GruDirection<float> fwd, bwd;
  Linear<float> head;
  std::size_t classes = 2;

  static GruClassifier make(std::size_t in, std::size_t hidden, std::size_t classes, std::mt19937_64& rng) {
    GruClassifier c;
    c.fwd = GruDirection<float>::make("clf.fwd", in, hidden, rng);
    c.bwd = GruDirection<float>::make("clf.bwd", in, hidden, rng);
    c.head = Linear<float>::make("clf.head", 2 * hidden, classes, rng);
    c.classes = classes;
    return c;
  }

  std::vector<Parameter<float>*> parameters() {
    std::vector<Parameter<float>*> out;
    fwd.collect(out);
    bwd.collect(out);
    head.collect(out);
    return out;
  }

  ad::Var<float> logits(ad::Tape<float>& tape, const std::vector<Tensor<float>>& xs) {
    std::vector<ad::Var<float>> in;
    for (const auto& x : xs) in.push_back(tape.view(x));
    auto hs = bigru_layer(tape, fwd.bind(tape), bwd.bind(tape), in);
    ad::Var<float> pooled = hs[0];
    for (std::size_t l = 1; l < hs.size(); ++l) pooled = ad::add(pooled, hs[l]);
    return head.bind(tape)(ad::scale(pooled, 1.0f / float(hs.size())));
  }
};

/// Trains on (train, ytr) and returns class probabilities [test.n, classes].
inline std::vector<double> gru_fit_predict(const SequenceBatch& train, std::span<const std::uint8_t> ytr,
                                           const SequenceBatch& test, std::span<const std::size_t> cards,
                                           std::size_t classes, std::uint64_t seed,
                                           const GruClassifierOptions& o = {}) {
  if (ytr.size() != train.n) throw ArgumentError("classifier: label count mismatch");
  const SeqEncoder enc = SeqEncoder::fit(train, cards);
  std::mt19937_64 rng(seed);
  GruClassifier clf = GruClassifier::make(enc.width(), o.hidden, classes, rng);
  Adam<float> opt(o.learning_rate);
  auto params = clf.parameters();
  std::vector<std::size_t> order(train.n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t e = 0; e < o.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t lo = 0; lo < train.n; lo += o.batch_size) {
      const std::span<const std::size_t> idx(order.data() + lo, std::min(o.batch_size, train.n - lo));
      const auto xs = enc.positions(train, idx);
      std::vector<std::size_t> tg(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r) tg[r] = ytr[idx[r]];
      for (auto* p : params) p->zero_grad();
      ad::Tape<float> tape;
      auto loss = ad::softmax_xent(clf.logits(tape, xs), tg).loss;
      if (!std::isfinite(loss.value()[0])) throw NumericError("classifier: non-finite loss");
      tape.backward(loss);
      opt.step(params);
    }
  }
  std::vector<double> probs(test.n * classes);
  std::vector<std::size_t> all(test.n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t lo = 0; lo < test.n; lo += 512) {
    const std::span<const std::size_t> idx(all.data() + lo, std::min<std::size_t>(512, test.n - lo));
    ad::Tape<float> tape(false);
    const Tensor<float> z = clf.logits(tape, enc.positions(test, idx)).value();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      double mx = z(r, 0), s = 0;
      for (std::size_t k = 1; k < classes; ++k) mx = std::max(mx, double(z(r, k)));
      for (std::size_t k = 0; k < classes; ++k) s += probs[(lo + r) * classes + k] = std::exp(double(z(r, k)) - mx);
      for (std::size_t k = 0; k < classes; ++k) probs[(lo + r) * classes + k] /= s;
    }
  }
  return probs;
}

// ---------------------------------------------------------------------------
// C2ST and TSTR

enum class Discriminator { logistic, gru };

inline std::string to_string(Discriminator d) { return d == Discriminator::logistic ? "logistic" : "gru"; }

struct C2stOptions {
  std::size_t seeds = 5;
  std::uint64_t seed = 0;
  std::size_t max_per_side = 2000;  ///< balanced size cap per side
  LogisticOptions logistic;
  GruClassifierOptions gru;
};

/// Real = 1, synthetic = 0. Each seed draws a balanced subset of
/// min(n_real, n_synth, cap) per side (same permutation seed on both sides),
/// trains on the first halves and reports AUC on the second halves.
inline AucSummary c2st(const SequenceBatch& real, const SequenceBatch& synth, std::span<const std::size_t> cards,
                       Discriminator kind, const C2stOptions& o = {}) {
  const std::size_t n = std::min({real.n, synth.n, o.max_per_side ? o.max_per_side : real.n});
  if (n < 4) throw ArgumentError("c2st: need at least 4 samples per side");
  if (o.seeds == 0) throw ArgumentError("c2st: need at least one seed");
  const std::size_t half = n / 2;
  std::vector<double> aucs;
  for (std::size_t s = 0; s < o.seeds; ++s) {
    const std::uint64_t sd = mix_seed(o.seed, s);
    auto pick = [&](const SequenceBatch& b) {
      std::vector<std::size_t> idx(b.n);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      std::mt19937_64 rng(sd);
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(n);
      return std::pair{b.subset(std::span(idx).first(half)), b.subset(std::span(idx).subspan(half))};
    };
    const auto [rtr, rte] = pick(real);
    const auto [str, ste] = pick(synth);
    const SequenceBatch tr = concat(rtr, str), te = concat(rte, ste);
    std::vector<std::uint8_t> ytr(tr.n, 0), yte(te.n, 0);
    std::fill_n(ytr.begin(), rtr.n, 1);
    std::fill_n(yte.begin(), rte.n, 1);
    std::vector<double> score(te.n);
    if (kind == Discriminator::logistic) {
      const SeqEncoder enc = SeqEncoder::fit(tr, cards);
      const std::size_t dim = enc.width() * tr.seq_len;
      score = logistic_fit_predict(enc.flat(tr), ytr, enc.flat(te), dim, o.logistic);
    } else {
      const auto p = gru_fit_predict(tr, ytr, te, cards, 2, sd, o.gru);
      for (std::size_t i = 0; i < te.n; ++i) score[i] = p[i * 2 + 1];
    }
    aucs.push_back(auc(score, yte));
  }
  return summarize(std::move(aucs));
}

struct TstrOptions {
  std::size_t seeds = 5;
  std::uint64_t seed = 0;
  GruClassifierOptions gru;
};

/// Trains the GRU classifier on `train` labels and reports AUC on `test`
/// (TSTR when train is synthetic, TRTR when it is real).
inline AucSummary tstr(const SequenceBatch& train, const SequenceBatch& test, std::span<const std::size_t> cards,
                       std::size_t classes, const TstrOptions& o = {}) {
  if (train.n == 0 || test.n == 0) throw ArgumentError("tstr: empty dataset");
  if (train.labels.size() != train.n || test.labels.size() != test.n) throw ArgumentError("tstr: labels missing");
  for (auto v : train.labels)
    if (v >= classes) throw ArgumentError("tstr: label out of range");
  const std::size_t distinct = std::set<std::uint8_t>(train.labels.begin(), train.labels.end()).size();
  if (distinct < 2) throw ArgumentError("tstr: training labels contain a single class");
  std::vector<double> aucs;
  for (std::size_t s = 0; s < o.seeds; ++s) {
    const auto p = gru_fit_predict(train, train.labels, test, cards, classes, mix_seed(o.seed, s), o.gru);
    aucs.push_back(multiclass_auc(p, classes, test.labels));
  }
  return summarize(std::move(aucs));
}

}  // namespace mixdiff
