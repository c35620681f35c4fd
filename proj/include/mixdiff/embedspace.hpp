#pragma once

// Learnable continuous embeddings for categorical features. Every lookup
// L2-normalizes the raw vector and scales it to norm sqrt(d).

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mixdiff/autodiff.hpp"
#include "mixdiff/error.hpp"
#include "mixdiff/tensor.hpp"

namespace mixdiff {

inline constexpr double kEmbeddingNormFloor = 1e-8;

template <class T>
struct EmbeddingTable {
  std::size_t dim = 0;
  std::vector<Parameter<T>> tables;  ///< one [C_j, d] raw table per feature

  /// Raw entries ~ N(0,1)/sqrt(d); rows whose norm falls under the floor are redrawn.
  static EmbeddingTable init(std::span<const std::size_t> cards, std::size_t dim,
                             std::mt19937_64& rng) {
    if (dim == 0) throw ArgumentError("embedding: dimension must be positive");
    EmbeddingTable e;
    e.dim = dim;
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(double(dim)));
    for (std::size_t j = 0; j < cards.size(); ++j) {
      if (cards[j] < 2) throw ArgumentError("embedding: every feature needs at least 2 categories");
      Tensor<T> tab({cards[j], dim});
      for (std::size_t k = 0; k < cards[j]; ++k) {
        double norm = 0;
        do {
          norm = 0;
          for (std::size_t c = 0; c < dim; ++c) {
            const double v = nd(rng);
            tab(k, c) = T(v);
            norm += v * v;
          }
        } while (std::sqrt(norm) < kEmbeddingNormFloor);
      }
      e.tables.emplace_back("embedding." + std::to_string(j), std::move(tab));
    }
    return e;
  }

  std::size_t num_features() const { return tables.size(); }
  std::size_t cardinality(std::size_t j) const { return table(j).value.dim(0); }
  double scale() const { return std::sqrt(double(dim)); }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& t : tables) out.push_back(&t);
    return out;
  }
  std::vector<const Parameter<T>*> parameters() const {
    std::vector<const Parameter<T>*> out;
    for (const auto& t : tables) out.push_back(&t);
    return out;
  }

  /// e_{j,k} / ||e_{j,k}|| * sqrt(d)
  std::vector<double> embed(std::size_t j, std::size_t k) const {
    const Tensor<T>& tab = table(j).value;
    if (k >= tab.dim(0))
      throw ArgumentError("embedding: category " + std::to_string(k) + " out of range for feature " +
                          std::to_string(j));
    double norm = 0;
    for (std::size_t c = 0; c < dim; ++c) norm += double(tab(k, c)) * double(tab(k, c));
    norm = std::sqrt(norm);
    if (!(norm >= kEmbeddingNormFloor))
      throw DegenerateEmbedding("embedding: raw vector (" + std::to_string(j) + "," +
                                std::to_string(k) + ") has zero norm");
    std::vector<double> out(dim);
    for (std::size_t c = 0; c < dim; ++c) out[c] = double(tab(k, c)) / norm * scale();
    return out;
  }

  /// All normalized embeddings of feature j as [C_j, d].
  Tensor<double> normalized(std::size_t j) const {
    const std::size_t c = cardinality(j);
    Tensor<double> out({c, dim});
    for (std::size_t k = 0; k < c; ++k) {
      const auto e = embed(j, k);
      std::copy(e.begin(), e.end(), out.data() + k * dim);
    }
    return out;
  }

  /// Posterior-mean embedding sum_k p_k * embed(j,k).
  std::vector<double> score_interpolate(std::size_t j, std::span<const double> probs) const {
    const std::size_t c = cardinality(j);
    if (probs.size() != c) throw ArgumentError("score_interpolate: probability vector length mismatch");
    double s = 0;
    for (double p : probs) {
      if (!(p >= 0.0)) throw ArgumentError("score_interpolate: negative probability");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-6) throw ArgumentError("score_interpolate: probabilities must sum to 1");
    const Tensor<double> tab = normalized(j);
    std::vector<double> out(dim, 0.0);
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t d = 0; d < dim; ++d) out[d] += probs[k] * tab(k, d);
    return out;
  }

  /// argmin_k ||x - embed(j,k)||, ties to the lowest index.
  std::size_t nearest_decode(std::size_t j, std::span<const double> x) const {
    return nearest_row(normalized(j), x);
  }

  static std::size_t nearest_row(const Tensor<double>& normalized_table, std::span<const double> x) {
    const std::size_t c = normalized_table.dim(0), d = normalized_table.dim(1);
    if (x.size() != d) throw ArgumentError("nearest_decode: vector length mismatch");
    std::size_t best = 0;
    double best_d = 0;
    for (std::size_t k = 0; k < c; ++k) {
      double s = 0;
      for (std::size_t i = 0; i < d; ++i) {
        const double diff = x[i] - normalized_table(k, i);
        s += diff * diff;
      }
      if (k == 0 || s < best_d) {
        best = k;
        best_d = s;
      }
    }
    return best;
  }

  template <class U>
  EmbeddingTable<U> cast() const {
    EmbeddingTable<U> o;
    o.dim = dim;
    for (const auto& t : tables) {
      o.tables.emplace_back(t.name, t.value.template cast<U>());
      o.tables.back().trainable = t.trainable;
    }
    return o;
  }

 private:
  const Parameter<T>& table(std::size_t j) const {
    if (j >= tables.size()) throw ArgumentError("embedding: feature index " + std::to_string(j) + " out of range");
    return tables[j];
  }
};

/// Normalized table of feature j on the tape: [C_j, d], differentiable in the raw entries.
template <class T>
ad::Var<T> normalized_table_var(ad::Tape<T>& tape, EmbeddingTable<T>& table, std::size_t j) {
  return ad::normalize_rows(tape.param(table.tables.at(j)), T(table.scale()), T(kEmbeddingNormFloor));
}

}  // namespace mixdiff
