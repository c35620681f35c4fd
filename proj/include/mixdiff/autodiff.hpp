#pragma once

// Reverse-mode gradient tape over dense arrays.
//
// A Tape records nodes in creation order, which is already a topological
// order, so backward() simply walks the node list in reverse. Parameters live
// outside the tape; a parameter leaf references the parameter's storage and
// its accumulated gradient is added into Parameter::grad after the sweep.
// Tapes are single-use: build one per forward/backward step.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mixdiff/error.hpp"
#include "mixdiff/tensor.hpp"

namespace mixdiff {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() {
    if (grad.shape() != value.shape())
      grad = Tensor<T>(value.shape());
    else
      grad.fill(T(0));
  }
};

namespace ad {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
class Tape;

/// Handle to a tape node.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&)>;

  /// With record=false no backward rules are stored (inference only).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t next_id() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> v) {
    Node n;
    n.value = std::move(v);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Leaf bound to external parameter storage. The parameter must outlive the tape
  /// and stay unmodified until backward() returns.
  Var<T> param(Parameter<T>& p) {
    Node n;
    n.external = &p.value;
    n.param = &p;
    n.requires_grad = record_ && p.trainable;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Read-only leaf over external storage (never receives gradient).
  Var<T> view(const Tensor<T>& v) {
    Node n;
    n.external = &v;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<T> push(Tensor<T> v, bool requires_grad, Backward bw) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = record_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient accumulator for node id, allocated as zeros on first access.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !value(id).empty()) n.grad = Tensor<T>(value(id).shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  /// Seeds d(root)/d(root) = 1 and propagates to every node that requires a
  /// gradient; parameter leaves add their gradient into Parameter::grad.
  void backward(Var<T> root) {
    if (root.tape != this) throw ArgumentError("backward: variable belongs to another tape");
    if (value(root.id).size() != 1) throw ArgumentError("backward: root must be a scalar");
    if (!nodes_[root.id].requires_grad) return;
    grad(root.id)[0] = T(1);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this);
      if (n.param) {
        Tensor<T>& pg = n.param->grad;
        if (pg.shape() != n.param->value.shape()) pg = Tensor<T>(n.param->value.shape());
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  bool record_;
  std::vector<Node> nodes_;
};

namespace detail {

template <class T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape != b.tape) throw ArgumentError("variables from different tapes");
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require_same_tape(a, b);
  if (a.shape() != b.shape())
    throw ArgumentError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

template <class T>
void require_rank2(const Var<T>& a, const char* op) {
  if (a.shape().size() != 2)
    throw ArgumentError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

}  // namespace detail

/// C = A B for row-major blocks with explicit row strides. Every output
/// element is accumulated over k in ascending order from zero, whatever the
/// row count, so a row's result does not depend on which other rows share the
/// call (sampling results are then independent of the chunk size). Used for
/// forward products; backward products go through Eigen.
template <class T>
void rowwise_gemm(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, std::size_t n,
                  std::size_t k, std::size_t m) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    T* __restrict c0 = c + i * ldc;
    T* __restrict c1 = c0 + ldc;
    T* __restrict c2 = c1 + ldc;
    T* __restrict c3 = c2 + ldc;
    for (std::size_t j = 0; j < m; ++j) c0[j] = c1[j] = c2[j] = c3[j] = T(0);
    const T* a0 = a + i * lda;
    for (std::size_t p = 0; p < k; ++p) {
      const T* __restrict bp = b + p * ldb;
      const T x0 = a0[p], x1 = a0[lda + p], x2 = a0[2 * lda + p], x3 = a0[3 * lda + p];
      for (std::size_t j = 0; j < m; ++j) {
        const T bj = bp[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
  }
  for (; i < n; ++i) {
    T* __restrict c0 = c + i * ldc;
    for (std::size_t j = 0; j < m; ++j) c0[j] = T(0);
    for (std::size_t p = 0; p < k; ++p) {
      const T* __restrict bp = b + p * ldb;
      const T x0 = a[i * lda + p];
      for (std::size_t j = 0; j < m; ++j) c0[j] += x0 * bp[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "add");
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t o = tp.next_id();
  return tp.push(std::move(out), a.requires_grad() || b.requires_grad(), [=](Tape<T>& t) {
    const Tensor<T>& g = t.grad(o);
    for (std::size_t id : {a.id, b.id}) {
      if (!t.requires_grad(id)) continue;
      Tensor<T>& ga = t.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "sub");
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t o = tp.next_id();
  return tp.push(std::move(out), a.requires_grad() || b.requires_grad(), [=](Tape<T>& t) {
    const Tensor<T>& g = t.grad(o);
    if (t.requires_grad(a.id)) {
      Tensor<T>& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b.id)) {
      Tensor<T>& gb = t.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "mul");
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t o = tp.next_id();
  return tp.push(std::move(out), a.requires_grad() || b.requires_grad(), [=](Tape<T>& t) {
    const Tensor<T>& g = t.grad(o);
    if (t.requires_grad(a.id)) {
      const Tensor<T>& bv2 = t.value(b.id);
      Tensor<T>& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (t.requires_grad(b.id)) {
      const Tensor<T>& av = t.value(a.id);
      Tensor<T>& gb = t.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

/// a * c for a constant c.
template <class T>
Var<T> scale(Var<T> a, T c) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= c;
  const std::size_t o = tp.next_id();
  return tp.push(std::move(out), a.requires_grad(), [=](Tape<T>& t) {
    const Tensor<T>& g = t.grad(o);
    Tensor<T>& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

template <class T>
Var<T> add_scalar(Var<T> a, T c) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v += c;
  const std::size_t o = tp.next_id();
  return tp.push(std::move(out), a.requires_grad(), [=](Tape<T>& t) {
    const Tensor<T>& g = t.grad(o);
    Tensor<T>& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// y = f(x) elementwise; df(x, y) supplies the derivative.
template <class T, class F, class DF>
Var<T> unary(Var<T> a, F f, DF df) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const std::size_t o = tp.next_id();
  return tp.push(std::move(out), a.requires_grad(), [=](Tape<T>& t) {
    const Tensor<T>& g = t.grad(o);
    const Tensor<T>& x = t.value(a.id);
    const Tensor<T>& y = t.value(o);
    Tensor<T>& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

template <class T>
Var<T> tanh(Var<T> a) {
  return unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  return unary(a, [](T x) { return sigmoid_scalar(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> exp(Var<T> a) {
  return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(Var<T> a) {
  return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

/// x^p for a real exponent p (x > 0 unless p is integral).
template <class T>
Var<T> pow(Var<T> a, T p) {
  return unary(
      a, [p](T x) { return std::pow(x, p); }, [p](T x, T) { return p * std::pow(x, p - T(1)); });
}

/// x * sigmoid(x)
template <class T>
Var<T> silu(Var<T> a) {
  return unary(
      a, [](T x) { return x * sigmoid_scalar(x); },
      [](T x, T) {
        const T s = sigmoid_scalar(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

// ---------------------------------------------------------------------------
// Matrix ops

/// [N,K] x [K,M] -> [N,M]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k)
    throw ArgumentError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  Tape<T>& tp = *a.tape;
  Tensor<T> out({n, m});
  rowwise_gemm(a.value().data(), k, b.value().data(), m, out.data(), m, n, k, m);
  const std::size_t o = tp.next_id();
  return tp.push(std::move(out), a.requires_grad() || b.requires_grad(), [=](Tape<T>& t) {
    CMatMap<T> g(t.grad(o).data(), n, m);
    if (t.requires_grad(a.id)) {
      MatMap<T>(t.grad(a.id).data(), n, k).noalias() +=
          g * CMatMap<T>(t.value(b.id).data(), k, m).transpose();
    }
    if (t.requires_grad(b.id)) {
      MatMap<T>(t.grad(b.id).data(), k, m).noalias() +=
          CMatMap<T>(t.value(a.id).data(), n, k).transpose() * g;
    }
  });
}

/// Broadcast add of a length-M vector to every row of an [N,M] matrix.
template <class T>
Var<T> add_row(Var<T> a, Var<T> row) {
  detail::require_same_tape(a, row);
  const std::size_t n = a.rows(), m = a.cols();
  if (row.value().size() != m)
    throw ArgumentError("add_row: row length " + std::to_string(row.value().size()) +
                        " does not match " + std::to_string(m) + " columns");
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.value();
  const Tensor<T>& rv = row.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] += rv[c];
  const std::size_t o = tp.next_id();
  return tp.push(std::move(out), a.requires_grad() || row.requires_grad(), [=](Tape<T>& t) {
    const Tensor<T>& g = t.grad(o);
    if (t.requires_grad(a.id)) {
      Tensor<T>& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(row.id)) {
      Tensor<T>& gr = t.grad(row.id);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gr[c] += g[r * m + c];
    }
  });
}

/// Broadcast a length-M vector to an [N,M] matrix.
template <class T>
Var<T> broadcast_rows(Var<T> row, std::size_t n) {
  const std::size_t m = row.value().size();
  Tape<T>& tp = *row.tape;
  Tensor<T> out({n, m});
  const Tensor<T>& rv = row.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] = rv[c];
  const std::size_t o = tp.next_id();
  return tp.push(std::move(out), row.requires_grad(), [=](Tape<T>& t) {
    const Tensor<T>& g = t.grad(o);
    Tensor<T>& gr = t.grad(row.id);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) gr[c] += g[r * m + c];
  });
}

/// Concatenate matrices with equal row counts along the column axis.
template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ArgumentError("concat_cols: no inputs");
  Tape<T>& tp = *parts.front().tape;
  const std::size_t n = parts.front().rows();
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require_same_tape(p, parts.front());
    if (p.rows() != n) throw ArgumentError("concat_cols: row count mismatch");
    total += p.cols();
    rg = rg || p.requires_grad();
  }
  Tensor<T> out({n, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor<T>& v = p.value();
    const std::size_t w = p.cols();
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(v.data() + r * w, w, out.data() + r * total + off);
    off += w;
  }
  const std::size_t o = tp.next_id();
  return tp.push(std::move(out), rg, [=](Tape<T>& t) {
    const Tensor<T>& g = t.grad(o);
    std::size_t off2 = 0;
    for (const auto& p : parts) {
      const std::size_t w = t.value(p.id).cols();
      if (t.requires_grad(p.id)) {
        Tensor<T>& gp = t.grad(p.id);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * total + off2 + c];
      }
      off2 += w;
    }
  });
}

/// Columns [begin, begin+count) of a matrix.
template <class T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t count) {
  const std::size_t n = a.rows(), m = a.cols();
  if (begin + count > m) throw ArgumentError("slice_cols: range exceeds column count");
  Tape<T>& tp = *a.tape;
  Tensor<T> out({n, count});
  const Tensor<T>& v = a.value();
  for (std::size_t r = 0; r < n; ++r) std::copy_n(v.data() + r * m + begin, count, out.data() + r * count);
  const std::size_t o = tp.next_id();
  return tp.push(std::move(out), a.requires_grad(), [=](Tape<T>& t) {
    const Tensor<T>& g = t.grad(o);
    Tensor<T>& ga = t.grad(a.id);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < count; ++c) ga[r * m + begin + c] += g[r * count + c];
  });
}

/// Rows of a [C,d] table selected by index (embedding lookup).
template <class T>
Var<T> gather_rows(Var<T> table, std::span<const std::size_t> idx) {
  detail::require_rank2(table, "gather_rows");
  const std::size_t c = table.shape()[0], d = table.shape()[1];
  for (std::size_t i : idx)
    if (i >= c)
      throw ArgumentError("gather_rows: index " + std::to_string(i) + " out of range " +
                          std::to_string(c));
  Tape<T>& tp = *table.tape;
  Tensor<T> out({idx.size(), d});
  const Tensor<T>& v = table.value();
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(v.data() + idx[r] * d, d, out.data() + r * d);
  const std::size_t o = tp.next_id();
  std::vector<std::size_t> rows(idx.begin(), idx.end());
  return tp.push(std::move(out), table.requires_grad(), [=, rows = std::move(rows)](Tape<T>& t) {
    const Tensor<T>& g = t.grad(o);
    Tensor<T>& gt = t.grad(table.id);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t k = 0; k < d; ++k) gt[rows[r] * d + k] += g[r * d + k];
  });
}

/// Each row rescaled to Euclidean norm `scale`; norms below `floor` are
/// treated as `floor`.
template <class T>
Var<T> normalize_rows(Var<T> a, T scale, T floor = T(1e-8)) {
  const std::size_t n = a.rows(), m = a.cols();
  Tape<T>& tp = *a.tape;
  const Tensor<T>& v = a.value();
  Tensor<T> out(v.shape());
  auto norms = std::make_shared<std::vector<T>>(n);
  for (std::size_t r = 0; r < n; ++r) {
    T s = 0;
    for (std::size_t c = 0; c < m; ++c) s += v[r * m + c] * v[r * m + c];
    const T nr = std::max(std::sqrt(s), floor);
    (*norms)[r] = nr;
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] = v[r * m + c] * scale / nr;
  }
  const std::size_t o = tp.next_id();
  return tp.push(std::move(out), a.requires_grad(), [=](Tape<T>& t) {
    const Tensor<T>& g = t.grad(o);
    const Tensor<T>& x = t.value(a.id);
    Tensor<T>& ga = t.grad(a.id);
    for (std::size_t r = 0; r < n; ++r) {
      const T nr = (*norms)[r];
      const bool floored = nr <= floor;
      T ug = 0;
      if (!floored)
        for (std::size_t c = 0; c < m; ++c) ug += x[r * m + c] * g[r * m + c];
      for (std::size_t c = 0; c < m; ++c) {
        T d = g[r * m + c];
        if (!floored) d -= x[r * m + c] * ug / (nr * nr);
        ga[r * m + c] += d * scale / nr;
      }
    }
  });
}

/// Per-row standardization (no affine part): (x - mean) / sqrt(var + eps).
template <class T>
Var<T> layer_norm_rows(Var<T> a, T eps = T(1e-5)) {
  const std::size_t n = a.rows(), m = a.cols();
  Tape<T>& tp = *a.tape;
  const Tensor<T>& v = a.value();
  Tensor<T> out(v.shape());
  auto inv_std = std::make_shared<std::vector<T>>(n);
  for (std::size_t r = 0; r < n; ++r) {
    T mu = 0;
    for (std::size_t c = 0; c < m; ++c) mu += v[r * m + c];
    mu /= T(m);
    T var = 0;
    for (std::size_t c = 0; c < m; ++c) {
      const T d = v[r * m + c] - mu;
      var += d * d;
    }
    var /= T(m);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] = (v[r * m + c] - mu) * is;
  }
  const std::size_t o = tp.next_id();
  return tp.push(std::move(out), a.requires_grad(), [=](Tape<T>& t) {
    const Tensor<T>& g = t.grad(o);
    const Tensor<T>& y = t.value(o);
    Tensor<T>& ga = t.grad(a.id);
    for (std::size_t r = 0; r < n; ++r) {
      T mg = 0, mgy = 0;
      for (std::size_t c = 0; c < m; ++c) {
        mg += g[r * m + c];
        mgy += g[r * m + c] * y[r * m + c];
      }
      mg /= T(m);
      mgy /= T(m);
      const T is = (*inv_std)[r];
      for (std::size_t c = 0; c < m; ++c)
        ga[r * m + c] += is * (g[r * m + c] - mg - y[r * m + c] * mgy);
    }
  });
}

template <class T>
struct SoftmaxXent {
  Var<T> loss;       ///< scalar mean cross-entropy over rows
  Tensor<T> probs;   ///< row-wise softmax of the logits
};

/// Fused row softmax + cross-entropy against integer targets, averaged over rows.
template <class T>
SoftmaxXent<T> softmax_xent(Var<T> logits, std::span<const std::size_t> targets) {
  detail::require_rank2(logits, "softmax_xent");
  const std::size_t n = logits.rows(), c = logits.cols();
  if (targets.size() != n) throw ArgumentError("softmax_xent: target count does not match rows");
  Tape<T>& tp = *logits.tape;
  const Tensor<T>& z = logits.value();
  auto probs = std::make_shared<Tensor<T>>(z.shape());
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= c) throw ArgumentError("softmax_xent: target out of range");
    T mx = z[r * c];
    for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, z[r * c + k]);
    T s = 0;
    for (std::size_t k = 0; k < c; ++k) {
      const T e = std::exp(z[r * c + k] - mx);
      (*probs)[r * c + k] = e;
      s += e;
    }
    for (std::size_t k = 0; k < c; ++k) (*probs)[r * c + k] /= s;
    total += -(z[r * c + targets[r]] - mx - std::log(s));
  }
  Tensor<T> out({1}, total / T(n));
  const std::size_t o = tp.next_id();
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  Var<T> loss = tp.push(std::move(out), logits.requires_grad(), [=, tg = std::move(tg)](Tape<T>& t) {
    const T g = t.grad(o)[0] / T(n);
    Tensor<T>& gl = t.grad(logits.id);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < c; ++k)
        gl[r * c + k] += g * ((*probs)[r * c + k] - (k == tg[r] ? T(1) : T(0)));
  });
  return {loss, *probs};
}

template <class T>
Var<T> sum(Var<T> a) {
  Tape<T>& tp = *a.tape;
  T s = 0;
  for (T v : a.value().span()) s += v;
  const std::size_t o = tp.next_id();
  return tp.push(Tensor<T>({1}, s), a.requires_grad(), [=](Tape<T>& t) {
    const T g = t.grad(o)[0];
    for (T& v : t.grad(a.id).storage()) v += g;
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ArgumentError("mean: empty input");
  return scale(sum(a), T(1) / T(n));
}

/// One GRU step in the formulation of Cho et al.:
///   z = sigmoid(xw_z + h U_z), r = sigmoid(xw_r + h U_r),
///   n = tanh(xw_n + (r*h) U_n), h' = z*h + (1-z)*n
/// where xw = x W + b is the precomputed input projection [B,3H] in column
/// blocks (z | r | n) and U is [H,3H] with the same block order.
template <class T>
Var<T> gru_step(Var<T> xw, Var<T> h, Var<T> u) {
  detail::require_same_tape(xw, h);
  detail::require_same_tape(xw, u);
  const std::size_t b = h.rows(), hd = h.cols();
  if (xw.rows() != b || xw.cols() != 3 * hd || u.shape() != Shape{hd, 3 * hd})
    throw ArgumentError("gru_step: inconsistent shapes xw" + shape_str(xw.shape()) + " h" +
                        shape_str(h.shape()) + " U" + shape_str(u.shape()));
  Tape<T>& tp = *xw.tape;
  const Tensor<T>& xv = xw.value();
  const Tensor<T>& hv = h.value();

  auto zr = std::make_shared<Tensor<T>>(Shape{b, 2 * hd});
  auto nn = std::make_shared<Tensor<T>>(Shape{b, hd});
  auto rh = std::make_shared<Tensor<T>>(Shape{b, hd});
  rowwise_gemm(hv.data(), hd, u.value().data(), 3 * hd, zr->data(), 2 * hd, b, hd, 2 * hd);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t c = 0; c < 2 * hd; ++c)
      (*zr)[r * 2 * hd + c] = sigmoid_scalar((*zr)[r * 2 * hd + c] + xv[r * 3 * hd + c]);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t c = 0; c < hd; ++c) (*rh)[r * hd + c] = (*zr)[r * 2 * hd + hd + c] * hv[r * hd + c];
  rowwise_gemm(rh->data(), hd, u.value().data() + 2 * hd, 3 * hd, nn->data(), hd, b, hd, hd);
  Tensor<T> out({b, hd});
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t c = 0; c < hd; ++c) {
      const T n = std::tanh((*nn)[r * hd + c] + xv[r * 3 * hd + 2 * hd + c]);
      (*nn)[r * hd + c] = n;
      const T z = (*zr)[r * 2 * hd + c];
      out[r * hd + c] = z * hv[r * hd + c] + (T(1) - z) * n;
    }
  const bool rg = xw.requires_grad() || h.requires_grad() || u.requires_grad();
  const std::size_t o = tp.next_id();
  return tp.push(std::move(out), rg, [=](Tape<T>& t) {
    const Tensor<T>& g = t.grad(o);
    const Tensor<T>& hv2 = t.value(h.id);
    CMatMap<T> U2(t.value(u.id).data(), hd, 3 * hd);
    // da = [da_z | da_r | da_n]
    RowMat<T> da(b, 3 * hd);
    RowMat<T> dh_direct(b, hd);
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t c = 0; c < hd; ++c) {
        const T gi = g[r * hd + c];
        const T z = (*zr)[r * 2 * hd + c];
        const T n = (*nn)[r * hd + c];
        const T hp = hv2[r * hd + c];
        da(r, c) = gi * (hp - n) * z * (T(1) - z);
        da(r, 2 * hd + c) = gi * (T(1) - z) * (T(1) - n * n);
        dh_direct(r, c) = gi * z;
      }
    RowMat<T> drh = da.rightCols(hd) * U2.rightCols(hd).transpose();
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t c = 0; c < hd; ++c) {
        const T rr = (*zr)[r * 2 * hd + hd + c];
        da(r, hd + c) = drh(r, c) * hv2[r * hd + c] * rr * (T(1) - rr);
        dh_direct(r, c) += drh(r, c) * rr;
      }
    if (t.requires_grad(xw.id)) {
      MatMap<T>(t.grad(xw.id).data(), b, 3 * hd) += da;
    }
    if (t.requires_grad(h.id)) {
      MatMap<T> gh(t.grad(h.id).data(), b, hd);
      gh += dh_direct;
      gh.noalias() += da.leftCols(2 * hd) * U2.leftCols(2 * hd).transpose();
    }
    if (t.requires_grad(u.id)) {
      MatMap<T> gu(t.grad(u.id).data(), hd, 3 * hd);
      gu.leftCols(2 * hd).noalias() += CMatMap<T>(hv2.data(), b, hd).transpose() * da.leftCols(2 * hd);
      gu.rightCols(hd).noalias() += CMatMap<T>(rh->data(), b, hd).transpose() * da.rightCols(hd);
    }
  });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares `analytic` against central differences (f(x+h e_i) - f(x-h e_i)) / 2h
/// coordinate-wise. Relative error uses max(|analytic|, |numeric|, 1e-8) as
/// denominator. Throws NumericError on non-finite function values.
inline GradCheckResult grad_check(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> analytic, std::vector<double> point,
                                  double h) {
  if (!(h > 0)) throw ArgumentError("grad_check: step must be positive");
  if (analytic.size() != point.size())
    throw ArgumentError("grad_check: gradient and point sizes differ");
  GradCheckResult res;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double x0 = point[i];
    point[i] = x0 + h;
    const double fp = f(point);
    point[i] = x0 - h;
    const double fm = f(point);
    point[i] = x0;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check: non-finite function value at coordinate " + std::to_string(i));
    const double num = (fp - fm) / (2 * h);
    const double den = std::max({std::abs(analytic[i]), std::abs(num), 1e-8});
    const double rel = std::abs(analytic[i] - num) / den;
    if (i == 0 || rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = i;
      res.worst_analytic = analytic[i];
      res.worst_numeric = num;
    }
  }
  return res;
}

}  // namespace ad
}  // namespace mixdiff
