#pragma once

// Matrix-level reverse-mode autodiff.
//
// Every value is a row-major 2-D Eigen matrix. A Tape records nodes in
// creation order; backward() walks them in reverse. Parameters are leaves
// whose gradients are accumulated into the owning Parameter after the sweep.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lastlab/errors.hpp"

namespace lastlab {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Row-major boolean matrix; true = query row may attend key column.
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Matrix<T>& value() const { return tape->node(id).value; }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T scalar() const { return value()(0, 0); }
  bool needs_grad() const { return tape->node(id).needs_grad; }
};

template <typename T>
class Tape {
 public:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool needs_grad = false;
    Parameter<T>* sink = nullptr;
    std::function<void(Tape&, const Matrix<T>&)> backward;
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Matrix<T> value) {
    nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
    return Var<T>{this, nodes_.size() - 1};
  }

  /// Leaf bound to a parameter; gradient flows into p.grad on backward().
  Var<T> param(Parameter<T>& p, bool trainable = true) {
    const bool track = grad_enabled_ && trainable;
    nodes_.push_back(Node{p.value, {}, track, track ? &p : nullptr, {}});
    return Var<T>{this, nodes_.size() - 1};
  }

  /// Leaf whose gradient is read back from the tape after backward().
  Var<T> variable(Matrix<T> value) {
    nodes_.push_back(Node{std::move(value), {}, grad_enabled_, nullptr, {}});
    return Var<T>{this, nodes_.size() - 1};
  }

  /// Records an op result. `inputs` decide whether the node is tracked.
  template <typename Fn>
  Var<T> record(Matrix<T> value, std::initializer_list<Var<T>> inputs, Fn&& backward) {
    bool track = false;
    if (grad_enabled_) {
      for (const auto& v : inputs) track = track || nodes_[v.id].needs_grad;
    }
    Node n{std::move(value), {}, track, nullptr, {}};
    if (track) n.backward = std::forward<Fn>(backward);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  template <typename Fn>
  Var<T> record_many(Matrix<T> value, std::span<const Var<T>> inputs, Fn&& backward) {
    bool track = false;
    if (grad_enabled_) {
      for (const auto& v : inputs) track = track || nodes_[v.id].needs_grad;
    }
    Node n{std::move(value), {}, track, nullptr, {}};
    if (track) n.backward = std::forward<Fn>(backward);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  template <typename Expr>
  void accumulate(const Var<T>& v, const Expr& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Accumulates g into rows [row0, row0 + g.rows()) of v's gradient.
  template <typename Expr>
  void accumulate_rows(const Var<T>& v, Eigen::Index row0, const Expr& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    n.grad.middleRows(row0, g.rows()) += g;
  }

  void backward(const Var<T>& root, T seed = T(1)) {
    if (!grad_enabled_) throw ConfigError("backward() on a tape without gradients");
    Node& r = nodes_[root.id];
    if (r.value.size() != 1) throw ConfigError("backward() root must be a 1x1 scalar");
    if (!r.needs_grad) return;
    r.grad = Matrix<T>::Constant(1, 1, seed);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.backward) {
        // Copy out: the closure may append to other nodes' grads only.
        n.backward(*this, n.grad);
      }
      if (n.sink != nullptr) {
        if (n.sink->grad.size() == 0) n.sink->grad.setZero(n.value.rows(), n.value.cols());
        n.sink->grad += n.grad;
      }
    }
  }

  const Matrix<T>& grad(const Var<T>& v) const { return nodes_[v.id].grad; }

 private:
  std::deque<Node> nodes_;
  bool grad_enabled_;
};

// ---------------------------------------------------------------------------
// Elementary ops
// ---------------------------------------------------------------------------

namespace detail {
inline void require(bool ok, const char* what) {
  if (!ok) throw ConfigError(what);
}
}  // namespace detail

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix<T> out;
  out.noalias() = a.value() * b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    if (a.needs_grad()) t.accumulate(a, (g * b.value().transpose()).eval());
    if (b.needs_grad()) t.accumulate(b, (a.value().transpose() * g).eval());
  });
}

/// a * b^T
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  detail::require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  Matrix<T> out;
  out.noalias() = a.value() * b.value().transpose();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    if (a.needs_grad()) t.accumulate(a, (g * b.value()).eval());
    if (b.needs_grad()) t.accumulate(b, (g.transpose() * a.value()).eval());
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Matrix<T> out = a.value() + b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

/// Adds a 1 x n row vector to every row of a.
template <typename T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
  detail::require(row.rows() == 1 && row.cols() == a.cols(), "add_row: shape mismatch");
  Matrix<T> out = a.value().rowwise() + row.value().row(0);
  return a.tape->record(std::move(out), {a, row}, [a, row](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(a, g);
    if (row.needs_grad()) t.accumulate(row, g.colwise().sum().eval());
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Matrix<T> out = a.value() * s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(a, (g * s).eval());
  });
}

/// Elementwise product with a constant matrix.
template <typename T>
Var<T> hadamard_const(const Var<T>& a, const Matrix<T>& m) {
  detail::require(a.rows() == m.rows() && a.cols() == m.cols(), "hadamard_const: shape mismatch");
  Matrix<T> out = a.value().cwiseProduct(m);
  return a.tape->record(std::move(out), {a}, [a, m](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(a, g.cwiseProduct(m).eval());
  });
}

/// tanh-approximated GELU; smooth everywhere so central differences apply.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  static constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T k = T(0.044715);
  const auto& xv = x.value();
  Matrix<T> th = (c * (xv.array() + k * xv.array().cube())).tanh().matrix();
  Matrix<T> out = (T(0.5) * xv.array() * (T(1) + th.array())).matrix();
  return x.tape->record(std::move(out), {x}, [x, th](Tape<T>& t, const Matrix<T>& g) {
    const auto& xv = x.value();
    auto d = T(0.5) * (T(1) + th.array()) +
             T(0.5) * xv.array() * (T(1) - th.array().square()) * c *
                 (T(1) + T(3) * k * xv.array().square());
    t.accumulate(x, (g.array() * d).matrix().eval());
  });
}

/// Row-wise layer normalisation with learned gain and bias (both 1 x n).
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const Eigen::Index n = xv.cols();
  detail::require(gain.cols() == n && bias.cols() == n, "layer_norm: shape mismatch");
  Eigen::Matrix<T, Eigen::Dynamic, 1> mean = xv.rowwise().mean();
  Matrix<T> centered = xv.colwise() - mean;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std =
      ((centered.array().square().rowwise().sum() / T(n)) + eps).rsqrt().matrix();
  Matrix<T> xhat = centered.array().colwise() * inv_std.array();
  Matrix<T> out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return x.tape->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat, inv_std](Tape<T>& t, const Matrix<T>& g) {
        const Eigen::Index n = xhat.cols();
        if (gain.needs_grad()) t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum().eval());
        if (bias.needs_grad()) t.accumulate(bias, g.colwise().sum().eval());
        if (x.needs_grad()) {
          Matrix<T> dxhat = (g.array().rowwise() * gain.value().row(0).array()).matrix();
          Eigen::Matrix<T, Eigen::Dynamic, 1> m1 = dxhat.rowwise().sum() / T(n);
          Eigen::Matrix<T, Eigen::Dynamic, 1> m2 =
              dxhat.cwiseProduct(xhat).rowwise().sum() / T(n);
          Matrix<T> dx = dxhat.colwise() - m1;
          dx -= (xhat.array().colwise() * m2.array()).matrix();
          dx = (dx.array().colwise() * inv_std.array()).matrix();
          t.accumulate(x, dx);
        }
      });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    detail::require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix<T> out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var<T>> ins(parts.begin(), parts.end());
  return parts.front().tape->record_many(std::move(out), parts, [ins](Tape<T>& t, const Matrix<T>& g) {
    Eigen::Index r = 0;
    for (const auto& p : ins) {
      if (p.needs_grad()) t.accumulate(p, g.middleRows(r, p.rows()).eval());
      r += p.rows();
    }
  });
}

template <typename T>
Var<T> concat_rows(std::initializer_list<Var<T>> parts) {
  return concat_rows(std::span<const Var<T>>(parts.begin(), parts.size()));
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, Eigen::Index row0, Eigen::Index count) {
  detail::require(row0 >= 0 && count >= 0 && row0 + count <= a.rows(), "slice_rows: out of range");
  Matrix<T> out = a.value().middleRows(row0, count);
  return a.tape->record(std::move(out), {a}, [a, row0](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate_rows(a, row0, g);
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, Eigen::Index col0, Eigen::Index count) {
  detail::require(col0 >= 0 && count >= 0 && col0 + count <= a.cols(), "slice_cols: out of range");
  Matrix<T> out = a.value().middleCols(col0, count);
  return a.tape->record(std::move(out), {a}, [a, col0, count](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T> full = Matrix<T>::Zero(a.rows(), a.cols());
    full.middleCols(col0, count) = g;
    t.accumulate(a, full);
  });
}

/// Rows of `table` selected by `ids` (embedding lookup).
template <typename T>
Var<T> gather_rows(const Var<T>& table, std::vector<int> ids) {
  Matrix<T> out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::require(ids[i] >= 0 && ids[i] < table.rows(), "gather_rows: id out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  return table.tape->record(std::move(out), {table}, [table, ids](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T> d = Matrix<T>::Zero(table.rows(), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) d.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(table, d);
  });
}

/// Replaces the listed rows of a by constants; no gradient reaches those rows.
template <typename T>
Var<T> override_rows(const Var<T>& a, std::vector<int> rows, const Matrix<T>& values) {
  detail::require(static_cast<Eigen::Index>(rows.size()) == values.rows() && values.cols() == a.cols(),
                  "override_rows: shape mismatch");
  Matrix<T> out = a.value();
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(rows[i]) = values.row(static_cast<Eigen::Index>(i));
  return a.tape->record(std::move(out), {a}, [a, rows](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T> d = g;
    for (int r : rows) d.row(r).setZero();
    t.accumulate(a, d);
  });
}

/// Sum of 1x1 terms with per-term weights.
template <typename T>
Var<T> weighted_sum(std::span<const Var<T>> terms, std::vector<T> weights) {
  detail::require(terms.size() == weights.size() && !terms.empty(), "weighted_sum: size mismatch");
  T v = T(0);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    detail::require(terms[i].rows() == 1 && terms[i].cols() == 1, "weighted_sum: terms must be 1x1");
    v += weights[i] * terms[i].scalar();
  }
  std::vector<Var<T>> ins(terms.begin(), terms.end());
  return terms.front().tape->record_many(Matrix<T>::Constant(1, 1, v), terms,
                                         [ins, weights](Tape<T>& t, const Matrix<T>& g) {
                                           for (std::size_t i = 0; i < ins.size(); ++i) {
                                             t.accumulate(ins[i], (g * weights[i]).eval());
                                           }
                                         });
}

/// 1x1 value with a caller-supplied Jacobian w.r.t. x (same shape as x).
template <typename T>
Var<T> scalar_with_jacobian(const Var<T>& x, T value, Matrix<T> jacobian) {
  detail::require(jacobian.rows() == x.rows() && jacobian.cols() == x.cols(),
                  "scalar_with_jacobian: shape mismatch");
  return x.tape->record(Matrix<T>::Constant(1, 1, value), {x},
                        [x, jacobian](Tape<T>& t, const Matrix<T>& g) {
                          t.accumulate(x, (jacobian * g(0, 0)).eval());
                        });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean over all elements of (a - target)^2.
template <typename T>
Var<T> mse(const Var<T>& a, const Matrix<T>& target) {
  detail::require(a.rows() == target.rows() && a.cols() == target.cols(), "mse: shape mismatch");
  const T count = T(a.value().size());
  Matrix<T> diff = a.value() - target;
  const T v = diff.squaredNorm() / count;
  return a.tape->record(Matrix<T>::Constant(1, 1, v), {a}, [a, diff, count](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(a, (diff * (T(2) * g(0, 0) / count)).eval());
  });
}

/// Mean token cross entropy: row rows[i] of logits is scored against targets[i].
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::vector<int> rows, std::vector<int> targets) {
  detail::require(rows.size() == targets.size() && !rows.empty(), "cross_entropy: bad targets");
  const auto& z = logits.value();
  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  Matrix<T> probs(n, z.cols());
  T total = T(0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = z.row(rows[i]);
    const T m = row.maxCoeff();
    auto e = (row.array() - m).exp();
    const T s = e.sum();
    probs.row(i) = (e / s).matrix();
    total += -(row(targets[i]) - m - std::log(s));
  }
  const T v = total / T(n);
  return logits.tape->record(
      Matrix<T>::Constant(1, 1, v), {logits},
      [logits, rows, targets, probs](Tape<T>& t, const Matrix<T>& g) {
        const Eigen::Index n = probs.rows();
        Matrix<T> d = Matrix<T>::Zero(logits.rows(), logits.cols());
        const T s = g(0, 0) / T(n);
        for (Eigen::Index i = 0; i < n; ++i) {
          d.row(rows[i]) += probs.row(i) * s;
          d(rows[i], targets[i]) -= s;
        }
        t.accumulate(logits, d);
      });
}

/// Log-probabilities of chosen tokens under softmax(logits / temperature)
/// restricted to `allowed` (vocabulary-sized). Returns an n x 1 column.
template <typename T>
Var<T> token_logprobs(const Var<T>& logits, std::vector<int> rows, std::vector<int> ids,
                      std::vector<bool> allowed, T temperature) {
  detail::require(rows.size() == ids.size(), "token_logprobs: size mismatch");
  detail::require(static_cast<Eigen::Index>(allowed.size()) == logits.cols(), "token_logprobs: allowed size");
  detail::require(temperature > T(0), "token_logprobs: temperature must be positive");
  const auto& z = logits.value();
  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  Matrix<T> probs = Matrix<T>::Zero(n, z.cols());
  Matrix<T> out(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    detail::require(allowed[ids[i]], "token_logprobs: token outside allowed set");
    T m = -std::numeric_limits<T>::infinity();
    for (Eigen::Index v = 0; v < z.cols(); ++v) {
      if (allowed[v]) m = std::max(m, z(rows[i], v) / temperature);
    }
    T s = T(0);
    for (Eigen::Index v = 0; v < z.cols(); ++v) {
      if (allowed[v]) {
        probs(i, v) = std::exp(z(rows[i], v) / temperature - m);
        s += probs(i, v);
      }
    }
    probs.row(i) /= s;
    out(i, 0) = z(rows[i], ids[i]) / temperature - m - std::log(s);
  }
  return logits.tape->record(
      std::move(out), {logits}, [logits, rows, ids, probs, temperature](Tape<T>& t, const Matrix<T>& g) {
        Matrix<T> d = Matrix<T>::Zero(logits.rows(), logits.cols());
        for (Eigen::Index i = 0; i < probs.rows(); ++i) {
          const T gi = g(i, 0) / temperature;
          d.row(rows[i]) -= probs.row(i) * gi;
          d(rows[i], ids[i]) += gi;
        }
        t.accumulate(logits, d);
      });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Multi-head scaled dot-product attention with an explicit allow-matrix.
///
/// q: Lq x d, k/v: Lk x d, heads split the columns evenly. `allow` is Lq x Lk
/// or empty (everything allowed). Forbidden entries get probability exactly 0.
/// When `weights_out` is non-null it receives one Lq x Lk matrix per head.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int n_heads, const BoolMatrix& allow,
                 std::vector<Matrix<T>>* weights_out = nullptr) {
  const Eigen::Index lq = q.rows();
  const Eigen::Index lk = k.rows();
  const Eigen::Index d = q.cols();
  detail::require(k.cols() == d && v.cols() == d && v.rows() == lk, "attention: shape mismatch");
  detail::require(n_heads > 0 && d % n_heads == 0, "attention: heads must divide width");
  detail::require(allow.size() == 0 || (allow.rows() == lq && allow.cols() == lk), "attention: mask shape");
  detail::require(lk > 0, "attention: query row with no visible keys");
  for (Eigen::Index i = 0; i < allow.rows(); ++i) {
    detail::require(allow.row(i).any(), "attention: query row with no visible keys");
  }
  const Eigen::Index dh = d / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  const T neg_inf = -std::numeric_limits<T>::infinity();

  std::vector<Matrix<T>> probs(static_cast<std::size_t>(n_heads));
  Matrix<T> out(lq, d);
  for (int h = 0; h < n_heads; ++h) {
    Matrix<T> s;
    s.noalias() = q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose();
    s *= inv_sqrt;
    if (allow.size() != 0) s = allow.select(s, neg_inf);
    Eigen::Matrix<T, Eigen::Dynamic, 1> mx = s.rowwise().maxCoeff();
    s = (s.colwise() - mx).array().exp().matrix();
    Eigen::Matrix<T, Eigen::Dynamic, 1> denom = s.rowwise().sum();
    s = (s.array().colwise() / denom.array()).matrix();
    out.middleCols(h * dh, dh).noalias() = s * v.value().middleCols(h * dh, dh);
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  if (weights_out != nullptr) *weights_out = probs;

  return q.tape->record(
      std::move(out), {q, k, v},
      [q, k, v, n_heads, dh, inv_sqrt, probs = std::move(probs)](Tape<T>& t, const Matrix<T>& g) {
        Matrix<T> dq = Matrix<T>::Zero(q.rows(), q.cols());
        Matrix<T> dk = Matrix<T>::Zero(k.rows(), k.cols());
        Matrix<T> dv = Matrix<T>::Zero(v.rows(), v.cols());
        for (int h = 0; h < n_heads; ++h) {
          const Matrix<T>& p = probs[static_cast<std::size_t>(h)];
          const auto go = g.middleCols(h * dh, dh);
          dv.middleCols(h * dh, dh).noalias() += p.transpose() * go;
          Matrix<T> dp;
          dp.noalias() = go * v.value().middleCols(h * dh, dh).transpose();
          Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = dp.cwiseProduct(p).rowwise().sum();
          Matrix<T> ds = (p.array() * (dp.array().colwise() - rowdot.array())).matrix();
          ds *= inv_sqrt;
          dq.middleCols(h * dh, dh).noalias() += ds * k.value().middleCols(h * dh, dh);
          dk.middleCols(h * dh, dh).noalias() += ds.transpose() * q.value().middleCols(h * dh, dh);
        }
        t.accumulate(q, dq);
        t.accumulate(k, dk);
        t.accumulate(v, dv);
      });
}

/// Dense layer x * w + b.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add_row(matmul(x, w), b);
}

}  // namespace lastlab
