/*
 * Copyright 2026 The HRQ Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Dynamic reverse-mode differentiation over dense double matrices.
//
// A Tape records one forward pass. Each recorded node keeps its value and a
// closure that pushes the incoming adjoint to its parents; backward() walks
// the nodes in exact reverse order of recording. Batched quantities are
// stored one item per row.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "hrq/common.hpp"
#include "hrq/geometry.hpp"

namespace hrq {

enum class Manifold { kEuclidean, kBall };

/// Trainable tensor. Ball parameters hold one Poincare-ball point per row.
struct Parameter {
  Parameter() = default;
  Parameter(std::string n, Matrix v, Manifold m = Manifold::kEuclidean, double c = 1.0)
      : name(std::move(n)), value(std::move(v)), manifold(m), curvature(c) {}

  std::string name;
  Matrix value;
  Matrix grad;  // empty until the first backward pass touches it
  Manifold manifold = Manifold::kEuclidean;
  double curvature = 1.0;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  bool has_grad() const { return grad.size() == value.size() && grad.size() > 0; }
};

namespace ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  /// With `grad_enabled` false nothing is kept for backward (inference).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr, nullptr); }

  Var param(Parameter& p) { return push(p.value, grad_enabled_, nullptr, &p); }

  /// Records a derived node. `fn` runs during backward only if some parent
  /// requires a gradient.
  Var record(Matrix value, std::initializer_list<Var> parents, Backward fn) {
    bool needs = false;
    for (const Var& p : parents) {
      check_owner(p);
      needs = needs || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr, nullptr);
  }

  Var record(Matrix value, const std::vector<Var>& parents, Backward fn) {
    bool needs = false;
    for (const Var& p : parents) {
      check_owner(p);
      needs = needs || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr, nullptr);
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Mutable adjoint of `id`, zero-initialised on first access.
  Matrix& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Adjoint of a node after backward(); empty when nothing reached it.
  const Matrix& grad(Var v) const { return nodes_[v.id()].grad; }

  /// Reverse sweep from a 1x1 loss. Parameter gradients are added into
  /// Parameter::grad.
  void backward(Var loss) {
    check_owner(loss);
    const Matrix& lv = nodes_[loss.id()].value;
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw UsageError("backward: loss must be a 1x1 scalar node");
    }
    if (!grad_enabled_) throw UsageError("backward: tape was created without gradients");
    nodes_[loss.id()].grad = Matrix::Ones(1, 1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.backward) {
        Matrix g = std::move(n.grad);
        n.backward(*this, g);
        n.grad = std::move(g);
      }
      if (n.param != nullptr) {
        if (n.param->has_grad()) {
          n.param->grad += n.grad;
        } else {
          n.param->grad = n.grad;
        }
      }
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
    Parameter* param = nullptr;
  };

  Var push(Matrix value, bool needs, Backward fn, Parameter* p) {
    nodes_.push_back(Node{std::move(value), Matrix(), needs && grad_enabled_, std::move(fn), p});
    return Var(this, nodes_.size() - 1);
  }

  void check_owner(Var v) const {
    if (v.tape_ != this) throw UsageError("Var belongs to a different tape");
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

namespace detail {
inline void same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw UsageError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
  }
}
inline void col_vector(Var a, Eigen::Index rows, const char* op) {
  if (a.cols() != 1 || a.rows() != rows) throw UsageError(std::string(op) + ": expected column of length " + std::to_string(rows));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops

inline Var add(Var a, Var b) {
  detail::same_shape(a, b, "add");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() + b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::same_shape(a, b, "sub");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() - b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

inline Var mul(Var a, Var b) {
  detail::same_shape(a, b, "mul");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b},
                          [ia, ib](Tape& t, const Matrix& g) {
                            if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                            if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                          });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

inline Var scale(Var a, double s) {
  const auto ia = a.id();
  return a.tape()->record(a.value() * s, {a},
                          [ia, s](Tape& t, const Matrix& g) { t.accumulate(ia, g * s); });
}

inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator-(Var a) { return scale(a, -1.0); }

inline Var add_scalar(Var a, double s) {
  const auto ia = a.id();
  return a.tape()->record(a.value().array() + s, {a},
                          [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g); });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops. `df(x, y)` is the derivative given input and output.

template <typename F, typename DF>
Var map_unary(Var a, F f, DF df) {
  const auto ia = a.id();
  Matrix out = a.value().unaryExpr(f);
  Tape* tape = a.tape();
  const auto io = tape->size();
  return tape->record(std::move(out), {a}, [ia, io, df](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(ia);
    const Matrix& y = t.value(io);
    Matrix d(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) d(i) = g(i) * df(x(i), y(i));
    t.accumulate(ia, d);
  });
}

inline Var tanh(Var a) {
  return map_unary(a, [](double x) { return std::tanh(x); },
                   [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Var a) {
  return map_unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                   [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var reciprocal(Var a) {
  return map_unary(a, [](double x) { return 1.0 / x; },
                   [](double, double y) { return -y * y; });
}

inline Var square(Var a) {
  return map_unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// artanh with its argument clamped to [-1 + 1e-15, 1 - 1e-15].
inline Var artanh(Var a) {
  return map_unary(
      a, [](double x) { return std::atanh(std::clamp(x, -kArtanhLimit, kArtanhLimit)); },
      [](double x, double) { return std::abs(x) > kArtanhLimit ? 0.0 : 1.0 / (1.0 - x * x); });
}

/// arcosh(1 + delta), delta clamped to [0, inf).
inline Var acosh1p(Var delta) {
  return map_unary(
      delta,
      [](double d) {
        d = std::max(d, 0.0);
        return std::log1p(d + std::sqrt(d * (d + 2.0)));
      },
      [](double d, double) {
        if (d < 0.0) return 0.0;
        return 1.0 / std::sqrt(std::max(d * (d + 2.0), 1e-300));
      });
}

/// tanh(x) / x, continuous at 0.
inline Var tanh_over(Var a) {
  return map_unary(
      a,
      [](double x) {
        if (std::abs(x) < 1e-4) return 1.0 - x * x / 3.0 + 2.0 * x * x * x * x / 15.0;
        return std::tanh(x) / x;
      },
      [](double x, double y) {
        if (std::abs(x) < 1e-4) return -2.0 * x / 3.0 + 8.0 * x * x * x / 15.0;
        const double th = std::tanh(x);
        return ((1.0 - th * th) - y) / x;
      });
}

/// artanh(x) / x with clamped argument, continuous at 0.
inline Var artanh_over(Var a) {
  return map_unary(
      a,
      [](double x) {
        if (std::abs(x) < 1e-4) return 1.0 + x * x / 3.0 + x * x * x * x / 5.0;
        return std::atanh(std::clamp(x, -kArtanhLimit, kArtanhLimit)) / x;
      },
      [](double x, double y) {
        if (std::abs(x) < 1e-4) return 2.0 * x / 3.0 + 4.0 * x * x * x / 5.0;
        if (std::abs(x) > kArtanhLimit) return -y / x;
        return (1.0 / (1.0 - x * x) - y) / x;
      });
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions

inline Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw UsageError("matmul: inner dimensions differ");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() * b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

/// a * b^T
inline Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw UsageError("matmul_nt: inner dimensions differ");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() * b.value().transpose(), {a, b},
                          [ia, ib](Tape& t, const Matrix& g) {
                            if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
                            if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
                          });
}

inline Var sum(Var a) {
  const auto ia = a.id();
  const auto r = a.rows(), c = a.cols();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->record(std::move(out), {a}, [ia, r, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

inline Var mean(Var a) {
  if (a.value().size() == 0) throw UsageError("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

/// B x n -> B x 1
inline Var row_sum(Var a) {
  const auto ia = a.id();
  const auto c = a.cols();
  return a.tape()->record(a.value().rowwise().sum(), {a}, [ia, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.replicate(1, c));
  });
}

/// Squared Euclidean norm of each row, B x 1.
inline Var row_sqnorm(Var a) {
  const auto ia = a.id();
  return a.tape()->record(a.value().rowwise().squaredNorm(), {a},
                          [ia](Tape& t, const Matrix& g) {
                            const Matrix& x = t.value(ia);
                            t.accumulate(ia, 2.0 * (x.array().colwise() * g.col(0).array()).matrix());
                          });
}

/// Row-wise inner product, B x 1.
inline Var row_dot(Var a, Var b) {
  detail::same_shape(a, b, "row_dot");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value().cwiseProduct(b.value()).rowwise().sum(), {a, b},
                          [ia, ib](Tape& t, const Matrix& g) {
                            if (t.requires_grad(ia)) {
                              t.accumulate(ia, (t.value(ib).array().colwise() * g.col(0).array()).matrix());
                            }
                            if (t.requires_grad(ib)) {
                              t.accumulate(ib, (t.value(ia).array().colwise() * g.col(0).array()).matrix());
                            }
                          });
}

/// Euclidean norm of each row, B x 1. The gradient at a zero row is zero.
inline Var row_norm(Var a) {
  const auto ia = a.id();
  Tape* tape = a.tape();
  const auto io = tape->size();
  return tape->record(a.value().rowwise().norm(), {a}, [ia, io](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(ia);
    const Matrix& n = t.value(io);
    Matrix d = Matrix::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (n(i, 0) > 0.0) d.row(i) = x.row(i) * (g(i, 0) / n(i, 0));
    }
    t.accumulate(ia, d);
  });
}

// ---------------------------------------------------------------------------
// Broadcasting

/// Multiplies row i of `a` (B x n) by col(i) (B x 1).
inline Var scale_rows(Var a, Var col) {
  detail::col_vector(col, a.rows(), "scale_rows");
  const auto ia = a.id(), ic = col.id();
  Matrix out = (a.value().array().colwise() * col.value().col(0).array()).matrix();
  return a.tape()->record(std::move(out), {a, col}, [ia, ic](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) {
      t.accumulate(ia, (g.array().colwise() * t.value(ic).col(0).array()).matrix());
    }
    if (t.requires_grad(ic)) t.accumulate(ic, g.cwiseProduct(t.value(ia)).rowwise().sum());
  });
}

/// Adds a 1 x n row to every row of `a`.
inline Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw UsageError("add_row: expected 1 x n row");
  const auto ia = a.id(), ir = row.id();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(out), {a, row}, [ia, ir](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

/// Multiplies every row of `a` elementwise by a 1 x n row.
inline Var mul_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw UsageError("mul_row: expected 1 x n row");
  const auto ia = a.id(), ir = row.id();
  Matrix out = (a.value().array().rowwise() * row.value().row(0).array()).matrix();
  return a.tape()->record(std::move(out), {a, row}, [ia, ir](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) {
      t.accumulate(ia, (g.array().rowwise() * t.value(ir).row(0).array()).matrix());
    }
    if (t.requires_grad(ir)) t.accumulate(ir, g.cwiseProduct(t.value(ia)).colwise().sum());
  });
}

// ---------------------------------------------------------------------------
// Indexing and reshaping

/// Rows `idx` of `a`, in order; repeated indices allowed.
inline Var gather_rows(Var a, std::vector<Eigen::Index> idx) {
  const Matrix& av = a.value();
  Matrix out(static_cast<Eigen::Index>(idx.size()), av.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= av.rows()) throw UsageError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = av.row(idx[i]);
  }
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, idx = std::move(idx)](Tape& t, const Matrix& g) {
    if (!t.requires_grad(ia)) return;
    Matrix& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

/// Column-major reshape.
inline Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw UsageError("reshape: size mismatch");
  const auto ia = a.id();
  const auto r = a.rows(), c = a.cols();
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return a.tape()->record(std::move(out), {a}, [ia, r, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, Eigen::Map<const Matrix>(g.data(), r, c));
  });
}

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index len) {
  if (start < 0 || len < 0 || start + len > a.cols()) throw UsageError("slice_cols: out of range");
  const auto ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return a.tape()->record(a.value().middleCols(start, len), {a},
                          [ia, r, c, start, len](Tape& t, const Matrix& g) {
                            if (!t.requires_grad(ia)) return;
                            t.grad_buffer(ia).middleCols(start, len) += g;
                            (void)r;
                            (void)c;
                          });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: nothing to concatenate");
  const auto rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw UsageError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> layout;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    layout.emplace_back(p.id(), off);
    off += p.cols();
  }
  return parts[0].tape()->record(std::move(out), parts, [layout](Tape& t, const Matrix& g) {
    for (const auto& [id, o] : layout) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleCols(o, t.value(id).cols()));
    }
  });
}

/// out(i) = a(i, idx[i]); B x 1.
inline Var pick(Var a, std::vector<Eigen::Index> idx) {
  if (static_cast<Eigen::Index>(idx.size()) != a.rows()) throw UsageError("pick: one index per row");
  Matrix out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.cols()) throw UsageError("pick: index out of range");
    out(i, 0) = a.value()(i, idx[i]);
  }
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, idx = std::move(idx)](Tape& t, const Matrix& g) {
    if (!t.requires_grad(ia)) return;
    Matrix& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < idx.size(); ++i) ga(static_cast<Eigen::Index>(i), idx[i]) += g(static_cast<Eigen::Index>(i), 0);
  });
}

// ---------------------------------------------------------------------------
// Gradient routing

/// Same value, no gradient flows back (sg[.]).
inline Var stop_gradient(Var a) { return a.tape()->constant(a.value()); }

/// Forward value of `y`; the adjoint passes unchanged to `x` (identity
/// Jacobian). Nothing reaches `y`.
inline Var straight_through(Var x, Var y) {
  detail::same_shape(x, y, "straight_through");
  const auto ix = x.id();
  return x.tape()->record(y.value(), {x}, [ix](Tape& t, const Matrix& g) { t.accumulate(ix, g); });
}

// ---------------------------------------------------------------------------
// Normalisation and softmax

inline Var log_softmax_rows(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    const double lse = m + std::log((x.row(i).array() - m).exp().sum());
    out.row(i) = x.row(i).array() - lse;
  }
  const auto ia = a.id();
  Tape* tape = a.tape();
  const auto io = tape->size();
  return tape->record(std::move(out), {a}, [ia, io](Tape& t, const Matrix& g) {
    const Matrix p = t.value(io).array().exp();
    const Eigen::VectorXd gs = g.rowwise().sum();
    t.accumulate(ia, g - (p.array().colwise() * gs.array()).matrix());
  });
}

/// Per-row standardisation (no affine part), population variance.
inline Var layer_norm_rows(Var a, double eps = 1e-5) {
  const Matrix& x = a.value();
  const auto n = static_cast<double>(x.cols());
  Matrix out(x.rows(), x.cols());
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().sum() / n;
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    out.row(i) = (x.row(i).array() - mu) * inv_std(i);
  }
  const auto ia = a.id();
  Tape* tape = a.tape();
  const auto io = tape->size();
  return tape->record(std::move(out), {a}, [ia, io, inv_std, n](Tape& t, const Matrix& g) {
    const Matrix& xh = t.value(io);
    Matrix d(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const double gm = g.row(i).mean();
      const double gx = g.row(i).dot(xh.row(i)) / n;
      d.row(i) = inv_std(i) * (g.row(i).array() - gm - xh.row(i).array() * gx);
    }
    t.accumulate(ia, d);
  });
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention over packed variable-length
// sequences. Query sequence b occupies rows q_spans[b] of `q`; it attends to
// rows kv_spans[b] of `k` and `v`. Key spans may overlap (shared memory).

struct Span {
  Eigen::Index offset = 0;
  Eigen::Index length = 0;
};

inline Var attention(Var q, Var k, Var v, const std::vector<Span>& q_spans,
                     const std::vector<Span>& kv_spans, int heads, bool causal) {
  if (q_spans.size() != kv_spans.size()) throw UsageError("attention: span lists differ in length");
  if (k.rows() != v.rows() || q.cols() != k.cols() || k.cols() != v.cols()) {
    throw UsageError("attention: q/k/v shapes disagree");
  }
  if (heads <= 0 || q.cols() % heads != 0) throw UsageError("attention: width not divisible by heads");
  const Eigen::Index dh = q.cols() / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  Matrix out = Matrix::Zero(Q.rows(), Q.cols());
  auto probs = std::make_shared<std::vector<Matrix>>();
  probs->reserve(q_spans.size() * static_cast<std::size_t>(heads));
  for (std::size_t b = 0; b < q_spans.size(); ++b) {
    const Span qs = q_spans[b], ks = kv_spans[b];
    if (qs.offset + qs.length > Q.rows() || ks.offset + ks.length > K.rows()) {
      throw UsageError("attention: span out of range");
    }
    for (int h = 0; h < heads; ++h) {
      Matrix s = Q.block(qs.offset, h * dh, qs.length, dh) * K.block(ks.offset, h * dh, ks.length, dh).transpose() * scl;
      for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const Eigen::Index visible = causal ? std::min(ks.length, i + 1 + (ks.length - qs.length)) : ks.length;
        double m = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < visible; ++j) m = std::max(m, s(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
          s(i, j) = j < visible ? std::exp(s(i, j) - m) : 0.0;
          z += s(i, j);
        }
        s.row(i) /= z;
      }
      out.block(qs.offset, h * dh, qs.length, dh) = s * V.block(ks.offset, h * dh, ks.length, dh);
      probs->push_back(std::move(s));
    }
  }
  const auto iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape()->record(
      std::move(out), {q, k, v},
      [iq, ik, iv, q_spans, kv_spans, heads, dh, scl, probs](Tape& t, const Matrix& g) {
        const Matrix& Qv = t.value(iq);
        const Matrix& Kv = t.value(ik);
        const Matrix& Vv = t.value(iv);
        Matrix gq = Matrix::Zero(Qv.rows(), Qv.cols());
        Matrix gk = Matrix::Zero(Kv.rows(), Kv.cols());
        Matrix gv = Matrix::Zero(Vv.rows(), Vv.cols());
        std::size_t p = 0;
        for (std::size_t b = 0; b < q_spans.size(); ++b) {
          const Span qs = q_spans[b], ks = kv_spans[b];
          for (int h = 0; h < heads; ++h, ++p) {
            const Matrix& P = (*probs)[p];
            const auto dO = g.block(qs.offset, h * dh, qs.length, dh);
            const auto Vh = Vv.block(ks.offset, h * dh, ks.length, dh);
            gv.block(ks.offset, h * dh, ks.length, dh).noalias() += P.transpose() * dO;
            Matrix dP = dO * Vh.transpose();
            const Eigen::VectorXd rs = dP.cwiseProduct(P).rowwise().sum();
            Matrix dS = P.cwiseProduct((dP.colwise() - rs));
            gq.block(qs.offset, h * dh, qs.length, dh).noalias() +=
                scl * dS * Kv.block(ks.offset, h * dh, ks.length, dh);
            gk.block(ks.offset, h * dh, ks.length, dh).noalias() +=
                scl * dS.transpose() * Qv.block(qs.offset, h * dh, qs.length, dh);
          }
        }
        t.accumulate(iq, gq);
        t.accumulate(ik, gk);
        t.accumulate(iv, gv);
      });
}

}  // namespace ad
}  // namespace hrq
