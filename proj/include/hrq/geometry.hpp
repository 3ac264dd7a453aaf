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

// Poincare ball geometry: Mobius addition, distance, exponential and
// logarithmic maps, and boundary-safe projection.
//
// Two layers are provided. The `geo` namespace works on raw Eigen vectors
// plus a curvature scalar and is what the rest of the library calls in inner
// loops. The strong types `Curvature`, `BallPoint` and `TangentVector` wrap
// it with the domain invariants checked at construction.

#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "hrq/common.hpp"

namespace hrq {

/// Every output point is kept at radius at most (1 - kBoundaryEps) / sqrt(c).
inline constexpr double kBoundaryEps = 1e-5;
/// artanh arguments are clamped to [-kArtanhLimit, kArtanhLimit].
inline constexpr double kArtanhLimit = 1.0 - 1e-15;

namespace geo {

inline double artanh_clamped(double x) {
  return std::atanh(std::clamp(x, -kArtanhLimit, kArtanhLimit));
}

/// arcosh(1 + delta) for delta >= 0, accurate for small delta.
inline double acosh1p(double delta) {
  delta = std::max(delta, 0.0);
  return std::log1p(delta + std::sqrt(delta * (delta + 2.0)));
}

inline double max_norm(double c) { return (1.0 - kBoundaryEps) / std::sqrt(c); }

inline Vector project(const Vector& x, double c) {
  if (!x.allFinite()) throw NumericError("project_to_ball: non-finite input");
  const double limit = 1.0 - kBoundaryEps;
  const double sq = x.squaredNorm();
  if (c * sq < limit * limit) return x;
  return x * (max_norm(c) / std::sqrt(sq));
}

inline double conformal_factor(const Vector& x, double c) {
  return 2.0 / (1.0 - c * x.squaredNorm());
}

/// Mobius addition without the output projection.
inline Vector mobius_add_raw(const Vector& x, const Vector& y, double c) {
  const double xy = x.dot(y);
  const double x2 = x.squaredNorm();
  const double y2 = y.squaredNorm();
  const double num_x = 1.0 + 2.0 * c * xy + c * y2;
  const double num_y = 1.0 - c * x2;
  const double den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
  return (num_x * x + num_y * y) / den;
}

inline Vector mobius_add(const Vector& x, const Vector& y, double c) {
  return project(mobius_add_raw(x, y, c), c);
}

inline Vector mobius_sub(const Vector& x, const Vector& y, double c) {
  return mobius_add(x, -y, c);
}

inline double distance(const Vector& u, const Vector& v, double c) {
  const double a = 1.0 - c * u.squaredNorm();
  const double b = 1.0 - c * v.squaredNorm();
  const double delta = 2.0 * c * (u - v).squaredNorm() / (a * b);
  return acosh1p(delta) / std::sqrt(c);
}

inline Vector expmap(const Vector& x, const Vector& v, double c) {
  const double n = v.stableNorm();
  if (n == 0.0) return x;
  const double sc = std::sqrt(c);
  const Vector w = (std::tanh(sc * conformal_factor(x, c) * n / 2.0) / sc) * (v / n);
  return mobius_add(x, w, c);
}

inline Vector logmap(const Vector& x, const Vector& y, double c) {
  if (x == y) return Vector::Zero(x.size());
  const Vector z = mobius_add_raw(-x, y, c);
  const double n = z.norm();
  if (n == 0.0) return Vector::Zero(x.size());
  const double sc = std::sqrt(c);
  return (2.0 / (sc * conformal_factor(x, c)) * artanh_clamped(sc * n) / n) * z;
}

inline Vector expmap0(const Vector& v, double c) {
  const double n = v.norm();
  if (n == 0.0) return Vector::Zero(v.size());
  const double sc = std::sqrt(c);
  return project((std::tanh(sc * n) / (sc * n)) * v, c);
}

inline Vector logmap0(const Vector& y, double c) {
  const double n = y.norm();
  if (n == 0.0) return Vector::Zero(y.size());
  const double sc = std::sqrt(c);
  return (artanh_clamped(sc * n) / (sc * n)) * y;
}

inline Vector mobius_scalar_mul(double r, const Vector& x, double c) {
  return expmap0(r * logmap0(x, c), c);
}

}  // namespace geo

// ---------------------------------------------------------------------------

/// Curvature magnitude c > 0; the ball has sectional curvature -c.
class Curvature {
 public:
  explicit Curvature(double c) : c_(c) {
    if (!(c > 0.0) || !std::isfinite(c)) {
      throw UsageError("curvature must be positive and finite, got " + std::to_string(c));
    }
  }
  double value() const { return c_; }
  double sqrt() const { return std::sqrt(c_); }
  friend bool operator==(Curvature a, Curvature b) { return a.c_ == b.c_; }

 private:
  double c_;
};

/// A point strictly inside the Poincare ball, c * |x|^2 < 1.
class BallPoint {
 public:
  /// Wraps `coords`; throws UsageError when they are not strictly inside.
  BallPoint(Vector coords, Curvature c) : coords_(std::move(coords)), c_(c) {
    if (!coords_.allFinite()) throw NumericError("BallPoint: non-finite coordinates");
    if (c_.value() * coords_.squaredNorm() >= 1.0) {
      throw UsageError("BallPoint: coordinates outside the ball");
    }
  }

  static BallPoint origin(Eigen::Index dim, Curvature c) { return {Vector::Zero(dim), c}; }

  const Vector& coords() const { return coords_; }
  Curvature curvature() const { return c_; }
  Eigen::Index dim() const { return coords_.size(); }

 private:
  Vector coords_;
  Curvature c_;
};

struct TangentVector {
  TangentVector(Vector v, BallPoint at) : coords(std::move(v)), basepoint(std::move(at)) {
    if (coords.size() != basepoint.dim()) {
      throw UsageError("TangentVector: dimension differs from basepoint");
    }
  }
  Vector coords;
  BallPoint basepoint;
};

namespace detail {
inline void check_compatible(const BallPoint& x, const BallPoint& y) {
  if (x.dim() != y.dim()) throw UsageError("ball points differ in dimension");
  if (!(x.curvature() == y.curvature())) throw UsageError("ball points differ in curvature");
}
}  // namespace detail

inline BallPoint project_to_ball(const Vector& x, Curvature c) {
  return {geo::project(x, c.value()), c};
}

inline double conformal_factor(const BallPoint& x) {
  return geo::conformal_factor(x.coords(), x.curvature().value());
}

inline BallPoint negate(const BallPoint& x) { return {-x.coords(), x.curvature()}; }

inline BallPoint mobius_add(const BallPoint& x, const BallPoint& y) {
  detail::check_compatible(x, y);
  return {geo::mobius_add(x.coords(), y.coords(), x.curvature().value()), x.curvature()};
}

inline BallPoint mobius_sub(const BallPoint& x, const BallPoint& y) {
  return mobius_add(x, negate(y));
}

inline double distance(const BallPoint& u, const BallPoint& v) {
  detail::check_compatible(u, v);
  return geo::distance(u.coords(), v.coords(), u.curvature().value());
}

inline BallPoint exp_map(const TangentVector& v) {
  const BallPoint& x = v.basepoint;
  return {geo::expmap(x.coords(), v.coords, x.curvature().value()), x.curvature()};
}

inline TangentVector log_map(const BallPoint& x, const BallPoint& y) {
  detail::check_compatible(x, y);
  return {geo::logmap(x.coords(), y.coords(), x.curvature().value()), x};
}

inline BallPoint mobius_scalar_mul(double r, const BallPoint& x) {
  return {geo::mobius_scalar_mul(r, x.coords(), x.curvature().value()), x.curvature()};
}

}  // namespace hrq
