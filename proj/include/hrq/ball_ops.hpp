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

// Differentiable Poincare-ball operations on row batches, built from the
// tape primitives. Each row of a B x n Var is one point.

#pragma once

#include <cmath>

#include "hrq/autodiff.hpp"
#include "hrq/geometry.hpp"

namespace hrq::ad {

/// Rescales rows lying outside radius (1 - eps)/sqrt(c) back onto it.
inline Var project_ball(Var a, double c) {
  const double limit = 1.0 - kBoundaryEps;
  const double maxn = geo::max_norm(c);
  const Matrix& x = a.value();
  if (!x.allFinite()) throw NumericError("project_ball: non-finite input");
  Matrix out = x;
  std::vector<Eigen::Index> hit;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double sq = x.row(i).squaredNorm();
    if (c * sq >= limit * limit) {
      out.row(i) *= maxn / std::sqrt(sq);
      hit.push_back(i);
    }
  }
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, hit, maxn](Tape& t, const Matrix& g) {
    if (hit.empty()) {
      t.accumulate(ia, g);
      return;
    }
    Matrix d = g;
    const Matrix& x = t.value(ia);
    for (Eigen::Index i : hit) {
      const double n = x.row(i).norm();
      const Eigen::RowVectorXd u = x.row(i) / n;
      d.row(i) = (maxn / n) * (g.row(i) - u * u.dot(g.row(i)));
    }
    t.accumulate(ia, d);
  });
}

/// Row-wise Mobius addition x (+)_c y, projected.
inline Var mobius_add(Var x, Var y, double c) {
  const Var xy = row_dot(x, y);
  const Var x2 = row_sqnorm(x);
  const Var y2 = row_sqnorm(y);
  // (1 + 2c<x,y> + c|y|^2) x + (1 - c|x|^2) y over 1 + 2c<x,y> + c^2|x|^2|y|^2
  const Var coef_x = add_scalar(scale(xy, 2.0 * c) + scale(y2, c), 1.0);
  const Var coef_y = add_scalar(scale(x2, -c), 1.0);
  const Var den = add_scalar(scale(xy, 2.0 * c) + scale(mul(x2, y2), c * c), 1.0);
  const Var num = scale_rows(x, coef_x) + scale_rows(y, coef_y);
  return project_ball(scale_rows(num, reciprocal(den)), c);
}

inline Var mobius_sub(Var x, Var y, double c) { return mobius_add(x, -y, c); }

/// Row-wise exp map at the origin, projected.
inline Var expmap0(Var v, double c) {
  const double sc = std::sqrt(c);
  const Var ratio = tanh_over(scale(row_norm(v), sc));
  return project_ball(scale_rows(v, ratio), c);
}

/// Row-wise log map at the origin.
inline Var logmap0(Var y, double c) {
  const double sc = std::sqrt(c);
  const Var ratio = artanh_over(scale(row_norm(y), sc));
  return scale_rows(y, ratio);
}

/// Row-wise geodesic distance, B x 1:
/// (1/sqrt(c)) arcosh(1 + 2c|u-v|^2 / ((1 - c|u|^2)(1 - c|v|^2))).
inline Var distance(Var u, Var v, double c) {
  const Var diff2 = row_sqnorm(u - v);
  const Var a = add_scalar(scale(row_sqnorm(u), -c), 1.0);
  const Var b = add_scalar(scale(row_sqnorm(v), -c), 1.0);
  const Var delta = scale(mul(diff2, reciprocal(mul(a, b))), 2.0 * c);
  return scale(acosh1p(delta), 1.0 / std::sqrt(c));
}

/// Row-wise Euclidean distance, B x 1.
inline Var euclidean_distance(Var u, Var v) { return row_norm(u - v); }

/// exp_0(ReLU(log_0(x))).
inline Var hrelu(Var x, double c) { return expmap0(relu(logmap0(x, c)), c); }

}  // namespace hrq::ad
