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

// Feed-forward layers (Euclidean and tangent-space hyperbolic), optimizers
// and parameter serialization.

#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hrq/autodiff.hpp"
#include "hrq/ball_ops.hpp"
#include "hrq/geometry.hpp"

namespace hrq {

using json = nlohmann::json;

enum class Activation { kNone, kRelu, kHRelu };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kHRelu: return "hrelu";
    default: return "none";
  }
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "hrelu") return Activation::kHRelu;
  if (s == "none") return Activation::kNone;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

struct LayerSpec {
  Eigen::Index in = 0;
  Eigen::Index out = 0;
  Activation activation = Activation::kNone;
  Flavor flavor = Flavor::kEuclidean;

  void validate() const {
    if (in <= 0 || out <= 0) throw ConfigError("LayerSpec: dimensions must be positive");
    if (activation == Activation::kHRelu && flavor != Flavor::kHyperbolic) {
      throw ConfigError("LayerSpec: hrelu requires a hyperbolic layer");
    }
    if (activation == Activation::kRelu && flavor == Flavor::kHyperbolic) {
      throw ConfigError("LayerSpec: hyperbolic layers use hrelu, not relu");
    }
  }
};

// ---------------------------------------------------------------------------
// Matrix / Parameter JSON. Doubles are written in shortest round-trip decimal
// form, so a save/load cycle reproduces every bit.

inline json matrix_to_json(const Matrix& m) {
  json data = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

inline Matrix matrix_from_json(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
    throw DataError("matrix JSON: data length does not match rows*cols");
  }
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j2 = 0; j2 < cols; ++j2) m(i, j2) = data[static_cast<std::size_t>(i * cols + j2)].get<double>();
  }
  return m;
}

inline json parameter_to_json(const Parameter& p) {
  return {{"name", p.name},
          {"manifold", p.manifold == Manifold::kBall ? "ball" : "euclidean"},
          {"curvature", p.curvature},
          {"value", matrix_to_json(p.value)}};
}

inline Parameter parameter_from_json(const json& j) {
  Parameter p;
  p.name = j.at("name").get<std::string>();
  p.manifold = j.at("manifold").get<std::string>() == "ball" ? Manifold::kBall : Manifold::kEuclidean;
  p.curvature = j.at("curvature").get<double>();
  p.value = matrix_from_json(j.at("value"));
  return p;
}

// ---------------------------------------------------------------------------
// Layers

/// Affine layer. Weight is in x out (rows act on row vectors); bias 1 x out.
/// For hyperbolic layers the bias is a Ball parameter (one point) and the
/// weight stays Euclidean because it acts on tangent vectors.
struct DenseLayer {
  LayerSpec spec;
  double curvature = 1.0;
  Parameter weight;
  Parameter bias;

  static DenseLayer create(const LayerSpec& spec, double c, Rng& rng, const std::string& name) {
    spec.validate();
    DenseLayer l;
    l.spec = spec;
    l.curvature = c;
    const double bound = std::sqrt(6.0 / static_cast<double>(spec.in + spec.out));
    Matrix w(spec.in, spec.out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = uniform(rng, -bound, bound);
    l.weight = Parameter(name + ".weight", std::move(w));
    l.bias = Parameter(name + ".bias", Matrix::Zero(1, spec.out),
                       spec.flavor == Flavor::kHyperbolic ? Manifold::kBall : Manifold::kEuclidean, c);
    return l;
  }

  std::vector<Parameter*> parameters() { return {&weight, &bias}; }
};

/// activation(x W + b), rows of x are inputs.
inline ad::Var linear_forward(ad::Tape& tape, DenseLayer& layer, ad::Var x) {
  if (x.cols() != layer.spec.in) throw UsageError("linear_forward: input width mismatch");
  ad::Var y = ad::add_row(ad::matmul(x, tape.param(layer.weight)), tape.param(layer.bias));
  if (layer.spec.activation == Activation::kRelu) y = ad::relu(y);
  return y;
}

/// exp_0(log_0(x) W) (+) b, then HReLU if requested. Rows of x are ball points.
inline ad::Var hyperbolic_linear_forward(ad::Tape& tape, DenseLayer& layer, ad::Var x) {
  if (x.cols() != layer.spec.in) throw UsageError("hyperbolic_linear_forward: input width mismatch");
  const double c = layer.curvature;
  const ad::Var mx = ad::expmap0(ad::matmul(ad::logmap0(x, c), tape.param(layer.weight)), c);
  const ad::Var b = ad::gather_rows(tape.param(layer.bias), std::vector<Eigen::Index>(static_cast<std::size_t>(x.rows()), 0));
  ad::Var y = ad::mobius_add(mx, b, c);
  if (layer.spec.activation == Activation::kHRelu) y = ad::hrelu(y, c);
  return y;
}

inline ad::Var layer_forward(ad::Tape& tape, DenseLayer& layer, ad::Var x) {
  return layer.spec.flavor == Flavor::kHyperbolic ? hyperbolic_linear_forward(tape, layer, x)
                                                  : linear_forward(tape, layer, x);
}

/// Stack of dense layers of one flavor.
struct Network {
  std::vector<DenseLayer> layers;

  /// dims = {in, hidden..., out}; hidden layers use (H)ReLU, the last none.
  static Network mlp(const std::vector<Eigen::Index>& dims, Flavor flavor, double c, Rng& rng,
                     const std::string& name) {
    if (dims.size() < 2) throw ConfigError("Network::mlp: need at least input and output dims");
    Network net;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      const bool last = i + 2 == dims.size();
      const Activation act = last ? Activation::kNone
                                  : (flavor == Flavor::kHyperbolic ? Activation::kHRelu : Activation::kRelu);
      net.layers.push_back(DenseLayer::create({dims[i], dims[i + 1], act, flavor}, c, rng,
                                              name + "." + std::to_string(i)));
    }
    return net;
  }

  Eigen::Index in_dim() const { return layers.front().spec.in; }
  Eigen::Index out_dim() const { return layers.back().spec.out; }

  ad::Var forward(ad::Tape& tape, ad::Var x) {
    for (auto& l : layers) x = layer_forward(tape, l, x);
    return x;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  json to_json() const {
    json arr = json::array();
    for (const auto& l : layers) {
      arr.push_back({{"in", l.spec.in},
                     {"out", l.spec.out},
                     {"activation", to_string(l.spec.activation)},
                     {"flavor", to_string(l.spec.flavor)},
                     {"curvature", l.curvature},
                     {"weight", parameter_to_json(l.weight)},
                     {"bias", parameter_to_json(l.bias)}});
    }
    return arr;
  }

  static Network from_json(const json& j) {
    Network net;
    for (const auto& lj : j) {
      DenseLayer l;
      l.spec = {lj.at("in").get<Eigen::Index>(), lj.at("out").get<Eigen::Index>(),
                activation_from_string(lj.at("activation").get<std::string>()),
                flavor_from_string(lj.at("flavor").get<std::string>())};
      l.spec.validate();
      l.curvature = lj.at("curvature").get<double>();
      l.weight = parameter_from_json(lj.at("weight"));
      l.bias = parameter_from_json(lj.at("bias"));
      if (l.weight.value.rows() != l.spec.in || l.weight.value.cols() != l.spec.out) {
        throw DataError("checkpoint: weight shape disagrees with layer spec");
      }
      net.layers.push_back(std::move(l));
    }
    if (net.layers.empty()) throw DataError("checkpoint: empty network");
    return net;
  }
};

// ---------------------------------------------------------------------------
// Optimizers. Each step consumes and clears the accumulated gradients.

/// p <- p - lr * g.
inline void sgd_step(std::span<Parameter* const> params, double lr) {
  for (Parameter* p : params) {
    if (p->has_grad()) p->value -= lr * p->grad;
    p->grad.resize(0, 0);
  }
}

/// Riemannian SGD on the ball, row by row: the ambient gradient is rescaled
/// by the inverse metric (1 - c|p|^2)^2 / 4 and the step taken along the
/// exponential map at p. Results are projected back inside the ball.
inline void rsgd_step(std::span<Parameter* const> params, double lr) {
  for (Parameter* p : params) {
    if (p->manifold != Manifold::kBall) throw UsageError("rsgd_step: parameter '" + p->name + "' is not a ball parameter");
    if (p->has_grad()) {
      const double c = p->curvature;
      for (Eigen::Index i = 0; i < p->value.rows(); ++i) {
        const Vector g = p->grad.row(i).transpose();
        if (g.isZero(0.0)) continue;
        const Vector x = p->value.row(i).transpose();
        const double f = 1.0 - c * x.squaredNorm();
        const Vector rg = (f * f / 4.0) * g;
        p->value.row(i) = geo::project(geo::expmap(x, -lr * rg, c), c).transpose();
      }
    }
    p->grad.resize(0, 0);
  }
}

/// Euclidean parameters take SGD, ball parameters RSGD.
inline void manifold_sgd_step(std::span<Parameter* const> params, double lr) {
  for (Parameter* p : params) {
    Parameter* one[] = {p};
    if (p->manifold == Manifold::kBall) {
      rsgd_step(one, lr);
    } else {
      sgd_step(one, lr);
    }
  }
}

inline void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->grad.resize(0, 0);
}

/// Adam for Euclidean parameters.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(std::span<Parameter* const> params) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (Parameter* p : params) {
      if (!p->has_grad()) continue;
      State& s = state_[p];
      if (s.m.size() == 0) {
        s.m = Matrix::Zero(p->value.rows(), p->value.cols());
        s.v = Matrix::Zero(p->value.rows(), p->value.cols());
      }
      s.m = b1_ * s.m + (1.0 - b1_) * p->grad;
      s.v = b2_ * s.v + (1.0 - b2_) * p->grad.cwiseProduct(p->grad);
      p->value.array() -= lr_ * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps_);
      p->grad.resize(0, 0);
    }
  }

  double lr() const { return lr_; }

 private:
  struct State {
    Matrix m, v;
  };
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::map<const Parameter*, State> state_;
};

}  // namespace hrq
