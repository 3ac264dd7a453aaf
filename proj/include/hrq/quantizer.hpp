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

// Residual quantization over multilevel codebooks, Euclidean (RQ) and
// hyperbolic (HRQ).
//
// RQ:  r0 = x;  e_i = nearest(C_i, r_i);  r_{i+1} = r_i - e_i;   y = sum e_i
// HRQ: r0 = x;  e_i = nearest_d(C_i, r_i); r_{i+1} = r_i (-) e_i; y = ((e0 (+) e1) (+) e2) ...
//
// nearest_d uses the Poincare distance. Mobius addition is not associative,
// so the reconstruction is always a left fold in level order from the origin.

#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hrq/autodiff.hpp"
#include "hrq/ball_ops.hpp"
#include "hrq/geometry.hpp"
#include "hrq/nn.hpp"

namespace hrq {

/// k levels of s codewords of dimension h. Hyperbolic codewords are ball
/// points and are stored as Ball parameters. Levels are never shared.
struct Codebook {
  Flavor flavor = Flavor::kEuclidean;
  double curvature = 1.0;
  std::vector<Parameter> levels;

  static Codebook zeros(Flavor flavor, double c, int k, Eigen::Index s, Eigen::Index h) {
    if (k <= 0 || s <= 0 || h <= 0) throw ConfigError("codebook: k, s and h must be positive");
    if (flavor == Flavor::kHyperbolic) Curvature{c};
    Codebook cb;
    cb.flavor = flavor;
    cb.curvature = c;
    for (int i = 0; i < k; ++i) {
      cb.levels.emplace_back("codebook." + std::to_string(i), Matrix::Zero(s, h),
                             flavor == Flavor::kHyperbolic ? Manifold::kBall : Manifold::kEuclidean, c);
    }
    return cb;
  }

  int depth() const { return static_cast<int>(levels.size()); }
  Eigen::Index size() const { return levels.empty() ? 0 : levels.front().value.rows(); }
  Eigen::Index dim() const { return levels.empty() ? 0 : levels.front().value.cols(); }

  const Matrix& level(int i) const { return levels.at(static_cast<std::size_t>(i)).value; }

  void validate() const {
    if (levels.empty()) throw DataError("codebook: no levels");
    for (const auto& l : levels) {
      if (l.value.rows() != size() || l.value.cols() != dim()) {
        throw DataError("codebook: levels differ in shape");
      }
      if (!l.value.allFinite()) throw NumericError("codebook: non-finite codeword");
      if (flavor == Flavor::kHyperbolic) {
        for (Eigen::Index j = 0; j < l.value.rows(); ++j) {
          if (curvature * l.value.row(j).squaredNorm() >= 1.0) {
            throw DataError("codebook: hyperbolic codeword outside the ball");
          }
        }
      }
    }
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& l : levels) out.push_back(&l);
    return out;
  }

  /// {flavor, curvature?, k, s, h, levels: [[[f64; h]; s]; k]}
  json to_json() const {
    json j;
    j["flavor"] = to_string(flavor);
    if (flavor == Flavor::kHyperbolic) j["curvature"] = curvature;
    j["k"] = depth();
    j["s"] = size();
    j["h"] = dim();
    json lv = json::array();
    for (const auto& l : levels) {
      json rows = json::array();
      for (Eigen::Index r = 0; r < l.value.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < l.value.cols(); ++c) row.push_back(l.value(r, c));
        rows.push_back(std::move(row));
      }
      lv.push_back(std::move(rows));
    }
    j["levels"] = std::move(lv);
    return j;
  }

  static Codebook from_json(const json& j) {
    const Flavor f = flavor_from_string(j.at("flavor").get<std::string>());
    const double c = f == Flavor::kHyperbolic ? j.at("curvature").get<double>() : 1.0;
    const int k = j.at("k").get<int>();
    const auto s = j.at("s").get<Eigen::Index>();
    const auto h = j.at("h").get<Eigen::Index>();
    Codebook cb = zeros(f, c, k, s, h);
    const auto& lv = j.at("levels");
    if (static_cast<int>(lv.size()) != k) throw DataError("codebook JSON: expected k levels");
    for (int i = 0; i < k; ++i) {
      const auto& rows = lv[static_cast<std::size_t>(i)];
      if (static_cast<Eigen::Index>(rows.size()) != s) throw DataError("codebook JSON: expected s codewords per level");
      for (Eigen::Index r = 0; r < s; ++r) {
        const auto& row = rows[static_cast<std::size_t>(r)];
        if (static_cast<Eigen::Index>(row.size()) != h) throw DataError("codebook JSON: codeword dimension differs from h");
        for (Eigen::Index c2 = 0; c2 < h; ++c2) cb.levels[static_cast<std::size_t>(i)].value(r, c2) = row[static_cast<std::size_t>(c2)].get<double>();
      }
    }
    cb.validate();
    return cb;
  }
};

/// k level tokens plus an optional disambiguator.
struct Multitoken {
  std::vector<int> tokens;
  std::optional<int> disambiguator;

  friend bool operator==(const Multitoken&, const Multitoken&) = default;
  friend auto operator<=>(const Multitoken& a, const Multitoken& b) {
    if (auto c = a.tokens <=> b.tokens; c != 0) return c;
    return a.disambiguator.value_or(-1) <=> b.disambiguator.value_or(-1);
  }
};

inline std::string to_string(const Multitoken& m) {
  std::string s = "[";
  for (std::size_t i = 0; i < m.tokens.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(m.tokens[i]);
  }
  if (m.disambiguator) s += "|" + std::to_string(*m.disambiguator);
  return s + "]";
}

struct QuantizationResult {
  Multitoken multitoken;
  std::vector<Vector> codewords;   // e^0 .. e^{k-1}
  Vector reconstruction;           // y_s
  std::vector<Vector> residuals;   // r^0 .. r^{k-1}
};

struct NearestCodeword {
  Vector codeword;
  int token = -1;
  double distance = 0.0;
};

namespace detail {
/// Monotone proxy for the distance; argmin over it equals argmin over the
/// true distance.
inline double distance_key(const Vector& q, const Eigen::Ref<const Eigen::RowVectorXd>& e, Flavor f, double c,
                           double q_factor) {
  const double d2 = (q.transpose() - e).squaredNorm();
  if (f == Flavor::kEuclidean) return d2;
  return d2 / (q_factor * (1.0 - c * e.squaredNorm()));
}
}  // namespace detail

/// argmin over the level's codewords of Euclidean (RQ) or Poincare (HRQ)
/// distance; ties go to the lowest index.
inline NearestCodeword nearest_codeword(const Matrix& level, const Vector& query, Flavor flavor, double c = 1.0) {
  if (level.rows() == 0) throw UsageError("nearest_codeword: empty codebook level");
  if (level.cols() != query.size()) throw UsageError("nearest_codeword: query dimension differs from codeword dimension");
  const double qf = 1.0 - c * query.squaredNorm();
  int best = 0;
  double best_key = detail::distance_key(query, level.row(0), flavor, c, qf);
  for (Eigen::Index j = 1; j < level.rows(); ++j) {
    const double key = detail::distance_key(query, level.row(j), flavor, c, qf);
    if (key < best_key) {
      best_key = key;
      best = static_cast<int>(j);
    }
  }
  NearestCodeword out;
  out.token = best;
  out.codeword = level.row(best).transpose();
  out.distance = flavor == Flavor::kEuclidean ? std::sqrt(best_key) : geo::distance(query, out.codeword, c);
  return out;
}

/// Residual quantization of one vector, dispatching on codebook flavor.
inline QuantizationResult quantize(const Codebook& cb, const Vector& x) {
  if (x.size() != cb.dim()) throw UsageError("quantize: input dimension differs from codebook dimension");
  const double c = cb.curvature;
  const bool hyp = cb.flavor == Flavor::kHyperbolic;
  QuantizationResult res;
  Vector r = x;
  Vector y = Vector::Zero(x.size());
  for (int i = 0; i < cb.depth(); ++i) {
    const NearestCodeword nc = nearest_codeword(cb.level(i), r, cb.flavor, c);
    res.residuals.push_back(r);
    res.codewords.push_back(nc.codeword);
    res.multitoken.tokens.push_back(nc.token);
    if (hyp) {
      r = geo::mobius_sub(r, nc.codeword, c);
      y = geo::mobius_add(y, nc.codeword, c);
    } else {
      r = r - nc.codeword;
      y = y + nc.codeword;
    }
  }
  res.reconstruction = std::move(y);
  return res;
}

inline QuantizationResult rq_quantize(const Codebook& cb, const Vector& x) {
  if (cb.flavor != Flavor::kEuclidean) throw UsageError("rq_quantize: codebook is not Euclidean");
  return quantize(cb, x);
}

inline QuantizationResult hrq_quantize(const Codebook& cb, const BallPoint& x) {
  if (cb.flavor != Flavor::kHyperbolic) throw UsageError("hrq_quantize: codebook is not hyperbolic");
  if (x.curvature().value() != cb.curvature) throw UsageError("hrq_quantize: curvature mismatch");
  return quantize(cb, x.coords());
}

/// Tokens (B x k) for every row of X.
inline Eigen::MatrixXi quantize_tokens(const Codebook& cb, const Matrix& X) {
  Eigen::MatrixXi tokens(X.rows(), cb.depth());
  for (Eigen::Index b = 0; b < X.rows(); ++b) {
    const QuantizationResult q = quantize(cb, X.row(b).transpose());
    for (int i = 0; i < cb.depth(); ++i) tokens(b, i) = q.multitoken.tokens[static_cast<std::size_t>(i)];
  }
  return tokens;
}

enum class QuantLossMetric { kManifold, kAmbient };

/// Squared distance used by the quantization loss: Euclidean for RQ; for HRQ
/// the squared Poincare distance, or the squared ambient norm when
/// `metric` is kAmbient.
inline double quantization_sq_distance(const Vector& a, const Vector& b, Flavor f, double c, QuantLossMetric metric) {
  if (f == Flavor::kHyperbolic && metric == QuantLossMetric::kManifold) {
    const double d = geo::distance(a, b, c);
    return d * d;
  }
  return (a - b).squaredNorm();
}

/// sum_i ( |sg[r_i] - e_i|^2 + alpha |r_i - sg[e_i]|^2 ), value only. Both
/// terms share a value; the stop-gradients only change where gradients go,
/// see the tape version below.
inline double quantization_loss(const std::vector<Vector>& residuals, const std::vector<Vector>& codewords,
                                double alpha, Flavor flavor, double c = 1.0,
                                QuantLossMetric metric = QuantLossMetric::kManifold) {
  if (alpha < 0.0) throw ConfigError("quantization_loss: alpha must be >= 0");
  if (residuals.size() != codewords.size()) throw UsageError("quantization_loss: trace lengths differ");
  double total = 0.0;
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    total += (1.0 + alpha) * quantization_sq_distance(residuals[i], codewords[i], flavor, c, metric);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Differentiable quantization trace

/// Residual chain recorded on a tape. Residuals depend on the encoder only:
/// the codeword subtracted at each level enters through stop-gradient.
struct QuantizationTrace {
  Eigen::MatrixXi tokens;              // B x k
  std::vector<ad::Var> residuals;      // r_i, B x h
  std::vector<ad::Var> codewords;      // e_i, B x h (gathered from the codebook)
  Matrix reconstruction;               // y_s values, B x h
};

/// Quantizes the rows of `x_s`. When `frozen_tokens` is given those tokens
/// are used instead of the nearest codewords.
inline QuantizationTrace trace_quantization(ad::Tape& tape, Codebook& cb, ad::Var x_s,
                                            const Eigen::MatrixXi* frozen_tokens = nullptr) {
  if (x_s.cols() != cb.dim()) throw UsageError("trace_quantization: latent width differs from codebook dimension");
  const Eigen::Index B = x_s.rows();
  const int k = cb.depth();
  const double c = cb.curvature;
  const bool hyp = cb.flavor == Flavor::kHyperbolic;
  if (frozen_tokens != nullptr && (frozen_tokens->rows() != B || frozen_tokens->cols() != k)) {
    throw UsageError("trace_quantization: frozen token matrix has the wrong shape");
  }
  QuantizationTrace tr;
  tr.tokens.resize(B, k);
  tr.reconstruction = Matrix::Zero(B, cb.dim());
  ad::Var r = x_s;
  for (int i = 0; i < k; ++i) {
    const Matrix& rv = r.value();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(B));
    for (Eigen::Index b = 0; b < B; ++b) {
      const int t = frozen_tokens ? (*frozen_tokens)(b, i)
                                  : nearest_codeword(cb.level(i), rv.row(b).transpose(), cb.flavor, c).token;
      if (t < 0 || t >= cb.size()) throw UsageError("trace_quantization: token out of range");
      tr.tokens(b, i) = t;
      idx[static_cast<std::size_t>(b)] = t;
    }
    const ad::Var e = ad::gather_rows(tape.param(cb.levels[static_cast<std::size_t>(i)]), idx);
    tr.residuals.push_back(r);
    tr.codewords.push_back(e);
    const Matrix& ev = e.value();
    for (Eigen::Index b = 0; b < B; ++b) {
      if (hyp) {
        tr.reconstruction.row(b) = geo::mobius_add(tr.reconstruction.row(b).transpose(), ev.row(b).transpose(), c).transpose();
      } else {
        tr.reconstruction.row(b) += ev.row(b);
      }
    }
    if (i + 1 < k) {
      const ad::Var e_frozen = ad::stop_gradient(e);
      r = hyp ? ad::mobius_sub(r, e_frozen, c) : ad::sub(r, e_frozen);
    }
  }
  return tr;
}

/// Batch-mean quantization loss on a trace:
/// mean_b sum_i ( D(sg[r_i], e_i) + alpha D(r_i, sg[e_i]) ), D a squared
/// distance (see quantization_sq_distance).
inline ad::Var quantization_loss(const QuantizationTrace& tr, double alpha, Flavor flavor, double c,
                                 QuantLossMetric metric = QuantLossMetric::kManifold) {
  if (alpha < 0.0) throw ConfigError("quantization_loss: alpha must be >= 0");
  if (tr.residuals.empty()) throw UsageError("quantization_loss: empty trace");
  const bool manifold = flavor == Flavor::kHyperbolic && metric == QuantLossMetric::kManifold;
  auto sqdist = [&](ad::Var a, ad::Var b) {
    if (manifold) return ad::square(ad::distance(a, b, c));
    return ad::row_sqnorm(ad::sub(a, b));
  };
  std::optional<ad::Var> total;
  for (std::size_t i = 0; i < tr.residuals.size(); ++i) {
    const ad::Var r = tr.residuals[i];
    const ad::Var e = tr.codewords[i];
    ad::Var term = sqdist(ad::stop_gradient(r), e);
    if (alpha > 0.0) term = term + ad::scale(sqdist(r, ad::stop_gradient(e)), alpha);
    const ad::Var m = ad::mean(term);
    total = total ? ad::add(*total, m) : m;
  }
  return *total;
}

// ---------------------------------------------------------------------------
// Conflict resolution

/// Entities whose k tokens coincide get disambiguators 0, 1, 2, ... in
/// ascending identifier order; all others get 0.
inline std::map<std::string, Multitoken> disambiguate(const std::map<std::string, Multitoken>& assignments) {
  std::map<std::vector<int>, int> next;
  std::map<std::string, Multitoken> out;
  std::size_t len = assignments.empty() ? 0 : assignments.begin()->second.tokens.size();
  for (const auto& [id, mt] : assignments) {  // std::map iterates in identifier order
    if (mt.tokens.size() != len) throw UsageError("disambiguate: multitokens differ in length");
    Multitoken m;
    m.tokens = mt.tokens;
    m.disambiguator = next[mt.tokens]++;
    out.emplace(id, std::move(m));
  }
  return out;
}

/// Largest disambiguator + 1 (the size of the extra vocabulary segment).
inline int disambiguator_vocab(const std::map<std::string, Multitoken>& m) {
  int v = 1;
  for (const auto& [id, mt] : m) v = std::max(v, mt.disambiguator.value_or(0) + 1);
  return v;
}

// ---------------------------------------------------------------------------
// Multitoken TSV: entity_id, t_0 .. t_{k-1}, disambiguator

inline void write_multitokens_tsv(std::ostream& os, const std::map<std::string, Multitoken>& m, int k) {
  os << "entity_id";
  for (int i = 0; i < k; ++i) os << "\tt_" << i;
  os << "\tdisambiguator\n";
  for (const auto& [id, mt] : m) {
    if (static_cast<int>(mt.tokens.size()) != k) throw UsageError("write_multitokens_tsv: multitoken length differs from k");
    os << id;
    for (int t : mt.tokens) os << '\t' << t;
    os << '\t' << mt.disambiguator.value_or(0) << '\n';
  }
}

struct MultitokenTable {
  int k = 0;
  std::map<std::string, Multitoken> tokens;
};

inline MultitokenTable read_multitokens_tsv(std::istream& is, const std::string& source = "<stream>") {
  MultitokenTable table;
  std::string line;
  if (!std::getline(is, line)) throw DataError(source + ": missing header");
  {
    std::istringstream hs(line);
    std::string col;
    int cols = 0;
    while (std::getline(hs, col, '\t')) ++cols;
    if (cols < 3) throw DataError(source + ": header needs entity_id, t_0.., disambiguator");
    table.k = cols - 2;
  }
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ls, field, '\t')) fields.push_back(field);
    if (static_cast<int>(fields.size()) != table.k + 2) {
      throw DataError(source + ":" + std::to_string(lineno) + ": expected " + std::to_string(table.k + 2) + " columns");
    }
    Multitoken mt;
    try {
      for (int i = 0; i < table.k; ++i) mt.tokens.push_back(std::stoi(fields[static_cast<std::size_t>(i + 1)]));
      mt.disambiguator = std::stoi(fields.back());
    } catch (const std::exception&) {
      throw DataError(source + ":" + std::to_string(lineno) + ": non-integer token");
    }
    if (!table.tokens.emplace(fields[0], std::move(mt)).second) {
      throw DataError(source + ":" + std::to_string(lineno) + ": duplicate entity '" + fields[0] + "'");
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Initialisation and diagnostics

/// Seeds level 0 with s distinct rows of X and level i with s residuals left
/// after quantizing X with levels 0..i-1. X must have at least s rows.
inline void init_codebook_from_samples(Codebook& cb, const Matrix& X, Rng& rng) {
  const Eigen::Index s = cb.size();
  if (X.rows() < s) throw UsageError("init_codebook_from_samples: need at least s sample rows");
  if (X.cols() != cb.dim()) throw UsageError("init_codebook_from_samples: sample width differs from codebook dimension");
  const double c = cb.curvature;
  const bool hyp = cb.flavor == Flavor::kHyperbolic;
  Matrix residual = X;
  for (int i = 0; i < cb.depth(); ++i) {
    std::vector<Eigen::Index> order(static_cast<std::size_t>(X.rows()));
    for (Eigen::Index j = 0; j < X.rows(); ++j) order[static_cast<std::size_t>(j)] = j;
    shuffle(order, rng);
    Matrix& level = cb.levels[static_cast<std::size_t>(i)].value;
    for (Eigen::Index j = 0; j < s; ++j) {
      Vector v = residual.row(order[static_cast<std::size_t>(j)]).transpose();
      if (hyp) v = geo::project(v, c);
      level.row(j) = v.transpose();
    }
    for (Eigen::Index b = 0; b < residual.rows(); ++b) {
      const Vector r = residual.row(b).transpose();
      const NearestCodeword nc = nearest_codeword(level, r, cb.flavor, c);
      residual.row(b) = (hyp ? geo::mobius_sub(r, nc.codeword, c) : Vector(r - nc.codeword)).transpose();
    }
  }
}

/// Per-level codeword hit counts over the rows of X.
inline std::vector<std::vector<int>> codeword_usage(const Codebook& cb, const Matrix& X) {
  std::vector<std::vector<int>> usage(static_cast<std::size_t>(cb.depth()),
                                      std::vector<int>(static_cast<std::size_t>(cb.size()), 0));
  const Eigen::MatrixXi t = quantize_tokens(cb, X);
  for (Eigen::Index b = 0; b < t.rows(); ++b) {
    for (int i = 0; i < cb.depth(); ++i) ++usage[static_cast<std::size_t>(i)][static_cast<std::size_t>(t(b, i))];
  }
  return usage;
}

}  // namespace hrq
