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

// Trainable models: the quantized autoencoder in Euclidean (RQ-VAE) and
// hyperbolic (HRQ-VAE) form, and the contrastive hierarchy embedder whose
// embeddings are quantized jointly with a codebook.

#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "hrq/autodiff.hpp"
#include "hrq/ball_ops.hpp"
#include "hrq/nn.hpp"
#include "hrq/quantizer.hpp"

namespace hrq {

inline const char* to_string(QuantLossMetric m) { return m == QuantLossMetric::kManifold ? "manifold" : "ambient"; }

inline QuantLossMetric quant_metric_from_string(std::string_view s) {
  if (s == "manifold") return QuantLossMetric::kManifold;
  if (s == "ambient") return QuantLossMetric::kAmbient;
  throw ConfigError("quant_metric: expected 'manifold' or 'ambient', got '" + std::string(s) + "'");
}

namespace detail {
template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config field '") + key + "' has the wrong type");
  }
}

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(std::string(what) + ": unknown field '" + key + "'");
  }
}
}  // namespace detail

namespace detail {
inline Matrix gather(const Matrix& X, const std::vector<Eigen::Index>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), X.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = X.row(idx[i]);
  return out;
}

/// min(n, want) distinct rows in random order, topped up with uniform draws
/// (with replacement) to at least `at_least` rows.
inline std::vector<Eigen::Index> sample_rows(Eigen::Index n, Eigen::Index want, Eigen::Index at_least, Rng& rng) {
  if (n <= 0) throw DataError("no rows to sample codebook initialisation from");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  shuffle(order, rng);
  order.resize(static_cast<std::size_t>(std::min(n, want)));
  while (static_cast<Eigen::Index>(order.size()) < at_least) {
    order.push_back(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n))));
  }
  return order;
}
}  // namespace detail

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double primary = 0.0;       // reconstruction or contrastive term
  double quantization = 0.0;  // L_RQ

  json to_json(const char* primary_name) const {
    return {{"epoch", epoch}, {"lr", lr}, {"loss", loss}, {primary_name, primary}, {"quantization", quantization}};
  }
};

// ===========================================================================
// Quantized autoencoder

struct VaeConfig {
  Flavor flavor = Flavor::kHyperbolic;
  double c = 1.0;
  int k = 3;
  Eigen::Index s = 256;
  Eigen::Index h = 32;
  std::vector<Eigen::Index> hidden{512, 256, 128};
  double alpha = 0.25;
  double lr = 1e-3;
  int epochs = 5000;
  int batch_size = 128;
  std::uint64_t seed = 0;
  QuantLossMetric quant_metric = QuantLossMetric::kManifold;

  void validate() const {
    if (flavor == Flavor::kHyperbolic && !(c > 0.0)) throw ConfigError("config field 'c' must be > 0");
    if (k <= 0) throw ConfigError("config field 'k' must be > 0");
    if (s <= 0) throw ConfigError("config field 's' must be > 0");
    if (h <= 0) throw ConfigError("config field 'h' must be > 0");
    if (alpha < 0.0) throw ConfigError("config field 'alpha' must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("config field 'lr' must be > 0");
    if (epochs < 0) throw ConfigError("config field 'epochs' must be >= 0");
    if (batch_size <= 0) throw ConfigError("config field 'batch_size' must be > 0");
    for (auto d : hidden) {
      if (d <= 0) throw ConfigError("config field 'hidden' entries must be > 0");
    }
  }

  json to_json() const {
    return {{"model", "vae"}, {"flavor", to_string(flavor)}, {"c", c}, {"k", k}, {"s", s}, {"h", h},
            {"hidden", hidden}, {"alpha", alpha}, {"lr", lr}, {"epochs", epochs}, {"batch_size", batch_size},
            {"seed", seed}, {"quant_metric", to_string(quant_metric)}};
  }

  /// Fields absent from `j` keep their current values.
  void merge_json(const json& j) {
    detail::check_keys(j, {"model", "flavor", "c", "k", "s", "h", "hidden", "alpha", "lr", "epochs", "batch_size",
                           "seed", "quant_metric"},
                       "vae config");
    if (j.contains("flavor")) flavor = flavor_from_string(j.at("flavor").get<std::string>());
    if (j.contains("quant_metric")) quant_metric = quant_metric_from_string(j.at("quant_metric").get<std::string>());
    detail::read_opt(j, "c", c);
    detail::read_opt(j, "k", k);
    detail::read_opt(j, "s", s);
    detail::read_opt(j, "h", h);
    detail::read_opt(j, "hidden", hidden);
    detail::read_opt(j, "alpha", alpha);
    detail::read_opt(j, "lr", lr);
    detail::read_opt(j, "epochs", epochs);
    detail::read_opt(j, "batch_size", batch_size);
    detail::read_opt(j, "seed", seed);
  }
};

/// Output of one forward pass over a batch. Losses are batch means.
struct VaeForward {
  ad::Var loss;
  ad::Var reconstruction_loss;
  ad::Var quantization_loss;
  ad::Var latent;          // x_s, before quantization
  ad::Var output;          // x_hat in input space
  QuantizationTrace trace;
};

/// Encoder E, decoder D and a k-level codebook. With the hyperbolic flavor
/// inputs enter the ball through exp_0, every layer is a hyperbolic layer and
/// outputs leave through log_0.
class QuantizedAutoencoder {
 public:
  QuantizedAutoencoder() = default;

  QuantizedAutoencoder(const VaeConfig& cfg, Eigen::Index input_dim) : config_(cfg) {
    cfg.validate();
    if (input_dim <= 0) throw ConfigError("autoencoder: input dimension must be > 0");
    Rng rng = make_rng(cfg.seed, "vae.init");
    std::vector<Eigen::Index> enc{input_dim};
    enc.insert(enc.end(), cfg.hidden.begin(), cfg.hidden.end());
    enc.push_back(cfg.h);
    std::vector<Eigen::Index> dec(enc.rbegin(), enc.rend());
    encoder_ = Network::mlp(enc, cfg.flavor, cfg.c, rng, "encoder");
    decoder_ = Network::mlp(dec, cfg.flavor, cfg.c, rng, "decoder");
    codebook_ = Codebook::zeros(cfg.flavor, cfg.c, cfg.k, cfg.s, cfg.h);
  }

  const VaeConfig& config() const { return config_; }
  Flavor flavor() const { return config_.flavor; }
  Eigen::Index input_dim() const { return encoder_.in_dim(); }
  Network& encoder() { return encoder_; }
  Network& decoder() { return decoder_; }
  Codebook& codebook() { return codebook_; }
  const Codebook& codebook() const { return codebook_; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out = encoder_.parameters();
    for (Parameter* p : decoder_.parameters()) out.push_back(p);
    for (Parameter* p : codebook_.parameters()) out.push_back(p);
    return out;
  }

  /// Lifts raw inputs to the model's input space (exp_0 for the ball).
  ad::Var embed_input(ad::Tape& tape, const Matrix& X) const {
    const ad::Var x = tape.constant(X);
    return flavor() == Flavor::kHyperbolic ? ad::expmap0(x, config_.c) : x;
  }

  ad::Var encode(ad::Tape& tape, const Matrix& X) {
    check_input(X);
    return encoder_.forward(tape, embed_input(tape, X));
  }

  /// Quantize, decode through the straight-through estimator, and compute
  /// L_R + L_RQ. `frozen_tokens` pins the codeword assignment.
  VaeForward forward(ad::Tape& tape, const Matrix& X, const Eigen::MatrixXi* frozen_tokens = nullptr) {
    VaeForward f;
    f.latent = encode(tape, X);
    f.trace = trace_quantization(tape, codebook_, f.latent, frozen_tokens);
    const ad::Var y_s = ad::straight_through(f.latent, tape.constant(f.trace.reconstruction));
    ad::Var out = decoder_.forward(tape, y_s);
    if (flavor() == Flavor::kHyperbolic) out = ad::logmap0(out, config_.c);
    f.output = out;
    f.reconstruction_loss = ad::mean(ad::row_sqnorm(ad::sub(tape.constant(X), out)));
    f.quantization_loss = hrq::quantization_loss(f.trace, config_.alpha, flavor(), config_.c, config_.quant_metric);
    f.loss = ad::add(f.reconstruction_loss, f.quantization_loss);
    return f;
  }

  Matrix latents(const Matrix& X) {
    ad::Tape tape(false);
    return encode(tape, X).value();
  }

  Eigen::MatrixXi tokens(const Matrix& X) { return quantize_tokens(codebook_, latents(X)); }

  /// Seeds the codebook from latents of max(batch_size, s) inputs, drawn
  /// with replacement only when there are fewer than s inputs.
  void init_codebook(const Matrix& X, Rng& rng) {
    const auto idx = detail::sample_rows(X.rows(), std::max<Eigen::Index>(config_.batch_size, config_.s), config_.s, rng);
    init_codebook_from_samples(codebook_, latents(detail::gather(X, idx)), rng);
  }

  json to_json() const {
    return {{"kind", "vae"}, {"version", HRQ_VERSION}, {"config", config_.to_json()},
            {"input_dim", encoder_.in_dim()}, {"encoder", encoder_.to_json()}, {"decoder", decoder_.to_json()},
            {"codebook", codebook_.to_json()}};
  }

  static QuantizedAutoencoder from_json(const json& j) {
    if (j.value("kind", "") != "vae") throw DataError("checkpoint: not an autoencoder checkpoint");
    QuantizedAutoencoder m;
    m.config_.merge_json(j.at("config"));
    m.encoder_ = Network::from_json(j.at("encoder"));
    m.decoder_ = Network::from_json(j.at("decoder"));
    m.codebook_ = Codebook::from_json(j.at("codebook"));
    if (m.encoder_.out_dim() != m.codebook_.dim() || m.decoder_.in_dim() != m.codebook_.dim()) {
      throw DataError("checkpoint: encoder/decoder widths disagree with the codebook");
    }
    return m;
  }

 private:
  void check_input(const Matrix& X) const {
    if (X.cols() != encoder_.in_dim()) {
      throw DataError("autoencoder: input dimension " + std::to_string(X.cols()) + " differs from model dimension " +
                      std::to_string(encoder_.in_dim()));
    }
    require_finite(X, "autoencoder input");
  }

  VaeConfig config_;
  Network encoder_;
  Network decoder_;
  Codebook codebook_;
};

inline VaeForward rqvae_forward(ad::Tape& tape, QuantizedAutoencoder& m, const Matrix& X) {
  if (m.flavor() != Flavor::kEuclidean) throw UsageError("rqvae_forward: model is hyperbolic");
  return m.forward(tape, X);
}

inline VaeForward hrqvae_forward(ad::Tape& tape, QuantizedAutoencoder& m, const Matrix& X) {
  if (m.flavor() != Flavor::kHyperbolic) throw UsageError("hrqvae_forward: model is Euclidean");
  return m.forward(tape, X);
}

namespace detail {
inline std::vector<std::vector<Eigen::Index>> minibatches(Eigen::Index n, int batch_size, Rng& rng) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  shuffle(order, rng);
  std::vector<std::vector<Eigen::Index>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

inline void log_usage(const Codebook& cb, const Matrix& latents, const std::string& who) {
  const auto usage = codeword_usage(cb, latents);
  for (std::size_t i = 0; i < usage.size(); ++i) {
    const auto used = std::count_if(usage[i].begin(), usage[i].end(), [](int u) { return u > 0; });
    log_info(who + ": level " + std::to_string(i) + " uses " + std::to_string(used) + "/" +
             std::to_string(usage[i].size()) + " codewords");
  }
}
}  // namespace detail

/// Minibatch SGD (Euclidean parameters) and RSGD (ball parameters) on
/// L_R + L_RQ. The codebook is seeded from encoded inputs before the first
/// step. Returns one log entry per epoch.
inline std::vector<EpochLog> train_autoencoder(QuantizedAutoencoder& model, const Matrix& X,
                                               const std::function<void(const EpochLog&)>& on_epoch = {}) {
  const VaeConfig& cfg = model.config();
  if (X.rows() == 0) throw DataError("train_autoencoder: no training inputs");
  Rng rng = make_rng(cfg.seed, "vae.train");
  model.init_codebook(X, rng);
  const auto params = model.parameters();
  std::vector<EpochLog> logs;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochLog log{epoch, cfg.lr, 0.0, 0.0, 0.0};
    double weight = 0.0;
    for (const auto& batch : detail::minibatches(X.rows(), cfg.batch_size, rng)) {
      ad::Tape tape;
      const VaeForward f = model.forward(tape, detail::gather(X, batch));
      if (!std::isfinite(f.loss.scalar())) throw NumericError("train_autoencoder: non-finite loss at epoch " + std::to_string(epoch));
      tape.backward(f.loss);
      manifold_sgd_step(params, cfg.lr);
      const auto b = static_cast<double>(batch.size());
      log.loss += b * f.loss.scalar();
      log.primary += b * f.reconstruction_loss.scalar();
      log.quantization += b * f.quantization_loss.scalar();
      weight += b;
    }
    log.loss /= weight;
    log.primary /= weight;
    log.quantization /= weight;
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  detail::log_usage(model.codebook(), model.latents(X), std::string(to_string(cfg.flavor)) + " autoencoder");
  return logs;
}

// ===========================================================================
// Contrastive hierarchy embedder

struct EmbedderConfig {
  Flavor flavor = Flavor::kHyperbolic;
  double c = 1.0;
  int k = 3;
  Eigen::Index s = 64;
  Eigen::Index h = 8;
  double alpha = 0.25;
  double lr = 1.0;
  double warmup_lr = 0.01;
  int warmup_epochs = 20;
  int epochs = 1500;
  int batch_size = 128;
  int negatives = 50;
  std::uint64_t seed = 0;
  double init_scale = 1e-3;
  QuantLossMetric quant_metric = QuantLossMetric::kManifold;

  void validate() const {
    if (flavor == Flavor::kHyperbolic && !(c > 0.0)) throw ConfigError("config field 'c' must be > 0");
    if (k <= 0) throw ConfigError("config field 'k' must be > 0");
    if (s <= 0) throw ConfigError("config field 's' must be > 0");
    if (h <= 0) throw ConfigError("config field 'h' must be > 0");
    if (alpha < 0.0) throw ConfigError("config field 'alpha' must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("config field 'lr' must be > 0");
    if (!(warmup_lr > 0.0)) throw ConfigError("config field 'warmup_lr' must be > 0");
    if (warmup_epochs < 0) throw ConfigError("config field 'warmup_epochs' must be >= 0");
    if (epochs < 0) throw ConfigError("config field 'epochs' must be >= 0");
    if (batch_size <= 0) throw ConfigError("config field 'batch_size' must be > 0");
    if (negatives < 0) throw ConfigError("config field 'negatives' must be >= 0");
    if (!(init_scale > 0.0)) throw ConfigError("config field 'init_scale' must be > 0");
  }

  double lr_at(int epoch) const { return epoch < warmup_epochs ? warmup_lr : lr; }

  json to_json() const {
    return {{"model", "embedder"}, {"flavor", to_string(flavor)}, {"c", c}, {"k", k}, {"s", s}, {"h", h},
            {"alpha", alpha}, {"lr", lr}, {"warmup_lr", warmup_lr}, {"warmup_epochs", warmup_epochs},
            {"epochs", epochs}, {"batch_size", batch_size}, {"negatives", negatives}, {"seed", seed},
            {"init_scale", init_scale}, {"quant_metric", to_string(quant_metric)}};
  }

  void merge_json(const json& j) {
    detail::check_keys(j, {"model", "flavor", "c", "k", "s", "h", "alpha", "lr", "warmup_lr", "warmup_epochs", "epochs",
                           "batch_size", "negatives", "seed", "init_scale", "quant_metric"},
                       "embedder config");
    if (j.contains("flavor")) flavor = flavor_from_string(j.at("flavor").get<std::string>());
    if (j.contains("quant_metric")) quant_metric = quant_metric_from_string(j.at("quant_metric").get<std::string>());
    detail::read_opt(j, "c", c);
    detail::read_opt(j, "k", k);
    detail::read_opt(j, "s", s);
    detail::read_opt(j, "h", h);
    detail::read_opt(j, "alpha", alpha);
    detail::read_opt(j, "lr", lr);
    detail::read_opt(j, "warmup_lr", warmup_lr);
    detail::read_opt(j, "warmup_epochs", warmup_epochs);
    detail::read_opt(j, "epochs", epochs);
    detail::read_opt(j, "batch_size", batch_size);
    detail::read_opt(j, "negatives", negatives);
    detail::read_opt(j, "seed", seed);
    detail::read_opt(j, "init_scale", init_scale);
  }
};

/// -log softmax of the first candidate among `candidate_distances`, with
/// logits -d. Infinite distances contribute nothing to the normaliser.
inline double softmax_contrastive(double positive, const std::vector<double>& others) {
  double m = -positive;
  for (double d : others) m = std::max(m, -d);
  double z = std::exp(-positive - m);
  for (double d : others) z += std::exp(-d - m);
  return positive + m + std::log(z);
}

/// Entity embedding table (Euclidean rows or ball points) plus a codebook.
class HierarchyEmbedder {
 public:
  HierarchyEmbedder() = default;

  HierarchyEmbedder(const EmbedderConfig& cfg, std::vector<std::string> entities)
      : config_(cfg), entities_(std::move(entities)) {
    cfg.validate();
    index_.reserve(entities_.size());
    for (std::size_t i = 0; i < entities_.size(); ++i) {
      if (!index_.emplace(entities_[i], static_cast<Eigen::Index>(i)).second) {
        throw DataError("embedder: duplicate entity '" + entities_[i] + "'");
      }
    }
    Rng rng = make_rng(cfg.seed, "embedder.init");
    Matrix t(static_cast<Eigen::Index>(entities_.size()), cfg.h);
    for (Eigen::Index i = 0; i < t.size(); ++i) t(i) = uniform(rng, -cfg.init_scale, cfg.init_scale);
    table_ = Parameter("embedding", std::move(t),
                       cfg.flavor == Flavor::kHyperbolic ? Manifold::kBall : Manifold::kEuclidean, cfg.c);
    codebook_ = Codebook::zeros(cfg.flavor, cfg.c, cfg.k, cfg.s, cfg.h);
  }

  const EmbedderConfig& config() const { return config_; }
  Flavor flavor() const { return config_.flavor; }
  const std::vector<std::string>& entities() const { return entities_; }
  Eigen::Index index_of(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw DataError("embedder: unknown entity '" + id + "'");
    return it->second;
  }
  Parameter& table() { return table_; }
  const Parameter& table() const { return table_; }
  Codebook& codebook() { return codebook_; }
  const Codebook& codebook() const { return codebook_; }

  Vector embedding(const std::string& id) const { return table_.value.row(index_of(id)).transpose(); }

  double distance(const Vector& a, const Vector& b) const {
    return flavor() == Flavor::kHyperbolic ? geo::distance(a, b, config_.c) : (a - b).norm();
  }

  ad::Var distance(ad::Var a, ad::Var b) const {
    return flavor() == Flavor::kHyperbolic ? ad::distance(a, b, config_.c) : ad::euclidean_distance(a, b);
  }

  /// Contrastive term for one pair: -log softmax of -d(u, v) against -d(u, v')
  /// for v' in {v} + negatives + {u}. Value only.
  double contrastive_loss(const std::string& u, const std::string& v, const std::vector<std::string>& negatives) const {
    if (negatives.empty()) throw UsageError("contrastive_loss: empty negative set");
    const Vector eu = embedding(u);
    std::vector<double> others;
    for (const auto& n : negatives) others.push_back(distance(eu, embedding(n)));
    others.push_back(0.0);  // d(u, u)
    return softmax_contrastive(distance(eu, embedding(v)), others);
  }

  /// Batched objective on a tape: mean contrastive term plus L_RQ(E(u)) and
  /// L_RQ(E(v)). `negatives[b]` may hold fewer than `m` entries; missing ones
  /// are masked out.
  struct BatchLoss {
    ad::Var loss, contrastive, quantization;
  };

  BatchLoss batch_loss(ad::Tape& tape, const std::vector<Eigen::Index>& us, const std::vector<Eigen::Index>& vs,
                       const std::vector<std::vector<Eigen::Index>>& negatives, int m) {
    const auto B = static_cast<Eigen::Index>(us.size());
    const Eigen::Index cols = m + 2;
    // Candidate j of pair b sits at row j * B + b so that a column-major
    // reshape yields the B x (m + 2) logit matrix.
    std::vector<Eigen::Index> cand(static_cast<std::size_t>(B * cols)), anchor(static_cast<std::size_t>(B * cols));
    Matrix mask = Matrix::Zero(B, cols);
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto& neg = negatives[static_cast<std::size_t>(b)];
      for (Eigen::Index j = 0; j < cols; ++j) {
        Eigen::Index e;
        if (j == 0) {
          e = vs[static_cast<std::size_t>(b)];
        } else if (j == cols - 1) {
          e = us[static_cast<std::size_t>(b)];
        } else if (j - 1 < static_cast<Eigen::Index>(neg.size())) {
          e = neg[static_cast<std::size_t>(j - 1)];
        } else {
          e = us[static_cast<std::size_t>(b)];
          mask(b, j) = -1e30;
        }
        cand[static_cast<std::size_t>(j * B + b)] = e;
        anchor[static_cast<std::size_t>(j * B + b)] = us[static_cast<std::size_t>(b)];
      }
    }
    const ad::Var table = tape.param(table_);
    const ad::Var d = distance(ad::gather_rows(table, anchor), ad::gather_rows(table, cand));
    const ad::Var logits = ad::add(ad::scale(ad::reshape(d, B, cols), -1.0), tape.constant(mask));
    const ad::Var ls = ad::log_softmax_rows(logits);
    const ad::Var ctr = ad::scale(ad::mean(ad::pick(ls, std::vector<Eigen::Index>(static_cast<std::size_t>(B), 0))), -1.0);
    const ad::Var eu = ad::gather_rows(table, us);
    const ad::Var ev = ad::gather_rows(table, vs);
    const QuantizationTrace tu = trace_quantization(tape, codebook_, eu);
    const QuantizationTrace tv = trace_quantization(tape, codebook_, ev);
    const ad::Var q = ad::add(hrq::quantization_loss(tu, config_.alpha, flavor(), config_.c, config_.quant_metric),
                              hrq::quantization_loss(tv, config_.alpha, flavor(), config_.c, config_.quant_metric));
    return {ad::add(ctr, q), ctr, q};
  }

  /// Tokens for every entity, disambiguated.
  std::map<std::string, Multitoken> multitokens() const {
    const Eigen::MatrixXi t = quantize_tokens(codebook_, table_.value);
    std::map<std::string, Multitoken> raw;
    for (std::size_t i = 0; i < entities_.size(); ++i) {
      Multitoken mt;
      for (int l = 0; l < t.cols(); ++l) mt.tokens.push_back(t(static_cast<Eigen::Index>(i), l));
      raw.emplace(entities_[i], std::move(mt));
    }
    return disambiguate(raw);
  }

  json to_json() const {
    return {{"kind", "embedder"}, {"version", HRQ_VERSION}, {"config", config_.to_json()},
            {"entities", entities_}, {"table", parameter_to_json(table_)}, {"codebook", codebook_.to_json()}};
  }

  static HierarchyEmbedder from_json(const json& j) {
    if (j.value("kind", "") != "embedder") throw DataError("checkpoint: not an embedder checkpoint");
    EmbedderConfig cfg;
    cfg.merge_json(j.at("config"));
    HierarchyEmbedder e(cfg, j.at("entities").get<std::vector<std::string>>());
    e.table_ = parameter_from_json(j.at("table"));
    e.codebook_ = Codebook::from_json(j.at("codebook"));
    if (e.table_.value.rows() != static_cast<Eigen::Index>(e.entities_.size()) || e.table_.value.cols() != cfg.h) {
      throw DataError("checkpoint: embedding table shape disagrees with config");
    }
    return e;
  }

 private:
  EmbedderConfig config_;
  std::vector<std::string> entities_;
  std::unordered_map<std::string, Eigen::Index> index_;
  Parameter table_;
  Codebook codebook_;
};

/// Training pairs (hyponym u, hypernym v) and the relation sets used to keep
/// negatives away from every entity related to u in either direction.
struct ContrastiveData {
  std::vector<std::pair<Eigen::Index, Eigen::Index>> pairs;
  std::vector<std::unordered_set<Eigen::Index>> related;  // per entity, includes itself
};

/// Uniform negatives for `u`, with replacement, from entities unrelated to u.
/// Returns fewer than m (possibly none) only when the pool is empty.
inline std::vector<Eigen::Index> sample_negatives(const ContrastiveData& data, Eigen::Index u, Eigen::Index n_entities,
                                                  int m, Rng& rng) {
  std::vector<Eigen::Index> out;
  const auto& rel = data.related[static_cast<std::size_t>(u)];
  if (static_cast<Eigen::Index>(rel.size()) >= n_entities) return out;
  out.reserve(static_cast<std::size_t>(m));
  while (static_cast<int>(out.size()) < m) {
    const auto e = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n_entities)));
    if (!rel.count(e)) out.push_back(e);
  }
  return out;
}

/// Joint training of embeddings and codebook on the contrastive objective
/// plus quantization losses; SGD for Euclidean, RSGD for ball parameters.
inline std::vector<EpochLog> train_hierarchy_embedder(HierarchyEmbedder& model, const ContrastiveData& data,
                                                      const std::function<void(const EpochLog&)>& on_epoch = {}) {
  const EmbedderConfig& cfg = model.config();
  const auto n = static_cast<Eigen::Index>(model.entities().size());
  if (n == 0) throw DataError("train_hierarchy_embedder: empty entity set");
  Rng rng = make_rng(cfg.seed, "embedder.train");
  const auto init = detail::sample_rows(n, std::max<Eigen::Index>(cfg.batch_size, cfg.s), cfg.s, rng);
  init_codebook_from_samples(model.codebook(), detail::gather(model.table().value, init), rng);
  std::vector<Parameter*> params{&model.table()};
  for (Parameter* p : model.codebook().parameters()) params.push_back(p);
  std::vector<EpochLog> logs;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochLog log{epoch, cfg.lr_at(epoch), 0.0, 0.0, 0.0};
    double weight = 0.0;
    for (const auto& batch : detail::minibatches(static_cast<Eigen::Index>(data.pairs.size()), cfg.batch_size, rng)) {
      std::vector<Eigen::Index> us, vs;
      std::vector<std::vector<Eigen::Index>> negs;
      for (Eigen::Index i : batch) {
        const auto [u, v] = data.pairs[static_cast<std::size_t>(i)];
        us.push_back(u);
        vs.push_back(v);
        negs.push_back(sample_negatives(data, u, n, cfg.negatives, rng));
      }
      ad::Tape tape;
      const auto bl = model.batch_loss(tape, us, vs, negs, cfg.negatives);
      if (!std::isfinite(bl.loss.scalar())) throw NumericError("train_hierarchy_embedder: non-finite loss at epoch " + std::to_string(epoch));
      tape.backward(bl.loss);
      manifold_sgd_step(params, log.lr);
      const auto b = static_cast<double>(batch.size());
      log.loss += b * bl.loss.scalar();
      log.primary += b * bl.contrastive.scalar();
      log.quantization += b * bl.quantization.scalar();
      weight += b;
    }
    if (weight > 0.0) {
      log.loss /= weight;
      log.primary /= weight;
      log.quantization /= weight;
    }
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  detail::log_usage(model.codebook(), model.table().value, std::string(to_string(cfg.flavor)) + " embedder");
  return logs;
}

}  // namespace hrq
