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

// Multitoken sequence probe: a pre-LN transformer encoder-decoder with tied
// embeddings over a level-segmented vocabulary, trained with Adam, decoded
// with beam search.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hrq/autodiff.hpp"
#include "hrq/nn.hpp"
#include "hrq/quantizer.hpp"

namespace hrq {

// ===========================================================================
// Vocabulary layout

/// Id 0 is BOS. Level i tokens occupy [1 + i*s, 1 + (i+1)*s); disambiguators
/// follow in a final segment of size `disambiguators`.
struct TokenScheme {
  int k = 3;
  int s = 64;
  int disambiguators = 1;

  void validate() const {
    if (k <= 0 || s <= 0 || disambiguators <= 0) throw ConfigError("token scheme: k, s and disambiguator count must be > 0");
  }

  int vocab() const { return 1 + k * s + disambiguators; }
  int steps() const { return k + 1; }
  int segment_offset(int step) const { return 1 + step * s; }
  int segment_size(int step) const { return step < k ? s : disambiguators; }

  /// Vocabulary ids of a multitoken (k level tokens then the disambiguator;
  /// a missing disambiguator counts as 0).
  std::vector<int> encode(const Multitoken& m) const {
    if (static_cast<int>(m.tokens.size()) != k) throw DataError("token scheme: multitoken has the wrong length");
    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(steps()));
    for (int i = 0; i < k; ++i) {
      const int t = m.tokens[static_cast<std::size_t>(i)];
      if (t < 0 || t >= s) throw DataError("token scheme: token " + std::to_string(t) + " outside [0, " + std::to_string(s) + ")");
      ids.push_back(segment_offset(i) + t);
    }
    const int d = m.disambiguator.value_or(0);
    if (d < 0 || d >= disambiguators) throw DataError("token scheme: disambiguator " + std::to_string(d) + " outside vocabulary");
    ids.push_back(segment_offset(k) + d);
    return ids;
  }

  /// Inverse of encode on per-segment local indices.
  Multitoken from_local(const std::vector<int>& local) const {
    Multitoken m;
    m.tokens.assign(local.begin(), local.begin() + k);
    m.disambiguator = local[static_cast<std::size_t>(k)];
    return m;
  }

  json to_json() const { return {{"k", k}, {"s", s}, {"disambiguators", disambiguators}}; }
};

// ===========================================================================
// Beam search

struct RankedPrediction {
  std::vector<Multitoken> candidates;  // best first
  std::vector<double> scores;          // total log-probabilities
};

/// Log-probabilities over the next segment for each prefix (local indices).
using StepScorer = std::function<std::vector<Vector>(const std::vector<std::vector<int>>& prefixes)>;

/// Keeps the `width` best prefixes per step by total log-probability; ties
/// break towards the lexicographically smaller sequence. Returns up to K
/// complete sequences, best first.
inline std::vector<std::pair<std::vector<int>, double>> beam_search(const std::vector<int>& segment_sizes,
                                                                    const StepScorer& scorer, int K, int width) {
  if (K < 1) throw ConfigError("beam search: K must be >= 1");
  if (width < K) throw ConfigError("beam search: K exceeds the beam width");
  using Hyp = std::pair<std::vector<int>, double>;
  std::vector<Hyp> beam{{{}, 0.0}};
  auto better = [](const Hyp& a, const Hyp& b) { return a.second != b.second ? a.second > b.second : a.first < b.first; };
  for (std::size_t step = 0; step < segment_sizes.size(); ++step) {
    std::vector<std::vector<int>> prefixes;
    for (const auto& h : beam) prefixes.push_back(h.first);
    const std::vector<Vector> lp = scorer(prefixes);
    std::vector<Hyp> next;
    for (std::size_t b = 0; b < beam.size(); ++b) {
      if (lp[b].size() != segment_sizes[step]) throw UsageError("beam search: scorer returned the wrong segment size");
      for (int t = 0; t < segment_sizes[step]; ++t) {
        std::vector<int> seq = beam[b].first;
        seq.push_back(t);
        next.emplace_back(std::move(seq), beam[b].second + lp[b](t));
      }
    }
    const auto keep = std::min<std::size_t>(next.size(), static_cast<std::size_t>(width));
    std::partial_sort(next.begin(), next.begin() + static_cast<std::ptrdiff_t>(keep), next.end(), better);
    next.resize(keep);
    beam = std::move(next);
  }
  if (beam.size() > static_cast<std::size_t>(K)) beam.resize(static_cast<std::size_t>(K));
  return beam;
}

// ===========================================================================
// Probe

struct ProbeConfig {
  int encoder_layers = 2;
  int decoder_layers = 2;
  Eigen::Index width = 64;
  int heads = 4;
  Eigen::Index ff = 256;
  double lr = 1e-3;
  int epochs = 30;
  int batch_size = 64;
  std::uint64_t seed = 0;

  /// 2 + 2 layers, width 64, 4 heads, feed-forward 256.
  static ProbeConfig desk() { return {}; }

  /// 4 + 4 layers, width 256, 8 heads, feed-forward 1024, 100 epochs.
  static ProbeConfig full() {
    ProbeConfig c;
    c.encoder_layers = c.decoder_layers = 4;
    c.width = 256;
    c.heads = 8;
    c.ff = 1024;
    c.epochs = 100;
    return c;
  }

  void validate() const {
    if (encoder_layers < 1 || decoder_layers < 1) throw ConfigError("probe: layer counts must be >= 1");
    if (width <= 0 || heads <= 0 || width % heads != 0) throw ConfigError("probe: width must be a positive multiple of heads");
    if (ff <= 0) throw ConfigError("probe: ff must be > 0");
    if (!(lr > 0.0)) throw ConfigError("probe: lr must be > 0");
    if (epochs < 0) throw ConfigError("probe: epochs must be >= 0");
    if (batch_size <= 0) throw ConfigError("probe: batch_size must be > 0");
  }

  json to_json() const {
    return {{"encoder_layers", encoder_layers}, {"decoder_layers", decoder_layers}, {"width", width}, {"heads", heads},
            {"ff", ff}, {"lr", lr}, {"epochs", epochs}, {"batch_size", batch_size}, {"seed", seed}};
  }

  void merge_json(const json& j) {
    if (!j.is_object()) throw ConfigError("probe config: expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& key = it.key();
      static const char* allowed[] = {"encoder_layers", "decoder_layers", "width", "heads", "ff", "lr", "epochs", "batch_size", "seed"};
      if (std::find_if(std::begin(allowed), std::end(allowed), [&](const char* a) { return key == a; }) == std::end(allowed)) {
        throw ConfigError("probe config: unknown field '" + key + "'");
      }
    }
    auto rd = [&](const char* key, auto& out) {
      if (!j.contains(key)) return;
      try {
        out = j.at(key).get<std::remove_reference_t<decltype(out)>>();
      } catch (const json::exception&) {
        throw ConfigError(std::string("probe config field '") + key + "' has the wrong type");
      }
    };
    rd("encoder_layers", encoder_layers);
    rd("decoder_layers", decoder_layers);
    rd("width", width);
    rd("heads", heads);
    rd("ff", ff);
    rd("lr", lr);
    rd("epochs", epochs);
    rd("batch_size", batch_size);
    rd("seed", seed);
  }
};

/// Source and target vocabulary ids; targets have exactly steps() ids.
struct ProbeExample {
  std::vector<int> source;
  std::vector<int> target;
};

class SequenceProbe {
 public:
  SequenceProbe(const ProbeConfig& cfg, const TokenScheme& scheme, Eigen::Index max_source)
      : cfg_(cfg), scheme_(scheme), max_source_(max_source) {
    cfg.validate();
    scheme.validate();
    if (max_source <= 0) throw ConfigError("probe: maximum source length must be > 0");
    Rng rng = make_rng(cfg.seed, "probe.init");
    const Eigen::Index W = cfg.width;
    embed_ = Parameter("probe.embed", normal_matrix(rng, scheme.vocab(), W, 0.1));
    src_pos_ = Parameter("probe.src_pos", normal_matrix(rng, max_source, W, 0.1));
    tgt_pos_ = Parameter("probe.tgt_pos", normal_matrix(rng, scheme.steps(), W, 0.1));
    for (int l = 0; l < cfg.encoder_layers; ++l) encoder_.push_back(make_block(rng, false, "probe.enc" + std::to_string(l)));
    for (int l = 0; l < cfg.decoder_layers; ++l) decoder_.push_back(make_block(rng, true, "probe.dec" + std::to_string(l)));
    enc_norm_ = make_norm("probe.enc_norm");
    dec_norm_ = make_norm("probe.dec_norm");
  }

  const ProbeConfig& config() const { return cfg_; }
  const TokenScheme& scheme() const { return scheme_; }
  Eigen::Index max_source() const { return max_source_; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&embed_, &src_pos_, &tgt_pos_};
    for (auto* blocks : {&encoder_, &decoder_}) {
      for (auto& b : *blocks) {
        for (Parameter* p : b.parameters()) out.push_back(p);
      }
    }
    for (auto* n : {&enc_norm_, &dec_norm_}) {
      out.push_back(&n->gain);
      out.push_back(&n->bias);
    }
    return out;
  }

  std::vector<Matrix> snapshot() {
    std::vector<Matrix> out;
    for (Parameter* p : parameters()) out.push_back(p->value);
    return out;
  }

  void restore(const std::vector<Matrix>& values) {
    const auto ps = parameters();
    if (values.size() != ps.size()) throw UsageError("probe: snapshot does not match parameters");
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = values[i];
  }

  /// Mean per-token cross-entropy of the targets given the sources. Each
  /// target step is normalised over its own vocabulary segment.
  ad::Var loss(ad::Tape& tape, const std::vector<ProbeExample>& batch) {
    std::vector<std::vector<int>> src, tgt_in;
    for (const auto& ex : batch) {
      check_example(ex);
      src.push_back(ex.source);
      std::vector<int> in{0};
      in.insert(in.end(), ex.target.begin(), ex.target.end() - 1);
      tgt_in.push_back(std::move(in));
    }
    const Encoded mem = encode(tape, src);
    const ad::Var h = decode(tape, mem, tgt_in);
    const auto B = static_cast<Eigen::Index>(batch.size());
    const int T = scheme_.steps();
    const ad::Var E = tape.param(embed_);
    std::optional<ad::Var> total;
    for (int step = 0; step < T; ++step) {
      std::vector<Eigen::Index> rows(static_cast<std::size_t>(B));
      std::vector<Eigen::Index> targets(static_cast<std::size_t>(B));
      for (Eigen::Index b = 0; b < B; ++b) {
        rows[static_cast<std::size_t>(b)] = b * T + step;
        targets[static_cast<std::size_t>(b)] = batch[static_cast<std::size_t>(b)].target[static_cast<std::size_t>(step)] - scheme_.segment_offset(step);
      }
      const ad::Var ls = ad::log_softmax_rows(ad::matmul_nt(ad::gather_rows(h, rows), segment(E, step)));
      const ad::Var nll = ad::scale(ad::mean(ad::pick(ls, targets)), -1.0 / static_cast<double>(T));
      total = total ? ad::add(*total, nll) : nll;
    }
    return *total;
  }

  /// Log-probabilities over the next segment after `prefix` (local indices).
  Vector next_log_probs(const std::vector<int>& source, const std::vector<int>& prefix) {
    check_source(source);
    const auto step = static_cast<int>(prefix.size());
    if (step >= scheme_.steps()) throw UsageError("probe: prefix already complete");
    std::vector<int> in{0};
    for (int i = 0; i < step; ++i) {
      const int t = prefix[static_cast<std::size_t>(i)];
      if (t < 0 || t >= scheme_.segment_size(i)) throw DataError("probe: prefix token outside its segment");
      in.push_back(scheme_.segment_offset(i) + t);
    }
    ad::Tape tape(false);
    const Encoded mem = encode(tape, {source});
    const ad::Var h = decode(tape, mem, {in});
    const ad::Var last = ad::gather_rows(h, {static_cast<Eigen::Index>(step)});
    return ad::log_softmax_rows(ad::matmul_nt(last, segment(tape.constant(embed_.value), step))).value().row(0).transpose();
  }

  /// Top-K multitokens for one source by beam search (width >= K).
  RankedPrediction generate(const std::vector<int>& source, int K, int width) {
    if (width < K) throw ConfigError("beam search: K exceeds the beam width");
    check_source(source);
    ad::Tape tape(false);
    const Encoded mem = encode(tape, {source});
    const ad::Var E = tape.constant(embed_.value);
    std::vector<int> sizes;
    for (int step = 0; step < scheme_.steps(); ++step) sizes.push_back(scheme_.segment_size(step));
    const StepScorer scorer = [&](const std::vector<std::vector<int>>& prefixes) {
      const auto step = static_cast<int>(prefixes.front().size());
      std::vector<std::vector<int>> tgt_in;
      for (const auto& p : prefixes) {
        std::vector<int> in{0};
        for (std::size_t i = 0; i < p.size(); ++i) in.push_back(scheme_.segment_offset(static_cast<int>(i)) + p[i]);
        tgt_in.push_back(std::move(in));
      }
      Encoded shared = mem;
      shared.spans.assign(prefixes.size(), mem.spans.front());
      const ad::Var h = decode(tape, shared, tgt_in);
      std::vector<Eigen::Index> rows;
      for (std::size_t b = 0; b < prefixes.size(); ++b) rows.push_back(static_cast<Eigen::Index>(b) * (step + 1) + step);
      const Matrix lp = ad::log_softmax_rows(ad::matmul_nt(ad::gather_rows(h, rows), segment(E, step))).value();
      std::vector<Vector> out;
      for (Eigen::Index b = 0; b < lp.rows(); ++b) out.push_back(lp.row(b).transpose());
      return out;
    };
    RankedPrediction pred;
    for (auto& [seq, score] : beam_search(sizes, scorer, K, width)) {
      pred.candidates.push_back(scheme_.from_local(seq));
      pred.scores.push_back(score);
    }
    return pred;
  }

 private:
  struct Norm {
    Parameter gain, bias;
  };
  struct Attention {
    Parameter wq, wk, wv, wo;
  };
  struct Block {
    Norm n1, n2, n3;
    Attention self, cross;
    Parameter w1, b1, w2, b2;
    bool has_cross = false;

    std::vector<Parameter*> parameters() {
      std::vector<Parameter*> out{&n1.gain, &n1.bias, &n2.gain, &n2.bias, &self.wq, &self.wk, &self.wv, &self.wo,
                                  &w1, &b1, &w2, &b2};
      if (has_cross) {
        for (Parameter* p : {&n3.gain, &n3.bias, &cross.wq, &cross.wk, &cross.wv, &cross.wo}) out.push_back(p);
      }
      return out;
    }
  };
  struct Encoded {
    ad::Var memory;
    std::vector<ad::Span> spans;
  };

  static Matrix normal_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double sd) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = sd * normal(rng);
    return m;
  }

  static Matrix xavier(Rng& rng, Eigen::Index r, Eigen::Index c) {
    const double bound = std::sqrt(6.0 / static_cast<double>(r + c));
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = uniform(rng, -bound, bound);
    return m;
  }

  Norm make_norm(const std::string& name) const {
    return {Parameter(name + ".gain", Matrix::Ones(1, cfg_.width)), Parameter(name + ".bias", Matrix::Zero(1, cfg_.width))};
  }

  Attention make_attention(Rng& rng, const std::string& name) const {
    const Eigen::Index W = cfg_.width;
    return {Parameter(name + ".wq", xavier(rng, W, W)), Parameter(name + ".wk", xavier(rng, W, W)),
            Parameter(name + ".wv", xavier(rng, W, W)), Parameter(name + ".wo", xavier(rng, W, W))};
  }

  Block make_block(Rng& rng, bool cross, const std::string& name) const {
    Block b;
    b.has_cross = cross;
    b.n1 = make_norm(name + ".n1");
    b.n2 = make_norm(name + ".n2");
    b.self = make_attention(rng, name + ".self");
    if (cross) {
      b.n3 = make_norm(name + ".n3");
      b.cross = make_attention(rng, name + ".cross");
    }
    b.w1 = Parameter(name + ".w1", xavier(rng, cfg_.width, cfg_.ff));
    b.b1 = Parameter(name + ".b1", Matrix::Zero(1, cfg_.ff));
    b.w2 = Parameter(name + ".w2", xavier(rng, cfg_.ff, cfg_.width));
    b.b2 = Parameter(name + ".b2", Matrix::Zero(1, cfg_.width));
    return b;
  }

  static ad::Var norm(ad::Tape& tape, Norm& n, ad::Var x) {
    return ad::add_row(ad::mul_row(ad::layer_norm_rows(x), tape.param(n.gain)), tape.param(n.bias));
  }

  ad::Var attend(ad::Tape& tape, Attention& a, ad::Var x, ad::Var mem, const std::vector<ad::Span>& qs,
                 const std::vector<ad::Span>& ks, bool causal) const {
    const ad::Var q = ad::matmul(x, tape.param(a.wq));
    const ad::Var k = ad::matmul(mem, tape.param(a.wk));
    const ad::Var v = ad::matmul(mem, tape.param(a.wv));
    return ad::matmul(ad::attention(q, k, v, qs, ks, cfg_.heads, causal), tape.param(a.wo));
  }

  static ad::Var feed_forward(ad::Tape& tape, Block& b, ad::Var x) {
    const ad::Var h = ad::relu(ad::add_row(ad::matmul(x, tape.param(b.w1)), tape.param(b.b1)));
    return ad::add_row(ad::matmul(h, tape.param(b.w2)), tape.param(b.b2));
  }

  ad::Var segment(ad::Var E, int step) const {
    std::vector<Eigen::Index> rows(static_cast<std::size_t>(scheme_.segment_size(step)));
    std::iota(rows.begin(), rows.end(), static_cast<Eigen::Index>(scheme_.segment_offset(step)));
    return ad::gather_rows(E, rows);
  }

  ad::Var embed(ad::Tape& tape, const std::vector<std::vector<int>>& seqs, Parameter& pos, std::vector<ad::Span>& spans) {
    std::vector<Eigen::Index> ids, positions;
    spans.clear();
    for (const auto& s : seqs) {
      spans.push_back({static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(s.size())});
      for (std::size_t i = 0; i < s.size(); ++i) {
        ids.push_back(s[i]);
        positions.push_back(static_cast<Eigen::Index>(i));
      }
    }
    const ad::Var E = tape.param(embed_);
    return ad::add(ad::gather_rows(E, ids), ad::gather_rows(tape.param(pos), positions));
  }

  Encoded encode(ad::Tape& tape, const std::vector<std::vector<int>>& sources) {
    Encoded out;
    ad::Var x = embed(tape, sources, src_pos_, out.spans);
    for (auto& b : encoder_) {
      const ad::Var xn = norm(tape, b.n1, x);
      x = ad::add(x, attend(tape, b.self, xn, xn, out.spans, out.spans, false));
      x = ad::add(x, feed_forward(tape, b, norm(tape, b.n2, x)));
    }
    out.memory = norm(tape, enc_norm_, x);
    return out;
  }

  ad::Var decode(ad::Tape& tape, const Encoded& mem, const std::vector<std::vector<int>>& targets_in) {
    std::vector<ad::Span> spans;
    ad::Var x = embed(tape, targets_in, tgt_pos_, spans);
    for (auto& b : decoder_) {
      const ad::Var xn = norm(tape, b.n1, x);
      x = ad::add(x, attend(tape, b.self, xn, xn, spans, spans, true));
      x = ad::add(x, attend(tape, b.cross, norm(tape, b.n3, x), mem.memory, spans, mem.spans, false));
      x = ad::add(x, feed_forward(tape, b, norm(tape, b.n2, x)));
    }
    return norm(tape, dec_norm_, x);
  }

  void check_source(const std::vector<int>& source) const {
    if (source.empty()) throw DataError("probe: empty source sequence");
    if (static_cast<Eigen::Index>(source.size()) > max_source_) throw DataError("probe: source longer than the maximum length");
    for (int id : source) {
      if (id < 1 || id >= scheme_.vocab()) throw DataError("probe: source token outside the vocabulary");
    }
  }

  void check_example(const ProbeExample& ex) const {
    check_source(ex.source);
    if (static_cast<int>(ex.target.size()) != scheme_.steps()) throw DataError("probe: target has the wrong length");
    for (int step = 0; step < scheme_.steps(); ++step) {
      const int local = ex.target[static_cast<std::size_t>(step)] - scheme_.segment_offset(step);
      if (local < 0 || local >= scheme_.segment_size(step)) throw DataError("probe: target token outside its segment");
    }
  }

  ProbeConfig cfg_;
  TokenScheme scheme_;
  Eigen::Index max_source_;
  Parameter embed_, src_pos_, tgt_pos_;
  std::vector<Block> encoder_, decoder_;
  Norm enc_norm_, dec_norm_;
};

/// Examples for one epoch; called once per epoch with the training RNG.
using EpochSampler = std::function<std::vector<ProbeExample>(int epoch, Rng& rng)>;

/// Adam on minibatches of the sampled examples. `on_epoch` receives the
/// epoch index and the mean loss.
inline std::vector<double> train_probe(SequenceProbe& probe, const EpochSampler& sampler,
                                       const std::function<void(int, double)>& on_epoch = {}) {
  const ProbeConfig& cfg = probe.config();
  Rng rng = make_rng(cfg.seed, "probe.train");
  Adam opt(cfg.lr);
  const auto params = probe.parameters();
  std::vector<double> losses;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<ProbeExample> data = sampler(epoch, rng);
    if (data.empty()) throw DataError("train_probe: no training examples");
    shuffle(data, rng);
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(data.size(), i + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<ProbeExample> batch(data.begin() + static_cast<std::ptrdiff_t>(i), data.begin() + static_cast<std::ptrdiff_t>(end));
      ad::Tape tape;
      const ad::Var l = probe.loss(tape, batch);
      if (!std::isfinite(l.scalar())) throw NumericError("train_probe: non-finite loss at epoch " + std::to_string(epoch));
      tape.backward(l);
      opt.step(params);
      total += l.scalar() * static_cast<double>(end - i);
    }
    losses.push_back(total / static_cast<double>(data.size()));
    if (on_epoch) on_epoch(epoch, losses.back());
  }
  return losses;
}

inline std::vector<double> train_probe(SequenceProbe& probe, const std::vector<ProbeExample>& examples,
                                       const std::function<void(int, double)>& on_epoch = {}) {
  return train_probe(probe, [&](int, Rng&) { return examples; }, on_epoch);
}

inline RankedPrediction beam_generate(SequenceProbe& probe, const std::vector<int>& source, int K, int width = 0) {
  return probe.generate(source, K, width == 0 ? K : width);
}

}  // namespace hrq
