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

// Ranking metrics, the random-token baseline, latent norm analysis, metric
// reports, and the two downstream protocols: hypernym generation over a
// taxonomy and next-item generation over interaction histories.

#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "hrq/data.hpp"
#include "hrq/geometry.hpp"
#include "hrq/models.hpp"
#include "hrq/probe.hpp"

namespace hrq {

// ===========================================================================
// Metrics

/// |top-K ∩ truth| / |truth|; 0 for an empty truth set.
inline double recall_at_k(const RankedPrediction& pred, const std::vector<Multitoken>& truth, int K) {
  if (K < 1) throw UsageError("recall_at_k: K must be >= 1");
  const std::set<Multitoken> want(truth.begin(), truth.end());
  if (want.empty()) return 0.0;
  const auto n = std::min<std::size_t>(pred.candidates.size(), static_cast<std::size_t>(K));
  std::set<Multitoken> hit;
  for (std::size_t i = 0; i < n; ++i) {
    if (want.count(pred.candidates[i])) hit.insert(pred.candidates[i]);
  }
  return static_cast<double>(hit.size()) / static_cast<double>(want.size());
}

/// 1 / log2(rank + 1) for a single truth at 1-indexed rank <= K, else 0.
inline double ndcg_at_k(const RankedPrediction& pred, const Multitoken& truth, int K) {
  if (K < 1) throw UsageError("ndcg_at_k: K must be >= 1");
  const auto n = std::min<std::size_t>(pred.candidates.size(), static_cast<std::size_t>(K));
  for (std::size_t i = 0; i < n; ++i) {
    if (pred.candidates[i] == truth) return 1.0 / std::log2(static_cast<double>(i) + 2.0);
  }
  return 0.0;
}

/// Uniform tokens in [0, s) per level, then disambiguated.
inline std::map<std::string, Multitoken> random_baseline_tokens(const std::vector<std::string>& entities, int k, int s,
                                                                std::uint64_t seed) {
  if (k <= 0 || s <= 0) throw ConfigError("random baseline: k and s must be > 0");
  Rng rng = make_rng(seed, "random_baseline");
  std::map<std::string, Multitoken> raw;
  for (const auto& e : entities) {
    Multitoken m;
    for (int i = 0; i < k; ++i) m.tokens.push_back(static_cast<int>(uniform_index(rng, static_cast<std::size_t>(s))));
    if (!raw.emplace(e, std::move(m)).second) throw DataError("random baseline: duplicate entity '" + e + "'");
  }
  return disambiguate(raw);
}

// ===========================================================================
// Norm analysis

struct NormStats {
  double mean = 0.0;
  double std = 0.0;  // population
  double cv = 0.0;

  json to_json() const { return {{"mean", mean}, {"std", std}, {"cv", cv}}; }
};

/// Euclidean norms of latents; ball latents are first sent to the tangent
/// space at the origin.
inline std::vector<double> latent_norms(const Matrix& latents, Flavor flavor, double c = 1.0) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(latents.rows()));
  for (Eigen::Index i = 0; i < latents.rows(); ++i) {
    const Vector x = latents.row(i).transpose();
    out.push_back(flavor == Flavor::kHyperbolic ? geo::logmap0(x, c).norm() : x.norm());
  }
  return out;
}

inline NormStats norm_analysis(const std::vector<double>& norms) {
  if (norms.empty()) throw DataError("norm_analysis: no latents");
  // Shifted by the first value so identical norms give exactly zero spread.
  const double n = static_cast<double>(norms.size());
  double shift_mean = 0.0;
  for (double v : norms) shift_mean += v - norms.front();
  shift_mean /= n;
  double var = 0.0;
  for (double v : norms) var += (v - norms.front() - shift_mean) * (v - norms.front() - shift_mean);
  NormStats st;
  st.mean = norms.front() + shift_mean;
  st.std = std::sqrt(var / n);
  if (st.mean == 0.0) throw NumericError("norm_analysis: mean norm is 0, coefficient of variation undefined");
  st.cv = st.std / st.mean;
  return st;
}

inline NormStats norm_analysis(const Matrix& latents, Flavor flavor, double c = 1.0) {
  return norm_analysis(latent_norms(latents, flavor, c));
}

inline void write_norms_csv(std::ostream& os, const std::vector<std::string>& ids, const std::vector<double>& norms) {
  if (ids.size() != norms.size()) throw UsageError("write_norms_csv: ids and norms differ in length");
  os << "entity_id,norm\n";
  os.precision(17);
  for (std::size_t i = 0; i < ids.size(); ++i) os << ids[i] << ',' << norms[i] << '\n';
}

// ===========================================================================
// Reports

using SeedMetrics = std::map<std::string, double>;

/// Per-seed metric lists with their mean and sample standard deviation
/// (0 for a single seed). `diagnostics` holds values outside [0, 1].
struct MetricsReport {
  std::string scheme;
  json config = json::object();
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::vector<double>> per_seed;
  std::map<std::string, double> mean;
  std::map<std::string, double> std;
  std::map<std::string, std::vector<double>> diagnostics;

  static MetricsReport aggregate(std::string scheme, json config, std::vector<std::uint64_t> seeds,
                                 const std::vector<SeedMetrics>& runs, const std::vector<SeedMetrics>& diag = {}) {
    if (runs.size() != seeds.size()) throw UsageError("MetricsReport: one metric set per seed required");
    MetricsReport r;
    r.scheme = std::move(scheme);
    r.config = std::move(config);
    r.seeds = std::move(seeds);
    for (const auto& run : runs) {
      for (const auto& [name, v] : run) r.per_seed[name].push_back(v);
    }
    for (const auto& [name, vals] : r.per_seed) {
      if (vals.size() != runs.size()) throw UsageError("MetricsReport: metric '" + name + "' missing for some seed");
      double m = 0.0;
      for (double v : vals) m += v;
      m /= static_cast<double>(vals.size());
      double var = 0.0;
      for (double v : vals) var += (v - m) * (v - m);
      r.mean[name] = m;
      r.std[name] = vals.size() > 1 ? std::sqrt(var / static_cast<double>(vals.size() - 1)) : 0.0;
    }
    for (const auto& d : diag) {
      for (const auto& [name, v] : d) r.diagnostics[name].push_back(v);
    }
    return r;
  }

  json to_json() const {
    json j{{"scheme", scheme}, {"config", config}, {"seeds", seeds}, {"per_seed", per_seed}, {"mean", mean}, {"std", std}};
    if (!diagnostics.empty()) j["diagnostics"] = diagnostics;
    return j;
  }

  static MetricsReport from_json(const json& j) {
    try {
      MetricsReport r;
      r.scheme = j.at("scheme").get<std::string>();
      r.config = j.at("config");
      r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
      r.per_seed = j.at("per_seed").get<std::map<std::string, std::vector<double>>>();
      r.mean = j.at("mean").get<std::map<std::string, double>>();
      r.std = j.at("std").get<std::map<std::string, double>>();
      if (j.contains("diagnostics")) r.diagnostics = j.at("diagnostics").get<std::map<std::string, std::vector<double>>>();
      return r;
    } catch (const json::exception& e) {
      throw DataError(std::string("metrics report: ") + e.what());
    }
  }
};

inline json reports_to_json(const std::vector<MetricsReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(r.to_json());
  return arr;
}

namespace detail {

/// Runs fn(0..n-1) on up to `jobs` threads. Results must be written to
/// per-index slots; the first exception is rethrown after all threads join.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr error;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= n || error) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < std::min<int>(jobs, static_cast<int>(n)); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline std::string scheme_name(Flavor f) { return f == Flavor::kHyperbolic ? "hrq" : "rq"; }

inline TokenScheme scheme_for(const std::map<std::string, Multitoken>& tokens, int k, int s) {
  for (const auto& [id, m] : tokens) {
    if (static_cast<int>(m.tokens.size()) != k) {
      throw ConfigError("multitokens of '" + id + "' have depth " + std::to_string(m.tokens.size()) +
                        " but the configuration says k = " + std::to_string(k));
    }
    for (int t : m.tokens) {
      if (t < 0 || t >= s) {
        throw ConfigError("multitokens of '" + id + "' use token " + std::to_string(t) +
                          " outside the configured codebook size s = " + std::to_string(s));
      }
    }
  }
  return {k, s, disambiguator_vocab(tokens)};
}

}  // namespace detail

// ===========================================================================
// Hierarchy modeling: generate a hypernym's multitoken from a hyponym's

/// Pairs from training edges (u = hyponym, v = hypernym); negatives avoid the
/// full closure, test edges included, and u itself.
inline ContrastiveData make_contrastive_data(const TaxonomyGraph& closed, const RelationSplit& split) {
  ContrastiveData d;
  d.related.resize(static_cast<std::size_t>(closed.size()));
  for (int i = 0; i < closed.size(); ++i) d.related[static_cast<std::size_t>(i)].insert(i);
  for (const auto& [hyper, hypo] : closed.edges) {
    d.related[static_cast<std::size_t>(hyper)].insert(hypo);
    d.related[static_cast<std::size_t>(hypo)].insert(hyper);
  }
  for (const auto& [hyper, hypo] : split.train) d.pairs.emplace_back(hypo, hyper);
  return d;
}

struct ModelingConfig {
  EmbedderConfig embedder;
  ProbeConfig probe = ProbeConfig::desk();
  int top_k = 10;
  int beam_width = 10;
  std::vector<Flavor> schemes{Flavor::kEuclidean, Flavor::kHyperbolic};

  void validate() const {
    embedder.validate();
    probe.validate();
    if (top_k < 1 || beam_width < top_k) throw ConfigError("modeling: need 1 <= top_k <= beam_width");
  }

  json to_json() const {
    return {{"embedder", embedder.to_json()}, {"probe", probe.to_json()}, {"top_k", top_k}, {"beam_width", beam_width}};
  }

  /// Fields absent from `j` keep their current values.
  void merge_json(const json& j) {
    detail::check_keys(j, {"embedder", "probe", "top_k", "beam_width"}, "modeling config");
    if (j.contains("embedder")) embedder.merge_json(j.at("embedder"));
    if (j.contains("probe")) probe.merge_json(j.at("probe"));
    detail::read_opt(j, "top_k", top_k);
    detail::read_opt(j, "beam_width", beam_width);
  }
};

/// Trains the probe on training-edge token pairs and averages recall@K over
/// test hyponyms; a query's truths are all of its test hypernyms.
inline SeedMetrics evaluate_modeling(const TaxonomyGraph& closed, const RelationSplit& split,
                                     const std::map<std::string, Multitoken>& tokens, const TokenScheme& scheme,
                                     const ProbeConfig& probe_cfg, int top_k, int beam_width) {
  if (split.test.empty()) throw DataError("evaluate_modeling: empty test split");
  auto ids = [&](int entity) {
    const auto it = tokens.find(closed.entities[static_cast<std::size_t>(entity)]);
    if (it == tokens.end()) throw DataError("evaluate_modeling: no multitoken for '" + closed.entities[static_cast<std::size_t>(entity)] + "'");
    return it->second;
  };
  std::vector<ProbeExample> train;
  for (const auto& [hyper, hypo] : split.train) train.push_back({scheme.encode(ids(hypo)), scheme.encode(ids(hyper))});
  if (train.empty()) throw DataError("evaluate_modeling: empty training split");
  SequenceProbe probe(probe_cfg, scheme, scheme.steps());
  train_probe(probe, train);

  std::map<int, std::vector<Multitoken>> truths;
  for (const auto& [hyper, hypo] : split.test) truths[hypo].push_back(ids(hyper));
  double total = 0.0;
  for (const auto& [hypo, truth] : truths) {
    const RankedPrediction pred = probe.generate(scheme.encode(ids(hypo)), top_k, beam_width);
    total += recall_at_k(pred, truth, top_k);
  }
  return {{"recall@" + std::to_string(top_k), total / static_cast<double>(truths.size())}};
}

/// Per (scheme, seed): train the embedder and codebook, freeze multitokens,
/// train the probe, evaluate. One report per scheme.
inline std::vector<MetricsReport> run_hierarchy_modeling(const TaxonomyGraph& graph, const RelationSplit& split,
                                                         const ModelingConfig& cfg,
                                                         const std::vector<std::uint64_t>& seeds, int jobs = 1) {
  cfg.validate();
  if (seeds.empty()) throw ConfigError("modeling: at least one seed required");
  const TaxonomyGraph closed = graph.closed ? graph : transitive_closure(graph);
  const ContrastiveData data = make_contrastive_data(closed, split);
  const std::size_t S = cfg.schemes.size();
  std::vector<SeedMetrics> results(S * seeds.size());
  detail::parallel_for(results.size(), jobs, [&](std::size_t cell) {
    const Flavor flavor = cfg.schemes[cell / seeds.size()];
    const std::uint64_t seed = seeds[cell % seeds.size()];
    EmbedderConfig ec = cfg.embedder;
    ec.flavor = flavor;
    ec.seed = seed;
    HierarchyEmbedder emb(ec, closed.entities);
    train_hierarchy_embedder(emb, data);
    const auto tokens = emb.multitokens();
    ProbeConfig pc = cfg.probe;
    pc.seed = seed;
    results[cell] = evaluate_modeling(closed, split, tokens, detail::scheme_for(tokens, ec.k, static_cast<int>(ec.s)), pc,
                                      cfg.top_k, cfg.beam_width);
    log_info("modeling " + detail::scheme_name(flavor) + " seed " + std::to_string(seed) + ": recall@" +
             std::to_string(cfg.top_k) + " " + std::to_string(results[cell].begin()->second));
  });
  std::vector<MetricsReport> reports;
  for (std::size_t s = 0; s < S; ++s) {
    json config = cfg.to_json();
    config["embedder"]["flavor"] = to_string(cfg.schemes[s]);
    const std::vector<SeedMetrics> runs(results.begin() + static_cast<std::ptrdiff_t>(s * seeds.size()),
                                        results.begin() + static_cast<std::ptrdiff_t>((s + 1) * seeds.size()));
    reports.push_back(MetricsReport::aggregate(detail::scheme_name(cfg.schemes[s]), config, seeds, runs));
  }
  return reports;
}

/// Named, already frozen multitoken tables (e.g. read from TSV); only the
/// probe is trained per seed. Tables must match the configured k and s.
using NamedTokens = std::vector<std::pair<std::string, std::map<std::string, Multitoken>>>;

inline std::vector<MetricsReport> evaluate_modeling_tokens(const TaxonomyGraph& graph, const RelationSplit& split,
                                                           const NamedTokens& tables, const ModelingConfig& cfg,
                                                           const std::vector<std::uint64_t>& seeds, int jobs = 1) {
  cfg.validate();
  if (seeds.empty()) throw ConfigError("modeling: at least one seed required");
  const TaxonomyGraph closed = graph.closed ? graph : transitive_closure(graph);
  std::vector<TokenScheme> schemes;
  for (const auto& [name, tokens] : tables) schemes.push_back(detail::scheme_for(tokens, cfg.embedder.k, static_cast<int>(cfg.embedder.s)));
  std::vector<SeedMetrics> results(tables.size() * seeds.size());
  detail::parallel_for(results.size(), jobs, [&](std::size_t cell) {
    const std::size_t t = cell / seeds.size();
    ProbeConfig pc = cfg.probe;
    pc.seed = seeds[cell % seeds.size()];
    results[cell] = evaluate_modeling(closed, split, tables[t].second, schemes[t], pc, cfg.top_k, cfg.beam_width);
  });
  std::vector<MetricsReport> reports;
  for (std::size_t t = 0; t < tables.size(); ++t) {
    json config{{"k", cfg.embedder.k}, {"s", cfg.embedder.s}, {"probe", cfg.probe.to_json()}, {"top_k", cfg.top_k},
                {"beam_width", cfg.beam_width}};
    const auto b = static_cast<std::ptrdiff_t>(t * seeds.size());
    reports.push_back(MetricsReport::aggregate(tables[t].first, config, seeds,
                                               std::vector<SeedMetrics>(results.begin() + b, results.begin() + b + static_cast<std::ptrdiff_t>(seeds.size()))));
  }
  return reports;
}

// ===========================================================================
// Hierarchy discovery: generate the next item's multitoken from a history

struct DiscoveryConfig {
  VaeConfig vae;
  ProbeConfig probe = ProbeConfig::desk();
  int max_context = 19;        // most recent history items fed to the probe
  int eval_every = 1;          // epochs between validation passes; 0 keeps the last epoch
  int validation_users = 0;    // 0 = all users; otherwise the first n users
  int beam_width = 10;
  std::vector<std::string> schemes{"random", "rq", "hrq"};

  void validate() const {
    vae.validate();
    probe.validate();
    if (max_context < 1) throw ConfigError("discovery: max_context must be >= 1");
    if (eval_every < 0) throw ConfigError("discovery: eval_every must be >= 0");
    if (validation_users < 0) throw ConfigError("discovery: validation_users must be >= 0");
    if (beam_width < 10) throw ConfigError("discovery: beam_width must be >= 10");
    for (const auto& s : schemes) {
      if (s != "random" && s != "rq" && s != "hrq") throw ConfigError("discovery: unknown scheme '" + s + "'");
    }
  }

  json to_json() const {
    return {{"vae", vae.to_json()}, {"probe", probe.to_json()}, {"max_context", max_context},
            {"eval_every", eval_every}, {"validation_users", validation_users}, {"beam_width", beam_width},
            {"schemes", schemes}};
  }

  /// Fields absent from `j` keep their current values.
  void merge_json(const json& j) {
    detail::check_keys(j, {"vae", "probe", "max_context", "eval_every", "validation_users", "beam_width", "schemes"},
                       "discovery config");
    if (j.contains("vae")) vae.merge_json(j.at("vae"));
    if (j.contains("probe")) probe.merge_json(j.at("probe"));
    detail::read_opt(j, "max_context", max_context);
    detail::read_opt(j, "eval_every", eval_every);
    detail::read_opt(j, "validation_users", validation_users);
    detail::read_opt(j, "beam_width", beam_width);
    detail::read_opt(j, "schemes", schemes);
  }
};

/// Validation recall@10 after each evaluated epoch and the selected epoch.
struct SelectionTrace {
  std::vector<int> epochs;
  std::vector<double> validation_recall;
  int best_epoch = -1;
};

namespace detail {

inline std::vector<int> history_source(const std::vector<int>& items, std::size_t end, int max_context,
                                       const std::vector<std::vector<int>>& item_ids) {
  const std::size_t begin = end > static_cast<std::size_t>(max_context) ? end - static_cast<std::size_t>(max_context) : 0;
  std::vector<int> src;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& ids = item_ids[static_cast<std::size_t>(items[i])];
    src.insert(src.end(), ids.begin(), ids.end());
  }
  return src;
}

inline std::vector<std::vector<int>> item_vocab_ids(const InteractionDataset& ds,
                                                    const std::map<std::string, Multitoken>& tokens,
                                                    const TokenScheme& scheme) {
  std::vector<std::vector<int>> out;
  out.reserve(ds.items.size());
  for (const auto& item : ds.items) {
    const auto it = tokens.find(item);
    if (it == tokens.end()) throw DataError("discovery: no multitoken for item '" + item + "'");
    out.push_back(scheme.encode(it->second));
  }
  return out;
}

}  // namespace detail

/// Trains the sequential probe. Each epoch draws one random prefix per user
/// from its training items only; validation targets are used solely for
/// model selection and test targets are never read.
inline SequenceProbe train_discovery_probe(const InteractionDataset& ds, const LeaveOneOutSplit& split,
                                           const std::map<std::string, Multitoken>& tokens, const TokenScheme& scheme,
                                           const DiscoveryConfig& cfg, const ProbeConfig& probe_cfg,
                                           SelectionTrace* trace = nullptr) {
  const auto ids = detail::item_vocab_ids(ds, tokens, scheme);
  SequenceProbe probe(probe_cfg, scheme, static_cast<Eigen::Index>(cfg.max_context) * scheme.steps());
  std::vector<std::size_t> trainable;
  for (std::size_t u = 0; u < split.users.size(); ++u) {
    if (split.users[u].train.size() >= 2) trainable.push_back(u);
  }
  if (trainable.empty()) throw DataError("discovery: no user has two training interactions");
  const EpochSampler sampler = [&](int, Rng& rng) {
    std::vector<ProbeExample> out;
    out.reserve(trainable.size());
    for (std::size_t u : trainable) {
      const auto& items = split.users[u].train;
      const std::size_t t = 1 + uniform_index(rng, items.size() - 1);  // predict items[t] from items[0..t)
      out.push_back({detail::history_source(items, t, cfg.max_context, ids), ids[static_cast<std::size_t>(items[t])]});
    }
    return out;
  };
  const std::size_t n_val = cfg.validation_users == 0
                                ? split.users.size()
                                : std::min(split.users.size(), static_cast<std::size_t>(cfg.validation_users));
  auto validation_recall = [&] {
    double hits = 0.0;
    for (std::size_t u = 0; u < n_val; ++u) {
      const auto& us = split.users[u];
      const auto pred = probe.generate(detail::history_source(us.train, us.train.size(), cfg.max_context, ids), 10, cfg.beam_width);
      hits += recall_at_k(pred, {tokens.at(ds.items[static_cast<std::size_t>(us.validation_target)])}, 10);
    }
    return hits / static_cast<double>(n_val);
  };
  SelectionTrace local;
  std::vector<Matrix> best;
  double best_recall = -1.0;
  const auto on_epoch = [&](int epoch, double) {
    if (cfg.eval_every == 0 || (epoch + 1) % cfg.eval_every != 0) return;
    const double r = validation_recall();
    local.epochs.push_back(epoch);
    local.validation_recall.push_back(r);
    if (r > best_recall) {
      best_recall = r;
      best = probe.snapshot();
      local.best_epoch = epoch;
    }
  };
  train_probe(probe, sampler, on_epoch);
  if (!best.empty()) {
    probe.restore(best);
  } else {
    local.best_epoch = probe_cfg.epochs - 1;
  }
  if (trace) *trace = local;
  return probe;
}

/// Recall@{5,10}, NDCG@{5,10} on test targets, plus the fraction of top-10
/// candidates that name an existing item.
inline SeedMetrics evaluate_discovery_probe(SequenceProbe& probe, const InteractionDataset& ds,
                                            const LeaveOneOutSplit& split,
                                            const std::map<std::string, Multitoken>& tokens, const DiscoveryConfig& cfg) {
  const auto ids = detail::item_vocab_ids(ds, tokens, probe.scheme());
  std::set<Multitoken> valid;
  for (const auto& item : ds.items) valid.insert(tokens.at(item));
  double r5 = 0, r10 = 0, n5 = 0, n10 = 0, valid_hits = 0, candidates = 0;
  for (const auto& us : split.users) {
    const auto ctx = LeaveOneOutSplit::test_context(us);
    const auto pred = probe.generate(detail::history_source(ctx, ctx.size(), cfg.max_context, ids), 10, cfg.beam_width);
    const Multitoken& truth = tokens.at(ds.items[static_cast<std::size_t>(us.test_target)]);
    r5 += recall_at_k(pred, {truth}, 5);
    r10 += recall_at_k(pred, {truth}, 10);
    n5 += ndcg_at_k(pred, truth, 5);
    n10 += ndcg_at_k(pred, truth, 10);
    for (const auto& m : pred.candidates) valid_hits += valid.count(m) ? 1.0 : 0.0;
    candidates += static_cast<double>(pred.candidates.size());
  }
  const auto n = static_cast<double>(split.users.size());
  return {{"recall@5", r5 / n}, {"recall@10", r10 / n}, {"ndcg@5", n5 / n}, {"ndcg@10", n10 / n},
          {"valid_item_rate", valid_hits / candidates}};
}

/// Item multitokens from a trained autoencoder over the item embeddings.
inline std::map<std::string, Multitoken> autoencoder_tokens(QuantizedAutoencoder& model, const std::vector<std::string>& ids,
                                                            const Matrix& X) {
  const Eigen::MatrixXi t = model.tokens(X);
  std::map<std::string, Multitoken> raw;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Multitoken m;
    for (Eigen::Index l = 0; l < t.cols(); ++l) m.tokens.push_back(t(static_cast<Eigen::Index>(i), l));
    raw.emplace(ids[i], std::move(m));
  }
  return disambiguate(raw);
}

/// Per (scheme, seed): build item multitokens (random, or a trained RQ-VAE /
/// HRQ-VAE), train the probe with validation model selection, report test
/// metrics. Learned schemes also record latent norm CV and the selected epoch
/// as diagnostics.
inline std::vector<MetricsReport> run_hierarchy_discovery(const InteractionDataset& ds, const DiscoveryConfig& cfg,
                                                          const std::vector<std::uint64_t>& seeds, int jobs = 1) {
  cfg.validate();
  if (seeds.empty()) throw ConfigError("discovery: at least one seed required");
  const LeaveOneOutSplit split = leave_one_out(ds);
  const std::size_t S = cfg.schemes.size();
  std::vector<SeedMetrics> results(S * seeds.size()), diags(S * seeds.size());
  detail::parallel_for(results.size(), jobs, [&](std::size_t cell) {
    const std::string& name = cfg.schemes[cell / seeds.size()];
    const std::uint64_t seed = seeds[cell % seeds.size()];
    std::map<std::string, Multitoken> tokens;
    SeedMetrics diag;
    if (name == "random") {
      tokens = random_baseline_tokens(ds.items, cfg.vae.k, static_cast<int>(cfg.vae.s), seed);
    } else {
      VaeConfig vc = cfg.vae;
      vc.flavor = name == "hrq" ? Flavor::kHyperbolic : Flavor::kEuclidean;
      vc.seed = seed;
      QuantizedAutoencoder model(vc, ds.dim());
      train_autoencoder(model, ds.embeddings);
      tokens = autoencoder_tokens(model, ds.items, ds.embeddings);
      diag["latent_norm_cv"] = norm_analysis(model.latents(ds.embeddings), vc.flavor, vc.c).cv;
    }
    ProbeConfig pc = cfg.probe;
    pc.seed = seed;
    const TokenScheme scheme = detail::scheme_for(tokens, cfg.vae.k, static_cast<int>(cfg.vae.s));
    SelectionTrace trace;
    SequenceProbe probe = train_discovery_probe(ds, split, tokens, scheme, cfg, pc, &trace);
    results[cell] = evaluate_discovery_probe(probe, ds, split, tokens, cfg);
    diag["best_epoch"] = trace.best_epoch;
    diags[cell] = diag;
    log_info("discovery " + name + " seed " + std::to_string(seed) + ": recall@10 " +
             std::to_string(results[cell].at("recall@10")) + " (epoch " + std::to_string(trace.best_epoch) + ")");
  });
  std::vector<MetricsReport> reports;
  for (std::size_t s = 0; s < S; ++s) {
    json config = cfg.to_json();
    config.erase("schemes");
    if (cfg.schemes[s] == "random") {
      config.erase("vae");
      config["k"] = cfg.vae.k;
      config["s"] = cfg.vae.s;
    } else {
      config["vae"]["flavor"] = cfg.schemes[s] == "hrq" ? "hyperbolic" : "euclidean";
    }
    const auto b = static_cast<std::ptrdiff_t>(s * seeds.size());
    const auto e = static_cast<std::ptrdiff_t>((s + 1) * seeds.size());
    reports.push_back(MetricsReport::aggregate(cfg.schemes[s], config, seeds,
                                               std::vector<SeedMetrics>(results.begin() + b, results.begin() + e),
                                               std::vector<SeedMetrics>(diags.begin() + b, diags.begin() + e)));
  }
  return reports;
}

/// Named, already frozen item multitoken tables; only the probe is trained
/// per seed, with validation model selection.
inline std::vector<MetricsReport> evaluate_discovery_tokens(const InteractionDataset& ds, const NamedTokens& tables,
                                                            const DiscoveryConfig& cfg,
                                                            const std::vector<std::uint64_t>& seeds, int jobs = 1) {
  cfg.validate();
  if (seeds.empty()) throw ConfigError("discovery: at least one seed required");
  const LeaveOneOutSplit split = leave_one_out(ds);
  std::vector<TokenScheme> schemes;
  for (const auto& [name, tokens] : tables) schemes.push_back(detail::scheme_for(tokens, cfg.vae.k, static_cast<int>(cfg.vae.s)));
  std::vector<SeedMetrics> results(tables.size() * seeds.size()), diags(results.size());
  detail::parallel_for(results.size(), jobs, [&](std::size_t cell) {
    const std::size_t t = cell / seeds.size();
    ProbeConfig pc = cfg.probe;
    pc.seed = seeds[cell % seeds.size()];
    SelectionTrace trace;
    SequenceProbe probe = train_discovery_probe(ds, split, tables[t].second, schemes[t], cfg, pc, &trace);
    results[cell] = evaluate_discovery_probe(probe, ds, split, tables[t].second, cfg);
    diags[cell] = {{"best_epoch", trace.best_epoch}};
  });
  std::vector<MetricsReport> reports;
  for (std::size_t t = 0; t < tables.size(); ++t) {
    json config = cfg.to_json();
    config.erase("schemes");
    config.erase("vae");
    config["k"] = cfg.vae.k;
    config["s"] = cfg.vae.s;
    const auto b = static_cast<std::ptrdiff_t>(t * seeds.size());
    const auto e = b + static_cast<std::ptrdiff_t>(seeds.size());
    reports.push_back(MetricsReport::aggregate(tables[t].first, config, seeds,
                                               std::vector<SeedMetrics>(results.begin() + b, results.begin() + e),
                                               std::vector<SeedMetrics>(diags.begin() + b, diags.begin() + e)));
  }
  return reports;
}

}  // namespace hrq
