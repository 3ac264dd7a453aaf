// Copyright 2026 The HRQ Authors. SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "hrq/eval.hpp"

namespace {

using hrq::Multitoken;
using hrq::RankedPrediction;

Multitoken mt(std::vector<int> t, int d = 0) { return {std::move(t), d}; }

RankedPrediction ranked(std::vector<Multitoken> c) {
  RankedPrediction p;
  p.candidates = std::move(c);
  for (std::size_t i = 0; i < p.candidates.size(); ++i) p.scores.push_back(-static_cast<double>(i));
  return p;
}

RankedPrediction five() { return ranked({mt({0, 0}), mt({0, 1}), mt({1, 0}), mt({1, 1}), mt({2, 0})}); }

// ---------------------------------------------------------------------------
// Metrics

TEST(RecallAtK, WorkedExamples) {
  EXPECT_DOUBLE_EQ(hrq::recall_at_k(five(), {mt({1, 0})}, 5), 1.0);
  EXPECT_DOUBLE_EQ(hrq::recall_at_k(five(), {mt({3, 3})}, 5), 0.0);
  EXPECT_DOUBLE_EQ(hrq::recall_at_k(five(), {mt({1, 1}), mt({3, 3})}, 5), 0.5);
  EXPECT_DOUBLE_EQ(hrq::recall_at_k(five(), {mt({2, 0})}, 4), 0.0);
  // The disambiguator is part of the identity.
  EXPECT_DOUBLE_EQ(hrq::recall_at_k(five(), {mt({0, 0}, 1)}, 5), 0.0);
  EXPECT_THROW(hrq::recall_at_k(five(), {mt({0, 0})}, 0), hrq::UsageError);
}

TEST(NdcgAtK, WorkedExamples) {
  EXPECT_DOUBLE_EQ(hrq::ndcg_at_k(five(), mt({0, 0}), 5), 1.0);
  EXPECT_DOUBLE_EQ(hrq::ndcg_at_k(five(), mt({1, 0}), 5), 0.5);
  EXPECT_NEAR(hrq::ndcg_at_k(five(), mt({0, 1}), 5), 1.0 / std::log2(3.0), 1e-15);
  EXPECT_DOUBLE_EQ(hrq::ndcg_at_k(five(), mt({3, 3}), 5), 0.0);
  EXPECT_DOUBLE_EQ(hrq::ndcg_at_k(five(), mt({1, 0}), 2), 0.0);
}

TEST(RankingMetrics, MonotoneNonDecreasingInK) {
  hrq::Rng rng = hrq::make_rng(3, "test.monotone");
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Multitoken> cands;
    std::set<Multitoken> seen;
    while (cands.size() < 12) {
      Multitoken m = mt({static_cast<int>(hrq::uniform_index(rng, 5)), static_cast<int>(hrq::uniform_index(rng, 5))});
      if (seen.insert(m).second) cands.push_back(m);
    }
    const auto pred = ranked(cands);
    std::vector<Multitoken> truth;
    for (int t = 0; t < 3; ++t) truth.push_back(mt({static_cast<int>(hrq::uniform_index(rng, 5)), static_cast<int>(hrq::uniform_index(rng, 5))}));
    for (int K = 1; K < 12; ++K) {
      EXPECT_LE(hrq::recall_at_k(pred, truth, K), hrq::recall_at_k(pred, truth, K + 1));
      EXPECT_LE(hrq::ndcg_at_k(pred, truth[0], K), hrq::ndcg_at_k(pred, truth[0], K + 1));
    }
  }
}

// ---------------------------------------------------------------------------
// Random baseline

std::vector<std::string> entity_ids(int n) {
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("e" + std::to_string(i));
  return ids;
}

TEST(RandomBaseline, DeterministicUnderSeed) {
  const auto ids = entity_ids(50);
  EXPECT_EQ(hrq::random_baseline_tokens(ids, 3, 8, 5), hrq::random_baseline_tokens(ids, 3, 8, 5));
  EXPECT_NE(hrq::random_baseline_tokens(ids, 3, 8, 5), hrq::random_baseline_tokens(ids, 3, 8, 6));
}

TEST(RandomBaseline, MarginalsPassChiSquareAtOnePercent) {
  const int s = 16, k = 3, n = 10000;
  const auto tokens = hrq::random_baseline_tokens(entity_ids(n), k, s, 11);
  // Upper 1% point of chi-square with 15 degrees of freedom.
  const double critical = 30.578;
  for (int level = 0; level < k; ++level) {
    std::vector<double> counts(s, 0.0);
    for (const auto& [id, m] : tokens) counts[static_cast<std::size_t>(m.tokens[static_cast<std::size_t>(level)])] += 1.0;
    const double expected = static_cast<double>(n) / s;
    double chi2 = 0.0;
    for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
    EXPECT_LT(chi2, critical) << "level " << level;
  }
}

TEST(RandomBaseline, CollisionsResolvedInjectively) {
  // 2 levels of 3 tokens for 100 entities forces collisions.
  const auto tokens = hrq::random_baseline_tokens(entity_ids(100), 2, 3, 1);
  std::set<Multitoken> distinct;
  for (const auto& [id, m] : tokens) {
    ASSERT_TRUE(m.disambiguator.has_value());
    distinct.insert(m);
  }
  EXPECT_EQ(distinct.size(), 100u);
  EXPECT_GT(hrq::disambiguator_vocab(tokens), 1);
}

// ---------------------------------------------------------------------------
// Norm analysis

TEST(NormAnalysis, WorkedExamples) {
  const auto st = hrq::norm_analysis(std::vector<double>{1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(st.mean, 2.0);
  EXPECT_NEAR(st.std, std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_NEAR(st.cv, 0.4082, 1e-4);
  EXPECT_DOUBLE_EQ(hrq::norm_analysis(std::vector<double>{0.7, 0.7, 0.7}).cv, 0.0);
  EXPECT_THROW(hrq::norm_analysis(std::vector<double>{0.0, 0.0}), hrq::NumericError);
  EXPECT_THROW(hrq::norm_analysis(std::vector<double>{}), hrq::DataError);
}

TEST(NormAnalysis, BallLatentsUseTangentNormAtOrigin) {
  hrq::Matrix X(3, 2);
  X << 0.3, 0.4, 0.0, -0.6, 0.1, 0.0;
  const double c = 2.0;
  const auto norms = hrq::latent_norms(X, hrq::Flavor::kHyperbolic, c);
  for (int i = 0; i < 3; ++i) {
    const double r = X.row(i).norm();
    // Oracle: |log_0(x)| = artanh(sqrt(c) r) / sqrt(c).
    EXPECT_NEAR(norms[static_cast<std::size_t>(i)], std::atanh(std::sqrt(c) * r) / std::sqrt(c), 1e-12);
  }
  const auto eu = hrq::latent_norms(X, hrq::Flavor::kEuclidean);
  EXPECT_NEAR(eu[0], 0.5, 1e-15);
}

TEST(NormAnalysis, CsvMatchesSummary) {
  const std::vector<double> norms{0.5, 1.25, 2.0};
  std::ostringstream os;
  hrq::write_norms_csv(os, {"a", "b", "c"}, norms);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "entity_id,norm");
  std::vector<double> back;
  while (std::getline(in, line)) back.push_back(std::stod(line.substr(line.find(',') + 1)));
  EXPECT_EQ(back, norms);
  EXPECT_DOUBLE_EQ(hrq::norm_analysis(back).cv, hrq::norm_analysis(norms).cv);
}

// ---------------------------------------------------------------------------
// Reports

TEST(MetricsReport, MeanAndSampleStdFromPerSeed) {
  const auto r = hrq::MetricsReport::aggregate("rq", hrq::json{{"k", 3}}, {0, 1, 2},
                                               {{{"recall@10", 0.2}}, {{"recall@10", 0.4}}, {{"recall@10", 0.6}}});
  EXPECT_EQ(r.per_seed.at("recall@10"), (std::vector<double>{0.2, 0.4, 0.6}));
  EXPECT_NEAR(r.mean.at("recall@10"), 0.4, 1e-15);
  EXPECT_NEAR(r.std.at("recall@10"), 0.2, 1e-15);
  const auto one = hrq::MetricsReport::aggregate("rq", {}, {7}, {{{"recall@10", 0.3}}});
  EXPECT_DOUBLE_EQ(one.std.at("recall@10"), 0.0);
  EXPECT_THROW(hrq::MetricsReport::aggregate("rq", {}, {1, 2}, {{{"recall@10", 0.3}}}), hrq::UsageError);
}

TEST(MetricsReport, JsonRoundTripKeepsFields) {
  const auto r = hrq::MetricsReport::aggregate("hrq", hrq::json{{"k", 3}}, {4, 5},
                                               {{{"recall@5", 0.1}, {"ndcg@5", 0.05}}, {{"recall@5", 0.3}, {"ndcg@5", 0.15}}},
                                               {{{"best_epoch", 3}}, {{"best_epoch", 4}}});
  const hrq::json j = r.to_json();
  for (const char* key : {"scheme", "config", "seeds", "per_seed", "mean", "std"}) EXPECT_TRUE(j.contains(key)) << key;
  const auto back = hrq::MetricsReport::from_json(j);
  EXPECT_EQ(back.to_json(), j);
  EXPECT_THROW(hrq::MetricsReport::from_json(hrq::json{{"scheme", "x"}}), hrq::DataError);
}

// ---------------------------------------------------------------------------
// Hierarchy modeling

hrq::TaxonomyGraph chain3() {
  return hrq::transitive_closure(hrq::make_taxonomy({{"b", "a"}, {"c", "b"}}));
}

hrq::ModelingConfig tiny_modeling() {
  hrq::ModelingConfig cfg;
  cfg.embedder.k = 2;
  cfg.embedder.s = 4;
  cfg.embedder.h = 2;
  cfg.embedder.epochs = 6;
  cfg.embedder.warmup_epochs = 2;
  cfg.embedder.negatives = 5;
  cfg.probe.encoder_layers = cfg.probe.decoder_layers = 1;
  cfg.probe.width = 16;
  cfg.probe.heads = 2;
  cfg.probe.ff = 32;
  cfg.probe.epochs = 3;
  return cfg;
}

TEST(ContrastivePairs, TrainEdgesOnlyButNegativesAvoidTestRelations) {
  const auto g = chain3();
  hrq::RelationSplit split;
  const int a = g.index_of("a"), b = g.index_of("b"), c = g.index_of("c");
  split.train = {{a, b}, {b, c}};
  split.test = {{a, c}};
  const auto d = hrq::make_contrastive_data(g, split);
  EXPECT_EQ(d.pairs.size(), 2u);
  for (const auto& [u, v] : d.pairs) EXPECT_FALSE(u == c && v == a);
  EXPECT_TRUE(d.related[static_cast<std::size_t>(c)].count(a));
  EXPECT_TRUE(d.related[static_cast<std::size_t>(c)].count(c));
}

TEST(HierarchyModeling, ThreeNodeChainRunsEndToEnd) {
  const auto g = chain3();
  hrq::RelationSplit split;
  split.train = {{g.index_of("a"), g.index_of("b")}, {g.index_of("b"), g.index_of("c")}};
  split.test = {{g.index_of("a"), g.index_of("c")}};
  const auto reports = hrq::run_hierarchy_modeling(g, split, tiny_modeling(), {0, 1});
  ASSERT_EQ(reports.size(), 2u);
  EXPECT_EQ(reports[0].scheme, "rq");
  EXPECT_EQ(reports[1].scheme, "hrq");
  for (const auto& r : reports) {
    ASSERT_EQ(r.per_seed.at("recall@10").size(), 2u);
    for (double v : r.per_seed.at("recall@10")) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(HierarchyModeling, SchemesShareProbeArchitectureAndReproduce) {
  const auto g = hrq::synth_tree(2, 3, 1);
  const auto split = hrq::split_relations(g, 0.15, 1);
  const auto cfg = tiny_modeling();
  const auto a = hrq::run_hierarchy_modeling(g, split, cfg, {3});
  EXPECT_EQ(a[0].config.at("probe"), a[1].config.at("probe"));
  EXPECT_EQ(a[0].config.at("embedder").at("flavor"), "euclidean");
  EXPECT_EQ(a[1].config.at("embedder").at("flavor"), "hyperbolic");
  const auto b = hrq::run_hierarchy_modeling(g, split, cfg, {3}, 2);
  EXPECT_EQ(hrq::reports_to_json(a).dump(), hrq::reports_to_json(b).dump());
}

TEST(HierarchyModeling, TokenDepthMismatchIsConfigError) {
  const auto g = chain3();
  hrq::RelationSplit split;
  split.train = {{g.index_of("a"), g.index_of("b")}};
  split.test = {{g.index_of("a"), g.index_of("c")}};
  std::map<std::string, Multitoken> tokens{{"a", mt({0, 1})}, {"b", mt({1, 1})}, {"c", mt({2, 1})}};
  EXPECT_THROW(hrq::detail::scheme_for(tokens, 3, 4), hrq::ConfigError);
  EXPECT_THROW(hrq::detail::scheme_for(tokens, 2, 2), hrq::ConfigError);
  EXPECT_NO_THROW(hrq::detail::scheme_for(tokens, 2, 4));
}

// ---------------------------------------------------------------------------
// Hierarchy discovery

struct DiscoveryFixture {
  hrq::InteractionDataset ds;
  hrq::LeaveOneOutSplit split;
  hrq::DiscoveryConfig cfg;
  std::map<std::string, Multitoken> tokens;
  hrq::TokenScheme scheme;
};

DiscoveryFixture discovery_fixture() {
  DiscoveryFixture f;
  f.ds = hrq::synth_interactions(hrq::synth_tree(3, 4, 2), 60, 2);
  f.split = hrq::leave_one_out(f.ds);
  f.cfg.vae.k = 2;
  f.cfg.vae.s = 8;
  f.cfg.vae.h = 4;
  f.cfg.vae.hidden = {16};
  f.cfg.vae.epochs = 4;
  f.cfg.vae.batch_size = 32;
  f.cfg.probe.encoder_layers = f.cfg.probe.decoder_layers = 1;
  f.cfg.probe.width = 16;
  f.cfg.probe.heads = 2;
  f.cfg.probe.ff = 32;
  f.cfg.probe.epochs = 6;
  f.cfg.probe.batch_size = 16;
  f.cfg.max_context = 5;
  f.tokens = hrq::random_baseline_tokens(f.ds.items, 2, 8, 4);
  f.scheme = hrq::detail::scheme_for(f.tokens, 2, 8);
  return f;
}

TEST(HierarchyDiscovery, SelectsBestValidationEpochAndReportsItsTestMetrics) {
  auto f = discovery_fixture();
  hrq::SelectionTrace trace;
  auto probe = hrq::train_discovery_probe(f.ds, f.split, f.tokens, f.scheme, f.cfg, f.cfg.probe, &trace);
  ASSERT_EQ(trace.validation_recall.size(), 6u);
  const auto best = std::max_element(trace.validation_recall.begin(), trace.validation_recall.end());
  EXPECT_EQ(trace.best_epoch, trace.epochs[static_cast<std::size_t>(best - trace.validation_recall.begin())]);
  const auto selected = hrq::evaluate_discovery_probe(probe, f.ds, f.split, f.tokens, f.cfg);

  // Oracle: train for exactly best_epoch + 1 epochs with no selection.
  hrq::DiscoveryConfig plain = f.cfg;
  plain.eval_every = 0;
  hrq::ProbeConfig pc = f.cfg.probe;
  pc.epochs = trace.best_epoch + 1;
  auto oracle = hrq::train_discovery_probe(f.ds, f.split, f.tokens, f.scheme, plain, pc);
  EXPECT_EQ(hrq::evaluate_discovery_probe(oracle, f.ds, f.split, f.tokens, f.cfg), selected);
}

TEST(HierarchyDiscovery, TestTargetsNeverInfluenceTraining) {
  auto f = discovery_fixture();
  auto probe = hrq::train_discovery_probe(f.ds, f.split, f.tokens, f.scheme, f.cfg, f.cfg.probe);
  hrq::LeaveOneOutSplit mutated = f.split;
  for (auto& u : mutated.users) u.test_target = (u.test_target + 7) % static_cast<int>(f.ds.items.size());
  auto again = hrq::train_discovery_probe(f.ds, mutated, f.tokens, f.scheme, f.cfg, f.cfg.probe);
  const auto a = probe.snapshot(), b = again.snapshot();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(HierarchyDiscovery, ReportsAllSchemesWithConsistentStatistics) {
  auto f = discovery_fixture();
  const auto reports = hrq::run_hierarchy_discovery(f.ds, f.cfg, {0, 1});
  ASSERT_EQ(reports.size(), 3u);
  EXPECT_EQ(reports[0].scheme, "random");
  EXPECT_EQ(reports[1].scheme, "rq");
  EXPECT_EQ(reports[2].scheme, "hrq");
  for (const auto& r : reports) {
    for (const char* m : {"recall@5", "recall@10", "ndcg@5", "ndcg@10", "valid_item_rate"}) {
      const auto& vals = r.per_seed.at(m);
      ASSERT_EQ(vals.size(), 2u);
      for (double v : vals) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
      EXPECT_NEAR(r.mean.at(m), (vals[0] + vals[1]) / 2.0, 1e-15);
      EXPECT_NEAR(r.std.at(m), std::abs(vals[0] - vals[1]) / std::sqrt(2.0), 1e-15);
    }
    EXPECT_LE(r.mean.at("recall@5"), r.mean.at("recall@10"));
    EXPECT_EQ(r.diagnostics.count("latent_norm_cv"), r.scheme == "random" ? 0u : 1u);
  }
  EXPECT_EQ(reports[1].config.at("probe"), reports[2].config.at("probe"));
}

TEST(HierarchyDiscovery, ReproducibleAcrossRunsAndJobCounts) {
  auto f = discovery_fixture();
  f.cfg.schemes = {"random", "hrq"};
  const auto a = hrq::reports_to_json(hrq::run_hierarchy_discovery(f.ds, f.cfg, {5, 6}));
  const auto b = hrq::reports_to_json(hrq::run_hierarchy_discovery(f.ds, f.cfg, {5, 6}, 3));
  EXPECT_EQ(a.dump(), b.dump());
}

TEST(HierarchyDiscovery, UnknownSchemeIsConfigError) {
  auto f = discovery_fixture();
  f.cfg.schemes = {"rq", "pq"};
  EXPECT_THROW(hrq::run_hierarchy_discovery(f.ds, f.cfg, {0}), hrq::ConfigError);
}

}  // namespace
