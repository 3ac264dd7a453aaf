// Copyright 2026 The HRQ Authors. SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <functional>
#include <sstream>

#include "hrq/data.hpp"

namespace {

using hrq::TaxonomyGraph;

TaxonomyGraph parse(const std::string& text) {
  std::istringstream in(text);
  return hrq::load_taxonomy(in, "fixture.tsv");
}

std::string chain(int n) {
  std::string s;
  for (int i = 0; i + 1 < n; ++i) s += "n" + std::to_string(i + 1) + "\tn" + std::to_string(i) + "\n";
  return s;
}

// Brute-force ancestor enumeration by walking every direct-parent path.
std::size_t brute_force_closure_size(const TaxonomyGraph& direct) {
  const auto parents = direct.parents();
  std::size_t total = 0;
  for (int v = 0; v < direct.size(); ++v) {
    std::set<int> seen;
    std::function<void(int)> walk = [&](int x) {
      for (int p : parents[static_cast<std::size_t>(x)]) {
        if (seen.insert(p).second) walk(p);
      }
    };
    walk(v);
    total += seen.size();
  }
  return total;
}

TaxonomyGraph full_binary_tree(int depth) {
  std::vector<std::pair<std::string, std::string>> rows;
  const int nodes = (1 << (depth + 1)) - 1;
  for (int i = 1; i < nodes; ++i) rows.emplace_back("t" + std::to_string(i), "t" + std::to_string((i - 1) / 2));
  return hrq::make_taxonomy(rows);
}

TEST(LoadTaxonomy, EmptyFile) {
  const auto g = parse("");
  EXPECT_EQ(g.size(), 0);
  EXPECT_TRUE(g.edges.empty());
}

TEST(LoadTaxonomy, DuplicatesCollapse) {
  const auto g = parse("cat\tanimal\ndog\tanimal\ncat\tanimal\n");
  EXPECT_EQ(g.edges.size(), 2u);
  EXPECT_EQ(g.size(), 3);
  EXPECT_TRUE(g.edges.count({g.index_of("animal"), g.index_of("cat")}));
}

TEST(LoadTaxonomy, ChainCounts) {
  const auto g = parse(chain(5));
  EXPECT_EQ(g.edges.size(), 4u);
  EXPECT_EQ(g.size(), 5);
  EXPECT_FALSE(g.closed);
}

TEST(LoadTaxonomy, HeaderAndOrderIndependence) {
  const auto a = parse("hyponym\thypernym\ncat\tanimal\r\ndog\tanimal\n\n");
  const auto b = parse("dog\tanimal\ncat\tanimal\n");
  EXPECT_EQ(a.entities, b.entities);
  EXPECT_EQ(a.edges, b.edges);
}

TEST(LoadTaxonomy, MalformedRowsReportLine) {
  try {
    parse("cat\tanimal\nbroken\n");
    FAIL() << "expected DataError";
  } catch (const hrq::DataError& e) {
    EXPECT_NE(std::string(e.what()).find("fixture.tsv:2"), std::string::npos);
  }
  EXPECT_THROW(parse("a\tb\tc\n"), hrq::DataError);
  EXPECT_THROW(parse("a\t\n"), hrq::DataError);
  EXPECT_THROW(parse("a\ta\n"), hrq::DataError);
  EXPECT_THROW(hrq::load_taxonomy(std::string("/nonexistent/taxonomy.tsv")), hrq::DataError);
}

TEST(TransitiveClosure, Chain) {
  const auto c = hrq::transitive_closure(parse("b\ta\nc\tb\n"));
  EXPECT_TRUE(c.closed);
  EXPECT_EQ(c.edges.size(), 3u);
  EXPECT_TRUE(c.edges.count({c.index_of("a"), c.index_of("c")}));
}

TEST(TransitiveClosure, Idempotent) {
  const auto once = hrq::transitive_closure(parse(chain(6)));
  const auto twice = hrq::transitive_closure(once);
  EXPECT_EQ(once.edges, twice.edges);
  EXPECT_EQ(once.edges.size(), 15u);
}

TEST(TransitiveClosure, FullBinaryTreeDepthThree) {
  const auto direct = full_binary_tree(3);
  ASSERT_EQ(direct.size(), 15);
  const auto closed = hrq::transitive_closure(direct);
  EXPECT_EQ(brute_force_closure_size(direct), 34u);
  EXPECT_EQ(closed.edges.size(), 34u);
}

TEST(TransitiveClosure, DagMatchesBruteForce) {
  hrq::Rng rng(3);
  std::vector<std::pair<std::string, std::string>> rows;
  for (int i = 1; i < 60; ++i) {
    for (int t = 0; t < 2; ++t) rows.emplace_back("d" + std::to_string(i), "d" + std::to_string(hrq::uniform_index(rng, static_cast<std::size_t>(i))));
  }
  const auto direct = hrq::make_taxonomy(rows);
  const auto closed = hrq::transitive_closure(direct);
  EXPECT_EQ(closed.edges.size(), brute_force_closure_size(direct));
  EXPECT_EQ(hrq::transitive_closure(closed).edges, closed.edges);
}

TEST(TransitiveClosure, CycleNamed) {
  try {
    hrq::transitive_closure(parse("b\ta\nc\tb\na\tc\nd\ta\n"));
    FAIL() << "expected DataError";
  } catch (const hrq::DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("cycle"), std::string::npos);
    for (const char* n : {"a", "b", "c"}) EXPECT_NE(msg.find(n), std::string::npos) << msg;
  }
}

TEST(SynthTree, Sizes) {
  const auto small = hrq::synth_tree(2, 1, 0);
  EXPECT_EQ(small.size(), 3);
  EXPECT_EQ(small.edges.size(), 2u);
  const auto big = hrq::synth_tree(4, 5, 0);
  EXPECT_EQ(big.size(), 1365);
  EXPECT_TRUE(big.closed);
  // Each node at depth t has t ancestors.
  std::size_t expect = 0;
  for (long t = 0, level = 1; t <= 5; ++t, level *= 4) expect += static_cast<std::size_t>(t * level);
  EXPECT_EQ(big.edges.size(), expect);
  EXPECT_EQ(big.leaves().size(), 1024u);
}

TEST(SynthTree, DeterministicAndSeedDependent) {
  const auto a = hrq::synth_tree(3, 3, 5), b = hrq::synth_tree(3, 3, 5), c = hrq::synth_tree(3, 3, 6);
  EXPECT_EQ(a.entities, b.entities);
  EXPECT_EQ(a.edges, b.edges);
  EXPECT_NE(a.edges, c.edges);
}

TEST(SynthTree, Limits) {
  EXPECT_THROW(hrq::synth_tree(1, 3, 0), hrq::ConfigError);
  EXPECT_THROW(hrq::synth_tree(2, 0, 0), hrq::ConfigError);
  EXPECT_THROW(hrq::synth_tree(10, 5, 0), hrq::ConfigError);
  EXPECT_NO_THROW(hrq::synth_tree(2, 15, 0));
}

TEST(SynthTree, DirectParentsRecoverTree) {
  const auto g = hrq::synth_tree(3, 3, 1);
  const auto parents = hrq::direct_parents(g);
  const auto depth = hrq::ancestor_counts(g);
  int roots = 0;
  for (int v = 0; v < g.size(); ++v) {
    const int p = parents[static_cast<std::size_t>(v)];
    if (p < 0) {
      ++roots;
      continue;
    }
    EXPECT_EQ(depth[static_cast<std::size_t>(p)] + 1, depth[static_cast<std::size_t>(v)]);
  }
  EXPECT_EQ(roots, 1);
}

TEST(SplitRelations, HundredEdges) {
  std::vector<std::pair<std::string, std::string>> rows;
  for (int i = 0; i < 100; ++i) rows.emplace_back("leaf" + std::to_string(i), "root" + std::to_string(i % 7));
  const auto g = hrq::make_taxonomy(rows);
  const auto s = hrq::split_relations(g, 0.15, 1);
  EXPECT_EQ(s.train.size(), 85u);
  EXPECT_EQ(s.test.size(), 15u);
}

TEST(SplitRelations, DisjointCoveringDeterministic) {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    const auto g = hrq::synth_tree(3, 4, seed);
    const auto s = hrq::split_relations(g, 0.15, seed);
    const auto again = hrq::split_relations(g, 0.15, seed);
    EXPECT_EQ(s.train, again.train);
    EXPECT_EQ(s.test, again.test);
    std::set<std::pair<int, int>> all(s.train.begin(), s.train.end());
    for (const auto& e : s.test) EXPECT_TRUE(all.insert(e).second) << "edge in both parts";
    EXPECT_EQ(all, g.edges);
    const double expect = 0.15 * static_cast<double>(g.edges.size());
    EXPECT_LE(std::abs(static_cast<double>(s.test.size()) - expect), 1.0);
    std::set<int> covered;
    for (const auto& [a, b] : s.train) covered.insert({a, b});
    EXPECT_EQ(covered.size(), static_cast<std::size_t>(g.size()));
  }
}

TEST(SplitRelations, FileRoundTrip) {
  const auto g = hrq::synth_tree(2, 3, 9);
  const auto s = hrq::split_relations(g, 0.15, 9);
  std::stringstream ss;
  hrq::write_split(ss, g, s);
  const auto back = hrq::load_split(ss, g);
  EXPECT_EQ(back.train, s.train);
  EXPECT_EQ(back.test, s.test);
  std::istringstream bad("hyponym\thypernym\tsplit\nx\ty\ttrain\n");
  EXPECT_THROW(hrq::load_split(bad, g), hrq::DataError);
}

TEST(TaxonomyFile, RoundTrip) {
  const auto g = hrq::synth_tree(3, 2, 2);
  std::stringstream ss;
  hrq::write_taxonomy(ss, g);
  const auto back = hrq::load_taxonomy(ss);
  EXPECT_EQ(back.entities, g.entities);
  EXPECT_EQ(back.edges, g.edges);
}

// ---------------------------------------------------------------------------
// Interactions

std::string embeddings_for(std::initializer_list<const char*> ids) {
  std::string s;
  double v = 0.0;
  for (const char* id : ids) {
    s += std::string("{\"item_id\": \"") + id + "\", \"vector\": [" + std::to_string(v) + ", 1.0]}\n";
    v += 1.0;
  }
  return s;
}

hrq::InteractionDataset load(const std::string& hist, const std::string& emb) {
  std::istringstream h(hist), e(emb);
  return hrq::load_interactions(h, e, "hist.tsv", "emb.jsonl");
}

std::vector<std::string> named(const hrq::InteractionDataset& ds, std::size_t u) {
  std::vector<std::string> out;
  for (int i : ds.sequences[u]) out.push_back(ds.items[static_cast<std::size_t>(i)]);
  return out;
}

TEST(LoadInteractions, ThreeUserFixture) {
  const std::string hist =
      "user_id\titem_id\ttimestamp\n"
      "alice\tb\t2\nalice\ta\t1\nalice\tc\t3\nalice\td\t4\nalice\te\t5\n"
      "bob\ta\t1\nbob\tb\t2\nbob\tc\t3\nbob\td\t4\n"
      "carol\te\t10\ncarol\td\t9\ncarol\tc\t8\ncarol\tb\t7\ncarol\ta\t6\ncarol\ta\t11\n";
  const auto ds = load(hist, embeddings_for({"a", "b", "c", "d", "e"}));
  ASSERT_EQ(ds.users, (std::vector<std::string>{"alice", "carol"}));
  EXPECT_EQ(named(ds, 0), (std::vector<std::string>{"a", "b", "c", "d", "e"}));
  EXPECT_EQ(named(ds, 1), (std::vector<std::string>{"a", "b", "c", "d", "e", "a"}));
  EXPECT_EQ(ds.dim(), 2);
  EXPECT_EQ(ds.embeddings(ds.sequences[0][2], 0), 2.0);
}

TEST(LoadInteractions, ShortUsersDroppedLongUsersTruncated) {
  std::string hist;
  for (int t = 0; t < 4; ++t) hist += "short\ta\t" + std::to_string(t) + "\n";
  for (int t = 0; t < 25; ++t) hist += std::string("long\t") + (t % 2 ? "a" : "b") + "\t" + std::to_string(t) + "\n";
  const auto ds = load(hist, embeddings_for({"a", "b"}));
  ASSERT_EQ(ds.users, (std::vector<std::string>{"long"}));
  ASSERT_EQ(ds.sequences[0].size(), 20u);
  // Timestamps 5..24 survive; t = 5 is odd, so the first kept item is "a".
  EXPECT_EQ(named(ds, 0).front(), "a");
  EXPECT_EQ(named(ds, 0).back(), "b");
}

TEST(LoadInteractions, MissingEmbeddingsListed) {
  std::string hist;
  for (int t = 0; t < 5; ++t) hist += "u\tx" + std::to_string(t % 3) + "\t" + std::to_string(t) + "\n";
  try {
    load(hist, embeddings_for({"x0"}));
    FAIL() << "expected DataError";
  } catch (const hrq::DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("x1"), std::string::npos);
    EXPECT_NE(msg.find("x2"), std::string::npos);
  }
}

TEST(LoadInteractions, MalformedInputs) {
  EXPECT_THROW(load("u\ta\n", embeddings_for({"a"})), hrq::DataError);
  EXPECT_THROW(load("u\ta\tnoon\n", embeddings_for({"a"})), hrq::DataError);
  EXPECT_THROW(load("", "{bad json\n"), hrq::DataError);
  EXPECT_THROW(load("", "{\"item_id\": \"a\", \"vector\": [1]}\n{\"item_id\": \"b\", \"vector\": [1, 2]}\n"), hrq::DataError);
  EXPECT_THROW(load("", "{\"item_id\": \"a\", \"vector\": [1]}\n{\"item_id\": \"a\", \"vector\": [2]}\n"), hrq::DataError);
}

TEST(LoadInteractions, PureGivenContents) {
  const auto g = hrq::synth_tree(4, 3, 2);
  const auto ds = hrq::synth_interactions(g, 30, 2);
  std::stringstream h, e;
  hrq::write_histories(h, ds);
  hrq::write_embeddings(e, ds);
  const auto a = load(h.str(), e.str()), b = load(h.str(), e.str());
  EXPECT_EQ(a.users, b.users);
  EXPECT_EQ(a.sequences, b.sequences);
  EXPECT_EQ(a.embeddings, b.embeddings);
  EXPECT_EQ(a.users, ds.users);
  EXPECT_EQ(a.sequences, ds.sequences);
  EXPECT_EQ(a.embeddings, ds.embeddings);
}

TEST(SynthInteractions, ZeroUsers) {
  const auto ds = hrq::synth_interactions(hrq::synth_tree(4, 3, 0), 0, 0);
  EXPECT_EQ(ds.num_users(), 0u);
  EXPECT_EQ(ds.items.size(), 64u);
}

TEST(SynthInteractions, NeedsFiftyLeaves) {
  EXPECT_THROW(hrq::synth_interactions(hrq::synth_tree(2, 5, 0), 10, 0), hrq::ConfigError);
  EXPECT_NO_THROW(hrq::synth_interactions(hrq::synth_tree(2, 6, 0), 10, 0));
}

TEST(SynthInteractions, LengthsAndDeterminism) {
  const auto g = hrq::synth_tree(4, 3, 1);
  const auto a = hrq::synth_interactions(g, 200, 4), b = hrq::synth_interactions(g, 200, 4);
  EXPECT_EQ(a.sequences, b.sequences);
  EXPECT_EQ(a.embeddings, b.embeddings);
  for (const auto& s : a.sequences) {
    EXPECT_GE(s.size(), 5u);
    EXPECT_LE(s.size(), 20u);
  }
}

TEST(SynthInteractions, SameSubtreeItemsAreCloser) {
  const auto g = hrq::synth_tree(4, 3, 7);
  const auto ds = hrq::synth_interactions(g, 0, 7);
  const auto parents = hrq::direct_parents(g);
  const auto depth = hrq::ancestor_counts(g);
  auto top = [&](const std::string& id) {
    int v = g.index_of(id);
    while (depth[static_cast<std::size_t>(v)] > 1) v = parents[static_cast<std::size_t>(v)];
    return v;
  };
  hrq::Rng rng(1);
  double same = 0.0, cross = 0.0;
  int n_same = 0, n_cross = 0;
  while (n_same < 1000 || n_cross < 1000) {
    const auto i = hrq::uniform_index(rng, ds.items.size()), j = hrq::uniform_index(rng, ds.items.size());
    if (i == j) continue;
    const double d = (ds.embeddings.row(static_cast<Eigen::Index>(i)) - ds.embeddings.row(static_cast<Eigen::Index>(j))).norm();
    if (top(ds.items[i]) == top(ds.items[j])) {
      if (n_same < 1000) same += d, ++n_same;
    } else if (n_cross < 1000) {
      cross += d, ++n_cross;
    }
  }
  EXPECT_LT(same / n_same, cross / n_cross);
}

// ---------------------------------------------------------------------------
// Leave-one-out

TEST(LeaveOneOut, FiveItemExample) {
  hrq::InteractionDataset ds;
  ds.users = {"u"};
  ds.sequences = {{0, 1, 2, 3, 4}};
  const auto s = hrq::leave_one_out(ds);
  ASSERT_EQ(s.users.size(), 1u);
  EXPECT_EQ(s.users[0].train, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(s.users[0].validation_target, 3);
  EXPECT_EQ(s.users[0].test_target, 4);
  EXPECT_EQ(hrq::LeaveOneOutSplit::test_context(s.users[0]), (std::vector<int>{0, 1, 2, 3}));
}

TEST(LeaveOneOut, PreservesItemsForEveryUser) {
  const auto ds = hrq::synth_interactions(hrq::synth_tree(4, 3, 3), 100, 3);
  const auto s = hrq::leave_one_out(ds);
  ASSERT_EQ(s.users.size(), ds.num_users());
  for (std::size_t u = 0; u < ds.num_users(); ++u) {
    std::vector<int> all = s.users[u].train;
    EXPECT_GE(all.size(), 3u);
    all.push_back(s.users[u].validation_target);
    all.push_back(s.users[u].test_target);
    EXPECT_EQ(all, ds.sequences[u]);
  }
  const auto again = hrq::leave_one_out(ds);
  for (std::size_t u = 0; u < ds.num_users(); ++u) EXPECT_EQ(again.users[u].train, s.users[u].train);
}

TEST(LeaveOneOut, RejectsShortSequences) {
  hrq::InteractionDataset ds;
  ds.users = {"u"};
  ds.sequences = {{0, 1, 2, 3}};
  EXPECT_THROW(hrq::leave_one_out(ds), hrq::DataError);
}

}  // namespace
