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

// Datasets: hypernymy taxonomies with transitive closure and relation
// splits, user interaction histories with dense item embeddings, the
// leave-one-out split, and synthetic generators for both.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "hrq/common.hpp"

namespace hrq {

using json = nlohmann::json;

namespace detail {
inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == '\t') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return in;
}
}  // namespace detail

// ===========================================================================
// Taxonomy

/// Entities (sorted identifiers) and hypernymy edges (hypernym, hyponym)
/// stored as entity indices.
struct TaxonomyGraph {
  std::vector<std::string> entities;
  std::set<std::pair<int, int>> edges;
  bool closed = false;

  int size() const { return static_cast<int>(entities.size()); }

  int index_of(const std::string& id) const {
    const auto it = std::lower_bound(entities.begin(), entities.end(), id);
    if (it == entities.end() || *it != id) throw DataError("taxonomy: unknown entity '" + id + "'");
    return static_cast<int>(it - entities.begin());
  }

  /// Direct hyponyms of each entity.
  std::vector<std::vector<int>> children() const {
    std::vector<std::vector<int>> out(entities.size());
    for (const auto& [hyper, hypo] : edges) out[static_cast<std::size_t>(hyper)].push_back(hypo);
    return out;
  }

  /// Hypernyms of each entity.
  std::vector<std::vector<int>> parents() const {
    std::vector<std::vector<int>> out(entities.size());
    for (const auto& [hyper, hypo] : edges) out[static_cast<std::size_t>(hypo)].push_back(hyper);
    return out;
  }

  /// Entities without hyponyms.
  std::vector<int> leaves() const {
    std::vector<bool> has_child(entities.size(), false);
    for (const auto& [hyper, hypo] : edges) has_child[static_cast<std::size_t>(hyper)] = true;
    std::vector<int> out;
    for (std::size_t i = 0; i < entities.size(); ++i) {
      if (!has_child[i]) out.push_back(static_cast<int>(i));
    }
    return out;
  }
};

/// Builds a graph from (hyponym, hypernym) string pairs. Duplicates collapse.
inline TaxonomyGraph make_taxonomy(const std::vector<std::pair<std::string, std::string>>& hypo_hyper) {
  std::set<std::string> ids;
  for (const auto& [hypo, hyper] : hypo_hyper) {
    ids.insert(hypo);
    ids.insert(hyper);
  }
  TaxonomyGraph g;
  g.entities.assign(ids.begin(), ids.end());
  for (const auto& [hypo, hyper] : hypo_hyper) {
    if (hypo == hyper) throw DataError("taxonomy: self-edge on '" + hypo + "'");
    g.edges.emplace(g.index_of(hyper), g.index_of(hypo));
  }
  return g;
}

/// TSV rows `hyponym<TAB>hypernym`; an optional header row naming those
/// columns is skipped. Blank lines are ignored.
inline TaxonomyGraph load_taxonomy(std::istream& in, const std::string& source = "<stream>") {
  std::vector<std::pair<std::string, std::string>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_tabs(line);
    if (lineno == 1 && f.size() == 2 && detail::lower(f[0]) == "hyponym" && detail::lower(f[1]) == "hypernym") continue;
    if (f.size() != 2 || f[0].empty() || f[1].empty()) {
      throw DataError(source + ":" + std::to_string(lineno) + ": expected two tab-separated fields (hyponym, hypernym)");
    }
    if (f[0] == f[1]) throw DataError(source + ":" + std::to_string(lineno) + ": self-edge on '" + f[0] + "'");
    rows.emplace_back(f[0], f[1]);
  }
  return make_taxonomy(rows);
}

inline TaxonomyGraph load_taxonomy(const std::string& path) {
  auto in = detail::open_input(path);
  return load_taxonomy(in, path);
}

inline void write_taxonomy(std::ostream& os, const TaxonomyGraph& g) {
  os << "hyponym\thypernym\n";
  std::vector<std::pair<std::string, std::string>> rows;
  for (const auto& [hyper, hypo] : g.edges) rows.emplace_back(g.entities[static_cast<std::size_t>(hypo)], g.entities[static_cast<std::size_t>(hyper)]);
  std::sort(rows.begin(), rows.end());
  for (const auto& [hypo, hyper] : rows) os << hypo << '\t' << hyper << '\n';
}

/// Adds every (ancestor, descendant) edge. Throws DataError naming one cycle.
inline TaxonomyGraph transitive_closure(const TaxonomyGraph& g) {
  const auto n = static_cast<std::size_t>(g.size());
  const auto par = g.parents();
  // Iterative DFS over hypernym links; state 0 new, 1 on stack, 2 done.
  std::vector<int> state(n, 0);
  std::vector<std::vector<int>> ancestors(n);
  for (std::size_t root = 0; root < n; ++root) {
    if (state[root] != 0) continue;
    std::vector<std::pair<int, std::size_t>> stack{{static_cast<int>(root), 0}};
    state[root] = 1;
    while (!stack.empty()) {
      auto& [v, next] = stack.back();
      const auto& ps = par[static_cast<std::size_t>(v)];
      if (next < ps.size()) {
        const int p = ps[next++];
        if (state[static_cast<std::size_t>(p)] == 1) {
          std::string cycle = g.entities[static_cast<std::size_t>(p)];
          for (auto it = stack.rbegin(); it != stack.rend(); ++it) {
            cycle = g.entities[static_cast<std::size_t>(it->first)] + " -> " + cycle;
            if (it->first == p) break;
          }
          throw DataError("taxonomy: cycle detected: " + cycle);
        }
        if (state[static_cast<std::size_t>(p)] == 0) {
          state[static_cast<std::size_t>(p)] = 1;
          stack.emplace_back(p, 0);
        }
      } else {
        std::set<int> anc;
        for (int p : ps) {
          anc.insert(p);
          anc.insert(ancestors[static_cast<std::size_t>(p)].begin(), ancestors[static_cast<std::size_t>(p)].end());
        }
        ancestors[static_cast<std::size_t>(v)].assign(anc.begin(), anc.end());
        state[static_cast<std::size_t>(v)] = 2;
        stack.pop_back();
      }
    }
  }
  TaxonomyGraph out;
  out.entities = g.entities;
  for (std::size_t v = 0; v < n; ++v) {
    for (int a : ancestors[v]) out.edges.emplace(a, static_cast<int>(v));
  }
  out.closed = true;
  return out;
}

inline constexpr long kMaxSynthNodes = 100000;

/// Balanced tree with the given branching and depth, closed transitively.
/// Node identifiers are zero-padded numbers assigned by a seeded permutation.
inline TaxonomyGraph synth_tree(int branching, int depth, std::uint64_t seed) {
  if (branching < 2) throw ConfigError("synth_tree: branching must be >= 2");
  if (depth < 1) throw ConfigError("synth_tree: depth must be >= 1");
  long nodes = 1, level = 1;
  for (int d = 0; d < depth; ++d) {
    level *= branching;
    nodes += level;
    if (nodes > kMaxSynthNodes) throw ConfigError("synth_tree: more than 100000 nodes requested");
  }
  std::vector<std::size_t> perm(static_cast<std::size_t>(nodes));
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng rng = make_rng(seed, "synth_tree");
  shuffle(perm, rng);
  const int width = static_cast<int>(std::to_string(nodes - 1).size());
  auto name = [&](long bfs) {
    std::ostringstream os;
    os << 'n' << std::setw(width) << std::setfill('0') << perm[static_cast<std::size_t>(bfs)];
    return os.str();
  };
  std::vector<std::pair<std::string, std::string>> rows;
  // In breadth-first numbering the parent of node i > 0 is (i - 1) / b.
  for (long i = 1; i < nodes; ++i) rows.emplace_back(name(i), name((i - 1) / branching));
  return transitive_closure(make_taxonomy(rows));
}

/// Depth below the nearest root for each entity of a closed taxonomy (the
/// number of ancestors when the graph is a tree).
inline std::vector<int> ancestor_counts(const TaxonomyGraph& closed) {
  std::vector<int> out(static_cast<std::size_t>(closed.size()), 0);
  for (const auto& [hyper, hypo] : closed.edges) ++out[static_cast<std::size_t>(hypo)];
  return out;
}

/// Direct parent of each entity of a closed tree: the ancestor with the most
/// ancestors of its own; -1 for roots.
inline std::vector<int> direct_parents(const TaxonomyGraph& closed) {
  const auto depth = ancestor_counts(closed);
  std::vector<int> out(static_cast<std::size_t>(closed.size()), -1);
  for (const auto& [hyper, hypo] : closed.edges) {
    int& p = out[static_cast<std::size_t>(hypo)];
    if (p < 0 || depth[static_cast<std::size_t>(hyper)] > depth[static_cast<std::size_t>(p)]) p = hyper;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Relation split

struct RelationSplit {
  std::vector<std::pair<int, int>> train;  // (hypernym, hyponym)
  std::vector<std::pair<int, int>> test;
};

/// Uniform random split with round(test_fraction * |E|) test edges. Re-rolls
/// up to 100 times until every entity that occurs in some edge also occurs
/// in a training edge.
inline RelationSplit split_relations(const TaxonomyGraph& g, double test_fraction = 0.15, std::uint64_t seed = 0) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("split_relations: test_fraction must be in [0, 1)");
  std::vector<std::pair<int, int>> all(g.edges.begin(), g.edges.end());
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(all.size())));
  Rng rng = make_rng(seed, "split_relations");
  std::vector<bool> occurs(static_cast<std::size_t>(g.size()), false);
  for (const auto& [a, b] : all) occurs[static_cast<std::size_t>(a)] = occurs[static_cast<std::size_t>(b)] = true;
  RelationSplit split;
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<std::pair<int, int>> order = all;
    shuffle(order, rng);
    split.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
    split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
    std::vector<bool> covered(static_cast<std::size_t>(g.size()), false);
    for (const auto& [a, b] : split.train) covered[static_cast<std::size_t>(a)] = covered[static_cast<std::size_t>(b)] = true;
    if (covered == occurs) break;
    if (attempt == 99) log_warn("split_relations: some entities have no training edge after 100 attempts");
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

/// TSV rows `hyponym<TAB>hypernym<TAB>train|test`.
inline void write_split(std::ostream& os, const TaxonomyGraph& g, const RelationSplit& s) {
  os << "hyponym\thypernym\tsplit\n";
  for (const auto& [name, edges] : {std::pair{"train", &s.train}, std::pair{"test", &s.test}}) {
    for (const auto& [hyper, hypo] : *edges) {
      os << g.entities[static_cast<std::size_t>(hypo)] << '\t' << g.entities[static_cast<std::size_t>(hyper)] << '\t' << name << '\n';
    }
  }
}

/// Reads a split file against a known graph; every row must name an edge of
/// the graph.
inline RelationSplit load_split(std::istream& in, const TaxonomyGraph& g, const std::string& source = "<stream>") {
  RelationSplit s;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_tabs(line);
    if (lineno == 1 && f.size() == 3 && detail::lower(f[0]) == "hyponym") continue;
    if (f.size() != 3 || (f[2] != "train" && f[2] != "test")) {
      throw DataError(source + ":" + std::to_string(lineno) + ": expected hyponym, hypernym, train|test");
    }
    const std::pair<int, int> e{g.index_of(f[1]), g.index_of(f[0])};
    if (!g.edges.count(e)) throw DataError(source + ":" + std::to_string(lineno) + ": edge not in taxonomy");
    (f[2] == "train" ? s.train : s.test).push_back(e);
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

// ===========================================================================
// Interactions

inline constexpr std::size_t kMinHistory = 5;
inline constexpr std::size_t kMaxHistory = 20;

/// Per-user item sequences (indices into `items`) and the item embedding
/// table, one row per item.
struct InteractionDataset {
  std::vector<std::string> users;
  std::vector<std::vector<int>> sequences;
  std::vector<std::string> items;
  Matrix embeddings;

  std::size_t num_users() const { return users.size(); }
  Eigen::Index dim() const { return embeddings.cols(); }
};

/// Keeps users with at least 5 interactions and truncates to the last 20.
inline void filter_histories(InteractionDataset& ds) {
  InteractionDataset out;
  out.items = std::move(ds.items);
  out.embeddings = std::move(ds.embeddings);
  for (std::size_t u = 0; u < ds.users.size(); ++u) {
    auto& seq = ds.sequences[u];
    if (seq.size() < kMinHistory) continue;
    if (seq.size() > kMaxHistory) seq.erase(seq.begin(), seq.end() - static_cast<std::ptrdiff_t>(kMaxHistory));
    out.users.push_back(ds.users[u]);
    out.sequences.push_back(std::move(seq));
  }
  ds = std::move(out);
}

/// Histories TSV (user_id, item_id, timestamp; optional header) and
/// embeddings JSON-lines ({"item_id": ..., "vector": [...]}).
/// Item vectors in identifier order, read from JSON lines {item_id, vector}.
struct VectorTable {
  std::vector<std::string> ids;
  Matrix values;
};

inline VectorTable load_vectors(std::istream& embeddings, const std::string& emb_source = "<embeddings>") {
  std::map<std::string, std::vector<double>> vectors;
  std::string line;
  int lineno = 0;
  std::size_t dim = 0;
  while (std::getline(embeddings, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception&) {
      throw DataError(emb_source + ":" + std::to_string(lineno) + ": invalid JSON");
    }
    if (!j.contains("item_id") || !j.contains("vector") || !j.at("vector").is_array()) {
      throw DataError(emb_source + ":" + std::to_string(lineno) + ": expected {item_id, vector}");
    }
    const std::string id = j.at("item_id").is_string() ? j.at("item_id").get<std::string>() : j.at("item_id").dump();
    std::vector<double> v;
    try {
      v = j.at("vector").get<std::vector<double>>();
    } catch (const json::exception&) {
      throw DataError(emb_source + ":" + std::to_string(lineno) + ": non-numeric vector");
    }
    if (v.empty()) throw DataError(emb_source + ":" + std::to_string(lineno) + ": empty vector");
    if (dim == 0) dim = v.size();
    if (v.size() != dim) throw DataError(emb_source + ":" + std::to_string(lineno) + ": vector dimension differs from earlier rows");
    if (!vectors.emplace(id, std::move(v)).second) {
      throw DataError(emb_source + ":" + std::to_string(lineno) + ": duplicate item '" + id + "'");
    }
  }
  VectorTable out;
  out.values.resize(static_cast<Eigen::Index>(vectors.size()), static_cast<Eigen::Index>(dim));
  for (const auto& [id, v] : vectors) {
    const auto i = static_cast<Eigen::Index>(out.ids.size());
    out.ids.push_back(id);
    for (std::size_t d = 0; d < dim; ++d) out.values(i, static_cast<Eigen::Index>(d)) = v[d];
  }
  return out;
}

inline VectorTable load_vectors(const std::string& path) {
  auto in = detail::open_input(path);
  return load_vectors(in, path);
}

inline InteractionDataset load_interactions(std::istream& histories, std::istream& embeddings,
                                            const std::string& hist_source = "<histories>",
                                            const std::string& emb_source = "<embeddings>") {
  VectorTable table = load_vectors(embeddings, emb_source);
  std::string line;
  int lineno = 0;
  InteractionDataset ds;
  ds.items = std::move(table.ids);
  ds.embeddings = std::move(table.values);
  std::unordered_map<std::string, int> item_index;
  for (std::size_t i = 0; i < ds.items.size(); ++i) item_index.emplace(ds.items[i], static_cast<int>(i));

  struct Event {
    double time;
    long order;
    std::string item;
  };
  std::map<std::string, std::vector<Event>> by_user;
  lineno = 0;
  long order = 0;
  while (std::getline(histories, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_tabs(line);
    if (lineno == 1 && f.size() == 3 && detail::lower(f[0]) == "user_id") continue;
    if (f.size() != 3 || f[0].empty() || f[1].empty()) {
      throw DataError(hist_source + ":" + std::to_string(lineno) + ": expected user_id, item_id, timestamp");
    }
    double t;
    try {
      std::size_t pos = 0;
      t = std::stod(f[2], &pos);
      if (pos != f[2].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw DataError(hist_source + ":" + std::to_string(lineno) + ": non-numeric timestamp '" + f[2] + "'");
    }
    by_user[f[0]].push_back({t, order++, f[1]});
  }
  std::set<std::string> missing;
  for (auto& [user, events] : by_user) {
    std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.time < b.time; });
    std::vector<int> seq;
    for (const auto& e : events) {
      const auto it = item_index.find(e.item);
      if (it == item_index.end()) {
        missing.insert(e.item);
        continue;
      }
      seq.push_back(it->second);
    }
    ds.users.push_back(user);
    ds.sequences.push_back(std::move(seq));
  }
  if (!missing.empty()) {
    std::string list;
    int shown = 0;
    for (const auto& m : missing) {
      if (shown++ == 10) {
        list += ", ...";
        break;
      }
      list += (list.empty() ? "" : ", ") + m;
    }
    throw DataError(std::to_string(missing.size()) + " item(s) in " + hist_source + " have no embedding in " +
                    emb_source + ": " + list);
  }
  filter_histories(ds);
  return ds;
}

inline InteractionDataset load_interactions(const std::string& histories_path, const std::string& embeddings_path) {
  auto h = detail::open_input(histories_path);
  auto e = detail::open_input(embeddings_path);
  return load_interactions(h, e, histories_path, embeddings_path);
}

/// Histories as TSV with integer timestamps equal to the position.
inline void write_histories(std::ostream& os, const InteractionDataset& ds) {
  os << "user_id\titem_id\ttimestamp\n";
  for (std::size_t u = 0; u < ds.users.size(); ++u) {
    for (std::size_t t = 0; t < ds.sequences[u].size(); ++t) {
      os << ds.users[u] << '\t' << ds.items[static_cast<std::size_t>(ds.sequences[u][t])] << '\t' << t << '\n';
    }
  }
}

inline void write_embeddings(std::ostream& os, const InteractionDataset& ds) {
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    std::vector<double> v(static_cast<std::size_t>(ds.embeddings.cols()));
    for (Eigen::Index d = 0; d < ds.embeddings.cols(); ++d) v[static_cast<std::size_t>(d)] = ds.embeddings(static_cast<Eigen::Index>(i), d);
    os << json{{"item_id", ds.items[i]}, {"vector", v}}.dump() << '\n';
  }
}

struct SynthInteractionOptions {
  Eigen::Index dim = 16;
  double root_scale = 1.0;   // std of the top-level offsets
  double decay = 0.5;        // offset std shrinks by this factor per level
  double leaf_noise = 0.05;  // extra isotropic noise on leaves
  double p_sibling = 0.5;    // next item shares the current item's parent
  double p_subtree = 0.35;   // next item from the user's anchor subtree
  int anchor_depth = 1;      // depth of the subtree a user stays in
};

/// Items are the leaves of `taxonomy`. A node's vector is its parent's plus
/// Gaussian noise whose scale decays with depth, so embedding geometry
/// follows the hierarchy. Each user walks mostly within one sampled subtree.
/// No hierarchy labels are emitted.
inline InteractionDataset synth_interactions(const TaxonomyGraph& taxonomy, int users, std::uint64_t seed,
                                             const SynthInteractionOptions& opt = {}) {
  const TaxonomyGraph g = taxonomy.closed ? taxonomy : transitive_closure(taxonomy);
  const std::vector<int> leaves = g.leaves();
  if (leaves.size() < 50) throw ConfigError("synth_interactions: taxonomy needs at least 50 leaves");
  if (users < 0) throw ConfigError("synth_interactions: users must be >= 0");
  const auto parent = direct_parents(g);
  const auto depth = ancestor_counts(g);
  const auto n = static_cast<std::size_t>(g.size());

  Rng rng = make_rng(seed, "synth_interactions.embed");
  Matrix node_vec = Matrix::Zero(static_cast<Eigen::Index>(n), opt.dim);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return depth[a] < depth[b]; });
  for (std::size_t v : order) {
    if (parent[v] < 0) continue;
    const double scale = opt.root_scale * std::pow(opt.decay, depth[v] - 1);
    for (Eigen::Index d = 0; d < opt.dim; ++d) {
      node_vec(static_cast<Eigen::Index>(v), d) = node_vec(parent[v], d) + scale * normal(rng);
    }
  }

  InteractionDataset ds;
  std::vector<int> leaf_item(n, -1);
  {
    std::vector<int> sorted_leaves = leaves;  // entity order is identifier order
    for (int l : sorted_leaves) {
      leaf_item[static_cast<std::size_t>(l)] = static_cast<int>(ds.items.size());
      ds.items.push_back(g.entities[static_cast<std::size_t>(l)]);
    }
    ds.embeddings.resize(static_cast<Eigen::Index>(ds.items.size()), opt.dim);
    for (int l : sorted_leaves) {
      for (Eigen::Index d = 0; d < opt.dim; ++d) {
        ds.embeddings(leaf_item[static_cast<std::size_t>(l)], d) = node_vec(l, d) + opt.leaf_noise * normal(rng);
      }
    }
  }

  // Leaves grouped by parent and by anchor-depth ancestor.
  auto ancestor_at = [&](int v, int want) {
    while (v >= 0 && depth[static_cast<std::size_t>(v)] > want) v = parent[static_cast<std::size_t>(v)];
    return v;
  };
  std::map<int, std::vector<int>> by_parent, by_anchor;
  for (int l : leaves) {
    by_parent[parent[static_cast<std::size_t>(l)]].push_back(leaf_item[static_cast<std::size_t>(l)]);
    by_anchor[ancestor_at(l, opt.anchor_depth)].push_back(leaf_item[static_cast<std::size_t>(l)]);
  }
  std::vector<int> item_parent(ds.items.size()), item_anchor(ds.items.size());
  for (int l : leaves) {
    item_parent[static_cast<std::size_t>(leaf_item[static_cast<std::size_t>(l)])] = parent[static_cast<std::size_t>(l)];
    item_anchor[static_cast<std::size_t>(leaf_item[static_cast<std::size_t>(l)])] = ancestor_at(l, opt.anchor_depth);
  }
  std::vector<int> anchors;
  for (const auto& [a, _] : by_anchor) anchors.push_back(a);

  Rng walk = make_rng(seed, "synth_interactions.walk");
  const int width = static_cast<int>(std::to_string(std::max(users - 1, 0)).size());
  for (int u = 0; u < users; ++u) {
    std::ostringstream id;
    id << 'u' << std::setw(width) << std::setfill('0') << u;
    const int anchor = anchors[uniform_index(walk, anchors.size())];
    const auto& pool = by_anchor[anchor];
    const auto len = kMinHistory + uniform_index(walk, kMaxHistory - kMinHistory + 1);
    std::vector<int> seq{pool[uniform_index(walk, pool.size())]};
    while (seq.size() < len) {
      const double r = uniform01(walk);
      const int cur = seq.back();
      if (r < opt.p_sibling) {
        const auto& sib = by_parent[item_parent[static_cast<std::size_t>(cur)]];
        seq.push_back(sib[uniform_index(walk, sib.size())]);
      } else if (r < opt.p_sibling + opt.p_subtree) {
        seq.push_back(pool[uniform_index(walk, pool.size())]);
      } else {
        seq.push_back(static_cast<int>(uniform_index(walk, ds.items.size())));
      }
    }
    ds.users.push_back(id.str());
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Leave-one-out

struct UserSplit {
  std::vector<int> train;       // i_1 .. i_{T-2}
  int validation_target = -1;   // i_{T-1}, context = train
  int test_target = -1;         // i_T, context = train + validation_target
};

struct LeaveOneOutSplit {
  std::vector<UserSplit> users;  // aligned with InteractionDataset::users

  static std::vector<int> test_context(const UserSplit& u) {
    std::vector<int> ctx = u.train;
    ctx.push_back(u.validation_target);
    return ctx;
  }
};

inline LeaveOneOutSplit leave_one_out(const InteractionDataset& ds) {
  LeaveOneOutSplit out;
  for (std::size_t u = 0; u < ds.sequences.size(); ++u) {
    const auto& seq = ds.sequences[u];
    if (seq.size() < kMinHistory) {
      throw DataError("leave_one_out: user '" + ds.users[u] + "' has fewer than 5 interactions");
    }
    UserSplit s;
    s.train.assign(seq.begin(), seq.end() - 2);
    s.validation_target = seq[seq.size() - 2];
    s.test_target = seq.back();
    out.users.push_back(std::move(s));
  }
  return out;
}

}  // namespace hrq
