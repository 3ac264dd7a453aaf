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

// hrq: experiment CLI. Exit codes: 0 success, 1 internal error, 2 usage or
// config error, 3 data error, 4 numeric failure. Settings resolve as flags
// over config file over built-in defaults; the resolved config is recorded
// in manifest.json next to every output.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hrq/data.hpp"
#include "hrq/eval.hpp"
#include "hrq/models.hpp"
#include "hrq/probe.hpp"
#include "hrq/quantizer.hpp"
#include "json.hpp"
#include "run_manifest.hpp"

namespace {

using hrq::json;
namespace fs = std::filesystem;

json read_json_file(const std::string& path, bool is_config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    if (is_config) throw hrq::ConfigError("cannot open config '" + path + "'");
    throw hrq::DataError("cannot open '" + path + "'");
  }
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    if (is_config) throw hrq::ConfigError("config '" + path + "': " + e.what());
    throw hrq::DataError("'" + path + "': " + e.what());
  }
}

std::string tsv_string(const std::map<std::string, hrq::Multitoken>& tokens, int k) {
  std::ostringstream os;
  hrq::write_multitokens_tsv(os, tokens, k);
  return os.str();
}

std::map<std::string, hrq::Multitoken> disambiguated(const Eigen::MatrixXi& t, const std::vector<std::string>& ids) {
  std::map<std::string, hrq::Multitoken> raw;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    hrq::Multitoken m;
    for (Eigen::Index l = 0; l < t.cols(); ++l) m.tokens.push_back(t(static_cast<Eigen::Index>(i), l));
    raw.emplace(ids[i], std::move(m));
  }
  return hrq::disambiguate(raw);
}

/// Loads a taxonomy, closes it, and reads the split against the closure.
/// Without a split file every closed edge is a training edge.
struct TaxonomyInput {
  hrq::TaxonomyGraph closed;
  hrq::RelationSplit split;
};

TaxonomyInput load_taxonomy_input(const std::string& taxonomy, const std::string& split, hrq::cli::RunManifest& m) {
  TaxonomyInput in;
  in.closed = hrq::transitive_closure(hrq::load_taxonomy(taxonomy));
  m.add_input(taxonomy);
  if (split.empty()) {
    in.split.train.assign(in.closed.edges.begin(), in.closed.edges.end());
  } else {
    auto is = hrq::detail::open_input(split);
    in.split = hrq::load_split(is, in.closed, split);
    m.add_input(split);
  }
  return in;
}

std::vector<std::uint64_t> seed_list(std::uint64_t base, int count) {
  if (count < 1) throw hrq::ConfigError("--seeds must be >= 1");
  std::vector<std::uint64_t> out;
  for (int i = 0; i < count; ++i) out.push_back(base + static_cast<std::uint64_t>(i));
  return out;
}

/// NAME=PATH pairs, in flag order; names must be distinct.
std::vector<std::pair<std::string, std::string>> parse_named(const std::vector<std::string>& specs) {
  std::vector<std::pair<std::string, std::string>> out;
  std::set<std::string> seen;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == s.size()) throw hrq::UsageError("--tokens expects NAME=PATH, got '" + s + "'");
    if (!seen.insert(s.substr(0, eq)).second) throw hrq::UsageError("--tokens: duplicate name '" + s.substr(0, eq) + "'");
    out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  return out;
}

hrq::NamedTokens load_named_tokens(const std::vector<std::string>& specs, hrq::cli::RunManifest& m) {
  hrq::NamedTokens out;
  for (const auto& [name, path] : parse_named(specs)) {
    auto in = hrq::detail::open_input(path);
    out.emplace_back(name, hrq::read_multitokens_tsv(in, path).tokens);
    m.add_input(path);
  }
  return out;
}

template <typename T>
void put(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

// ---------------------------------------------------------------------------
// synth-data

struct SynthArgs {
  std::string kind = "tree";
  int branching = 4;
  int depth = 5;
  int users = 2000;
  std::uint64_t seed = 0;
  double test_fraction = 0.15;
  std::string out;
};

void cmd_synth_data(const SynthArgs& a, hrq::cli::RunManifest& m) {
  const fs::path out(a.out);
  const hrq::TaxonomyGraph tree = hrq::synth_tree(a.branching, a.depth, a.seed);
  m.set_seed(a.seed);
  m.set_config({{"kind", a.kind}, {"branching", a.branching}, {"depth", a.depth}, {"users", a.users},
                {"seed", a.seed}, {"test_fraction", a.test_fraction}});
  // Everything is generated before the first write so failures leave no outputs.
  std::vector<std::pair<std::string, std::string>> files;
  std::ostringstream tax;
  hrq::write_taxonomy(tax, tree);
  files.emplace_back("taxonomy.tsv", tax.str());
  if (a.kind == "tree") {
    const hrq::TaxonomyGraph closed = hrq::transitive_closure(tree);
    std::ostringstream split;
    hrq::write_split(split, closed, hrq::split_relations(closed, a.test_fraction, a.seed));
    files.emplace_back("split.tsv", split.str());
  } else if (a.kind == "interactions") {
    const hrq::InteractionDataset ds = hrq::synth_interactions(tree, a.users, a.seed);
    std::ostringstream hist, emb;
    hrq::write_histories(hist, ds);
    hrq::write_embeddings(emb, ds);
    files.emplace_back("histories.tsv", hist.str());
    files.emplace_back("embeddings.jsonl", emb.str());
  } else {
    throw hrq::UsageError("--kind must be 'tree' or 'interactions'");
  }
  for (const auto& [name, content] : files) m.write_output(out / name, content);
  m.write(out / "manifest.json");
}

// ---------------------------------------------------------------------------
// train-quantizer

struct TrainArgs {
  std::string config, model, taxonomy, split, embeddings, out;
  std::optional<std::string> flavor, quant_metric;
  std::optional<double> c, alpha, lr;
  std::optional<int> k, epochs, batch_size, negatives;
  std::optional<std::int64_t> s, h;
  std::optional<std::uint64_t> seed;
  std::vector<std::int64_t> hidden;
};

json train_overrides(const TrainArgs& a) {
  json j = json::object();
  put(j, "flavor", a.flavor);
  put(j, "quant_metric", a.quant_metric);
  put(j, "c", a.c);
  put(j, "alpha", a.alpha);
  put(j, "lr", a.lr);
  put(j, "k", a.k);
  put(j, "epochs", a.epochs);
  put(j, "batch_size", a.batch_size);
  put(j, "s", a.s);
  put(j, "h", a.h);
  put(j, "seed", a.seed);
  return j;
}

std::string loss_log(const std::vector<hrq::EpochLog>& logs, const char* primary) {
  std::string s;
  for (const auto& l : logs) s += l.to_json(primary).dump() + "\n";
  return s;
}

void cmd_train_quantizer(const TrainArgs& a, hrq::cli::RunManifest& m) {
  const json file = a.config.empty() ? json::object() : read_json_file(a.config, true);
  if (!a.config.empty()) m.add_input(a.config);
  std::string model = a.model;
  if (model.empty()) model = file.is_object() ? file.value("model", "embedder") : "embedder";
  json over = train_overrides(a);
  const fs::path out(a.out);

  if (model == "embedder") {
    if (a.taxonomy.empty()) throw hrq::UsageError("--taxonomy is required for the embedder");
    if (!a.hidden.empty()) throw hrq::UsageError("--hidden applies to the autoencoder only");
    put(over, "negatives", a.negatives);
    hrq::EmbedderConfig cfg;
    cfg.merge_json(file);
    cfg.merge_json(over);
    cfg.validate();
    m.set_config(cfg.to_json());
    m.set_seed(cfg.seed);
    const TaxonomyInput in = load_taxonomy_input(a.taxonomy, a.split, m);
    hrq::HierarchyEmbedder emb(cfg, in.closed.entities);
    const auto logs = hrq::train_hierarchy_embedder(emb, hrq::make_contrastive_data(in.closed, in.split));
    m.write_output(out / "checkpoint.json", emb.to_json().dump() + "\n");
    m.write_output(out / "codebook.json", emb.codebook().to_json().dump(2) + "\n");
    m.write_output(out / "multitokens.tsv", tsv_string(emb.multitokens(), cfg.k));
    m.write_output(out / "loss_log.jsonl", loss_log(logs, "contrastive"));
  } else if (model == "vae") {
    if (a.embeddings.empty()) throw hrq::UsageError("--embeddings is required for the autoencoder");
    if (a.negatives) throw hrq::UsageError("--negatives applies to the embedder only");
    if (!a.hidden.empty()) over["hidden"] = a.hidden;
    hrq::VaeConfig cfg;
    cfg.merge_json(file);
    cfg.merge_json(over);
    cfg.validate();
    m.set_config(cfg.to_json());
    m.set_seed(cfg.seed);
    const hrq::VectorTable vt = hrq::load_vectors(a.embeddings);
    m.add_input(a.embeddings);
    if (vt.ids.empty()) throw hrq::DataError("'" + a.embeddings + "': no vectors");
    hrq::QuantizedAutoencoder vae(cfg, vt.values.cols());
    const auto logs = hrq::train_autoencoder(vae, vt.values);
    m.write_output(out / "checkpoint.json", vae.to_json().dump() + "\n");
    m.write_output(out / "codebook.json", vae.codebook().to_json().dump(2) + "\n");
    m.write_output(out / "multitokens.tsv", tsv_string(hrq::autoencoder_tokens(vae, vt.ids, vt.values), cfg.k));
    m.write_output(out / "loss_log.jsonl", loss_log(logs, "reconstruction"));
  } else {
    throw hrq::ConfigError("config field 'model' must be 'embedder' or 'vae', got '" + model + "'");
  }
  m.write(out / "manifest.json");
}

// ---------------------------------------------------------------------------
// encode and analyze share checkpoint loading

struct LoadedModel {
  std::string kind;
  std::optional<hrq::QuantizedAutoencoder> vae;
  std::optional<hrq::HierarchyEmbedder> embedder;

  hrq::Codebook& codebook() { return vae ? vae->codebook() : embedder->codebook(); }
  hrq::Flavor flavor() const { return vae ? vae->flavor() : embedder->flavor(); }
  double curvature() const { return vae ? vae->config().c : embedder->config().c; }
  int k() { return codebook().depth(); }
};

LoadedModel load_checkpoint(const std::string& path, hrq::cli::RunManifest& m) {
  const json j = read_json_file(path, false);
  m.add_input(path);
  LoadedModel lm;
  try {
    lm.kind = j.value("kind", "");
    if (lm.kind == "vae") {
      lm.vae = hrq::QuantizedAutoencoder::from_json(j);
    } else if (lm.kind == "embedder") {
      lm.embedder = hrq::HierarchyEmbedder::from_json(j);
    } else {
      throw hrq::DataError("'" + path + "': unknown checkpoint kind '" + lm.kind + "'");
    }
  } catch (const json::exception& e) {
    throw hrq::DataError("'" + path + "': " + e.what());
  } catch (const hrq::ConfigError& e) {
    throw hrq::DataError("'" + path + "': " + e.what());
  }
  m.set_config(lm.vae ? lm.vae->config().to_json() : lm.embedder->config().to_json());
  m.set_seed(lm.vae ? lm.vae->config().seed : lm.embedder->config().seed);
  return lm;
}

/// Pre-quantization latents for the given vectors (autoencoder) or the raw
/// vectors / stored table (embedder). Returns ids aligned with rows.
std::pair<std::vector<std::string>, hrq::Matrix> model_latents(LoadedModel& lm, const std::string& embeddings,
                                                               hrq::cli::RunManifest& m) {
  if (embeddings.empty()) {
    if (lm.vae) throw hrq::UsageError("--embeddings is required for an autoencoder checkpoint");
    return {lm.embedder->entities(), lm.embedder->table().value};
  }
  hrq::VectorTable vt = hrq::load_vectors(embeddings);
  m.add_input(embeddings);
  if (vt.ids.empty()) return {{}, hrq::Matrix(0, lm.codebook().dim())};
  if (lm.vae) return {vt.ids, lm.vae->latents(vt.values)};
  if (vt.values.cols() != lm.codebook().dim()) {
    throw hrq::DataError("'" + embeddings + "': vector dimension " + std::to_string(vt.values.cols()) +
                         " differs from model dimension " + std::to_string(lm.codebook().dim()));
  }
  hrq::require_finite(vt.values, "embedder input");
  return {vt.ids, vt.values};
}

struct EncodeArgs {
  std::string checkpoint, embeddings, codebook, out;
};

void cmd_encode(const EncodeArgs& a, hrq::cli::RunManifest& m) {
  LoadedModel lm = load_checkpoint(a.checkpoint, m);
  if (!a.codebook.empty()) {
    hrq::Codebook cb;
    try {
      cb = hrq::Codebook::from_json(read_json_file(a.codebook, false));
    } catch (const json::exception& e) {
      throw hrq::DataError("'" + a.codebook + "': " + e.what());
    }
    m.add_input(a.codebook);
    if (cb.flavor != lm.flavor() || cb.dim() != lm.codebook().dim()) {
      throw hrq::DataError("'" + a.codebook + "': codebook flavor or dimension differs from the checkpoint");
    }
    lm.codebook() = std::move(cb);
  }
  const auto [ids, latents] = model_latents(lm, a.embeddings, m);
  const Eigen::MatrixXi t = ids.empty() ? Eigen::MatrixXi(0, lm.k()) : hrq::quantize_tokens(lm.codebook(), latents);
  const fs::path out(a.out);
  m.write_output(out / "multitokens.tsv", tsv_string(disambiguated(t, ids), lm.k()));
  m.write(out / "manifest.json");
}

void cmd_analyze(const EncodeArgs& a, hrq::cli::RunManifest& m) {
  LoadedModel lm = load_checkpoint(a.checkpoint, m);
  const auto [ids, latents] = model_latents(lm, a.embeddings, m);
  if (ids.empty()) throw hrq::DataError("analyze: no inputs");
  const std::vector<double> norms = hrq::latent_norms(latents, lm.flavor(), lm.curvature());
  const hrq::NormStats st = hrq::norm_analysis(norms);
  std::ostringstream csv;
  hrq::write_norms_csv(csv, ids, norms);
  const fs::path out(a.out);
  m.write_output(out / "norms.csv", csv.str());
  const json summary{{"flavor", hrq::to_string(lm.flavor())}, {"count", norms.size()}, {"mean", st.mean},
                     {"std", st.std}, {"cv", st.cv}};
  m.write_output(out / "summary.json", summary.dump(2) + "\n");
  m.write(out / "manifest.json");
}

// ---------------------------------------------------------------------------
// eval-modeling and eval-discovery

struct EvalArgs {
  std::string config, taxonomy, split, histories, embeddings, out, probe_preset;
  std::vector<std::string> tokens, schemes;
  bool random = false;
  std::optional<int> k, quantizer_epochs, probe_epochs, max_context, eval_every, validation_users;
  std::optional<std::int64_t> s, h;
  int seeds = 1;
  std::uint64_t seed = 0;
  int jobs = 1;
};

void apply_probe_overrides(hrq::ProbeConfig& pc, const EvalArgs& a) {
  if (a.probe_preset == "full") {
    const auto keep = pc;
    pc = hrq::ProbeConfig::full();
    pc.seed = keep.seed;
  } else if (!a.probe_preset.empty() && a.probe_preset != "desk") {
    throw hrq::ConfigError("--probe-preset must be 'desk' or 'full'");
  }
  if (a.probe_epochs) pc.epochs = *a.probe_epochs;
}

void cmd_eval_modeling(const EvalArgs& a, hrq::cli::RunManifest& m) {
  hrq::ModelingConfig cfg;
  if (!a.config.empty()) {
    json file = read_json_file(a.config, true);
    m.add_input(a.config);
    cfg.merge_json(file);
  }
  apply_probe_overrides(cfg.probe, a);
  if (a.k) cfg.embedder.k = *a.k;
  if (a.s) cfg.embedder.s = *a.s;
  if (a.h) cfg.embedder.h = *a.h;
  if (a.quantizer_epochs) cfg.embedder.epochs = *a.quantizer_epochs;
  if (!a.schemes.empty()) {
    cfg.schemes.clear();
    for (const auto& s : a.schemes) {
      if (s == "rq") cfg.schemes.push_back(hrq::Flavor::kEuclidean);
      else if (s == "hrq") cfg.schemes.push_back(hrq::Flavor::kHyperbolic);
      else throw hrq::ConfigError("--schemes entries must be 'rq' or 'hrq', got '" + s + "'");
    }
  }
  cfg.validate();
  const auto seeds = seed_list(a.seed, a.seeds);
  json resolved = cfg.to_json();
  resolved["seeds"] = seeds;
  m.set_seed(a.seed);
  const TaxonomyInput in = load_taxonomy_input(a.taxonomy, a.split, m);
  std::vector<hrq::MetricsReport> reports;
  if (a.tokens.empty()) {
    json names = json::array();
    for (auto f : cfg.schemes) names.push_back(hrq::detail::scheme_name(f));
    resolved["schemes"] = names;
    m.set_config(resolved);
    reports = hrq::run_hierarchy_modeling(in.closed, in.split, cfg, seeds, a.jobs);
  } else {
    const hrq::NamedTokens tables = load_named_tokens(a.tokens, m);
    json names = json::array();
    for (const auto& [name, t] : tables) names.push_back(name);
    resolved["tokens"] = names;
    m.set_config(resolved);
    reports = hrq::evaluate_modeling_tokens(in.closed, in.split, tables, cfg, seeds, a.jobs);
  }
  const fs::path out(a.out);
  m.write_output(out / "metrics.json", hrq::reports_to_json(reports).dump(2) + "\n");
  m.write(out / "manifest.json");
}

void cmd_eval_discovery(const EvalArgs& a, hrq::cli::RunManifest& m) {
  hrq::DiscoveryConfig cfg;
  if (!a.config.empty()) {
    json file = read_json_file(a.config, true);
    m.add_input(a.config);
    cfg.merge_json(file);
  }
  apply_probe_overrides(cfg.probe, a);
  if (a.k) cfg.vae.k = *a.k;
  if (a.s) cfg.vae.s = *a.s;
  if (a.h) cfg.vae.h = *a.h;
  if (a.quantizer_epochs) cfg.vae.epochs = *a.quantizer_epochs;
  if (a.max_context) cfg.max_context = *a.max_context;
  if (a.eval_every) cfg.eval_every = *a.eval_every;
  if (a.validation_users) cfg.validation_users = *a.validation_users;
  if (!a.schemes.empty()) cfg.schemes = a.schemes;
  cfg.validate();
  const auto seeds = seed_list(a.seed, a.seeds);
  json resolved = cfg.to_json();
  resolved["seeds"] = seeds;
  m.set_seed(a.seed);
  const hrq::InteractionDataset ds = hrq::load_interactions(a.histories, a.embeddings);
  m.add_input(a.histories);
  m.add_input(a.embeddings);
  std::vector<hrq::MetricsReport> reports;
  if (a.tokens.empty()) {
    if (a.random) throw hrq::UsageError("--random applies with --tokens; otherwise list 'random' in --schemes");
    m.set_config(resolved);
    reports = hrq::run_hierarchy_discovery(ds, cfg, seeds, a.jobs);
  } else {
    hrq::NamedTokens tables = load_named_tokens(a.tokens, m);
    if (a.random) {
      tables.insert(tables.begin(),
                    {"random", hrq::random_baseline_tokens(ds.items, cfg.vae.k, static_cast<int>(cfg.vae.s), a.seed)});
    }
    json names = json::array();
    for (const auto& [name, t] : tables) names.push_back(name);
    resolved.erase("schemes");
    resolved["tokens"] = names;
    m.set_config(resolved);
    reports = hrq::evaluate_discovery_tokens(ds, tables, cfg, seeds, a.jobs);
  }
  const fs::path out(a.out);
  m.write_output(out / "metrics.json", hrq::reports_to_json(reports).dump(2) + "\n");
  m.write(out / "manifest.json");
}

int run(int argc, char** argv) {
  CLI::App app{"hrq: hyperbolic and Euclidean residual quantization experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", HRQ_VERSION);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth-data", "Generate a synthetic taxonomy or interaction dataset");
  synth->add_option("--kind", sa.kind, "tree | interactions")->check(CLI::IsMember({"tree", "interactions"}))->capture_default_str();
  synth->add_option("--branching", sa.branching, "Children per internal node")->capture_default_str();
  synth->add_option("--depth", sa.depth, "Tree depth below the root")->capture_default_str();
  synth->add_option("--users", sa.users, "Users (interactions only)")->capture_default_str();
  synth->add_option("--seed", sa.seed, "Random seed")->capture_default_str();
  synth->add_option("--test-fraction", sa.test_fraction, "Held-out edge fraction (tree only)")->capture_default_str();
  synth->add_option("--out", sa.out, "Output directory")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train-quantizer", "Train a hierarchy embedder or a quantized autoencoder");
  train->add_option("--config", ta.config, "JSON config file");
  train->add_option("--model", ta.model, "embedder | vae (default: config 'model', else embedder)")
      ->check(CLI::IsMember({"embedder", "vae"}));
  train->add_option("--taxonomy", ta.taxonomy, "Taxonomy TSV (embedder)");
  train->add_option("--split", ta.split, "Split TSV; training uses train edges only (embedder)");
  train->add_option("--embeddings", ta.embeddings, "Item vectors JSONL (vae)");
  train->add_option("--flavor", ta.flavor, "euclidean | hyperbolic");
  train->add_option("--quant-metric", ta.quant_metric, "manifold | ambient");
  train->add_option("--c", ta.c, "Curvature");
  train->add_option("--k", ta.k, "Codebook levels");
  train->add_option("--s", ta.s, "Codewords per level");
  train->add_option("--dim", ta.h, "Latent dimension");
  train->add_option("--hidden", ta.hidden, "Autoencoder hidden widths, comma separated")->delimiter(',');
  train->add_option("--alpha", ta.alpha, "Commitment weight");
  train->add_option("--lr", ta.lr, "Learning rate");
  train->add_option("--epochs", ta.epochs, "Training epochs");
  train->add_option("--batch-size", ta.batch_size, "Minibatch size");
  train->add_option("--negatives", ta.negatives, "Negatives per pair (embedder)");
  train->add_option("--seed", ta.seed, "Random seed");
  train->add_option("--out", ta.out, "Output directory")->required();

  EncodeArgs ea;
  auto* encode = app.add_subcommand("encode", "Quantize vectors with a trained checkpoint");
  encode->add_option("--checkpoint", ea.checkpoint, "checkpoint.json")->required();
  encode->add_option("--embeddings", ea.embeddings, "Vectors JSONL (optional for embedder checkpoints)");
  encode->add_option("--codebook", ea.codebook, "Codebook JSON replacing the checkpoint's codebook");
  encode->add_option("--out", ea.out, "Output directory")->required();

  EncodeArgs na;
  auto* analyze = app.add_subcommand("analyze", "Latent norm statistics of a trained checkpoint");
  analyze->add_option("--checkpoint", na.checkpoint, "checkpoint.json")->required();
  analyze->add_option("--embeddings", na.embeddings, "Vectors JSONL (optional for embedder checkpoints)");
  analyze->add_option("--out", na.out, "Output directory")->required();

  auto add_eval_common = [](CLI::App* c, EvalArgs& e) {
    c->add_option("--config", e.config, "JSON config file");
    c->add_option("--tokens", e.tokens, "Frozen multitoken table NAME=PATH (repeatable); omit to train quantizers");
    c->add_option("--schemes", e.schemes, "Schemes trained when --tokens is absent")->delimiter(',');
    c->add_option("--k", e.k, "Codebook levels");
    c->add_option("--s", e.s, "Codewords per level");
    c->add_option("--dim", e.h, "Latent dimension");
    c->add_option("--quantizer-epochs", e.quantizer_epochs, "Quantizer training epochs");
    c->add_option("--probe-epochs", e.probe_epochs, "Probe training epochs");
    c->add_option("--probe-preset", e.probe_preset, "desk | full")->check(CLI::IsMember({"desk", "full"}));
    c->add_option("--seeds", e.seeds, "Number of seeds")->capture_default_str();
    c->add_option("--seed", e.seed, "First seed")->capture_default_str();
    c->add_option("--jobs", e.jobs, "Concurrent (scheme, seed) runs")->capture_default_str();
    c->add_option("--out", e.out, "Output directory")->required();
  };

  EvalArgs ma;
  auto* em = app.add_subcommand("eval-modeling", "Hypernym generation from multitokens");
  em->add_option("--taxonomy", ma.taxonomy, "Taxonomy TSV")->required();
  em->add_option("--split", ma.split, "Split TSV")->required();
  add_eval_common(em, ma);

  EvalArgs da;
  auto* ed = app.add_subcommand("eval-discovery", "Next-item generation from multitokens");
  ed->add_option("--histories", da.histories, "Histories TSV")->required();
  ed->add_option("--embeddings", da.embeddings, "Item vectors JSONL")->required();
  ed->add_flag("--random", da.random, "Add the random-token baseline to --tokens tables");
  ed->add_option("--max-context", da.max_context, "History items fed to the probe");
  ed->add_option("--eval-every", da.eval_every, "Validation interval in epochs (0 keeps the last epoch)");
  ed->add_option("--validation-users", da.validation_users, "Users scored for model selection (0 = all)");
  add_eval_common(ed, da);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  std::vector<std::string> args(argv, argv + argc);
  CLI::App* sub = app.get_subcommands().front();
  hrq::cli::RunManifest manifest(sub->get_name(), args);
  if (sub == synth) cmd_synth_data(sa, manifest);
  else if (sub == train) cmd_train_quantizer(ta, manifest);
  else if (sub == encode) cmd_encode(ea, manifest);
  else if (sub == analyze) cmd_analyze(na, manifest);
  else if (sub == em) cmd_eval_modeling(ma, manifest);
  else cmd_eval_discovery(da, manifest);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const hrq::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const hrq::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const hrq::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const hrq::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
