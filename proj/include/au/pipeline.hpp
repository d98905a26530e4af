#pragma once

// Manifest-driven experiment stages: world generation, base pretraining,
// unlearning runs, evaluation, sweeps and report assembly. Every stage reads
// and writes files under the manifest's output directory.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "au/corpus.hpp"
#include "au/eval.hpp"
#include "au/loop.hpp"
#include "au/manifest.hpp"
#include "au/model.hpp"
#include "au/pretrain.hpp"

namespace au::pipeline {

namespace fs = std::filesystem;
using manifest::RunManifest;

struct Paths {
  fs::path root;
  fs::path world() const { return root / "world"; }
  fs::path base_checkpoint() const { return root / "base" / "base.ckpt"; }
  fs::path run(const std::string& name) const { return root / "runs" / name; }
  fs::path eval_dir() const { return root / "eval"; }
  fs::path report_dir() const { return root / "report"; }
};

inline Paths paths(const RunManifest& m) { return {fs::path(m.output_dir)}; }

inline void write_text(const fs::path& p, const std::string& text) {
  std::error_code ec;
  fs::create_directories(p.parent_path(), ec);
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed for " + p.string());
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw CorruptionError("unreadable JSON in " + p.string() + ": " + e.what());
  }
}

inline std::string file_hash(const fs::path& p) { return sha256_hex(read_text(p)); }

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------
struct WorldData {
  corpus::World world;
  std::vector<corpus::CorpusDocument> pretrain, heldout, utility, retain;

  std::vector<TokenSeq> retain_tokens() const {
    std::vector<TokenSeq> out;
    for (const auto& d : retain) out.push_back(d.tokens);
    return out;
  }
};

inline WorldData generate_world_data(const RunManifest& m) {
  WorldData d;
  const auto seed = m.world.seed;
  d.world = corpus::build_world(seed, m.world.config);
  d.pretrain = corpus::generate_pretraining_corpus(d.world, m.pretrain.n_docs, m.pretrain.p_halluc, derive_seed(seed, 1));
  d.heldout =
      corpus::generate_pretraining_corpus(d.world, m.pretrain.heldout_docs, m.pretrain.p_halluc, derive_seed(seed, 2));
  d.utility = corpus::split_utility_corpus(d.world, m.world.n_utility_docs, derive_seed(seed, 3));
  d.retain = corpus::generate_pretraining_corpus(d.world, m.world.n_retain_docs, 0.0, derive_seed(seed, 4));
  return d;
}

inline const std::vector<std::pair<std::string, std::vector<corpus::CorpusDocument> WorldData::*>>& corpus_files() {
  static const std::vector<std::pair<std::string, std::vector<corpus::CorpusDocument> WorldData::*>> files = {
      {"pretrain.txt", &WorldData::pretrain},
      {"heldout.txt", &WorldData::heldout},
      {"utility.txt", &WorldData::utility},
      {"retain.txt", &WorldData::retain}};
  return files;
}

inline ordered_json prompts_json(const corpus::World& w) {
  auto pool = [&](const std::vector<corpus::PromptState>& ps) {
    ordered_json a = ordered_json::array();
    for (const auto& p : ps)
      a.push_back({{"prompt_id", p.prompt_id}, {"task_id", p.task_id}, {"surface", w.vocab.render(p.surface)}});
    return a;
  };
  return ordered_json{{"seen", pool(corpus::initial_prompts(w))}, {"unseen", pool(corpus::heldout_prompts(w))}};
}

struct WorldResult {
  std::string world_hash;
  ordered_json files;  // file name -> sha256
};

inline WorldResult gen_world(const RunManifest& m) {
  const Paths P = paths(m);
  const WorldData d = generate_world_data(m);
  WorldResult r;
  r.world_hash = corpus::world_hash(d.world);
  fs::create_directories(P.world());
  for (const auto& [name, member] : corpus_files()) {
    corpus::write_corpus_file((P.world() / name).string(), d.*member, d.world.vocab);
    r.files[name] = file_hash(P.world() / name);
  }
  corpus::write_registry_file((P.world() / "registry.txt").string(), d.world.registry);
  r.files["registry.txt"] = file_hash(P.world() / "registry.txt");
  write_text(P.world() / "prompts.json", prompts_json(d.world).dump(2) + "\n");
  r.files["prompts.json"] = file_hash(P.world() / "prompts.json");

  ordered_json doc;
  doc["manifest_hash"] = manifest::manifest_hash(m);
  doc["manifest"] = manifest::to_json(m);
  doc["world_hash"] = r.world_hash;
  doc["files"] = r.files;
  doc["world"] = corpus::world_manifest(d.world);
  write_text(P.world() / "world.json", doc.dump(2) + "\n");
  return r;
}

// Rebuilds the world from the manifest and checks it against the files on
// disk; corpora are read back from the files.
inline WorldData load_world(const RunManifest& m) {
  const Paths P = paths(m);
  if (!fs::exists(P.world() / "world.json"))
    throw IoError("world files missing under " + P.world().string() + " (run gen-world first)");
  const json doc = read_json(P.world() / "world.json");
  WorldData d;
  d.world = corpus::build_world(m.world.seed, m.world.config);
  if (doc.value("world_hash", std::string{}) != corpus::world_hash(d.world))
    throw ValidationError("world.json was generated from a different world configuration");
  for (const auto& [name, member] : corpus_files()) {
    const fs::path p = P.world() / name;
    if (file_hash(p) != doc.at("files").value(name, std::string{}))
      throw CorruptionError(p.string() + " does not match the hash recorded in world.json");
    d.*member = corpus::read_corpus_file(p.string(), d.world.vocab);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Base model
// ---------------------------------------------------------------------------
struct BaseResult {
  std::string checkpoint;
  std::string parameter_hash;
  std::optional<double> base_hr;
  long steps = 0;
  long best_step = 0;
  double heldout_nll = 0;
};

template <class Real>
BaseResult train_base(const RunManifest& m, const std::function<void(const pretrain::EvalPoint&)>& progress = {}) {
  const Paths P = paths(m);
  const WorldData d = load_world(m);
  auto r = pretrain::train_base<Real>(m.model, m.world.seed, d.pretrain, d.heldout, m.pretrain, progress);

  eval::HrSettings hs;
  const auto es = manifest::eval_settings(m);
  hs.k = es.k;
  hs.seed = es.seed;
  const auto hr = eval::hallucination_rate(r.params, corpus::initial_prompts(d.world), hs, d.world.registry, d.world.vocab);

  BaseResult out;
  out.checkpoint = P.base_checkpoint().string();
  out.parameter_hash = model::parameter_hash(r.params);
  out.base_hr = hr.hr();
  out.steps = r.steps;
  out.best_step = r.best_step;
  out.heldout_nll = r.best_heldout_nll;

  ordered_json hist = ordered_json::array();
  for (const auto& e : r.history) hist.push_back({{"step", e.step}, {"train_loss", e.train_loss}, {"heldout_nll", e.heldout_nll}});
  ordered_json extra;
  extra["manifest_hash"] = manifest::manifest_hash(m);
  extra["base_hr"] = eval::rate_json(out.base_hr);
  extra["steps"] = r.steps;
  extra["best_step"] = r.best_step;
  extra["best_heldout_nll"] = r.best_heldout_nll;
  extra["stopped_early"] = r.stopped_early;
  extra["history"] = hist;
  fs::create_directories(P.base_checkpoint().parent_path());
  model::save_checkpoint(r.params, out.checkpoint, extra);

  if (!out.base_hr || *out.base_hr < m.calibration_low || *out.base_hr > m.calibration_high) {
    const std::string shown = out.base_hr ? eval::fmt(*out.base_hr) + "%" : std::string("undefined");
    throw CalibrationError("base hallucination rate " + shown + " is outside the calibration band [" +
                           eval::fmt(m.calibration_low) + ", " + eval::fmt(m.calibration_high) +
                           "]%; adjust pretrain.p_halluc");
  }
  return out;
}

template <class Real>
model::Parameters<Real> load_base(const RunManifest& m) {
  const Paths P = paths(m);
  if (!fs::exists(P.base_checkpoint()))
    throw IoError("base checkpoint missing at " + P.base_checkpoint().string() + " (run train-base first)");
  return model::load_checkpoint<Real>(P.base_checkpoint().string(), m.model);
}

// ---------------------------------------------------------------------------
// Unlearning runs
// ---------------------------------------------------------------------------
struct RunOutput {
  std::string name;
  std::string checkpoint;
  std::string metrics;
  long steps = 0;
};

template <class Real>
RunOutput run(const RunManifest& m, loop::Method method, const std::string& run_name = "",
              const std::optional<loop::LoopConfig>& override_config = std::nullopt) {
  const Paths P = paths(m);
  const WorldData d = load_world(m);
  const auto base = load_base<Real>(m);
  const loop::LoopConfig cfg = override_config ? *override_config : manifest::loop_config(m, method);
  RunOutput out;
  out.name = run_name.empty() ? std::string(loop::method_name(method)) : run_name;
  const fs::path dir = P.run(out.name);
  fs::create_directories(dir);
  const std::string mhash = manifest::manifest_hash(m);

  ordered_json info;
  info["manifest_hash"] = mhash;
  info["run"] = out.name;
  info["method"] = loop::method_name(cfg.method);
  auto lj = manifest::loop_to_json(cfg);
  lj["seed"] = cfg.master_seed;
  info["loop"] = lj;
  info["manifest"] = manifest::to_json(m);
  write_text(dir / "run_manifest.json", info.dump(2) + "\n");

  out.metrics = (dir / "metrics.jsonl").string();
  std::ofstream metrics(out.metrics, std::ios::binary);
  if (!metrics) throw IoError("cannot write " + out.metrics);
  const auto sink = [&](const ordered_json& rec) {
    ordered_json line = rec;
    line["manifest_hash"] = mhash;
    metrics << line.dump() << '\n';
    metrics.flush();
  };
  loop::RunResult<Real> r;
  try {
    r = loop::run_unlearning(d.world, base, cfg, d.retain_tokens(), sink);
  } catch (const NumericError& e) {
    write_text(dir / "failure.json",
               ordered_json{{"manifest_hash", mhash}, {"error", e.what()}, {"step", e.step()}}.dump(2) + "\n");
    throw;
  }
  out.steps = r.steps;
  out.checkpoint = (dir / "final.ckpt").string();
  model::save_checkpoint(r.params, out.checkpoint,
                         ordered_json{{"manifest_hash", mhash}, {"run", out.name}, {"steps", r.steps}});
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation and reports
// ---------------------------------------------------------------------------
template <class Real>
eval::MethodReport evaluate(const RunManifest& m, const std::string& checkpoint, const std::string& name) {
  const Paths P = paths(m);
  const WorldData d = load_world(m);
  const auto base = load_base<Real>(m);
  const auto params = model::load_checkpoint<Real>(checkpoint, m.model);
  const auto ref = model::snapshot_reference(base);
  const auto rep = eval::evaluate(name, params, ref, d.world, corpus::initial_prompts(d.world),
                                  corpus::heldout_prompts(d.world), d.utility, manifest::eval_settings(m));
  ordered_json doc;
  doc["manifest_hash"] = manifest::manifest_hash(m);
  doc["checkpoint"] = checkpoint;
  doc["report"] = eval::to_json(rep);
  write_text(P.eval_dir() / (name + ".json"), doc.dump(2) + "\n");
  return rep;
}

// Rows in a fixed order: base, the six methods, then anything else by name.
inline std::vector<std::string> report_order(const std::vector<std::string>& names) {
  std::vector<std::string> fixed = {"base"};
  for (auto mth : loop::kAllMethods) fixed.emplace_back(loop::method_name(mth));
  std::vector<std::string> out;
  for (const auto& f : fixed)
    if (std::find(names.begin(), names.end(), f) != names.end()) out.push_back(f);
  std::vector<std::string> rest;
  for (const auto& n : names)
    if (std::find(fixed.begin(), fixed.end(), n) == fixed.end()) rest.push_back(n);
  std::sort(rest.begin(), rest.end());
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

struct ReportResult {
  std::string csv, json;
  std::vector<std::string> warnings;
  std::size_t rows = 0;
};

inline eval::MethodReport load_eval(const RunManifest& m, const std::string& name) {
  const json doc = read_json(paths(m).eval_dir() / (name + ".json"));
  try {
    return eval::method_report_from_json(doc.at("report"));
  } catch (const json::exception& e) {
    throw CorruptionError("malformed evaluation file for " + name + ": " + e.what());
  }
}

inline ReportResult report_from(const RunManifest& m, const std::vector<std::string>& names, const std::string& stem) {
  const Paths P = paths(m);
  ReportResult r;
  std::vector<eval::MethodReport> reps;
  for (const auto& n : names) {
    if (!fs::exists(P.eval_dir() / (n + ".json"))) {
      r.warnings.push_back("no evaluation for '" + n + "'; row omitted");
      continue;
    }
    reps.push_back(load_eval(m, n));
  }
  if (reps.empty()) throw IoError("no evaluations found under " + P.eval_dir().string());
  r.csv = (P.report_dir() / (stem + ".csv")).string();
  r.json = (P.report_dir() / (stem + ".json")).string();
  fs::create_directories(P.report_dir());
  eval::emit_report(reps, r.csv, r.json, manifest::manifest_hash(m));
  r.rows = reps.size();
  return r;
}

// Summary over every evaluation present; the base row and the six standard
// methods are expected and their absence is reported.
inline ReportResult report(const RunManifest& m) {
  const Paths P = paths(m);
  std::vector<std::string> names;
  if (fs::exists(P.eval_dir()))
    for (const auto& e : fs::directory_iterator(P.eval_dir()))
      if (e.path().extension() == ".json") names.push_back(e.path().stem().string());
  std::vector<std::string> missing;
  std::vector<std::string> expected = {"base"};
  for (auto mth : loop::kAllMethods) expected.emplace_back(loop::method_name(mth));
  for (const auto& e : expected)
    if (std::find(names.begin(), names.end(), e) == names.end()) missing.push_back(e);
  auto r = report_from(m, report_order(names), "summary");
  for (const auto& x : missing) r.warnings.push_back("partial report: no evaluation for '" + x + "'");
  return r;
}

// Every stage in order: world, base, the six methods, their evaluations and
// the summary table.
template <class Real>
ReportResult run_all(const RunManifest& m, const std::function<void(const eval::MethodReport&)>& on_eval = {}) {
  gen_world(m);
  train_base<Real>(m);
  const auto base = evaluate<Real>(m, paths(m).base_checkpoint().string(), "base");
  if (on_eval) on_eval(base);
  for (loop::Method method : loop::kAllMethods) {
    const auto r = run<Real>(m, method);
    const auto rep = evaluate<Real>(m, r.checkpoint, r.name);
    if (on_eval) on_eval(rep);
  }
  return report(m);
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------
inline std::vector<json> parse_sweep_values(const std::string& list) {
  std::vector<json> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(json::parse(item));
    } catch (const json::exception&) {
      out.push_back(json(item));
    }
  }
  if (out.empty()) throw ValidationError("sweep: empty value list");
  return out;
}

inline std::string sweep_run_name(loop::Method method, const std::string& param, const json& v) {
  std::string s = v.is_string() ? v.get<std::string>() : v.dump();
  return std::string(loop::method_name(method)) + "__" + param + "_" + s;
}

// Loop settings for one sweep point: the method's settings with `param`
// replaced, validated like a manifest entry.
inline loop::LoopConfig sweep_config(const RunManifest& m, loop::Method method, const std::string& param,
                                     const json& value) {
  RunManifest mm = m;
  ordered_json o = mm.methods.count(method) ? mm.methods[method] : ordered_json::object();
  o[param] = value;
  mm.methods[method] = o;
  return manifest::loop_config(mm, method);
}

template <class Real>
ReportResult sweep(const RunManifest& m, loop::Method method, const std::string& param, const std::string& values,
                   const std::function<void(const std::string&)>& on_point = {}) {
  if (param == "seed") throw ValidationError("sweep: the seed is not a sweepable loop setting");
  const auto vals = parse_sweep_values(values);
  std::vector<loop::LoopConfig> cfgs;
  for (const auto& v : vals) cfgs.push_back(sweep_config(m, method, param, v));  // validate all first
  const Paths P = paths(m);
  if (!fs::exists(P.eval_dir() / "base.json")) evaluate<Real>(m, P.base_checkpoint().string(), "base");
  std::vector<std::string> names = {"base"};
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const std::string name = sweep_run_name(method, param, vals[i]);
    if (on_point) on_point(name);
    const auto out = run<Real>(m, method, name, cfgs[i]);
    evaluate<Real>(m, out.checkpoint, name);
    names.push_back(name);
  }
  return report_from(m, names, "sweep_" + std::string(loop::method_name(method)) + "_" + param);
}

}  // namespace au::pipeline
