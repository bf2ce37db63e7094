#pragma once

// Run orchestration behind the command-line tool.
//
// A run directory holds one trained seed:
//
//   config.json      resolved configuration (single seed)
//   manifest.json    artifacts with content hashes, per-stage summaries
//   checkpoints/     model.bin, vocab.json, corpus.jsonl, basis.bin
//   reports/         CSV and JSON outputs of every stage
//   plots/           SVG figures

#include "rnn_dynamo/checkpoint.hpp"
#include "rnn_dynamo/common.hpp"
#include "rnn_dynamo/corpus.hpp"
#include "rnn_dynamo/fixedpoints.hpp"
#include "rnn_dynamo/geometry.hpp"
#include "rnn_dynamo/recurrent.hpp"
#include "rnn_dynamo/report.hpp"
#include "rnn_dynamo/statespace.hpp"
#include "rnn_dynamo/trainer.hpp"

#include "json.hpp"

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace rnn_dynamo {

inline constexpr std::string_view kToolName = "rnn_dynamo";
inline constexpr std::string_view kToolVersion = "1.0.0";

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

/// Invalid configuration or command line (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A requested stage needs the output of a stage that has not run (exit code 3).
class MissingStageError : public Error {
 public:
  MissingStageError(std::string stage, std::string prerequisite)
      : Error("stage '" + stage + "' requires stage '" + prerequisite + "' (run it first or request it too)"),
        stage_(std::move(stage)),
        prerequisite_(std::move(prerequisite)) {}
  const std::string& stage() const { return stage_; }
  const std::string& prerequisite() const { return prerequisite_; }

 private:
  std::string stage_;
  std::string prerequisite_;
};

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitMissingStage = 3 };

struct AnalysisConfig {
  double variance_threshold = 0.95;
  StateSelection pca_states = StateSelection::all;
  std::uint64_t kmeans_seed = 0;
  int kmeans_restarts = 10;
  FpSearchConfig fixedpoints;
  PatternThresholds patterns;
  int max_plot_points = 2500;
};

struct PipelineConfig {
  std::string name = "run";
  std::string output = "runs";
  std::string corpus_path;  // JSONL; empty selects the synthetic generator
  SyntheticSpec synthetic;
  std::array<double, 3> split_fractions = {0.64, 0.16, 0.20};
  bool stratified = true;
  double val_fraction = 0.2;  // for corpora that already carry a train/test split
  std::uint64_t split_seed = 0;
  int min_freq = 1;
  int max_vocab = 20000;
  CellType cell = CellType::gru;
  int embed_dim = 16;
  int hidden_dim = 16;
  TrainConfig train;
  std::vector<std::uint64_t> seeds = {1};
  AnalysisConfig analysis;
};

// ---------------------------------------------------------------------------
// Config reading with field paths in every error.

namespace detail {

class FieldReader {
 public:
  FieldReader(const nlohmann::json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const char* key) const { return obj_.contains(key); }

  template <class T>
  void read(const char* key, T& out) {
    if (!obj_.contains(key)) return;
    seen_.insert(key);
    convert(obj_.at(key), field(key), out);
  }

  std::optional<FieldReader> object(const char* key) {
    if (!obj_.contains(key)) return std::nullopt;
    seen_.insert(key);
    return FieldReader(obj_.at(key), field(key));
  }

  void finish() const {
    for (const auto& [k, v] : obj_.items()) {
      if (!seen_.count(k)) throw ConfigError(field(k.c_str()) + ": unknown field");
    }
  }

  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  static void convert(const nlohmann::json& j, const std::string& path, double& out) {
    if (!j.is_number()) throw ConfigError(path + ": expected a number");
    out = j.get<double>();
  }
  static void convert(const nlohmann::json& j, const std::string& path, int& out) {
    if (!j.is_number_integer()) throw ConfigError(path + ": expected an integer");
    const auto v = j.get<long long>();
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
      throw ConfigError(path + ": integer out of range");
    }
    out = static_cast<int>(v);
  }
  static void convert(const nlohmann::json& j, const std::string& path, std::uint64_t& out) {
    if (!j.is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer");
    out = j.get<std::uint64_t>();
  }
  static void convert(const nlohmann::json& j, const std::string& path, unsigned& out) {
    std::uint64_t v = 0;
    convert(j, path, v);
    out = static_cast<unsigned>(v);
  }
  static void convert(const nlohmann::json& j, const std::string& path, bool& out) {
    if (!j.is_boolean()) throw ConfigError(path + ": expected true or false");
    out = j.get<bool>();
  }
  static void convert(const nlohmann::json& j, const std::string& path, std::string& out) {
    if (!j.is_string()) throw ConfigError(path + ": expected a string");
    out = j.get<std::string>();
  }
  static void convert(const nlohmann::json& j, const std::string& path, std::optional<int>& out) {
    if (j.is_null()) {
      out.reset();
      return;
    }
    int v = 0;
    convert(j, path, v);
    out = v;
  }
  template <class T>
  static void convert(const nlohmann::json& j, const std::string& path, std::vector<T>& out) {
    if (!j.is_array()) throw ConfigError(path + ": expected an array");
    out.clear();
    for (std::size_t i = 0; i < j.size(); ++i) {
      T v{};
      convert(j[i], path + "[" + std::to_string(i) + "]", v);
      out.push_back(v);
    }
  }

  const nlohmann::json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class F>
void checked(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline std::string selection_name(StateSelection s) { return s == StateSelection::all ? "all" : "final"; }

}  // namespace detail

inline void validate(const PipelineConfig& c) {
  if (c.name.empty()) throw ConfigError("name: must not be empty");
  if (c.seeds.empty()) throw ConfigError("seeds: at least one seed is required");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) {
    throw ConfigError("seeds: duplicate seed");
  }
  if (c.embed_dim < 1) throw ConfigError("model.embed_dim: must be >= 1");
  if (c.hidden_dim < 1) throw ConfigError("model.hidden_dim: must be >= 1");
  if (c.min_freq < 1) throw ConfigError("corpus.vocab.min_freq: must be >= 1");
  if (c.max_vocab < 3) throw ConfigError("corpus.vocab.max_size: must be >= 3");
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0)) throw ConfigError("corpus.split.val_fraction: must be in (0, 1)");
  double total = 0.0;
  for (double f : c.split_fractions) {
    if (!(f > 0.0)) throw ConfigError("corpus.split.fractions: entries must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("corpus.split.fractions: must sum to 1");
  detail::checked("train", [&] { c.train.validate(); });
  const auto& a = c.analysis;
  if (!(a.variance_threshold > 0.0 && a.variance_threshold < 1.0)) {
    throw ConfigError("analysis.variance_threshold: must be in (0, 1)");
  }
  if (a.kmeans_restarts < 1) throw ConfigError("analysis.kmeans_restarts: must be >= 1");
  if (a.max_plot_points < 1) throw ConfigError("analysis.max_plot_points: must be >= 1");
  detail::checked("analysis.fixedpoints", [&] { a.fixedpoints.validate(); });
}

/// Parses a configuration object. Unknown fields and type mismatches are
/// errors naming the offending field.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  detail::FieldReader root(j, "");
  root.read("name", c.name);
  root.read("output", c.output);
  root.read("seeds", c.seeds);
  if (auto corpus = root.object("corpus")) {
    corpus->read("path", c.corpus_path);
    if (auto syn = corpus->object("synthetic")) {
      auto& s = c.synthetic;
      syn->read("intents", s.n_intents);
      syn->read("per_intent", s.per_intent);
      syn->read("templates_per_intent", s.templates_per_intent);
      syn->read("lexicon_size", s.lexicon_size);
      syn->read("seed", s.seed);
      syn->read("class_counts", s.class_counts);
      syn->read("minority_confusion", s.minority_confusion);
      syn->read("keyword_rate", s.keyword_rate);
      syn->read("filler_size", s.filler_size);
      syn->read("min_length", s.min_length);
      syn->read("max_length", s.max_length);
      syn->finish();
    }
    if (auto sp = corpus->object("split")) {
      std::vector<double> fractions;
      sp->read("fractions", fractions);
      if (sp->has("fractions")) {
        if (fractions.size() != 3) throw ConfigError("corpus.split.fractions: expected [train, val, test]");
        std::copy(fractions.begin(), fractions.end(), c.split_fractions.begin());
      }
      sp->read("stratified", c.stratified);
      sp->read("val_fraction", c.val_fraction);
      sp->read("seed", c.split_seed);
      sp->finish();
    }
    if (auto vocab = corpus->object("vocab")) {
      vocab->read("min_freq", c.min_freq);
      vocab->read("max_size", c.max_vocab);
      vocab->finish();
    }
    corpus->finish();
  }
  if (auto model = root.object("model")) {
    std::string cell = std::string(cell_name(c.cell));
    model->read("cell", cell);
    detail::checked("model.cell", [&] { c.cell = parse_cell(cell); });
    model->read("embed_dim", c.embed_dim);
    model->read("hidden_dim", c.hidden_dim);
    model->finish();
  }
  if (auto tr = root.object("train")) {
    auto& t = c.train;
    tr->read("learning_rate", t.learning_rate);
    tr->read("halve_after_epoch", t.halve_after_epoch);
    tr->read("batch_size", t.batch_size);
    tr->read("max_epochs", t.max_epochs);
    tr->read("patience", t.patience);
    tr->read("dropout", t.dropout);
    if (auto adam = tr->object("adam")) {
      adam->read("beta1", t.adam.beta1);
      adam->read("beta2", t.adam.beta2);
      adam->read("epsilon", t.adam.epsilon);
      adam->finish();
    }
    tr->finish();
  }
  if (auto an = root.object("analysis")) {
    auto& a = c.analysis;
    an->read("variance_threshold", a.variance_threshold);
    std::string states = detail::selection_name(a.pca_states);
    an->read("pca_states", states);
    if (states == "all") {
      a.pca_states = StateSelection::all;
    } else if (states == "final") {
      a.pca_states = StateSelection::final;
    } else {
      throw ConfigError("analysis.pca_states: expected \"all\" or \"final\"");
    }
    an->read("kmeans_seed", a.kmeans_seed);
    an->read("kmeans_restarts", a.kmeans_restarts);
    an->read("max_plot_points", a.max_plot_points);
    if (auto fp = an->object("fixedpoints")) {
      auto& f = a.fixedpoints;
      fp->read("n_seeds", f.n_seeds);
      fp->read("noise_sigma", f.noise_sigma);
      fp->read("max_steps", f.max_steps);
      fp->read("learning_rate", f.learning_rate);
      fp->read("q_threshold", f.q_threshold);
      fp->read("dedup_eps", f.dedup_eps);
      fp->read("tau", f.tau);
      fp->read("newton_steps", f.newton_steps);
      fp->read("pad_input", f.pad_input);
      fp->read("seed", f.seed);
      fp->finish();
    }
    if (auto pt = an->object("patterns")) {
      pt->read("f1_hi", a.patterns.f1_hi);
      pt->read("sep_hi", a.patterns.sep_hi);
      pt->read("align_hi", a.patterns.align_hi);
      pt->finish();
    }
    an->finish();
  }
  root.finish();
  validate(c);
  return c;
}

inline ojson config_to_json(const PipelineConfig& c) {
  ojson j;
  j["name"] = c.name;
  j["output"] = c.output;
  j["seeds"] = c.seeds;
  ojson corpus;
  if (!c.corpus_path.empty()) corpus["path"] = c.corpus_path;
  const auto& s = c.synthetic;
  corpus["synthetic"] = {{"intents", s.n_intents},
                         {"per_intent", s.per_intent},
                         {"templates_per_intent", s.templates_per_intent},
                         {"lexicon_size", s.lexicon_size},
                         {"seed", s.seed},
                         {"class_counts", s.class_counts},
                         {"minority_confusion", s.minority_confusion},
                         {"keyword_rate", s.keyword_rate},
                         {"filler_size", s.filler_size},
                         {"min_length", s.min_length},
                         {"max_length", s.max_length}};
  corpus["split"] = {{"fractions", c.split_fractions},
                     {"stratified", c.stratified},
                     {"val_fraction", c.val_fraction},
                     {"seed", c.split_seed}};
  corpus["vocab"] = {{"min_freq", c.min_freq}, {"max_size", c.max_vocab}};
  j["corpus"] = corpus;
  j["model"] = {{"cell", std::string(cell_name(c.cell))}, {"embed_dim", c.embed_dim}, {"hidden_dim", c.hidden_dim}};
  const auto& t = c.train;
  j["train"] = {{"learning_rate", t.learning_rate},
                {"halve_after_epoch", t.halve_after_epoch ? ojson(*t.halve_after_epoch) : ojson(nullptr)},
                {"batch_size", t.batch_size},
                {"max_epochs", t.max_epochs},
                {"patience", t.patience},
                {"dropout", t.dropout},
                {"adam", {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"epsilon", t.adam.epsilon}}}};
  const auto& a = c.analysis;
  const auto& f = a.fixedpoints;
  j["analysis"] = {{"variance_threshold", a.variance_threshold},
                   {"pca_states", detail::selection_name(a.pca_states)},
                   {"kmeans_seed", a.kmeans_seed},
                   {"kmeans_restarts", a.kmeans_restarts},
                   {"max_plot_points", a.max_plot_points},
                   {"fixedpoints",
                    {{"n_seeds", f.n_seeds},
                     {"noise_sigma", f.noise_sigma},
                     {"max_steps", f.max_steps},
                     {"learning_rate", f.learning_rate},
                     {"q_threshold", f.q_threshold},
                     {"dedup_eps", f.dedup_eps},
                     {"tau", f.tau},
                     {"newton_steps", f.newton_steps},
                     {"pad_input", f.pad_input},
                     {"seed", f.seed}}},
                   {"patterns",
                    {{"f1_hi", a.patterns.f1_hi}, {"sep_hi", a.patterns.sep_hi}, {"align_hi", a.patterns.align_hi}}}};
  return j;
}

inline nlohmann::json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(what + ": malformed JSON (" + e.what() + ")");
  }
}

/// Reads a config file. A relative corpus path is resolved against the
/// directory holding the config file.
inline PipelineConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  auto c = config_from_json(parse_json_text(text, path));
  if (!c.corpus_path.empty() && fs::path(c.corpus_path).is_relative()) {
    c.corpus_path = (fs::path(path).parent_path() / c.corpus_path).lexically_normal().string();
  }
  return c;
}

inline std::string dump_json(const ojson& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Corpus preparation

struct PreparedCorpus {
  LabeledCorpus corpus;  // split assigned and encoded
  Vocabulary vocab;
};

/// Loads or generates the corpus, assigns splits and builds the vocabulary
/// from the training split. Corpora that already carry train/test labels get
/// a stratified validation subset carved from their training part.
inline PreparedCorpus prepare_corpus(const PipelineConfig& c) {
  LabeledCorpus raw;
  if (c.corpus_path.empty()) {
    raw = generate_synthetic(c.synthetic);
  } else {
    if (!fs::exists(c.corpus_path)) throw ConfigError("corpus.path: file not found: " + c.corpus_path);
    raw = load_corpus(c.corpus_path);
  }
  if (raw.sentences.empty()) throw Error("corpus is empty");
  bool any = false;
  bool all = true;
  bool has_val = false;
  for (const auto& s : raw.sentences) {
    any = any || s.split != Split::unassigned;
    all = all && s.split != Split::unassigned;
    has_val = has_val || s.split == Split::val;
  }
  if (any && !all) throw Error("corpus assigns a split to some sentences but not to others");
  LabeledCorpus assigned;
  if (!any) {
    assigned = split(raw, c.split_fractions, c.stratified, c.split_seed);
  } else if (!has_val) {
    assigned = split_validation(raw, c.val_fraction, c.split_seed);
  } else {
    assigned = raw;
  }
  PreparedCorpus out;
  out.corpus = drop_untrained_intents(assigned);
  if (out.corpus.n_intents() < 2) throw Error("corpus has fewer than two trained intents");
  out.vocab = build_vocabulary(out.corpus.texts(Split::train), c.min_freq, c.max_vocab);
  encode(out.corpus, out.vocab);
  return out;
}

// ---------------------------------------------------------------------------
// Run directories

struct RunPaths {
  fs::path root;

  fs::path config() const { return root / "config.json"; }
  fs::path manifest() const { return root / "manifest.json"; }
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path reports() const { return root / "reports"; }
  fs::path plots() const { return root / "plots"; }
  fs::path model() const { return checkpoints() / "model.bin"; }
  fs::path vocab() const { return checkpoints() / "vocab.json"; }
  fs::path corpus() const { return checkpoints() / "corpus.jsonl"; }
  fs::path basis() const { return checkpoints() / "basis.bin"; }
};

inline std::string seed_dir_name(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

inline std::uint64_t file_fingerprint(const fs::path& p) {
  Fnv1a h;
  h.update(read_text_file(p));
  return h.digest();
}

/// Manifest kept in step with the files of a run. Every write re-hashes the
/// artifacts it lists.
class Manifest {
 public:
  explicit Manifest(RunPaths paths) : paths_(std::move(paths)) {
    if (fs::exists(paths_.manifest())) {
      doc_ = ojson::parse(read_text_file(paths_.manifest()));
    } else {
      doc_ = ojson::object();
      doc_["tool"] = kToolName;
      doc_["version"] = kToolVersion;
      doc_["artifacts"] = ojson::object();
      doc_["stages"] = ojson::object();
    }
  }

  ojson& doc() { return doc_; }
  const ojson& doc() const { return doc_; }

  bool has_stage(std::string_view stage) const { return doc_.at("stages").contains(std::string(stage)); }

  void record_stage(std::string_view stage, ojson summary, const std::vector<fs::path>& files) {
    for (const auto& f : files) {
      const auto rel = fs::relative(f, paths_.root).generic_string();
      doc_["artifacts"][rel] = {{"stage", stage}, {"fnv1a", hex64(file_fingerprint(f))}};
    }
    doc_["stages"][std::string(stage)] = std::move(summary);
    save();
  }

  void save() const { write_text_file(paths_.manifest(), dump_json(doc_)); }

 private:
  RunPaths paths_;
  ojson doc_;
};

/// Checks the manifest's required fields and that every listed artifact
/// exists with the recorded content hash. Returns the problems found.
inline std::vector<std::string> check_manifest(const fs::path& run_dir) {
  std::vector<std::string> problems;
  const RunPaths paths{run_dir};
  if (!fs::exists(paths.manifest())) return {"manifest.json is missing"};
  ojson doc;
  try {
    doc = ojson::parse(read_text_file(paths.manifest()));
  } catch (const std::exception& e) {
    return {std::string("manifest.json is not valid JSON: ") + e.what()};
  }
  for (const char* key : {"tool", "version", "name", "seed", "arch", "corpus", "artifacts", "stages"}) {
    if (!doc.contains(key)) problems.push_back(std::string("missing field '") + key + "'");
  }
  if (doc.contains("artifacts") && doc["artifacts"].is_object()) {
    for (const auto& [rel, info] : doc["artifacts"].items()) {
      const auto p = run_dir / rel;
      if (!fs::exists(p)) {
        problems.push_back("artifact missing: " + rel);
      } else if (!info.contains("fnv1a") || info["fnv1a"] != hex64(file_fingerprint(p))) {
        problems.push_back("artifact hash mismatch: " + rel);
      }
    }
  }
  return problems;
}

// ---------------------------------------------------------------------------
// train

inline ojson vocab_to_json(const Vocabulary& v, int min_freq, int max_size) {
  return {{"size", v.size()},
          {"min_freq", min_freq},
          {"max_size", max_size},
          {"fnv1a", hex64(v.fingerprint())},
          {"tokens", v.tokens()}};
}

inline CsvTable history_table(const TrainResult& r) {
  CsvTable t;
  t.header = {"epoch", "train_loss", "val_acc", "lr"};
  for (const auto& e : r.history) {
    t.add_row({format_number(e.epoch), format_number(e.train_loss), format_number(e.val_accuracy),
               format_number(e.learning_rate)});
  }
  return t;
}

inline CsvTable metrics_table(const Metrics& m, const std::vector<std::string>& intents) {
  CsvTable t;
  t.header = {"intent", "support", "precision", "recall", "f1", "absent"};
  for (std::size_t i = 0; i < intents.size(); ++i) {
    t.add_row({intents[i], format_number(m.support[i]), format_number(m.precision[i]), format_number(m.recall[i]),
               format_number(m.f1[i]), m.absent[i] ? "true" : "false"});
  }
  return t;
}

struct TrainRunSummary {
  fs::path run_dir;
  std::uint64_t seed = 0;
  double test_accuracy = 0.0;
  int best_epoch = 0;
};

/// Trains one seed into `run_dir`.
inline TrainRunSummary train_run(const PipelineConfig& cfg, const PreparedCorpus& data, std::uint64_t seed,
                                 const fs::path& run_dir, std::ostream* log = nullptr) {
  const RunPaths paths{run_dir};
  fs::create_directories(paths.checkpoints());
  fs::create_directories(paths.reports());
  fs::create_directories(paths.plots());
  if (fs::exists(paths.manifest())) fs::remove(paths.manifest());

  PipelineConfig single = cfg;
  single.seeds = {seed};
  write_text_file(paths.config(), dump_json(config_to_json(single)));

  ArchSpec arch{cfg.cell, cfg.embed_dim, cfg.hidden_dim, data.corpus.n_intents(), data.vocab.size()};
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  const auto result = train(data.corpus, arch, tc);
  const auto test = evaluate(result.params, data.corpus, Split::test);

  save_model(paths.model().string(), {result.params, seed, data.vocab.fingerprint()});
  write_text_file(paths.vocab(), dump_json(vocab_to_json(data.vocab, cfg.min_freq, cfg.max_vocab)));
  {
    std::ostringstream ss;
    write_corpus(ss, data.corpus, true);
    write_text_file(paths.corpus(), ss.str());
  }
  const auto history_csv = paths.reports() / "history.csv";
  const auto metrics_csv = paths.reports() / "test_metrics.csv";
  write_text_file(history_csv, to_csv(history_table(result)));
  write_text_file(metrics_csv, to_csv(metrics_table(test, data.corpus.intents)));

  Manifest manifest(paths);
  auto& doc = manifest.doc();
  doc["name"] = cfg.name;
  doc["seed"] = seed;
  doc["config_fnv1a"] = hex64(file_fingerprint(paths.config()));
  doc["arch"] = arch_to_json(arch);
  const auto counts = [&](Split s) { return static_cast<int>(data.corpus.indices(s).size()); };
  doc["corpus"] = {{"source", cfg.corpus_path.empty() ? "synthetic" : cfg.corpus_path},
                   {"fnv1a", hex64(data.corpus.fingerprint())},
                   {"intents", data.corpus.intents},
                   {"split_counts", {{"train", counts(Split::train)}, {"val", counts(Split::val)}, {"test", counts(Split::test)}}},
                   {"vocab_size", data.vocab.size()},
                   {"max_sentence_tokens", kMaxSentenceTokens},
                   {"normalization", "ascii lowercase, split on whitespace and punctuation"}};
  ojson summary = {{"best_epoch", result.best_epoch},
                   {"epochs_run", static_cast<int>(result.history.size())},
                   {"best_val_accuracy", result.best_val_accuracy},
                   {"test_accuracy", test.accuracy},
                   {"test_macro_f1", test.macro_f1()}};
  manifest.record_stage("train", summary,
                        {paths.config(), paths.model(), paths.vocab(), paths.corpus(), history_csv, metrics_csv});
  if (log) {
    *log << run_dir.generic_string() << ": seed " << seed << ", best epoch " << result.best_epoch << ", test accuracy "
         << format_number(test.accuracy) << "\n";
  }
  return {run_dir, seed, test.accuracy, result.best_epoch};
}

/// Trains every configured seed into <output>/seed_<s>.
inline std::vector<TrainRunSummary> cmd_train(const PipelineConfig& cfg, std::ostream* log = nullptr) {
  validate(cfg);
  const auto data = prepare_corpus(cfg);
  std::vector<TrainRunSummary> runs;
  for (auto seed : cfg.seeds) runs.push_back(train_run(cfg, data, seed, fs::path(cfg.output) / seed_dir_name(seed), log));
  return runs;
}

// ---------------------------------------------------------------------------
// analyze

enum class Stage { pca, partition, clusters, alignment, fixedpoints, diagnose };

inline constexpr std::array<Stage, 6> kAllStages = {Stage::pca,       Stage::partition,   Stage::clusters,
                                                    Stage::alignment, Stage::fixedpoints, Stage::diagnose};

inline std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::pca: return "pca";
    case Stage::partition: return "partition";
    case Stage::clusters: return "clusters";
    case Stage::alignment: return "alignment";
    case Stage::fixedpoints: return "fixedpoints";
    case Stage::diagnose: return "diagnose";
  }
  return "?";
}

/// Comma-separated stage list, or "all". Result is in pipeline order.
inline std::vector<Stage> parse_stages(std::string_view list) {
  std::set<Stage> chosen;
  std::string item;
  std::stringstream ss{std::string(list)};
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    if (item == "all") {
      chosen.insert(kAllStages.begin(), kAllStages.end());
      continue;
    }
    bool found = false;
    for (auto s : kAllStages) {
      if (stage_name(s) == item) {
        chosen.insert(s);
        found = true;
      }
    }
    if (!found) throw ConfigError("--stages: unknown stage '" + item + "'");
  }
  if (chosen.empty()) throw ConfigError("--stages: no stage given");
  return {chosen.begin(), chosen.end()};
}

/// Everything a stage needs from a trained run.
struct RunContext {
  RunPaths paths;
  PipelineConfig config;
  ModelParams params;
  LabeledCorpus corpus;
  std::optional<PcaBasis> basis;
  int projected_dim = 0;

  explicit RunContext(const fs::path& dir) : paths{dir} {
    if (!fs::exists(paths.model())) throw MissingStageError("analyze", "train");
    config = config_from_json(parse_json_text(read_text_file(paths.config()), paths.config().string()));
    const auto ck = load_model(paths.model().string());
    params = ck.params;
    const auto vj = nlohmann::json::parse(read_text_file(paths.vocab()));
    Vocabulary vocab(vj.at("tokens").get<std::vector<std::string>>());
    if (vocab.fingerprint() != ck.vocab_hash) throw Error("vocabulary does not match the model checkpoint");
    corpus = load_corpus(paths.corpus().string());
    encode(corpus, vocab);
    if (corpus.n_intents() != params.arch.n_classes) throw Error("corpus intents do not match the model");
  }

  void load_basis() {
    if (!fs::exists(paths.basis())) return;
    basis = basis_from_container(read_container(paths.basis().string()));
    projected_dim = intrinsic_dimensionality(*basis, config.analysis.variance_threshold);
  }
};

namespace detail {

// Deterministic subsample: every ceil(S / limit)-th row.
inline std::vector<Eigen::Index> plot_rows(Eigen::Index rows, int limit) {
  std::vector<Eigen::Index> out;
  const Eigen::Index stride = std::max<Eigen::Index>(1, (rows + limit - 1) / limit);
  for (Eigen::Index i = 0; i < rows; i += stride) out.push_back(i);
  return out;
}

inline MatrixXd take_rows(const MatrixXd& m, const std::vector<Eigen::Index>& rows, int cols) {
  MatrixXd out(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]).head(cols);
  return out;
}

inline std::vector<int> take(const std::vector<int>& v, const std::vector<Eigen::Index>& rows) {
  std::vector<int> out;
  for (auto r : rows) out.push_back(v[static_cast<std::size_t>(r)]);
  return out;
}

// 2-D coordinates for plotting; pads with zeros when the basis has one axis.
inline MatrixXd plane(const PcaBasis& basis, const MatrixXd& rows, bool center) {
  const int k = std::min(2, basis.dim());
  MatrixXd p = MatrixXd::Zero(rows.rows(), 2);
  p.leftCols(k) = project(basis, rows, k, center);
  return p;
}

inline ojson stats_json(const SummaryStats& s) {
  return {{"mean", s.mean}, {"stdev", s.stdev}, {"values", s.values}};
}

inline ojson matrix_json(const MatrixXd& m) {
  ojson rows = ojson::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    ojson r = ojson::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(r);
  }
  return rows;
}

inline void write_stage_json(const fs::path& path, const ojson& j, std::vector<fs::path>& files) {
  write_text_file(path, dump_json(j));
  files.push_back(path);
}

inline void write_csv(const fs::path& path, const CsvTable& t, std::vector<fs::path>& files) {
  write_text_file(path, to_csv(t));
  files.push_back(path);
}

inline void write_svg(const fs::path& path, const std::string& svg, std::vector<fs::path>& files) {
  write_text_file(path, svg);
  files.push_back(path);
}

inline std::string arch_label(const ArchSpec& a) {
  return fmt::format("{}(emb:{},hid:{})", cell_name(a.cell), a.embed_dim, a.hidden_dim);
}

}  // namespace detail

inline ojson run_pca_stage(RunContext& ctx) {
  const auto& a = ctx.config.analysis;
  const auto sample = collect_states(ctx.params, ctx.corpus, Split::test, a.pca_states);
  const auto basis = pca_fit(sample);
  write_container(ctx.paths.basis().string(), to_container(basis));
  ctx.load_basis();
  const int id = ctx.projected_dim;

  std::vector<fs::path> files{ctx.paths.basis()};
  CsvTable variance;
  variance.header = {"component", "explained_variance_ratio", "cumulative"};
  double cumulative = 0.0;
  for (Eigen::Index k = 0; k < basis.explained_variance_ratio.size(); ++k) {
    cumulative += basis.explained_variance_ratio(k);
    variance.add_row({format_number(static_cast<int>(k + 1)), format_number(basis.explained_variance_ratio(k)),
                      format_number(cumulative)});
  }
  detail::write_csv(ctx.paths.reports() / "variance.csv", variance, files);

  CsvTable projected;
  projected.header = {"sentence", "position", "label"};
  for (int k = 1; k <= id; ++k) projected.header.push_back("p_" + std::to_string(k));
  const MatrixXd proj = project(basis, sample.states, id, true);
  for (Eigen::Index i = 0; i < proj.rows(); ++i) {
    const auto& pv = sample.provenance[static_cast<std::size_t>(i)];
    std::vector<std::string> row{format_number(static_cast<long>(pv.sentence)), format_number(pv.position),
                                 ctx.corpus.intents[static_cast<std::size_t>(pv.label)]};
    for (int k = 0; k < id; ++k) row.push_back(format_number(proj(i, k)));
    projected.add_row(std::move(row));
  }
  detail::write_csv(ctx.paths.reports() / "projected_states.csv", projected, files);
  detail::write_svg(ctx.paths.plots() / "variance.svg",
                    variance_curve_svg(basis.explained_variance_ratio, a.variance_threshold, id,
                                       "Explained variance, " + detail::arch_label(ctx.params.arch)),
                    files);
  ojson summary = {{"states", detail::selection_name(a.pca_states)},
                   {"split", "test"},
                   {"n_states", static_cast<long>(sample.size())},
                   {"variance_threshold", a.variance_threshold},
                   {"intrinsic_dimensionality", id},
                   {"explained_variance_ratio", std::vector<double>(basis.explained_variance_ratio.data(),
                                                                    basis.explained_variance_ratio.data() +
                                                                        basis.explained_variance_ratio.size())},
                   {"centering", "mean-centred"}};
  detail::write_stage_json(ctx.paths.reports() / "pca.json", summary, files);
  Manifest m(ctx.paths);
  m.record_stage("pca", summary, files);
  return summary;
}

inline ojson run_partition_stage(RunContext& ctx) {
  const auto& a = ctx.config.analysis;
  const auto& basis = *ctx.basis;
  const auto sample = collect_states(ctx.params, ctx.corpus, Split::test, StateSelection::all);
  const int N = ctx.params.arch.n_classes;
  const auto full = kmeans(sample.states, N, a.kmeans_seed, a.kmeans_restarts);
  const double s_full = silhouette(sample.states, full.assignment).mean;
  const MatrixXd proj = project(basis, sample.states, ctx.projected_dim, true);
  const auto low = kmeans(proj, N, a.kmeans_seed, a.kmeans_restarts);
  const double s_low = silhouette(proj, low.assignment).mean;

  std::vector<fs::path> files;
  CsvTable t;
  t.header = {"arch", "k", "n_states", "projected_dim", "silhouette_original", "silhouette_projected"};
  t.add_row({detail::arch_label(ctx.params.arch), format_number(N), format_number(static_cast<long>(sample.size())),
             format_number(ctx.projected_dim), format_number(s_full), format_number(s_low)});
  detail::write_csv(ctx.paths.reports() / "partition.csv", t, files);

  const auto rows = detail::plot_rows(sample.size(), a.max_plot_points);
  ScatterPlot plot;
  plot.title = "K-means partition of all states (k = " + std::to_string(N) + ")";
  plot.points = detail::plane(basis, detail::take_rows(sample.states, rows, static_cast<int>(sample.states.cols())), true);
  plot.labels = detail::take(full.assignment, rows);
  for (int c = 0; c < N; ++c) plot.names.push_back("cluster " + std::to_string(c));
  plot.centroids = detail::plane(basis, full.centroids, true);
  detail::write_svg(ctx.paths.plots() / "partition.svg", scatter_svg(plot), files);

  ojson summary = {{"k", N},
                   {"n_states", static_cast<long>(sample.size())},
                   {"projected_dim", ctx.projected_dim},
                   {"silhouette_original", s_full},
                   {"silhouette_projected", s_low},
                   {"inertia_original", full.inertia},
                   {"inertia_projected", low.inertia}};
  detail::write_stage_json(ctx.paths.reports() / "partition.json", summary, files);
  Manifest m(ctx.paths);
  m.record_stage("partition", summary, files);
  return summary;
}

inline ojson run_clusters_stage(RunContext& ctx) {
  const auto& a = ctx.config.analysis;
  const auto& basis = *ctx.basis;
  const auto finals = collect_states(ctx.params, ctx.corpus, Split::test, StateSelection::final);
  const auto rep = final_cluster_report(ctx.params, finals, basis, ctx.projected_dim, ctx.corpus.intents);

  std::vector<fs::path> files;
  CsvTable t;
  t.header = {"arch",  "projected_dim", "silhouette_original", "silhouette_projected", "d_mean", "d_std",
              "R_mean", "R_std",        "alignment"};
  t.add_row({detail::arch_label(ctx.params.arch), format_number(rep.projected_dim),
             format_number(rep.silhouette_original), format_number(rep.silhouette_projected),
             format_number(rep.distances.mean), format_number(rep.distances.stdev), format_number(rep.radii.mean),
             format_number(rep.radii.stdev), format_number(rep.alignment_full.mean_diagonal)});
  detail::write_csv(ctx.paths.reports() / "clusters.csv", t, files);

  const auto labels = finals.labels();
  const MatrixXd proj = project(basis, finals.states, ctx.projected_dim, true);
  const auto groups = group_by_labels(proj, labels, ctx.params.arch.n_classes);
  CsvTable per;
  per.header = {"intent", "size", "distance_to_origin", "radius"};
  const VectorXd origin = project_point(basis, VectorXd::Zero(basis.dim()), ctx.projected_dim, true);
  std::vector<double> radius_sum(static_cast<std::size_t>(groups.k), 0.0);
  for (Eigen::Index i = 0; i < proj.rows(); ++i) {
    const int g = labels[static_cast<std::size_t>(i)];
    radius_sum[static_cast<std::size_t>(g)] += (proj.row(i) - groups.centroids.row(g)).norm();
  }
  for (int g = 0; g < groups.k; ++g) {
    const int size = groups.sizes[static_cast<std::size_t>(g)];
    if (size == 0) continue;
    per.add_row({ctx.corpus.intents[static_cast<std::size_t>(g)], format_number(size),
                 format_number((groups.centroids.row(g).transpose() - origin).norm()),
                 format_number(radius_sum[static_cast<std::size_t>(g)] / size)});
  }
  detail::write_csv(ctx.paths.reports() / "cluster_stats.csv", per, files);

  const auto rows = detail::plot_rows(finals.size(), a.max_plot_points);
  ScatterPlot plot;
  plot.title = "Final states by intent, " + detail::arch_label(ctx.params.arch);
  plot.points = detail::plane(basis, detail::take_rows(finals.states, rows, static_cast<int>(finals.states.cols())), true);
  plot.labels = detail::take(labels, rows);
  plot.names = ctx.corpus.intents;
  plot.centroids = detail::plane(basis, group_by_labels(finals.states, labels, groups.k).centroids, true);
  plot.arrows = detail::plane(basis, ctx.params.readout_weights, false);
  const MatrixXd o = detail::plane(basis, MatrixXd::Zero(1, basis.dim()), true);
  plot.arrow_origin = o.row(0).transpose();
  detail::write_svg(ctx.paths.plots() / "final_states.svg", scatter_svg(plot), files);

  ojson summary = {{"projected_dim", rep.projected_dim},
                   {"silhouette_original", rep.silhouette_original},
                   {"silhouette_projected", rep.silhouette_projected},
                   {"distances", detail::stats_json(rep.distances)},
                   {"radii", detail::stats_json(rep.radii)},
                   {"alignment_mean_diagonal", rep.alignment_full.mean_diagonal},
                   {"metadata",
                    {{"grouping", "ground-truth intent of test sentences"},
                     {"distance_space", "id-projected, mean-centred; origin is the projected initial state"},
                     {"alignment_space", "full state space, uncentred"}}}};
  detail::write_stage_json(ctx.paths.reports() / "clusters.json", summary, files);
  Manifest m(ctx.paths);
  m.record_stage("clusters", summary, files);
  return summary;
}

inline ojson run_alignment_stage(RunContext& ctx) {
  const auto& basis = *ctx.basis;
  const auto finals = collect_states(ctx.params, ctx.corpus, Split::test, StateSelection::final);
  const int N = ctx.params.arch.n_classes;
  const auto labels = finals.labels();
  const auto groups = group_by_labels(finals.states, labels, N);
  const auto& names = ctx.corpus.intents;
  const auto full = readout_alignment(ctx.params, groups.centroids, nullptr, 0, names);
  const auto projected = readout_alignment(ctx.params, groups.centroids, &basis, ctx.projected_dim, names);

  std::vector<fs::path> files;
  CsvTable t;
  t.header = {"readout", "centroid", "cosine_full", "cosine_projected"};
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < N; ++j) {
      t.add_row({names[static_cast<std::size_t>(i)], names[static_cast<std::size_t>(j)], format_number(full.cosine(i, j)),
                 format_number(projected.cosine(i, j))});
    }
  }
  detail::write_csv(ctx.paths.reports() / "alignment.csv", t, files);
  std::vector<std::string> rnames, cnames;
  for (int i = 0; i < N; ++i) {
    rnames.push_back("r" + std::to_string(i) + " " + names[static_cast<std::size_t>(i)]);
    cnames.push_back("c" + std::to_string(i));
  }
  detail::write_svg(ctx.paths.plots() / "alignment.svg",
                    heatmap_svg(full.cosine, rnames, cnames, "cos(r_i, c_j), full state space"), files);
  detail::write_svg(ctx.paths.plots() / "alignment_projected.svg",
                    heatmap_svg(projected.cosine, rnames, cnames,
                                "cos(r_i, c_j), " + std::to_string(ctx.projected_dim) + "-dim PCA space"),
                    files);
  ojson summary = {{"mean_diagonal", full.mean_diagonal},
                   {"diagonal_dominant", full.diagonal_dominant},
                   {"best_match", full.best_match},
                   {"cosine", detail::matrix_json(full.cosine)},
                   {"projected",
                    {{"projected_dim", ctx.projected_dim},
                     {"mean_diagonal", projected.mean_diagonal},
                     {"diagonal_dominant", projected.diagonal_dominant},
                     {"cosine", detail::matrix_json(projected.cosine)}}},
                   {"metadata",
                    {{"space", "full state space, uncentred (headline); id-projected under 'projected'"},
                     {"projection", "readout rows uncentred, centroids mean-centred"}}}};
  detail::write_stage_json(ctx.paths.reports() / "alignment.json", summary, files);
  Manifest m(ctx.paths);
  m.record_stage("alignment", summary, files);
  return summary;
}

inline ojson run_fixedpoints_stage(RunContext& ctx) {
  const auto& a = ctx.config.analysis;
  const auto& basis = *ctx.basis;
  FpSearchConfig fc = a.fixedpoints;
  const MatrixXd states = collect_dynamical_states(ctx.params, ctx.corpus, Split::test);
  const MatrixXd seeds = sample_seeds(states, fc);
  const auto search = find_fixed_points(ctx.params, seeds, fc);
  auto points = deduplicate(search.points, fc.dedup_eps);
  annotate_fixed_points(ctx.params, points, basis, ctx.projected_dim, fc);
  const auto summary_counts = fp_report(points);
  const bool extension = ctx.params.arch.cell == CellType::lstm;

  std::vector<fs::path> files;
  CsvTable t;
  t.header = {"location_hash", "q", "class", "index", "delta", "abs_lambda_1", "abs_lambda_2", "abs_lambda_3"};
  for (const auto& fp : points) {
    Fnv1a h;
    for (Eigen::Index i = 0; i < fp.location.size(); ++i) h.update(fp.location(i));
    std::vector<std::string> row{hex64(h.digest()), format_number(fp.q), std::string(stability_name(fp.spectrum.stability)),
                                 format_number(fp.spectrum.index), format_number(fp.distance)};
    for (std::size_t k = 0; k < 3; ++k) {
      row.push_back(k < fp.spectrum.eigenvalues.size() ? format_number(std::abs(fp.spectrum.eigenvalues[k])) : "");
    }
    t.add_row(std::move(row));
  }
  detail::write_csv(ctx.paths.reports() / "fixed_points.csv", t, files);

  CsvTable s;
  s.header = {"arch", "stable", "index_1", "higher_index", "delta_stable_mean", "delta_stable_std", "delta_1_mean",
              "delta_1_std", "delta_2_mean", "delta_2_std", "unstable", "marginal", "seeds", "dropped"};
  const auto& c = summary_counts;
  s.add_row({detail::arch_label(ctx.params.arch), format_number(c.stable), format_number(c.saddle_1),
             format_number(c.higher_index()), format_number(c.delta_stable.mean), format_number(c.delta_stable.stdev),
             format_number(c.delta_1.mean), format_number(c.delta_1.stdev), format_number(c.delta_2.mean),
             format_number(c.delta_2.stdev), format_number(c.unstable), format_number(c.marginal),
             format_number(search.n_seeds), format_number(search.n_dropped)});
  detail::write_csv(ctx.paths.reports() / "fixed_point_summary.csv", s, files);

  const int n = ctx.params.arch.hidden_dim;
  const auto rows = detail::plot_rows(states.rows(), a.max_plot_points);
  std::vector<int> labels;
  for (auto idx : ctx.corpus.indices(Split::test)) {
    for (std::size_t k = 0; k < ctx.corpus.sentences[idx].tokens.size(); ++k) labels.push_back(ctx.corpus.sentences[idx].intent);
  }
  ScatterPlot plot;
  plot.title = "States and fixed points, " + detail::arch_label(ctx.params.arch);
  plot.points = detail::plane(basis, detail::take_rows(states, rows, n), true);
  plot.labels = detail::take(labels, rows);
  plot.names = ctx.corpus.intents;
  MatrixXd fps(static_cast<Eigen::Index>(points.size()), n);
  for (std::size_t i = 0; i < points.size(); ++i) {
    fps.row(static_cast<Eigen::Index>(i)) = points[i].location.head(n).transpose();
    plot.fixed_kinds.emplace_back(stability_name(points[i].spectrum.stability));
  }
  plot.fixed_points = detail::plane(basis, fps, true);
  detail::write_svg(ctx.paths.plots() / "fixed_points.svg", scatter_svg(plot), files);

  ojson summary = {{"stable", c.stable},
                   {"index_1", c.saddle_1},
                   {"index_2", c.saddle_2},
                   {"index_3_plus", c.saddle_higher},
                   {"higher_index", c.higher_index()},
                   {"unstable", c.unstable},
                   {"marginal", c.marginal},
                   {"delta_stable", detail::stats_json(c.delta_stable)},
                   {"delta_1", detail::stats_json(c.delta_1)},
                   {"delta_2", detail::stats_json(c.delta_2)},
                   {"seeds", search.n_seeds},
                   {"accepted_before_dedup", static_cast<int>(search.points.size())},
                   {"dropped", search.n_dropped},
                   {"metadata",
                    {{"input", fc.pad_input ? "pad-token embedding" : "zero vector"},
                     {"distance_space", "id-projected, mean-centred; origin is the projected zero state"},
                     {"state", extension ? "(h, c); extension beyond vanilla and GRU" : "h"}}}};
  detail::write_stage_json(ctx.paths.reports() / "fixedpoints.json", summary, files);
  Manifest m(ctx.paths);
  m.record_stage("fixedpoints", summary, files);
  return summary;
}

inline ojson run_diagnose_stage(RunContext& ctx) {
  const auto& a = ctx.config.analysis;
  const auto rep = per_class_diagnostics(ctx.params, ctx.corpus, *ctx.basis, a.patterns, a.variance_threshold);
  std::vector<fs::path> files;
  CsvTable t;
  t.header = {"intent", "train", "test", "precision", "recall", "f1", "silhouette", "cosine", "pattern"};
  ojson rows = ojson::array();
  std::map<std::string, int> counts;
  for (const auto& r : rep.rows) {
    t.add_row({r.intent, format_number(r.train_count), format_number(r.test_count), format_number(r.precision),
               format_number(r.recall), format_number(r.f1), format_number(r.silhouette), format_number(r.alignment),
               std::string(pattern_code(r.pattern))});
    ++counts[std::string(pattern_code(r.pattern))];
    rows.push_back({{"intent", r.intent}, {"f1", r.f1}, {"silhouette", r.silhouette}, {"cosine", r.alignment},
                    {"pattern", pattern_code(r.pattern)}});
  }
  detail::write_csv(ctx.paths.reports() / "diagnostics.csv", t, files);
  ojson summary = {{"projected_dim", rep.projected_dim},
                   {"pattern_counts", counts},
                   {"excluded", rep.excluded},
                   {"rows", rows},
                   {"thresholds",
                    {{"f1_hi", a.patterns.f1_hi}, {"sep_hi", a.patterns.sep_hi}, {"align_hi", a.patterns.align_hi}}},
                   {"metadata", {{"space", "id-projected at the variance threshold"}, {"grouping", "ground-truth intent"}}}};
  detail::write_stage_json(ctx.paths.reports() / "diagnose.json", summary, files);
  Manifest m(ctx.paths);
  m.record_stage("diagnose", summary, files);
  return summary;
}

/// Runs the requested stages in pipeline order. Every stage after pca needs
/// the PCA basis: it is taken from an earlier pca run or from pca in the same
/// request. diagnose implies pca when no basis exists yet.
inline ojson cmd_analyze(const fs::path& run_dir, std::vector<Stage> stages,
                         const std::optional<AnalysisConfig>& overrides = std::nullopt) {
  if (!fs::exists(run_dir)) throw ConfigError("--run: directory not found: " + run_dir.string());
  RunContext ctx(run_dir);
  if (overrides) ctx.config.analysis = *overrides;
  ctx.load_basis();
  std::set<Stage> want(stages.begin(), stages.end());
  if (want.count(Stage::diagnose) && !ctx.basis) want.insert(Stage::pca);
  for (auto s : want) {
    if (s != Stage::pca && !ctx.basis && !want.count(Stage::pca)) {
      throw MissingStageError(std::string(stage_name(s)), "pca");
    }
  }
  ojson out = ojson::object();
  for (auto s : want) {
    switch (s) {
      case Stage::pca: out["pca"] = run_pca_stage(ctx); break;
      case Stage::partition: out["partition"] = run_partition_stage(ctx); break;
      case Stage::clusters: out["clusters"] = run_clusters_stage(ctx); break;
      case Stage::alignment: out["alignment"] = run_alignment_stage(ctx); break;
      case Stage::fixedpoints: out["fixedpoints"] = run_fixedpoints_stage(ctx); break;
      case Stage::diagnose: out["diagnose"] = run_diagnose_stage(ctx); break;
    }
  }
  // Bundle of every stage summary present so far.
  ojson bundle = ojson::object();
  for (auto s : kAllStages) {
    const auto p = ctx.paths.reports() / (std::string(stage_name(s)) + ".json");
    if (fs::exists(p)) bundle[std::string(stage_name(s))] = ojson::parse(read_text_file(p));
  }
  const auto bundle_path = ctx.paths.reports() / "analysis.json";
  write_text_file(bundle_path, dump_json(bundle));
  Manifest m(ctx.paths);
  m.doc()["artifacts"]["reports/analysis.json"] = {{"stage", "analyze"}, {"fnv1a", hex64(file_fingerprint(bundle_path))}};
  m.save();
  return out;
}

// ---------------------------------------------------------------------------
// report

/// Run directories under each path: the path itself when it holds a
/// manifest, otherwise its immediate subdirectories that do, sorted.
inline std::vector<fs::path> discover_runs(const std::vector<fs::path>& roots) {
  std::vector<fs::path> runs;
  for (const auto& r : roots) {
    if (fs::exists(r / "manifest.json")) {
      runs.push_back(r);
      continue;
    }
    if (!fs::is_directory(r)) throw ConfigError("report: not a directory: " + r.string());
    std::vector<fs::path> found;
    for (const auto& e : fs::directory_iterator(r)) {
      if (e.is_directory() && fs::exists(e.path() / "manifest.json")) found.push_back(e.path());
    }
    std::sort(found.begin(), found.end());
    runs.insert(runs.end(), found.begin(), found.end());
  }
  return runs;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// One row per configuration name: run count, mean and spread of test
/// accuracy, median intrinsic dimensionality. Runs of one name with
/// differing architectures are flagged, not rejected.
inline CsvTable cmd_report(const std::vector<fs::path>& roots) {
  const auto runs = discover_runs(roots);
  if (runs.empty()) throw ConfigError("report: no completed runs found");
  struct Group {
    std::vector<std::string> archs;
    std::vector<double> acc;
    std::vector<double> ids;
    int n = 0;
  };
  std::map<std::string, Group> groups;
  for (const auto& dir : runs) {
    const auto doc = ojson::parse(read_text_file(dir / "manifest.json"));
    if (!doc.contains("stages") || !doc["stages"].contains("train")) continue;
    auto& g = groups[doc.value("name", dir.filename().string())];
    ++g.n;
    const auto& arch = doc["arch"];
    g.archs.push_back(fmt::format("{}/{}/{}", arch.value("cell_type", "?"), arch.value("embed_dim", 0),
                                  arch.value("hidden_dim", 0)));
    g.acc.push_back(doc["stages"]["train"].value("test_accuracy", 0.0));
    if (doc["stages"].contains("pca")) g.ids.push_back(doc["stages"]["pca"].value("intrinsic_dimensionality", 0));
  }
  if (groups.empty()) throw ConfigError("report: no completed runs found");
  CsvTable t;
  t.header = {"config", "arch", "runs", "mean_accuracy", "std_accuracy", "median_id", "runs_with_id", "flags"};
  for (const auto& [name, g] : groups) {
    const auto stats = summarize(g.acc);
    const std::set<std::string> archs(g.archs.begin(), g.archs.end());
    std::string arch_text;
    for (const auto& a : archs) arch_text += (arch_text.empty() ? "" : ";") + a;
    t.add_row({name, arch_text, format_number(g.n), format_number(stats.mean), format_number(stats.stdev),
               g.ids.empty() ? "" : format_number(median(g.ids)), format_number(static_cast<int>(g.ids.size())),
               archs.size() > 1 ? "mixed_arch" : ""});
  }
  return t;
}

}  // namespace rnn_dynamo
