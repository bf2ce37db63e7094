// Command-line front end: train, analyze, report, synth.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
// arguments, 3 a requested analysis stage is missing its prerequisite.

#include "rnn_dynamo/pipeline.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <optional>

namespace rd = rnn_dynamo;

namespace {

struct TrainFlags {
  std::string config;
  std::optional<std::string> output, name, corpus, cell;
  std::optional<int> embed_dim, hidden_dim, batch_size, max_epochs, patience, halve_after;
  std::optional<double> learning_rate, dropout;
  std::vector<std::uint64_t> seeds;
};

struct AnalyzeFlags {
  std::string run;
  std::string stages = "all";
  std::optional<double> variance;
  std::optional<int> fp_seeds, fp_steps, threads;
  std::optional<std::uint64_t> fp_seed, kmeans_seed;
  bool pad_input = false;
};

struct SynthFlags {
  int intents = 7;
  int per_intent = 300;
  std::uint64_t seed = 13;
  std::optional<int> templates, lexicon;
  std::string out;
};

struct ReportFlags {
  std::vector<std::string> dirs;
  std::string out;
};

int run_train(const TrainFlags& f) {
  rd::PipelineConfig cfg = f.config.empty() ? rd::PipelineConfig{} : rd::load_config(f.config);
  if (f.output) cfg.output = *f.output;
  if (f.name) cfg.name = *f.name;
  if (f.corpus) cfg.corpus_path = *f.corpus;
  if (f.cell) {
    rd::detail::checked("--cell", [&] { cfg.cell = rd::parse_cell(*f.cell); });
  }
  if (f.embed_dim) cfg.embed_dim = *f.embed_dim;
  if (f.hidden_dim) cfg.hidden_dim = *f.hidden_dim;
  if (f.batch_size) cfg.train.batch_size = *f.batch_size;
  if (f.max_epochs) cfg.train.max_epochs = *f.max_epochs;
  if (f.patience) cfg.train.patience = *f.patience;
  if (f.halve_after) cfg.train.halve_after_epoch = *f.halve_after;
  if (f.learning_rate) cfg.train.learning_rate = *f.learning_rate;
  if (f.dropout) cfg.train.dropout = *f.dropout;
  if (!f.seeds.empty()) cfg.seeds = f.seeds;
  rd::validate(cfg);
  rd::cmd_train(cfg, &std::cout);
  return rd::kExitOk;
}

int run_analyze(const AnalyzeFlags& f) {
  const auto stages = rd::parse_stages(f.stages);
  const rd::fs::path root(f.run);
  std::vector<rd::fs::path> runs;
  if (rd::fs::exists(root / "checkpoints" / "model.bin")) {
    runs.push_back(root);
  } else if (rd::fs::is_directory(root)) {
    runs = rd::discover_runs({root});
  }
  if (runs.empty()) {
    if (!rd::fs::exists(root)) throw rd::ConfigError("--run: directory not found: " + f.run);
    throw rd::MissingStageError("analyze", "train");
  }
  for (const auto& dir : runs) {
    auto cfg = rd::config_from_json(
        rd::parse_json_text(rd::read_text_file(rd::RunPaths{dir}.config()), rd::RunPaths{dir}.config().string()));
    auto& a = cfg.analysis;
    if (f.variance) a.variance_threshold = *f.variance;
    if (f.fp_seeds) a.fixedpoints.n_seeds = *f.fp_seeds;
    if (f.fp_steps) a.fixedpoints.max_steps = *f.fp_steps;
    if (f.fp_seed) a.fixedpoints.seed = *f.fp_seed;
    if (f.kmeans_seed) a.kmeans_seed = *f.kmeans_seed;
    if (f.pad_input) a.fixedpoints.pad_input = true;
    if (f.threads) a.fixedpoints.threads = static_cast<unsigned>(*f.threads);
    rd::validate(cfg);
    const auto out = rd::cmd_analyze(dir, stages, a);
    std::cout << dir.generic_string() << ":";
    for (const auto& [stage, _] : out.items()) std::cout << " " << stage;
    if (out.contains("pca")) std::cout << " (id " << out["pca"]["intrinsic_dimensionality"] << ")";
    std::cout << "\n";
  }
  return rd::kExitOk;
}

int run_report(const ReportFlags& f) {
  std::vector<rd::fs::path> roots(f.dirs.begin(), f.dirs.end());
  const auto table = rd::cmd_report(roots);
  const auto text = rd::to_csv(table);
  if (f.out.empty()) {
    std::cout << text;
  } else {
    rd::write_text_file(f.out, text);
  }
  return rd::kExitOk;
}

int run_synth(const SynthFlags& f) {
  rd::SyntheticSpec spec;
  spec.n_intents = f.intents;
  spec.per_intent = f.per_intent;
  spec.seed = f.seed;
  if (f.templates) spec.templates_per_intent = *f.templates;
  if (f.lexicon) spec.lexicon_size = *f.lexicon;
  rd::LabeledCorpus corpus;
  rd::detail::checked("synth", [&] { corpus = rd::generate_synthetic(spec); });
  std::ostringstream ss;
  rd::write_corpus(ss, corpus, false);
  rd::write_text_file(f.out, ss.str());
  std::cout << f.out << ": " << corpus.sentences.size() << " sentences, " << corpus.n_intents() << " intents\n";
  return rd::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train small recurrent intent classifiers and analyse their dynamics."};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(rd::kToolVersion));

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "train one model per configured seed");
  train->add_option("--config", tf.config, "JSON configuration file")->check(CLI::ExistingFile);
  train->add_option("--output", tf.output, "output directory (runs go to <output>/seed_<s>)");
  train->add_option("--name", tf.name, "configuration name used by report");
  train->add_option("--corpus", tf.corpus, "JSONL corpus; omit for the synthetic generator");
  train->add_option("--cell", tf.cell, "vanilla, gru or lstm");
  train->add_option("--embed-dim", tf.embed_dim);
  train->add_option("--hidden-dim", tf.hidden_dim);
  train->add_option("--batch-size", tf.batch_size);
  train->add_option("--max-epochs", tf.max_epochs);
  train->add_option("--patience", tf.patience);
  train->add_option("--halve-after-epoch", tf.halve_after);
  train->add_option("--learning-rate", tf.learning_rate);
  train->add_option("--dropout", tf.dropout);
  train->add_option("--seeds", tf.seeds, "comma-separated seeds")->delimiter(',');

  AnalyzeFlags af;
  auto* analyze = app.add_subcommand("analyze", "run analysis stages on trained runs");
  analyze->add_option("--run", af.run, "run directory, or a directory of seed_<s> runs")->required();
  analyze->add_option("--stages", af.stages, "comma-separated: pca,partition,clusters,alignment,fixedpoints,diagnose or all");
  analyze->add_option("--variance", af.variance, "variance threshold for the projected space");
  analyze->add_option("--fp-seeds", af.fp_seeds, "fixed-point search seeds");
  analyze->add_option("--fp-steps", af.fp_steps, "optimizer steps per fixed-point seed");
  analyze->add_option("--fp-seed", af.fp_seed, "RNG seed for fixed-point seeds");
  analyze->add_option("--kmeans-seed", af.kmeans_seed);
  analyze->add_option("--threads", af.threads, "worker threads for the fixed-point search (default RNN_DYNAMO_THREADS)")
      ->check(CLI::PositiveNumber);
  analyze->add_flag("--pad-input", af.pad_input, "use the pad embedding as the constant input");

  ReportFlags rf;
  auto* report = app.add_subcommand("report", "aggregate completed runs into one CSV");
  report->add_option("dirs", rf.dirs, "run directories or directories of runs")->required();
  report->add_option("--out", rf.out, "write the CSV here instead of stdout");

  SynthFlags sf;
  auto* synth = app.add_subcommand("synth", "write a synthetic intent corpus as JSONL");
  synth->add_option("--intents", sf.intents);
  synth->add_option("--per-intent", sf.per_intent);
  synth->add_option("--seed", sf.seed);
  synth->add_option("--templates", sf.templates);
  synth->add_option("--lexicon", sf.lexicon);
  synth->add_option("--out", sf.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return rd::kExitConfig;
  }

  try {
    if (*train) return run_train(tf);
    if (*analyze) return run_analyze(af);
    if (*report) return run_report(rf);
    if (*synth) return run_synth(sf);
  } catch (const rd::MissingStageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return rd::kExitMissingStage;
  } catch (const rd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return rd::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return rd::kExitFailure;
  }
  return rd::kExitFailure;
}
