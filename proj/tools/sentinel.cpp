// sentinel: command-line entry point for the trace classification pipeline.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <csignal>
#include <cstdlib>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "sentinel/digest.hpp"
#include "sentinel/error.hpp"
#include "sentinel/evaluation.hpp"
#include "sentinel/labeling.hpp"
#include "sentinel/pipeline.hpp"
#include "sentinel/stream.hpp"
#include "sentinel/synthgen.hpp"

namespace fs = std::filesystem;
using namespace sentinel;

namespace {

struct Globals {
  std::uint64_t seed = 7;
  std::size_t jobs = 1;
  std::size_t ngram_n = 3;
  std::size_t slices = 10;
  std::string vocab_policy = "intersection";
  double min_trace_fraction = 1.0;
  std::string vocab_scope = "trace";
  std::string feature_values = "raw";
  std::string model = "gbt";
  std::string averaging = "macro";
  std::string syscalls;
};

void init_logging() {
  auto logger = spdlog::stderr_color_mt("sentinel");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* level = std::getenv("SENTINEL_LOG")) spdlog::set_level(spdlog::level::from_str(level));
}

VocabPolicy vocab_policy(const Globals& g) {
  if (g.vocab_policy == "intersection") return VocabPolicy::intersection();
  if (g.vocab_policy == "min_trace_fraction") return VocabPolicy::min_fraction(g.min_trace_fraction);
  return parse_vocab_policy(g.vocab_policy);
}

SyscallSet syscall_set(const Globals& g) {
  return g.syscalls.empty() ? default_syscall_set() : load_syscall_set(g.syscalls);
}

// Records what a run consumed and produced next to its outputs.
class RunManifest {
 public:
  RunManifest(const CLI::App& app, const CLI::App& sub, const Globals& g) : command_(sub.get_name()) {
    // Unset options are left out so the file can be fed back through --config.
    std::istringstream all(app.config_to_str(true, false));
    for (std::string line; std::getline(all, line);)
      if (!line.ends_with("=\"\"")) config_ += line + "\n";
    seed_ = g.seed;
  }
  void input(const fs::path& p) { inputs_[p.string()] = sha256_file(p); }
  void input_digest(const std::string& name, const std::string& digest) { inputs_[name] = digest; }
  void output(const fs::path& p) { outputs_[p.filename().string()] = sha256_file(p); }

  void write(const fs::path& dir) const {
    nlohmann::ordered_json j;
    j["tool"] = "sentinel";
    j["version"] = SENTINEL_VERSION;
    j["command"] = command_;
    j["seed"] = seed_;
    j["config"] = config_;
    j["inputs"] = inputs_;
    j["outputs"] = outputs_;
    fs::create_directories(dir);
    std::ofstream(dir / "run_manifest.json") << j.dump(2) << "\n";
    std::ofstream(dir / "run_config.toml") << config_;
  }

 private:
  std::string command_;
  std::string config_;
  std::uint64_t seed_;
  std::map<std::string, std::string> inputs_, outputs_;
};

fs::path parent_or_cwd(const fs::path& p) { return p.has_parent_path() ? p.parent_path() : fs::path("."); }

std::set<std::string> all_traces(const FeatureSet& features) {
  std::set<std::string> ids;
  for (const auto& r : features.rows) ids.insert(r.trace_id);
  return ids;
}

std::string metric_line(std::string_view name, std::size_t n, const Metrics& m) {
  return std::string(name) + ": samples=" + std::to_string(n) + " accuracy=" + (n ? format_percent(m.accuracy) : "NA") +
         " precision=" + format_ratio(m.precision) + " recall=" + format_ratio(m.recall) + " f1=" + format_ratio(m.f1);
}

double parse_speed(const std::string& s) {
  if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
  return std::stod(s);
}

}  // namespace

int main(int argc, char** argv) {
  init_logging();
  CLI::App app{"Syscall n-gram malware classification: synth, featurize, train, eval, predict, serve"};
  app.set_config("--config", "", "TOML config file; command-line flags take precedence");
  app.set_version_flag("--version", std::string(SENTINEL_VERSION));
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--jobs", g.jobs, "Worker threads (0 = all cores)")->capture_default_str();
  app.add_option("--ngram-n", g.ngram_n, "n-gram length")->check(CLI::Range(1, 5))->capture_default_str();
  app.add_option("--slices", g.slices, "Time slices per trace")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--vocab-policy", g.vocab_policy, "intersection or min_trace_fraction")
      ->check(CLI::IsMember({"intersection", "min_trace_fraction"}))
      ->capture_default_str();
  app.add_option("--min-trace-fraction", g.min_trace_fraction, "Fraction of traces an n-gram must occur in")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  app.add_option("--vocab-scope", g.vocab_scope, "Count vocabulary units per trace or per slice")
      ->check(CLI::IsMember({"trace", "slice"}))
      ->capture_default_str();
  app.add_option("--feature-values", g.feature_values, "raw, binary or normalized")
      ->check(CLI::IsMember({"raw", "binary", "normalized"}))
      ->capture_default_str();
  app.add_option("--model", g.model, "tree, forest or gbt")->check(CLI::IsMember({"tree", "forest", "gbt"}))->capture_default_str();
  app.add_option("--averaging", g.averaging, "macro or weighted")->check(CLI::IsMember({"macro", "weighted"}))->capture_default_str();
  app.add_option("--syscalls", g.syscalls, "Syscall set file (default: built-in 35 calls)");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic trace corpus");
  std::string scenario = "baseline", profile_in, profile_out;
  fs::path synth_out;
  std::size_t per_class = 30, benign = 60;
  synth->add_option("--scenario", scenario, "baseline or application")->check(CLI::IsMember({"baseline", "application"}))->capture_default_str();
  synth->add_option("--per-class", per_class, "Traces per malware class")->capture_default_str();
  synth->add_option("--benign", benign, "Benign traces")->capture_default_str();
  synth->add_option("--profile", profile_in, "Scenario profile JSON (default: built-in)");
  synth->add_option("--write-profile", profile_out, "Write the scenario profile JSON and exit");
  synth->add_option("--out", synth_out, "Corpus directory");

  // featurize
  auto* featurize = app.add_subcommand("featurize", "Build the vocabulary and per-slice feature vectors");
  fs::path corpus_dir, feat_out;
  std::vector<fs::path> trace_files;
  featurize->add_option("--corpus", corpus_dir, "Corpus directory with manifest.csv");
  featurize->add_option("traces", trace_files, "Trace files (instead of --corpus)");
  featurize->add_option("--out", feat_out, "Output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "Fit a model on feature files");
  fs::path train_features, train_split, model_out;
  double test_fraction = 0.2;
  std::optional<std::size_t> rounds, max_depth, min_leaf, n_trees;
  std::optional<double> learning_rate;
  train->add_option("--features", train_features, "features.tsv")->required()->check(CLI::ExistingFile);
  train->add_option("--split", train_split, "Existing split file (default: new stratified split)");
  train->add_option("--test-fraction", test_fraction, "Held-out share of traces per class")->capture_default_str();
  train->add_option("--out", model_out, "Model file")->required();
  train->add_option("--rounds", rounds, "Boosting rounds");
  train->add_option("--learning-rate", learning_rate, "Boosting learning rate");
  train->add_option("--max-depth", max_depth, "Maximum tree depth");
  train->add_option("--min-leaf", min_leaf, "Minimum samples per leaf");
  train->add_option("--trees", n_trees, "Forest size");

  // eval
  auto* eval = app.add_subcommand("eval", "Per-slice report, confusion matrices and detection collapse");
  fs::path eval_model, eval_features, eval_split, eval_out;
  eval->add_option("--model", eval_model, "Model file")->required()->check(CLI::ExistingFile);
  eval->add_option("--features", eval_features, "features.tsv")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_split, "Split file; only its test traces are evaluated");
  eval->add_option("--out", eval_out, "Report directory")->required();

  // predict
  auto* predict_cmd = app.add_subcommand("predict", "Classify the slices of one trace");
  fs::path pred_model, pred_vocab, pred_trace;
  std::optional<double> pred_window;
  predict_cmd->add_option("--model", pred_model, "Model file")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--vocab", pred_vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--trace", pred_trace, "Trace file")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--window-seconds", pred_window, "Classify event-time windows instead of slices");

  // serve
  auto* serve = app.add_subcommand("serve", "Classify live event streams over TCP");
  fs::path serve_model, serve_vocab;
  std::string listen = "127.0.0.1:7070";
  double window_s = 60, stride_s = 0;
  serve->add_option("--model", serve_model, "Model file")->required()->check(CLI::ExistingFile);
  serve->add_option("--vocab", serve_vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  serve->add_option("--listen", listen, "host:port")->capture_default_str();
  serve->add_option("--window-seconds", window_s, "Window length")->capture_default_str();
  serve->add_option("--stride-seconds", stride_s, "Window stride (0 = tumbling)")->capture_default_str();

  // replay
  auto* replay_cmd = app.add_subcommand("replay", "Stream a trace to a running service");
  fs::path replay_trace;
  std::string target = "127.0.0.1:7070", speed = "inf";
  replay_cmd->add_option("--trace", replay_trace, "Trace file")->required()->check(CLI::ExistingFile);
  replay_cmd->add_option("--target", target, "host:port")->capture_default_str();
  replay_cmd->add_option("--speed", speed, "Speed factor, or inf")->capture_default_str();

  // label
  auto* label = app.add_subcommand("label", "Consensus class labels from multi-engine scan reports");
  fs::path reports_dir, aliases_path, labels_out;
  std::size_t min_samples = 100;
  label->add_option("--reports", reports_dir, "Directory of *.json scan reports")->required()->check(CLI::ExistingDirectory);
  label->add_option("--aliases", aliases_path, "Alias table (default: built-in)");
  label->add_option("--min-samples", min_samples, "Minimum samples per retained class")->capture_default_str();
  label->add_option("--out", labels_out, "labels.csv")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      auto spec = profile_in.empty() ? default_scenario(parse_scenario(scenario), g.seed) : load_scenario(profile_in);
      spec.seed = g.seed;
      if (!profile_out.empty()) {
        save_scenario(spec, profile_out);
        return 0;
      }
      if (synth_out.empty()) throw InvalidArgument("synth needs --out");
      RunManifest manifest(app, *synth, g);
      if (!profile_in.empty()) manifest.input(profile_in);
      auto rows = generate_corpus(spec, per_class, benign, synth_out, g.jobs);
      manifest.output(synth_out / "manifest.csv");
      manifest.write(synth_out);
      spdlog::info("wrote {} traces to {}", rows.size(), synth_out.string());
    } else if (*featurize) {
      std::vector<fs::path> files = trace_files;
      RunManifest manifest(app, *featurize, g);
      if (!corpus_dir.empty()) {
        manifest.input(corpus_dir / "manifest.csv");
        for (const auto& r : read_manifest(corpus_dir / "manifest.csv")) files.push_back(corpus_dir / r.file);
      }
      if (files.empty()) throw InvalidArgument("featurize needs --corpus or trace files");
      std::string digests;
      for (const auto& f : files) digests += sha256_file(f);
      manifest.input_digest("traces", sha256_hex(digests));
      Featurizer featurizer(syscall_set(g), {g.ngram_n, g.slices, parse_feature_values(g.feature_values)});
      auto corpus = featurize_files(featurizer, files, vocab_policy(g), parse_vocab_scope(g.vocab_scope), g.jobs);
      fs::create_directories(feat_out);
      write_vocabulary(corpus.vocabulary, feat_out / "vocab.txt");
      write_features(corpus.features, feat_out / "features.tsv");
      manifest.output(feat_out / "vocab.txt");
      manifest.output(feat_out / "features.tsv");
      manifest.write(feat_out);
      spdlog::info("{} traces, {} events ({} outside the syscall set), vocabulary of {} {}-grams", corpus.traces,
                   corpus.events, corpus.dropped_oov, corpus.vocabulary.size(), g.ngram_n);
    } else if (*train) {
      RunManifest manifest(app, *train, g);
      manifest.input(train_features);
      auto features = read_features(train_features);
      Split split;
      if (!train_split.empty()) {
        manifest.input(train_split);
        split = read_split(train_split);
      } else {
        split = stratified_split(features, test_fraction, g.seed);
        train_split = parent_or_cwd(model_out) / "split.tsv";
        fs::create_directories(parent_or_cwd(model_out));
        write_split(split, train_split);
      }
      ModelConfig config;
      config.kind = parse_model_kind(g.model);
      config.tree.seed = config.forest.seed = config.boost.seed = g.seed;
      config.forest.jobs = config.boost.jobs = g.jobs;
      if (max_depth) config.tree.max_depth = config.forest.max_depth = config.boost.max_depth = *max_depth;
      if (min_leaf) config.tree.min_leaf = config.forest.min_leaf = config.boost.min_leaf = *min_leaf;
      if (rounds) config.boost.rounds = *rounds;
      if (learning_rate) config.boost.learning_rate = *learning_rate;
      if (n_trees) config.forest.n_trees = *n_trees;
      config.boost.on_round = [](std::size_t round, double loss) { spdlog::debug("round {} loss {:.6f}", round + 1, loss); };
      auto model = train_model(features, {split.train.begin(), split.train.end()}, config);
      save_model(model, model_out);
      manifest.output(model_out);
      manifest.output(train_split);
      manifest.write(parent_or_cwd(model_out));
      spdlog::info("trained {} on {} traces ({} classes), saved {}", to_string(model.kind), split.train.size(),
                   model.classes.size(), model_out.string());
    } else if (*eval) {
      RunManifest manifest(app, *eval, g);
      manifest.input(eval_model);
      manifest.input(eval_features);
      auto model = load_model(eval_model);
      auto features = read_features(eval_features);
      check_vocabulary(model, features.header.vocab_hash);
      std::set<std::string> ids = all_traces(features);
      if (!eval_split.empty()) {
        manifest.input(eval_split);
        auto split = read_split(eval_split);
        ids = {split.test.begin(), split.test.end()};
      }
      auto averaging = parse_averaging(g.averaging);
      auto preds = predict_slices(model, features, ids, g.jobs);
      auto report = per_slice_report(preds, model.classes, averaging);
      auto detection = collapse_to_detection(preds, averaging);
      write_report(report, eval_out);
      write_report(detection, eval_out, "detection_");
      for (const auto& f : fs::directory_iterator(eval_out))
        if (f.path().filename() != "run_manifest.json" && f.path().filename() != "run_config.toml") manifest.output(f.path());
      manifest.write(eval_out);
      std::cout << metric_line("inject", report.inject_samples, report.inject) << "\n"
                << metric_line("aggregate", report.aggregate_samples, report.aggregate) << "\n"
                << metric_line("detection", detection.aggregate_samples, detection.aggregate) << "\n";
    } else if (*predict_cmd) {
      ClassifierContext ctx(load_model(pred_model), read_vocabulary(pred_vocab), syscall_set(g));
      auto trace = read_trace(pred_trace);
      if (pred_window) {
        WindowConfig wc{static_cast<std::int64_t>(std::llround(*pred_window * 1e9)), 0};
        for (const auto& p : predict_trace_windows(ctx, trace, wc))
          std::cout << format_prediction_record(ctx.model(), p) << "\n";
      } else {
        std::size_t slices = g.slices;
        if (auto it = ctx.model().hyperparams.find("slices"); it != ctx.model().hyperparams.end())
          slices = std::stoul(it->second);
        Featurizer featurizer(ctx.syscalls(), {ctx.vocabulary().n(), slices, ctx.feature_values()});
        auto scan = featurizer.scan(trace);
        for (std::size_t s = 0; s < scan.slices.size(); ++s) {
          WindowPrediction p;
          p.window_index = s;
          p.event_count = scan.slices[s].events;
          p.dropped_oov_count = scan.slices[s].events - scan.slices[s].filtered;
          p.prediction = predict(ctx.model(), featurizer.vectorize(scan.slices[s], ctx.index()));
          std::cout << format_prediction_record(ctx.model(), p) << "\n";
        }
      }
    } else if (*serve) {
      auto ctx = ClassifierContext::load(serve_model, serve_vocab, syscall_set(g));
      WindowConfig wc{static_cast<std::int64_t>(std::llround(window_s * 1e9)),
                      static_cast<std::int64_t>(std::llround(stride_s * 1e9))};
      StreamServer server(ctx, wc);
      server.listen(parse_endpoint(listen));
      std::cout << "listening " << server.port() << std::endl;
      server.serve();
    } else if (*replay_cmd) {
      auto records = replay(read_trace(replay_trace), parse_endpoint(target), parse_speed(speed));
      for (const auto& r : records) std::cout << r << "\n";
    } else if (*label) {
      auto aliases = aliases_path.empty() ? default_alias_table() : load_alias_table(aliases_path);
      std::vector<fs::path> files;
      for (const auto& f : fs::directory_iterator(reports_dir))
        if (f.path().extension() == ".json") files.push_back(f.path());
      std::sort(files.begin(), files.end());
      std::vector<LabeledSample> samples;
      for (const auto& f : files) {
        auto report = read_scan_report(f);
        samples.push_back({report.sample_id, consensus_class(report, aliases)});
      }
      ClassCatalog catalog;
      catalog.min_samples = min_samples;
      auto result = prune_classes(samples, catalog);
      std::string out = "sample_id,class\n";
      for (const auto& s : result.retained) out += s.sample_id + "," + *s.class_name + "\n";
      std::ofstream(labels_out) << out;
      for (const auto& [cls, n] : result.class_counts)
        std::cout << cls << "\t" << n << "\t"
                  << (std::find(result.classes.begin(), result.classes.end(), cls) != result.classes.end() ? "used" : "dropped")
                  << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "sentinel: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
