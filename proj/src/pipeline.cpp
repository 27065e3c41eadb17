#include "sentinel/pipeline.hpp"

#include <algorithm>
#include <map>
#include <random>

#include "sentinel/error.hpp"
#include "sentinel/parallel.hpp"
#include "text_util.hpp"

namespace sentinel {

std::string_view to_string(VocabScope s) { return s == VocabScope::trace ? "trace" : "slice"; }

VocabScope parse_vocab_scope(std::string_view text) {
  if (text == "trace") return VocabScope::trace;
  if (text == "slice") return VocabScope::slice;
  throw InvalidArgument("unknown vocabulary scope '" + std::string(text) + "' (expected trace or slice)");
}

CorpusFeatures featurize_corpus(const Featurizer& featurizer, std::size_t trace_count,
                                const std::function<Trace(std::size_t)>& load, const VocabPolicy& policy,
                                VocabScope scope, std::size_t jobs) {
  if (trace_count == 0) throw InvalidArgument("no traces to featurize");
  // Scans are small (encoded counts per slice), so each trace is loaded once
  // and the scans are reused for vectorization.
  std::vector<TraceScan> scans(trace_count);
  parallel_for(trace_count, jobs, [&](std::size_t i) { scans[i] = featurizer.scan(load(i)); });

  VocabularyBuilder builder(featurizer.options().n);
  for (const auto& scan : scans) {
    if (scope == VocabScope::trace) {
      builder.add_unit(featurizer.trace_ngrams(scan));
    } else {
      for (const auto& grams : featurizer.slice_ngrams(scan)) builder.add_unit(grams);
    }
  }

  CorpusFeatures out;
  out.vocabulary = builder.finish(policy);
  VocabularyIndex index(out.vocabulary, featurizer.syscalls());
  std::vector<std::vector<SliceFeatures>> per_trace(trace_count);
  parallel_for(trace_count, jobs, [&](std::size_t i) { per_trace[i] = featurizer.featurize(scans[i], index); });

  out.traces = trace_count;
  out.features.header = {featurizer.options().n, featurizer.options().num_slices, out.vocabulary.hash(),
                         featurizer.options().values};
  for (std::size_t i = 0; i < trace_count; ++i) {
    out.events += scans[i].events();
    out.dropped_oov += scans[i].dropped();
    for (auto& row : per_trace[i]) out.features.rows.push_back(std::move(row));
  }
  std::stable_sort(out.features.rows.begin(), out.features.rows.end(), [](const auto& a, const auto& b) {
    return a.trace_id != b.trace_id ? a.trace_id < b.trace_id : a.slice_index < b.slice_index;
  });
  for (std::size_t i = 1; i < out.features.rows.size(); ++i) {
    const auto& a = out.features.rows[i - 1];
    const auto& b = out.features.rows[i];
    if (a.trace_id == b.trace_id && a.slice_index == b.slice_index)
      throw InvalidArgument("duplicate trace id " + a.trace_id);
  }
  return out;
}

CorpusFeatures featurize_files(const Featurizer& featurizer, std::span<const std::filesystem::path> files,
                               const VocabPolicy& policy, VocabScope scope, std::size_t jobs) {
  return featurize_corpus(
      featurizer, files.size(), [&](std::size_t i) { return read_trace(files[i]); }, policy, scope, jobs);
}

std::map<std::string, std::string> trace_classes(const FeatureSet& features) {
  std::map<std::string, std::string> out;
  for (const auto& row : features.rows) {
    auto [it, inserted] = out.try_emplace(row.trace_id, std::string(kBenignClass));
    if (!row.label.is_benign()) it->second = row.label.class_name;
  }
  return out;
}

std::vector<std::string> model_classes(const FeatureSet& features) {
  std::set<std::string> malware;
  for (const auto& row : features.rows)
    if (!row.label.is_benign()) malware.insert(row.label.class_name);
  std::vector<std::string> out{std::string(kBenignClass)};
  out.insert(out.end(), malware.begin(), malware.end());
  return out;
}

Split stratified_split(const FeatureSet& features, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0 && test_fraction < 1)) throw InvalidArgument("test fraction must be in [0,1)");
  std::map<std::string, std::vector<std::string>> by_class;
  for (const auto& [trace, cls] : trace_classes(features)) by_class[cls].push_back(trace);
  Split split;
  std::mt19937_64 rng(seed);
  for (auto& [cls, ids] : by_class) {
    std::shuffle(ids.begin(), ids.end(), rng);
    auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(ids.size())));
    if (n_test == 0 && test_fraction > 0 && ids.size() >= 2) n_test = 1;
    if (n_test >= ids.size()) n_test = ids.size() - 1;
    split.test.insert(split.test.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_test));
    split.train.insert(split.train.end(), ids.begin() + static_cast<std::ptrdiff_t>(n_test), ids.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

void write_split(const Split& split, const std::filesystem::path& path) {
  std::string out;
  for (const auto& id : split.train) out += "train\t" + id + "\n";
  for (const auto& id : split.test) out += "test\t" + id + "\n";
  detail::write_file(path.string(), out);
}

Split read_split(const std::filesystem::path& path) {
  auto text = detail::read_file(path.string());
  detail::LineReader lines(text);
  std::string_view line;
  Split split;
  while (lines.next(line)) {
    if (line.empty()) continue;
    auto f = detail::split(line, '\t');
    if (f.size() != 2 || (f[0] != "train" && f[0] != "test"))
      throw ParseError(path.string() + ": expected 'train|test<TAB>trace_id'", lines.line_no());
    (f[0] == "train" ? split.train : split.test).emplace_back(f[1]);
  }
  return split;
}

namespace {

std::size_t column_count(const FeatureSet& features) {
  std::size_t cols = 0;
  for (const auto& row : features.rows)
    if (!row.counts.empty()) cols = std::max<std::size_t>(cols, row.counts.back().column + 1);
  return cols;
}

}  // namespace

Dataset training_dataset(const FeatureSet& features, std::span<const std::string> classes,
                         const std::set<std::string>& trace_ids) {
  std::map<std::string, std::uint32_t, std::less<>> class_index;
  for (std::size_t i = 0; i < classes.size(); ++i) class_index.emplace(classes[i], static_cast<std::uint32_t>(i));
  Dataset d{SparseMatrix(column_count(features)), {}, {}};
  for (std::size_t i = 0; i < features.rows.size(); ++i) {
    const auto& row = features.rows[i];
    if (row.label.is_withheld() || !trace_ids.contains(row.trace_id)) continue;
    auto target = row.label.target();
    auto it = class_index.find(target);
    if (it == class_index.end()) throw InvalidArgument("label '" + target + "' is not a model class");
    d.x.add_row(row.counts);
    d.y.push_back(it->second);
    d.source_rows.push_back(i);
  }
  if (d.y.empty()) throw InvalidArgument("no training slices selected");
  return d;
}

TreeEnsembleModel train_model(const FeatureSet& features, const std::set<std::string>& train_ids,
                              const ModelConfig& config) {
  auto classes = model_classes(features);
  auto data = training_dataset(features, classes, train_ids);
  TreeEnsembleModel model;
  switch (config.kind) {
    case ModelKind::single_tree:
      model = fit_single_tree(data.x, data.y, classes, config.tree);
      break;
    case ModelKind::random_forest:
      model = fit_forest(data.x, data.y, classes, config.forest);
      break;
    case ModelKind::gradient_boosted:
      model = fit_boosted(data.x, data.y, classes, config.boost);
      break;
  }
  model.vocab_hash = features.header.vocab_hash;
  model.hyperparams["ngram_n"] = std::to_string(features.header.n);
  model.hyperparams["slices"] = std::to_string(features.header.num_slices);
  model.hyperparams["feature_values"] = std::string(to_string(features.header.values));
  return model;
}

std::vector<SlicePrediction> predict_slices(const TreeEnsembleModel& model, const FeatureSet& features,
                                            const std::set<std::string>& trace_ids, std::size_t jobs) {
  check_vocabulary(model, features.header.vocab_hash);
  std::vector<std::size_t> selected;
  for (std::size_t i = 0; i < features.rows.size(); ++i)
    if (trace_ids.contains(features.rows[i].trace_id)) selected.push_back(i);
  std::vector<SlicePrediction> out(selected.size());
  parallel_for(selected.size(), jobs, [&](std::size_t k) {
    const auto& row = features.rows[selected[k]];
    out[k] = {row.trace_id, row.slice_index, row.label, predict(model, row.counts).class_name};
  });
  return out;
}

}  // namespace sentinel
