#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "sentinel/evaluation.hpp"
#include "sentinel/features.hpp"
#include "sentinel/trees.hpp"

namespace sentinel {

/// Which units the vocabulary policy counts n-grams over.
enum class VocabScope { trace, slice };
std::string_view to_string(VocabScope s);
VocabScope parse_vocab_scope(std::string_view text);

struct CorpusFeatures {
  NGramVocabulary vocabulary;
  FeatureSet features;  ///< rows ordered by (trace_id, slice_index)
  std::size_t traces = 0;
  std::size_t events = 0;
  std::size_t dropped_oov = 0;
};

/// Scans every trace once, builds the vocabulary over all of them, then
/// vectorizes every slice. `load(i)` is called once per trace.
CorpusFeatures featurize_corpus(const Featurizer& featurizer, std::size_t trace_count,
                                const std::function<Trace(std::size_t)>& load,
                                const VocabPolicy& policy, VocabScope scope = VocabScope::trace,
                                std::size_t jobs = 1);

CorpusFeatures featurize_files(const Featurizer& featurizer,
                               std::span<const std::filesystem::path> files,
                               const VocabPolicy& policy, VocabScope scope = VocabScope::trace,
                               std::size_t jobs = 1);

/// "benign" followed by the malware classes seen in `features`, sorted.
std::vector<std::string> model_classes(const FeatureSet& features);

/// Class of a whole trace: its malware class, or "benign".
std::map<std::string, std::string> trace_classes(const FeatureSet& features);

struct Split {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Stratified by trace class; slices of one trace never straddle partitions.
/// Each class puts round(f * n) traces in test, at least one when n >= 2 and
/// f > 0, and always keeps one for training.
Split stratified_split(const FeatureSet& features, double test_fraction, std::uint64_t seed);
void write_split(const Split& split, const std::filesystem::path& path);
Split read_split(const std::filesystem::path& path);

struct Dataset {
  SparseMatrix x;
  std::vector<std::uint32_t> y;
  std::vector<std::size_t> source_rows;  ///< index into FeatureSet::rows
};

/// Benign and malicious slices of the selected traces. Withheld slices never
/// enter training.
Dataset training_dataset(const FeatureSet& features, std::span<const std::string> classes,
                         const std::set<std::string>& trace_ids);

struct ModelConfig {
  ModelKind kind = ModelKind::gradient_boosted;
  TreeParams tree;
  ForestParams forest;
  BoostParams boost;
};

TreeEnsembleModel train_model(const FeatureSet& features, const std::set<std::string>& train_ids,
                              const ModelConfig& config);

/// Predicts every slice (withheld included) of the selected traces.
std::vector<SlicePrediction> predict_slices(const TreeEnsembleModel& model,
                                            const FeatureSet& features,
                                            const std::set<std::string>& trace_ids,
                                            std::size_t jobs = 1);

}  // namespace sentinel
