#pragma once

#include <set>
#include <vector>

#include "sentinel/pipeline.hpp"
#include "sentinel/synthgen.hpp"

namespace testing {

// A small baseline corpus and a boosted model trained on all of it.
struct SmallModel {
  std::vector<sentinel::Trace> traces;
  sentinel::CorpusFeatures corpus;
  sentinel::TreeEnsembleModel model;
};

inline SmallModel small_model(std::size_t classes = 3, std::size_t per_class = 3, std::size_t benign = 3,
                              std::uint64_t seed = 21) {
  using namespace sentinel;
  auto spec = default_scenario(Scenario::baseline, seed);
  spec.classes.resize(classes);
  SmallModel out;
  for (const auto& row : plan_corpus(spec, per_class, benign))
    out.traces.push_back(generate_trace_with_seed(spec, row.class_name, row.trace_id, row.seed).trace);
  Featurizer fz(default_syscall_set(), {3, 10, FeatureValues::raw});
  out.corpus = featurize_corpus(fz, out.traces.size(), [&](std::size_t i) { return out.traces[i]; },
                                VocabPolicy::intersection());
  std::set<std::string> ids;
  for (const auto& t : out.traces) ids.insert(t.meta.trace_id);
  ModelConfig cfg;
  cfg.boost.rounds = 10;
  cfg.boost.min_leaf = 1;
  out.model = train_model(out.corpus.features, ids, cfg);
  return out;
}

}  // namespace testing
