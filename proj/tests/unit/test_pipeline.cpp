#include <map>

#include "doctest.h"
#include "sentinel/error.hpp"
#include "sentinel/pipeline.hpp"
#include "model_fixture.hpp"
#include "test_util.hpp"

using namespace sentinel;

namespace {

FeatureSet toy_features(std::size_t per_class) {
  FeatureSet fs;
  fs.header = {3, 4, "h", FeatureValues::raw};
  auto add_trace = [&](const std::string& id, const std::string& cls) {
    for (std::size_t s = 0; s < 4; ++s) {
      SliceLabel l = cls.empty() || s < 2 ? SliceLabel::benign()
                     : s == 2             ? SliceLabel::malicious(cls)
                                          : SliceLabel::withheld(cls);
      fs.rows.push_back({id, s, {{static_cast<std::uint32_t>(s), 1.0}}, l});
    }
  };
  for (std::size_t i = 0; i < per_class; ++i) {
    add_trace("w" + std::to_string(i), "worm");
    add_trace("v" + std::to_string(i), "virus");
    add_trace("b" + std::to_string(i), "");
  }
  return fs;
}

}  // namespace

TEST_CASE("model classes and trace classes") {
  auto fs = toy_features(2);
  CHECK(model_classes(fs) == std::vector<std::string>{"benign", "virus", "worm"});
  auto tc = trace_classes(fs);
  CHECK(tc.at("w0") == "worm");
  CHECK(tc.at("b1") == "benign");
}

TEST_CASE("stratified split keeps traces whole and balances classes") {
  auto fs = toy_features(10);
  auto split = stratified_split(fs, 0.2, 5);
  CHECK(split.train.size() + split.test.size() == 30);
  std::map<std::string, int> test_per_class;
  auto tc = trace_classes(fs);
  for (const auto& id : split.test) ++test_per_class[tc.at(id)];
  CHECK(test_per_class["worm"] == 2);
  CHECK(test_per_class["virus"] == 2);
  CHECK(test_per_class["benign"] == 2);
  std::set<std::string> train(split.train.begin(), split.train.end());
  for (const auto& id : split.test) CHECK_FALSE(train.contains(id));

  auto again = stratified_split(fs, 0.2, 5);
  CHECK(again.test == split.test);

  testing::TempDir dir("split");
  write_split(split, dir / "split.tsv");
  auto back = read_split(dir / "split.tsv");
  CHECK(back.train == split.train);
  CHECK(back.test == split.test);
}

TEST_CASE("training data never contains withheld slices") {
  auto fs = toy_features(3);
  std::set<std::string> ids;
  for (const auto& r : fs.rows) ids.insert(r.trace_id);
  auto classes = model_classes(fs);
  auto ds = training_dataset(fs, classes, ids);
  CHECK(ds.x.rows() == 3 * 3 + 3 * 3 + 3 * 4);
  for (auto src : ds.source_rows) CHECK_FALSE(fs.rows[src].label.is_withheld());
  CHECK(ds.x.cols() == 4);
}

TEST_CASE("featurize_corpus reads every trace once and orders rows") {
  auto spec = default_scenario(Scenario::baseline, 2);
  spec.classes.resize(2);
  auto plan = plan_corpus(spec, 2, 2);
  std::vector<Trace> traces;
  for (const auto& r : plan) traces.push_back(generate_trace_with_seed(spec, r.class_name, r.trace_id, r.seed).trace);
  std::vector<int> loads(traces.size());
  Featurizer fz(default_syscall_set(), {3, 10, FeatureValues::raw});
  auto corpus = featurize_corpus(fz, traces.size(), [&](std::size_t i) {
    ++loads[i];
    return traces[i];
  }, VocabPolicy::intersection(), VocabScope::trace, 2);
  for (int n : loads) CHECK(n == 1);
  CHECK(corpus.traces == traces.size());
  CHECK(corpus.features.rows.size() == traces.size() * 10);
  CHECK(corpus.features.header.vocab_hash == corpus.vocabulary.hash());
  for (std::size_t i = 1; i < corpus.features.rows.size(); ++i) {
    const auto& a = corpus.features.rows[i - 1];
    const auto& b = corpus.features.rows[i];
    CHECK(std::tie(a.trace_id, a.slice_index) < std::tie(b.trace_id, b.slice_index));
  }
  auto serial = featurize_corpus(fz, traces.size(), [&](std::size_t i) { return traces[i]; },
                                 VocabPolicy::intersection());
  CHECK(serial.features.rows == corpus.features.rows);
}

TEST_CASE("trained model is bound to the corpus vocabulary") {
  auto m = testing::small_model(2, 2, 2);
  CHECK(m.model.vocab_hash == m.corpus.vocabulary.hash());
  CHECK(m.model.classes.front() == "benign");
  CHECK(m.model.hyperparams.at("ngram_n") == "3");
  std::set<std::string> ids;
  for (const auto& t : m.traces) ids.insert(t.meta.trace_id);
  auto preds = predict_slices(m.model, m.corpus.features, ids);
  CHECK(preds.size() == m.traces.size() * 10);
  auto report = per_slice_report(preds, m.model.classes);
  CHECK(report.aggregate.accuracy > 0.9);
}

TEST_CASE("small classes still reach the test partition") {
  auto fs = toy_features(2);
  auto split = stratified_split(fs, 0.2, 1);
  CHECK(split.test.size() == 3);
  CHECK(split.train.size() == 3);
  CHECK(stratified_split(fs, 0.0, 1).test.empty());
}
