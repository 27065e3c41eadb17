#include <cmath>
#include <sstream>

#include "doctest.h"
#include "sentinel/error.hpp"
#include "sentinel/trees.hpp"
#include "split_oracle.hpp"
#include "test_util.hpp"

using namespace sentinel;

namespace {

// Two well separated clusters per class on disjoint feature blocks.
void blobs(std::mt19937_64& rng, std::size_t per_class, std::size_t classes, SparseMatrix& x,
           std::vector<std::uint32_t>& y) {
  const std::size_t block = 3;
  x = SparseMatrix(classes * block + 2);
  std::poisson_distribution<int> strong(8), weak(1);
  for (std::size_t k = 0; k < classes; ++k) {
    for (std::size_t i = 0; i < per_class; ++i) {
      SparseVector row;
      for (std::size_t c = 0; c < x.cols(); ++c) {
        int v = (c / block == k) ? strong(rng) : weak(rng);
        if (v > 0) row.push_back({static_cast<std::uint32_t>(c), static_cast<double>(v)});
      }
      x.add_row(row);
      y.push_back(static_cast<std::uint32_t>(k));
    }
  }
}

std::vector<std::string> names(std::size_t k) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back("c" + std::to_string(i));
  return out;
}

double accuracy(const TreeEnsembleModel& m, const SparseMatrix& x, const std::vector<std::uint32_t>& y) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) ok += predict(m, x.row(i)).class_index == y[i];
  return static_cast<double>(ok) / x.rows();
}

}  // namespace

TEST_CASE("sparse matrix basics") {
  auto m = SparseMatrix::from_dense({{0, 2, 0}, {1, 0, 3}});
  CHECK(m.rows() == 2);
  CHECK(m.cols() == 3);
  CHECK(m.nonzeros() == 3);
  CHECK(sparse_value(m.row(1), 2) == 3);
  CHECK(sparse_value(m.row(1), 1) == 0);
  SparseMatrix bad(2);
  CHECK_THROWS_AS(bad.add_row({{1, 1}, {0, 1}}), InvalidArgument);
  CHECK_THROWS_AS(bad.add_row({{2, 1}}), InvalidArgument);
}

TEST_CASE("gini impurity") {
  std::vector<double> pure{4, 0}, even{2, 2}, three{1, 1, 1};
  CHECK(gini(pure) == 0);
  CHECK(gini(even) == doctest::Approx(0.5));
  CHECK(gini(three) == doctest::Approx(2.0 / 3));
}

TEST_CASE("root split matches exhaustive search") {
  std::mt19937_64 rng(2024);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<std::vector<double>> dense;
    std::vector<std::uint32_t> y;
    std::size_t k = 0;
    testing::random_instance(rng, dense, y, k);
    auto tree = fit_tree(SparseMatrix::from_dense(dense), y, k, {.max_depth = 1});
    auto oracle = testing::exhaustive_root_split(dense, y, k);
    const auto& root = tree.nodes.at(0);
    if (!oracle) {
      CHECK(root.is_leaf());
      continue;
    }
    REQUIRE_FALSE(root.is_leaf());
    CHECK(static_cast<std::size_t>(root.feature) == oracle->feature);
    CHECK(root.threshold == oracle->threshold);
  }
}

TEST_CASE("xor needs two levels") {
  auto x = SparseMatrix::from_dense({{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  std::vector<std::uint32_t> y{0, 1, 1, 0};
  auto tree = fit_tree(x, y, 2);
  CHECK(tree.depth() == 2);
  for (std::size_t i = 0; i < 4; ++i) {
    auto v = tree.leaf_values(x.row(i));
    CHECK(v[y[i]] == 1.0);
  }
}

TEST_CASE("pure node and max depth zero are single leaves") {
  auto x = SparseMatrix::from_dense({{0, 1}, {1, 0}, {2, 2}});
  std::vector<std::uint32_t> pure{1, 1, 1};
  auto t = fit_tree(x, pure, 2);
  REQUIRE(t.nodes.size() == 1);
  CHECK(t.nodes[0].values == std::vector<double>{0, 1});

  std::vector<std::uint32_t> mixed{0, 1, 1};
  auto stump = fit_tree(x, mixed, 2, {.max_depth = 0});
  REQUIRE(stump.nodes.size() == 1);
  CHECK(stump.nodes[0].values[1] == doctest::Approx(2.0 / 3));
}

TEST_CASE("min_leaf blocks small children") {
  auto x = SparseMatrix::from_dense({{0}, {0}, {0}, {1}});
  std::vector<std::uint32_t> y{0, 0, 0, 1};
  CHECK(fit_tree(x, y, 2, {.min_leaf = 1}).nodes.size() == 3);
  CHECK(fit_tree(x, y, 2, {.min_leaf = 2}).nodes.size() == 1);
}

TEST_CASE("training input validation") {
  auto x = SparseMatrix::from_dense({{0}, {1}});
  std::vector<std::uint32_t> y{0, 5};
  CHECK_THROWS_AS(fit_tree(x, y, 2), InvalidArgument);
  std::vector<std::uint32_t> short_y{0};
  CHECK_THROWS_AS(fit_tree(x, short_y, 2), InvalidArgument);
  CHECK_THROWS_AS(fit_tree(SparseMatrix(1), {}, 2), InvalidArgument);
}

TEST_CASE("splits are invariant to positive feature scaling") {
  std::mt19937_64 rng(77);
  SparseMatrix x;
  std::vector<std::uint32_t> y;
  blobs(rng, 20, 3, x, y);
  auto a = fit_tree(x, y, 3);
  auto b = fit_tree(x.scaled(2.5), y, 3);
  REQUIRE(a.nodes.size() == b.nodes.size());
  for (std::size_t i = 0; i < a.nodes.size(); ++i) {
    CHECK(a.nodes[i].feature == b.nodes[i].feature);
    CHECK(a.nodes[i].values == b.nodes[i].values);
    if (!a.nodes[i].is_leaf()) CHECK(b.nodes[i].threshold == doctest::Approx(a.nodes[i].threshold * 2.5));
  }
}

TEST_CASE("single-tree forest without bagging equals fit_tree") {
  std::mt19937_64 rng(5);
  SparseMatrix x;
  std::vector<std::uint32_t> y;
  blobs(rng, 15, 4, x, y);
  auto forest = fit_forest(x, y, names(4),
                           {.n_trees = 1, .bootstrap = false, .feature_subsample = FeatureSubsample::all()});
  REQUIRE(forest.trees.size() == 1);
  CHECK(forest.trees[0] == fit_tree(x, y, 4));
}

TEST_CASE("ensembles are deterministic and fit separable data") {
  std::mt19937_64 rng(6);
  SparseMatrix x;
  std::vector<std::uint32_t> y;
  blobs(rng, 30, 4, x, y);
  auto f1 = fit_forest(x, y, names(4), {.n_trees = 20, .seed = 3});
  auto f2 = fit_forest(x, y, names(4), {.n_trees = 20, .seed = 3, .jobs = 3});
  CHECK(f1 == f2);
  CHECK(accuracy(f1, x, y) >= 0.95);
  auto g1 = fit_boosted(x, y, names(4), {.rounds = 20});
  auto g2 = fit_boosted(x, y, names(4), {.rounds = 20, .jobs = 4});
  CHECK(g1 == g2);
  CHECK(g1.trees.size() == 80);
  CHECK(accuracy(g1, x, y) >= 0.95);
  auto t = fit_single_tree(x, y, names(4));
  CHECK(accuracy(t, x, y) >= 0.95);
}

TEST_CASE("softmax gradient at zero scores") {
  std::vector<double> zero(3, 0.0);
  auto g = softmax_negative_gradient(zero, 0);
  CHECK(g[0] == doctest::Approx(2.0 / 3));
  CHECK(g[1] == doctest::Approx(-1.0 / 3));
  CHECK(g[2] == doctest::Approx(-1.0 / 3));
  CHECK(softmax_cross_entropy(zero, 1) == doctest::Approx(std::log(3.0)));
}

TEST_CASE("negative gradient matches central differences") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> score(0, 2);
  const double h = 1e-5;
  for (std::size_t k : {2u, 3u, 5u, 7u}) {
    for (int rep = 0; rep < 25; ++rep) {
      std::vector<double> s(k);
      for (auto& v : s) v = score(rng);
      std::uint32_t label = static_cast<std::uint32_t>(rng() % k);
      auto g = softmax_negative_gradient(s, label);
      for (std::size_t j = 0; j < k; ++j) {
        auto up = s, down = s;
        up[j] += h;
        down[j] -= h;
        double fd = -(softmax_cross_entropy(up, label) - softmax_cross_entropy(down, label)) / (2 * h);
        CHECK(std::abs(fd - g[j]) <= 1e-4 * std::max(1e-3, std::abs(g[j])));
      }
    }
  }
}

TEST_CASE("boosting training loss does not increase") {
  std::mt19937_64 rng(12);
  SparseMatrix x;
  std::vector<std::uint32_t> y;
  blobs(rng, 25, 3, x, y);
  std::vector<double> losses;
  fit_boosted(x, y, names(3),
              {.rounds = 30, .on_round = [&](std::size_t, double loss) { losses.push_back(loss); }});
  REQUIRE(losses.size() == 30);
  for (std::size_t i = 1; i < losses.size(); ++i) CHECK(losses[i] <= losses[i - 1] + 1e-12);
  CHECK(losses.back() < losses.front());
}

TEST_CASE("single leaf prediction returns its distribution") {
  TreeEnsembleModel m;
  m.kind = ModelKind::single_tree;
  m.classes = {"benign", "worm"};
  Tree t;
  TreeNode leaf;
  leaf.values = {0.25, 0.75};
  t.nodes.push_back(leaf);
  m.trees.push_back(t);
  auto p = predict(m, {});
  CHECK(p.class_name == "worm");
  CHECK(p.scores == std::vector<double>{0.25, 0.75});
}

TEST_CASE("batch prediction equals one at a time") {
  std::mt19937_64 rng(13);
  SparseMatrix x;
  std::vector<std::uint32_t> y;
  blobs(rng, 10, 3, x, y);
  auto m = fit_boosted(x, y, names(3), {.rounds = 5});
  auto batch = predict_batch(m, x, 3);
  for (std::size_t i = 0; i < x.rows(); ++i) CHECK(batch[i] == predict(m, x.row(i)));
}

TEST_CASE("vocabulary binding") {
  TreeEnsembleModel m;
  m.vocab_hash = "abc";
  CHECK_NOTHROW(check_vocabulary(m, "abc"));
  CHECK_THROWS_AS(check_vocabulary(m, "abd"), VocabularyMismatch);
}

TEST_CASE("model file round trip and damage") {
  std::mt19937_64 rng(14);
  SparseMatrix x;
  std::vector<std::uint32_t> y;
  blobs(rng, 10, 3, x, y);
  for (auto model : {fit_single_tree(x, y, names(3)), fit_forest(x, y, names(3), {.n_trees = 5}),
                     fit_boosted(x, y, names(3), {.rounds = 4})}) {
    model.vocab_hash = "deadbeef";
    model.hyperparams["ngram_n"] = "3";
    std::stringstream ss;
    save_model(model, ss);
    const auto text = ss.str();
    std::istringstream in(text);
    auto back = load_model(in);
    CHECK(back == model);
    for (std::size_t i = 0; i < x.rows(); ++i) CHECK(predict(back, x.row(i)) == predict(model, x.row(i)));

    auto versioned = text;
    versioned.replace(0, versioned.find('\n'), "sentinel-model 2");
    std::istringstream v(versioned);
    CHECK_THROWS_AS(load_model(v), VersionError);

    std::istringstream truncated(text.substr(0, text.size() / 2));
    CHECK_THROWS_AS(load_model(truncated), CorruptionError);

    auto flipped = text;
    auto pos = flipped.find("deadbeef");
    flipped[pos] = 'e';
    std::istringstream f(flipped);
    CHECK_THROWS_AS(load_model(f), CorruptionError);
  }
}
