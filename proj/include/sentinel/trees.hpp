#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sentinel/features.hpp"

namespace sentinel {

/// Row-major sparse matrix of non-negative feature values.
class SparseMatrix {
 public:
  explicit SparseMatrix(std::size_t cols = 0) : cols_(cols) {}

  static SparseMatrix from_dense(const std::vector<std::vector<double>>& rows);

  /// Appends a row. Entries must be sorted by column and inside [0, cols).
  /// Explicit zeros are dropped.
  void add_row(const SparseVector& row);

  std::size_t rows() const noexcept { return row_ptr_.size() - 1; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t nonzeros() const noexcept { return entries_.size(); }

  std::span<const SparseEntry> row(std::size_t i) const {
    return {entries_.data() + row_ptr_[i], entries_.data() + row_ptr_[i + 1]};
  }

  SparseMatrix scaled(double factor) const;

 private:
  std::size_t cols_;
  std::vector<std::size_t> row_ptr_{0};
  std::vector<SparseEntry> entries_;
};

/// Value of column `column` in a sorted sparse row (zero when absent).
double sparse_value(std::span<const SparseEntry> row, std::uint32_t column);

/// A tree node is either a split (x[feature] <= threshold goes left) or a
/// leaf. Classification leaves hold a class distribution; the regression trees
/// used by boosting hold a single raw score.
struct TreeNode {
  std::int32_t feature = -1;
  double threshold = 0;
  std::int32_t left = -1;
  std::int32_t right = -1;
  std::vector<double> values;

  bool is_leaf() const noexcept { return feature < 0; }
  bool operator==(const TreeNode&) const = default;
};

/// Nodes in preorder; the root is nodes[0].
struct Tree {
  std::vector<TreeNode> nodes;

  const std::vector<double>& leaf_values(std::span<const SparseEntry> x) const;
  /// Index of the leaf reached by x.
  std::size_t leaf_index(std::span<const SparseEntry> x) const;
  std::size_t depth() const;

  bool operator==(const Tree&) const = default;
};

/// Gini impurity 1 - sum p_k^2 of a class-count vector.
double gini(std::span<const double> class_counts);

struct FeatureSubsample {
  enum class Kind { all, sqrt, count };
  Kind kind = Kind::all;
  std::size_t count = 0;

  static FeatureSubsample all() { return {}; }
  static FeatureSubsample sqrt() { return {Kind::sqrt, 0}; }
  static FeatureSubsample fixed(std::size_t k) { return {Kind::count, k}; }

  /// Columns examined per node out of `cols` (0 means all).
  std::size_t per_node(std::size_t cols) const;
};

struct TreeParams {
  std::size_t max_depth = 16;
  std::size_t min_leaf = 1;
  FeatureSubsample feature_subsample = FeatureSubsample::all();
  std::uint64_t seed = 0;  ///< only used when subsampling features
};

/// Greedy CART with Gini impurity. Candidate thresholds are midpoints of the
/// sorted distinct values at a node (absent entries count as zero). Ties go
/// to the lowest feature, then the lowest threshold.
Tree fit_tree(const SparseMatrix& x, std::span<const std::uint32_t> y, std::size_t num_classes,
              const TreeParams& params = {});

enum class ModelKind { single_tree, random_forest, gradient_boosted };
std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view text);

/// A trained ensemble bound to one feature space through `vocab_hash`.
struct TreeEnsembleModel {
  ModelKind kind = ModelKind::single_tree;
  std::vector<std::string> classes;
  std::string vocab_hash;
  std::map<std::string, std::string> hyperparams;
  double learning_rate = 0;
  /// Boosting only: initial raw score per class.
  std::vector<double> base_scores;
  /// Boosting stores rounds x classes trees, class-major within a round.
  std::vector<Tree> trees;

  std::size_t num_classes() const noexcept { return classes.size(); }
  bool operator==(const TreeEnsembleModel&) const = default;
};

struct ForestParams {
  std::size_t n_trees = 100;
  bool bootstrap = true;
  FeatureSubsample feature_subsample = FeatureSubsample::sqrt();
  std::size_t max_depth = 16;
  std::size_t min_leaf = 1;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

TreeEnsembleModel fit_single_tree(const SparseMatrix& x, std::span<const std::uint32_t> y,
                                  std::vector<std::string> classes, const TreeParams& params = {});

TreeEnsembleModel fit_forest(const SparseMatrix& x, std::span<const std::uint32_t> y,
                             std::vector<std::string> classes, const ForestParams& params = {});

struct BoostParams {
  std::size_t rounds = 100;
  double learning_rate = 0.1;
  std::size_t max_depth = 6;
  std::size_t min_leaf = 5;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  /// Called after each round with the mean training cross-entropy.
  std::function<void(std::size_t round, double loss)> on_round;
};

/// Multiclass gradient boosting on softmax cross-entropy. Each round fits one
/// regression tree per class to the negative gradient with variance-reduction
/// splits; leaves take a Newton step scaled by the learning rate.
TreeEnsembleModel fit_boosted(const SparseMatrix& x, std::span<const std::uint32_t> y,
                              std::vector<std::string> classes, const BoostParams& params = {});

inline constexpr double kHessianFloor = 1e-6;

std::vector<double> softmax(std::span<const double> scores);
/// -log softmax(scores)[label].
double softmax_cross_entropy(std::span<const double> scores, std::uint32_t label);
/// one_hot(label) - softmax(scores): the per-class boosting targets.
std::vector<double> softmax_negative_gradient(std::span<const double> scores, std::uint32_t label);

struct Prediction {
  std::string class_name;
  std::size_t class_index = 0;
  std::vector<double> scores;  ///< per-class probabilities, sum to 1

  bool operator==(const Prediction&) const = default;
};

Prediction predict(const TreeEnsembleModel& model, std::span<const SparseEntry> x);
/// Throws VocabularyMismatch when `vocab_hash` differs from the model's.
Prediction predict(const TreeEnsembleModel& model, std::span<const SparseEntry> x,
                   std::string_view vocab_hash);
std::vector<Prediction> predict_batch(const TreeEnsembleModel& model, const SparseMatrix& x,
                                      std::size_t jobs = 1);

void check_vocabulary(const TreeEnsembleModel& model, std::string_view vocab_hash);

inline constexpr int kModelFormatVersion = 1;

void save_model(const TreeEnsembleModel& model, const std::filesystem::path& path);
void save_model(const TreeEnsembleModel& model, std::ostream& out);
/// Throws VersionError on an unknown format version and CorruptionError when
/// the content digest does not match.
TreeEnsembleModel load_model(const std::filesystem::path& path);
TreeEnsembleModel load_model(std::istream& in);

}  // namespace sentinel
