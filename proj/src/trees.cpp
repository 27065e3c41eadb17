#include "sentinel/trees.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "sentinel/digest.hpp"
#include "sentinel/error.hpp"
#include "sentinel/parallel.hpp"
#include "text_util.hpp"

namespace sentinel {

// --- SparseMatrix ------------------------------------------------------------

SparseMatrix SparseMatrix::from_dense(const std::vector<std::vector<double>>& rows) {
  SparseMatrix m(rows.empty() ? 0 : rows.front().size());
  for (const auto& r : rows) {
    if (r.size() != m.cols_) throw InvalidArgument("ragged dense matrix");
    SparseVector v;
    for (std::uint32_t c = 0; c < r.size(); ++c)
      if (r[c] != 0.0) v.push_back({c, r[c]});
    m.add_row(v);
  }
  return m;
}

void SparseMatrix::add_row(const SparseVector& row) {
  std::int64_t prev = -1;
  for (const auto& e : row) {
    if (e.column >= cols_) throw InvalidArgument("column " + std::to_string(e.column) + " out of range");
    if (static_cast<std::int64_t>(e.column) <= prev) throw InvalidArgument("row columns not strictly increasing");
    prev = e.column;
    if (e.value != 0.0) entries_.push_back(e);
  }
  row_ptr_.push_back(entries_.size());
}

SparseMatrix SparseMatrix::scaled(double factor) const {
  SparseMatrix out = *this;
  for (auto& e : out.entries_) e.value *= factor;
  return out;
}

double sparse_value(std::span<const SparseEntry> row, std::uint32_t column) {
  auto it = std::lower_bound(row.begin(), row.end(), column,
                             [](const SparseEntry& e, std::uint32_t c) { return e.column < c; });
  return (it != row.end() && it->column == column) ? it->value : 0.0;
}

// --- Tree ------------------------------------------------------------------------

std::size_t Tree::leaf_index(std::span<const SparseEntry> x) const {
  std::size_t i = 0;
  while (!nodes[i].is_leaf()) {
    const auto& n = nodes[i];
    i = static_cast<std::size_t>(sparse_value(x, static_cast<std::uint32_t>(n.feature)) <= n.threshold ? n.left
                                                                                                       : n.right);
  }
  return i;
}

const std::vector<double>& Tree::leaf_values(std::span<const SparseEntry> x) const {
  return nodes[leaf_index(x)].values;
}

std::size_t Tree::depth() const {
  std::vector<std::size_t> d(nodes.size(), 0);
  std::size_t best = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    best = std::max(best, d[i]);
    if (!nodes[i].is_leaf()) {
      d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
      d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
    }
  }
  return best;
}

double gini(std::span<const double> class_counts) {
  double total = std::accumulate(class_counts.begin(), class_counts.end(), 0.0);
  if (total <= 0) return 0.0;
  double sum_sq = 0;
  for (double c : class_counts) sum_sq += c * c;
  // Exact 0 for a pure node: c*c == total*total.
  return (total * total - sum_sq) / (total * total);
}

std::size_t FeatureSubsample::per_node(std::size_t cols) const {
  switch (kind) {
    case Kind::all:
      return 0;
    case Kind::sqrt:
      return static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(cols))));
    case Kind::count:
      return count >= cols ? 0 : count;
  }
  return 0;
}

namespace {

// Column-major copy of a matrix, each column sorted by value descending (ties
// by row) so one scan visits every candidate threshold of every node.
struct ColumnIndex {
  std::vector<std::size_t> col_ptr;
  std::vector<std::uint32_t> rows;
  std::vector<double> values;

  explicit ColumnIndex(const SparseMatrix& x) : col_ptr(x.cols() + 1, 0) {
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (const auto& e : x.row(r)) {
        if (e.value < 0 || !std::isfinite(e.value)) throw InvalidArgument("feature values must be finite and non-negative");
        ++col_ptr[e.column + 1];
      }
    for (std::size_t c = 0; c < x.cols(); ++c) col_ptr[c + 1] += col_ptr[c];
    rows.resize(x.nonzeros());
    values.resize(x.nonzeros());
    auto fill = col_ptr;
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (const auto& e : x.row(r)) {
        auto pos = fill[e.column]++;
        rows[pos] = static_cast<std::uint32_t>(r);
        values[pos] = e.value;
      }
    std::vector<std::pair<double, std::uint32_t>> buf;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      auto b = col_ptr[c], e = col_ptr[c + 1];
      buf.clear();
      for (auto i = b; i < e; ++i) buf.emplace_back(values[i], rows[i]);
      std::sort(buf.begin(), buf.end(), [](const auto& a, const auto& z) {
        return a.first != z.first ? a.first > z.first : a.second < z.second;
      });
      for (auto i = b; i < e; ++i) {
        values[i] = buf[i - b].first;
        rows[i] = buf[i - b].second;
      }
    }
  }
};

struct GrowParams {
  std::size_t max_depth = 16;
  std::size_t min_leaf = 1;
  std::size_t features_per_node = 0;  // 0 = all
  std::uint64_t seed = 0;
};

// Rational Sum(cL^2)/wL + Sum(cR^2)/wR, compared exactly.
struct GiniScore {
  __int128 num = 0;
  __int128 den = 1;
  bool operator>(const GiniScore& o) const { return num * o.den > o.num * den; }
  bool operator==(const GiniScore& o) const { return num * o.den == o.num * den; }
};

// Classification task: integer class counts per node.
struct GiniTask {
  std::span<const std::uint32_t> y;
  std::size_t num_classes;
  using Score = GiniScore;
};

// Regression task on boosting targets g with Newton hessians h.
struct VarianceTask {
  std::span<const double> g;
  std::span<const double> h;
  double learning_rate;
  using Score = double;
};

template <typename Task>
class TreeGrower {
 public:
  using Score = typename Task::Score;

  TreeGrower(const SparseMatrix& x, const ColumnIndex& cols, std::span<const std::uint32_t> weights,
             const Task& task, const GrowParams& params)
      : x_(x), cols_(cols), weights_(weights), task_(task), params_(params), rng_(params.seed) {
    if constexpr (std::is_same_v<Task, GiniTask>) k_ = task.num_classes;
    else k_ = 1;
  }

  Tree grow() {
    const auto n = x_.rows();
    const auto d = x_.cols();
    std::vector<std::int32_t> node_of(n, -1);
    bool any = false;
    for (std::size_t r = 0; r < n; ++r)
      if (weights_[r] > 0) {
        node_of[r] = 0;
        any = true;
      }
    if (!any) throw InvalidArgument("cannot fit a tree on empty input");

    nodes_.assign(1, TreeNode{});
    std::vector<std::int32_t> frontier{0};
    std::vector<std::int32_t> slot_of_node;
    std::vector<std::int32_t> slot_of_row(n, -1);
    std::vector<std::size_t> perm(d);
    std::iota(perm.begin(), perm.end(), 0);
    const auto k_sub = params_.features_per_node;
    const auto words = (d + 63) / 64;

    for (std::size_t depth = 0; !frontier.empty(); ++depth) {
      const auto slots = frontier.size();
      slot_of_node.assign(nodes_.size(), -1);
      for (std::size_t s = 0; s < slots; ++s) slot_of_node[static_cast<std::size_t>(frontier[s])] = static_cast<std::int32_t>(s);

      reset_totals(slots);
      for (std::size_t r = 0; r < n; ++r) {
        auto node = node_of[r];
        slot_of_row[r] = node < 0 ? -1 : slot_of_node[static_cast<std::size_t>(node)];
        if (slot_of_row[r] >= 0) add_total(static_cast<std::size_t>(slot_of_row[r]), r);
      }

      // Decide which slots may split.
      std::vector<char> splittable(slots, 0);
      for (std::size_t s = 0; s < slots; ++s) {
        splittable[s] = depth < params_.max_depth && tot_w_[s] >= 2 * static_cast<std::int64_t>(params_.min_leaf) &&
                        !is_pure(s);
      }
      for (std::size_t r = 0; r < n; ++r)
        if (slot_of_row[r] >= 0 && !splittable[static_cast<std::size_t>(slot_of_row[r])]) slot_of_row[r] = -1;

      // Feature subsampling masks.
      std::vector<std::uint64_t> masks;
      std::vector<char> wanted(d, k_sub == 0 ? 1 : 0);
      if (k_sub > 0) {
        masks.assign(slots * words, 0);
        for (std::size_t s = 0; s < slots; ++s) {
          if (!splittable[s]) continue;
          for (std::size_t i = 0; i < k_sub; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, d - 1);
            std::swap(perm[i], perm[pick(rng_)]);
            auto f = perm[i];
            masks[s * words + f / 64] |= std::uint64_t{1} << (f % 64);
            wanted[f] = 1;
          }
        }
      }

      best_.assign(slots, Best{});
      prepare_scan(slots);
      std::vector<std::size_t> touched;
      for (std::size_t f = 0; f < d; ++f) {
        if (!wanted[f]) continue;
        for (auto i = cols_.col_ptr[f]; i < cols_.col_ptr[f + 1]; ++i) {
          const auto r = cols_.rows[i];
          const auto s32 = slot_of_row[r];
          if (s32 < 0) continue;
          const auto s = static_cast<std::size_t>(s32);
          if (k_sub > 0 && !(masks[s * words + f / 64] >> (f % 64) & 1)) continue;
          const double v = cols_.values[i];
          if (stamp_[s] != f) {
            stamp_[s] = f;
            clear_right(s);
            last_[s] = v;
            touched.push_back(s);
          } else if (v != last_[s]) {
            consider(s, f, 0.5 * (v + last_[s]));
            last_[s] = v;
          }
          add_right(s, r);
        }
        for (auto s : touched) consider(s, f, 0.5 * last_[s]);  // zeros go left
        touched.clear();
      }

      // Materialize splits and leaves.
      std::vector<std::int32_t> next;
      std::vector<std::int32_t> left_of(slots, -1), right_of(slots, -1);
      for (std::size_t s = 0; s < slots; ++s) {
        auto id = static_cast<std::size_t>(frontier[s]);
        if (splittable[s] && best_[s].valid && accept(s)) {
          nodes_[id].feature = static_cast<std::int32_t>(best_[s].feature);
          nodes_[id].threshold = best_[s].threshold;
          left_of[s] = static_cast<std::int32_t>(nodes_.size());
          nodes_.emplace_back();
          right_of[s] = static_cast<std::int32_t>(nodes_.size());
          nodes_.emplace_back();
          nodes_[id].left = left_of[s];
          nodes_[id].right = right_of[s];
          next.push_back(left_of[s]);
          next.push_back(right_of[s]);
        } else {
          nodes_[id].values = leaf_values(s);
        }
      }
      for (std::size_t r = 0; r < n; ++r) {
        auto node = node_of[r];
        if (node < 0) continue;
        auto s = slot_of_node[static_cast<std::size_t>(node)];
        if (s < 0) continue;
        if (left_of[static_cast<std::size_t>(s)] < 0) {
          node_of[r] = -1;
          continue;
        }
        const auto& split = nodes_[static_cast<std::size_t>(node)];
        auto v = sparse_value(x_.row(r), static_cast<std::uint32_t>(split.feature));
        node_of[r] = v <= split.threshold ? split.left : split.right;
      }
      frontier = std::move(next);
    }
    return preorder();
  }

 private:
  struct Best {
    bool valid = false;
    std::size_t feature = 0;
    double threshold = 0;
    Score score{};
  };

  void reset_totals(std::size_t slots) {
    tot_w_.assign(slots, 0);
    if constexpr (std::is_same_v<Task, GiniTask>) {
      tot_c_.assign(slots * k_, 0);
    } else {
      tot_g_.assign(slots, 0.0);
      tot_h_.assign(slots, 0.0);
    }
  }

  void add_total(std::size_t s, std::size_t r) {
    const std::int64_t w = weights_[r];
    tot_w_[s] += w;
    if constexpr (std::is_same_v<Task, GiniTask>) {
      tot_c_[s * k_ + task_.y[r]] += w;
    } else {
      tot_g_[s] += static_cast<double>(w) * task_.g[r];
      tot_h_[s] += static_cast<double>(w) * task_.h[r];
    }
  }

  bool is_pure(std::size_t s) const {
    if constexpr (std::is_same_v<Task, GiniTask>) {
      std::size_t nonzero = 0;
      for (std::size_t k = 0; k < k_; ++k) nonzero += tot_c_[s * k_ + k] > 0;
      return nonzero <= 1;
    } else {
      return false;
    }
  }

  void prepare_scan(std::size_t slots) {
    stamp_.assign(slots, std::numeric_limits<std::size_t>::max());
    last_.assign(slots, 0.0);
    right_w_.assign(slots, 0);
    if constexpr (std::is_same_v<Task, GiniTask>) right_c_.assign(slots * k_, 0);
    else right_g_.assign(slots, 0.0);
  }

  void clear_right(std::size_t s) {
    right_w_[s] = 0;
    if constexpr (std::is_same_v<Task, GiniTask>) std::fill_n(right_c_.begin() + static_cast<std::ptrdiff_t>(s * k_), k_, 0);
    else right_g_[s] = 0.0;
  }

  void add_right(std::size_t s, std::size_t r) {
    const std::int64_t w = weights_[r];
    right_w_[s] += w;
    if constexpr (std::is_same_v<Task, GiniTask>) right_c_[s * k_ + task_.y[r]] += w;
    else right_g_[s] += static_cast<double>(w) * task_.g[r];
  }

  void consider(std::size_t s, std::size_t f, double threshold) {
    const auto min_leaf = static_cast<std::int64_t>(params_.min_leaf);
    const auto wr = right_w_[s];
    const auto wl = tot_w_[s] - wr;
    if (wr < std::max<std::int64_t>(min_leaf, 1) || wl < std::max<std::int64_t>(min_leaf, 1)) return;
    Score score;
    if constexpr (std::is_same_v<Task, GiniTask>) {
      __int128 sum_r = 0, sum_l = 0;
      for (std::size_t k = 0; k < k_; ++k) {
        __int128 cr = right_c_[s * k_ + k];
        __int128 cl = tot_c_[s * k_ + k] - right_c_[s * k_ + k];
        sum_r += cr * cr;
        sum_l += cl * cl;
      }
      score.num = sum_l * wr + sum_r * wl;
      score.den = static_cast<__int128>(wl) * wr;
    } else {
      const double gr = right_g_[s];
      const double gl = tot_g_[s] - gr;
      score = gl * gl / static_cast<double>(wl) + gr * gr / static_cast<double>(wr);
    }
    auto& b = best_[s];
    if (!b.valid || score > b.score || (score == b.score && f == b.feature && threshold < b.threshold)) {
      b.valid = true;
      b.feature = f;
      b.threshold = threshold;
      b.score = score;
    }
  }

  bool accept(std::size_t s) const {
    if constexpr (std::is_same_v<Task, GiniTask>) {
      return true;
    } else {
      const double parent = tot_g_[s] * tot_g_[s] / static_cast<double>(tot_w_[s]);
      return best_[s].score > parent + 1e-12 * (1.0 + std::abs(parent));
    }
  }

  std::vector<double> leaf_values(std::size_t s) const {
    if constexpr (std::is_same_v<Task, GiniTask>) {
      std::vector<double> dist(k_);
      const double w = static_cast<double>(tot_w_[s]);
      for (std::size_t k = 0; k < k_; ++k) dist[k] = static_cast<double>(tot_c_[s * k_ + k]) / w;
      return dist;
    } else {
      return {task_.learning_rate * tot_g_[s] / std::max(tot_h_[s], kHessianFloor)};
    }
  }

  Tree preorder() const {
    Tree tree;
    tree.nodes.reserve(nodes_.size());
    append(tree, 0);
    return tree;
  }

  std::int32_t append(Tree& tree, std::size_t id) const {
    auto pos = static_cast<std::int32_t>(tree.nodes.size());
    tree.nodes.push_back(nodes_[id]);
    if (!nodes_[id].is_leaf()) {
      auto l = append(tree, static_cast<std::size_t>(nodes_[id].left));
      auto r = append(tree, static_cast<std::size_t>(nodes_[id].right));
      tree.nodes[static_cast<std::size_t>(pos)].left = l;
      tree.nodes[static_cast<std::size_t>(pos)].right = r;
    }
    return pos;
  }

  const SparseMatrix& x_;
  const ColumnIndex& cols_;
  std::span<const std::uint32_t> weights_;
  const Task& task_;
  GrowParams params_;
  std::mt19937_64 rng_;
  std::size_t k_ = 1;
  std::vector<TreeNode> nodes_;

  std::vector<std::int64_t> tot_w_, tot_c_, right_w_, right_c_;
  std::vector<double> tot_g_, tot_h_, right_g_, last_;
  std::vector<std::size_t> stamp_;
  std::vector<Best> best_;
};

void check_training_input(const SparseMatrix& x, std::span<const std::uint32_t> y, std::size_t num_classes) {
  if (x.rows() == 0) throw InvalidArgument("cannot fit on empty input");
  if (x.rows() != y.size()) throw InvalidArgument("feature rows and labels differ in length");
  if (num_classes < 2) throw InvalidArgument("need at least 2 classes");
  for (auto label : y)
    if (label >= num_classes) throw InvalidArgument("label out of range");
}

Tree fit_tree_weighted(const SparseMatrix& x, const ColumnIndex& cols, std::span<const std::uint32_t> y,
                       std::span<const std::uint32_t> weights, std::size_t num_classes, const GrowParams& params) {
  GiniTask task{y, num_classes};
  return TreeGrower<GiniTask>(x, cols, weights, task, params).grow();
}

std::string size_string(std::size_t v) { return std::to_string(v); }

}  // namespace

Tree fit_tree(const SparseMatrix& x, std::span<const std::uint32_t> y, std::size_t num_classes,
              const TreeParams& params) {
  check_training_input(x, y, num_classes);
  ColumnIndex cols(x);
  std::vector<std::uint32_t> weights(x.rows(), 1);
  GrowParams grow{params.max_depth, params.min_leaf, params.feature_subsample.per_node(x.cols()), params.seed};
  return fit_tree_weighted(x, cols, y, weights, num_classes, grow);
}

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::single_tree:
      return "single_tree";
    case ModelKind::random_forest:
      return "random_forest";
    case ModelKind::gradient_boosted:
      return "gradient_boosted";
  }
  return "single_tree";
}

ModelKind parse_model_kind(std::string_view text) {
  if (text == "single_tree" || text == "tree") return ModelKind::single_tree;
  if (text == "random_forest" || text == "forest") return ModelKind::random_forest;
  if (text == "gradient_boosted" || text == "gbt") return ModelKind::gradient_boosted;
  throw InvalidArgument("unknown model kind '" + std::string(text) + "'");
}

TreeEnsembleModel fit_single_tree(const SparseMatrix& x, std::span<const std::uint32_t> y,
                                  std::vector<std::string> classes, const TreeParams& params) {
  TreeEnsembleModel model;
  model.kind = ModelKind::single_tree;
  model.trees.push_back(fit_tree(x, y, classes.size(), params));
  model.classes = std::move(classes);
  model.hyperparams = {{"max_depth", size_string(params.max_depth)},
                       {"min_leaf", size_string(params.min_leaf)},
                       {"features_per_node", size_string(params.feature_subsample.per_node(x.cols()))},
                       {"seed", std::to_string(params.seed)}};
  return model;
}

TreeEnsembleModel fit_forest(const SparseMatrix& x, std::span<const std::uint32_t> y,
                             std::vector<std::string> classes, const ForestParams& params) {
  check_training_input(x, y, classes.size());
  if (params.n_trees == 0) throw InvalidArgument("n_trees must be at least 1");
  ColumnIndex cols(x);
  const auto per_node = params.feature_subsample.per_node(x.cols());
  TreeEnsembleModel model;
  model.kind = ModelKind::random_forest;
  model.trees.resize(params.n_trees);
  parallel_for(params.n_trees, params.jobs, [&](std::size_t t) {
    std::seed_seq seq{params.seed, static_cast<std::uint64_t>(t), std::uint64_t{0x5eed}};
    std::mt19937_64 rng(seq);
    std::vector<std::uint32_t> weights(x.rows(), params.bootstrap ? 0 : 1);
    if (params.bootstrap) {
      std::uniform_int_distribution<std::size_t> pick(0, x.rows() - 1);
      for (std::size_t i = 0; i < x.rows(); ++i) ++weights[pick(rng)];
    }
    GrowParams grow{params.max_depth, params.min_leaf, per_node, rng()};
    model.trees[t] = fit_tree_weighted(x, cols, y, weights, classes.size(), grow);
  });
  model.classes = std::move(classes);
  model.hyperparams = {{"n_trees", size_string(params.n_trees)},
                       {"bootstrap", params.bootstrap ? "true" : "false"},
                       {"features_per_node", size_string(per_node)},
                       {"max_depth", size_string(params.max_depth)},
                       {"min_leaf", size_string(params.min_leaf)},
                       {"seed", std::to_string(params.seed)}};
  return model;
}

std::vector<double> softmax(std::span<const double> scores) {
  std::vector<double> p(scores.begin(), scores.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0;
  for (auto& v : p) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : p) v /= sum;
  return p;
}

double softmax_cross_entropy(std::span<const double> scores, std::uint32_t label) {
  const double mx = *std::max_element(scores.begin(), scores.end());
  double sum = 0;
  for (double v : scores) sum += std::exp(v - mx);
  return std::log(sum) + mx - scores[label];
}

std::vector<double> softmax_negative_gradient(std::span<const double> scores, std::uint32_t label) {
  auto p = softmax(scores);
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = (k == label ? 1.0 : 0.0) - p[k];
  return p;
}

TreeEnsembleModel fit_boosted(const SparseMatrix& x, std::span<const std::uint32_t> y,
                              std::vector<std::string> classes, const BoostParams& params) {
  check_training_input(x, y, classes.size());
  if (params.rounds == 0) throw InvalidArgument("rounds must be at least 1");
  if (!(params.learning_rate > 0)) throw InvalidArgument("learning_rate must be positive");
  const auto n = x.rows();
  const auto k_classes = classes.size();
  ColumnIndex cols(x);
  std::vector<std::uint32_t> weights(n, 1);

  TreeEnsembleModel model;
  model.kind = ModelKind::gradient_boosted;
  model.learning_rate = params.learning_rate;
  model.base_scores.assign(k_classes, 0.0);
  {
    std::vector<double> counts(k_classes, 0.0);
    for (auto label : y) counts[label] += 1;
    for (std::size_t k = 0; k < k_classes; ++k)
      model.base_scores[k] = std::log(std::max(counts[k], 0.5) / static_cast<double>(n));
  }

  std::vector<double> raw(n * k_classes);
  for (std::size_t i = 0; i < n; ++i)
    std::copy(model.base_scores.begin(), model.base_scores.end(), raw.begin() + static_cast<std::ptrdiff_t>(i * k_classes));
  std::vector<std::vector<double>> grad(k_classes, std::vector<double>(n)), hess(k_classes, std::vector<double>(n));
  GrowParams grow{params.max_depth, params.min_leaf, 0, params.seed};

  model.trees.reserve(params.rounds * k_classes);
  for (std::size_t round = 0; round < params.rounds; ++round) {
    for (std::size_t i = 0; i < n; ++i) {
      auto p = softmax(std::span<const double>(raw.data() + i * k_classes, k_classes));
      for (std::size_t k = 0; k < k_classes; ++k) {
        grad[k][i] = (y[i] == k ? 1.0 : 0.0) - p[k];
        hess[k][i] = p[k] * (1.0 - p[k]);
      }
    }
    std::vector<Tree> round_trees(k_classes);
    parallel_for(k_classes, params.jobs, [&](std::size_t k) {
      VarianceTask task{grad[k], hess[k], params.learning_rate};
      round_trees[k] = TreeGrower<VarianceTask>(x, cols, weights, task, grow).grow();
    });
    for (std::size_t k = 0; k < k_classes; ++k) {
      for (std::size_t i = 0; i < n; ++i) raw[i * k_classes + k] += round_trees[k].leaf_values(x.row(i))[0];
      model.trees.push_back(std::move(round_trees[k]));
    }
    if (params.on_round) {
      double loss = 0;
      for (std::size_t i = 0; i < n; ++i)
        loss += softmax_cross_entropy(std::span<const double>(raw.data() + i * k_classes, k_classes), y[i]);
      params.on_round(round, loss / static_cast<double>(n));
    }
  }
  model.classes = std::move(classes);
  model.hyperparams = {{"rounds", size_string(params.rounds)},
                       {"learning_rate", format_double(params.learning_rate)},
                       {"max_depth", size_string(params.max_depth)},
                       {"min_leaf", size_string(params.min_leaf)},
                       {"seed", std::to_string(params.seed)}};
  return model;
}

// --- prediction ------------------------------------------------------------------

void check_vocabulary(const TreeEnsembleModel& model, std::string_view vocab_hash) {
  if (model.vocab_hash != vocab_hash)
    throw VocabularyMismatch("model was trained on vocabulary " + model.vocab_hash.substr(0, 12) +
                             " but features use " + std::string(vocab_hash.substr(0, 12)));
}

Prediction predict(const TreeEnsembleModel& model, std::span<const SparseEntry> x) {
  const auto k_classes = model.num_classes();
  if (model.trees.empty()) throw InvalidArgument("model has no trees");
  std::vector<double> scores(k_classes, 0.0);
  switch (model.kind) {
    case ModelKind::single_tree:
    case ModelKind::random_forest: {
      for (const auto& t : model.trees) {
        const auto& leaf = t.leaf_values(x);
        for (std::size_t k = 0; k < k_classes; ++k) scores[k] += leaf[k];
      }
      double sum = std::accumulate(scores.begin(), scores.end(), 0.0);
      for (auto& s : scores) s /= sum;
      break;
    }
    case ModelKind::gradient_boosted: {
      std::vector<double> raw = model.base_scores;
      for (std::size_t t = 0; t < model.trees.size(); ++t) raw[t % k_classes] += model.trees[t].leaf_values(x)[0];
      scores = softmax(raw);
      break;
    }
  }
  Prediction p;
  p.class_index = static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
  p.class_name = model.classes[p.class_index];
  p.scores = std::move(scores);
  return p;
}

Prediction predict(const TreeEnsembleModel& model, std::span<const SparseEntry> x, std::string_view vocab_hash) {
  check_vocabulary(model, vocab_hash);
  return predict(model, x);
}

std::vector<Prediction> predict_batch(const TreeEnsembleModel& model, const SparseMatrix& x, std::size_t jobs) {
  std::vector<Prediction> out(x.rows());
  parallel_for(x.rows(), jobs, [&](std::size_t i) { out[i] = predict(model, x.row(i)); });
  return out;
}

// --- persistence -----------------------------------------------------------------

namespace {

constexpr std::string_view kMagic = "sentinel-model";

std::string model_body(const TreeEnsembleModel& m) {
  std::string out;
  out += "kind ";
  out += to_string(m.kind);
  out += "\nclasses";
  for (const auto& c : m.classes) out += " " + c;
  out += "\nvocab_hash " + (m.vocab_hash.empty() ? std::string("-") : m.vocab_hash);
  out += "\nlearning_rate " + format_double(m.learning_rate);
  out += "\nhyperparams";
  for (const auto& [k, v] : m.hyperparams) out += " " + k + "=" + v;
  out += "\nbase_scores";
  for (double v : m.base_scores) out += " " + format_double(v);
  out += "\ntrees " + std::to_string(m.trees.size()) + "\n";
  for (const auto& t : m.trees) {
    out += "tree " + std::to_string(t.nodes.size()) + "\n";
    for (const auto& node : t.nodes) {
      if (node.is_leaf()) {
        out += "L";
        for (double v : node.values) out += " " + format_double(v);
      } else {
        out += "S " + std::to_string(node.feature) + " " + format_double(node.threshold) + " " +
               std::to_string(node.left) + " " + std::to_string(node.right);
      }
      out += "\n";
    }
  }
  return out;
}

std::string model_text(const TreeEnsembleModel& m) {
  if (m.classes.size() < 2) throw InvalidArgument("model needs at least 2 classes");
  auto body = model_body(m);
  return std::string(kMagic) + " " + std::to_string(kModelFormatVersion) + "\ndigest " + sha256_hex(body) + "\n" + body;
}

[[noreturn]] void corrupt(const std::string& what) { throw CorruptionError("model file: " + what); }

std::vector<std::string_view> words_after(std::string_view line, std::string_view key) {
  if (!line.starts_with(key)) corrupt("expected '" + std::string(key) + "'");
  auto rest = line.substr(key.size());
  std::vector<std::string_view> out;
  for (auto w : detail::split(rest, ' '))
    if (!w.empty()) out.push_back(w);
  return out;
}

double to_double(std::string_view s) {
  auto v = detail::parse_double(s);
  if (!v) corrupt("bad number '" + std::string(s) + "'");
  return *v;
}

template <typename Int>
Int to_int(std::string_view s) {
  auto v = detail::parse_int<Int>(s);
  if (!v) corrupt("bad integer '" + std::string(s) + "'");
  return *v;
}

TreeEnsembleModel parse_model(std::string_view text) {
  detail::LineReader lines(text);
  std::string_view line;
  if (!lines.next(line) || !line.starts_with(kMagic)) corrupt("missing header");
  auto version = detail::parse_int<int>(detail::trim(line.substr(kMagic.size())));
  if (!version) corrupt("bad version field");
  if (*version != kModelFormatVersion)
    throw VersionError("model format version " + std::to_string(*version) + " is not supported (expected " +
                       std::to_string(kModelFormatVersion) + ")");
  if (!lines.next(line)) corrupt("missing digest");
  auto digest = words_after(line, "digest");
  if (digest.size() != 1) corrupt("bad digest line");
  auto body_start = static_cast<std::size_t>(line.data() + line.size() + 1 - text.data());
  auto body = body_start <= text.size() ? text.substr(body_start) : std::string_view{};
  if (sha256_hex(body) != digest[0]) corrupt("content digest mismatch (truncated or modified)");

  TreeEnsembleModel m;
  auto next = [&](std::string_view key) {
    if (!lines.next(line)) corrupt("unexpected end");
    return words_after(line, key);
  };
  auto kind = next("kind");
  if (kind.size() != 1) corrupt("bad kind");
  try {
    m.kind = parse_model_kind(kind[0]);
  } catch (const InvalidArgument& e) {
    corrupt(e.what());
  }
  for (auto c : next("classes")) m.classes.emplace_back(c);
  auto vh = next("vocab_hash");
  if (vh.size() != 1) corrupt("bad vocab_hash");
  m.vocab_hash = vh[0] == "-" ? std::string() : std::string(vh[0]);
  auto lr = next("learning_rate");
  if (lr.size() != 1) corrupt("bad learning_rate");
  m.learning_rate = to_double(lr[0]);
  for (auto kv : next("hyperparams")) {
    auto eq = kv.find('=');
    if (eq == std::string_view::npos) corrupt("bad hyperparameter");
    m.hyperparams.emplace(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
  }
  for (auto v : next("base_scores")) m.base_scores.push_back(to_double(v));
  auto tc = next("trees");
  if (tc.size() != 1) corrupt("bad tree count");
  auto tree_count = to_int<std::size_t>(tc[0]);
  const auto k_classes = m.classes.size();
  if (k_classes < 2) corrupt("fewer than 2 classes");
  for (std::size_t t = 0; t < tree_count; ++t) {
    auto header = next("tree");
    if (header.size() != 1) corrupt("bad tree header");
    auto count = to_int<std::size_t>(header[0]);
    Tree tree;
    tree.nodes.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      if (!lines.next(line) || line.empty()) corrupt("unexpected end of tree");
      TreeNode node;
      if (line[0] == 'L') {
        for (auto v : words_after(line, "L")) node.values.push_back(to_double(v));
        auto expected = m.kind == ModelKind::gradient_boosted ? 1 : k_classes;
        if (node.values.size() != expected) corrupt("leaf has wrong arity");
      } else {
        auto f = words_after(line, "S");
        if (f.size() != 4) corrupt("bad split node");
        node.feature = to_int<std::int32_t>(f[0]);
        node.threshold = to_double(f[1]);
        node.left = to_int<std::int32_t>(f[2]);
        node.right = to_int<std::int32_t>(f[3]);
        if (node.feature < 0 || node.left <= static_cast<std::int32_t>(i) || node.right <= static_cast<std::int32_t>(i) ||
            node.left >= static_cast<std::int32_t>(count) || node.right >= static_cast<std::int32_t>(count))
          corrupt("bad child index");
      }
      tree.nodes.push_back(std::move(node));
    }
    m.trees.push_back(std::move(tree));
  }
  if (lines.next(line)) corrupt("trailing content");
  if (m.kind == ModelKind::gradient_boosted && (m.base_scores.size() != k_classes || m.trees.size() % k_classes))
    corrupt("boosted model shape does not match its classes");
  return m;
}

}  // namespace

void save_model(const TreeEnsembleModel& model, const std::filesystem::path& path) {
  detail::write_file(path.string(), model_text(model));
}

void save_model(const TreeEnsembleModel& model, std::ostream& out) {
  out << model_text(model);
  if (!out) throw IoError("model write failed");
}

TreeEnsembleModel load_model(const std::filesystem::path& path) {
  return parse_model(detail::read_file(path.string()));
}

TreeEnsembleModel load_model(std::istream& in) {
  std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_model(text);
}

}  // namespace sentinel
