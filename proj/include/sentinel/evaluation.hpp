#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sentinel/labeling.hpp"

namespace sentinel {

/// K x K counts, rows = truth, columns = prediction. The optional negative
/// class (benign) is excluded from precision/recall/F1 averaging.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  /// `negative` defaults to "benign" when that class is listed.
  explicit ConfusionMatrix(std::vector<std::string> classes,
                           std::optional<std::string> negative = std::string(kBenignClass));
  ConfusionMatrix(std::vector<std::string> classes,
                  std::vector<std::vector<std::uint64_t>> counts,
                  std::optional<std::string> negative = std::string(kBenignClass));

  const std::vector<std::string>& classes() const noexcept { return classes_; }
  std::size_t size() const noexcept { return classes_.size(); }
  std::optional<std::size_t> negative() const noexcept { return negative_; }
  std::size_t index_of(std::string_view name) const;

  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth][predicted]; }
  const std::vector<std::vector<std::uint64_t>>& counts() const noexcept { return counts_; }

  void add(std::size_t truth, std::size_t predicted, std::uint64_t n = 1);
  void add(std::string_view truth, std::string_view predicted, std::uint64_t n = 1);

  std::uint64_t total() const;
  std::uint64_t correct() const;

 private:
  std::vector<std::string> classes_;
  std::vector<std::vector<std::uint64_t>> counts_;
  std::optional<std::size_t> negative_;
};

/// A ratio in [0,1], or NA (nullopt) when its denominator is zero.
using MetricValue = std::optional<double>;

enum class Averaging { macro, weighted };
std::string_view to_string(Averaging a);
Averaging parse_averaging(std::string_view text);

struct ClassMetrics {
  std::string class_name;
  std::uint64_t support = 0;
  MetricValue precision;
  MetricValue recall;
  MetricValue f1;
};

/// Per-class precision TP/(TP+FP), recall TP/(TP+FN) and F1 2TP/(2TP+FP+FN),
/// for every class.
std::vector<ClassMetrics> per_class_metrics(const ConfusionMatrix& confusion);

struct Metrics {
  double accuracy = 0;
  MetricValue precision;
  MetricValue recall;
  MetricValue f1;
};

/// Accuracy = trace / total. Precision, recall and F1 are averaged over the
/// positive (non-negative) classes whose value is defined. They are NA when
/// no positive class occurs in the truth. Throws InvalidArgument on an empty
/// matrix.
Metrics metrics(const ConfusionMatrix& confusion, Averaging averaging = Averaging::macro);

/// Merges every positive class into "malicious"; the negative class is kept.
ConfusionMatrix collapse_to_detection(const ConfusionMatrix& confusion);

struct SlicePrediction {
  std::string trace_id;
  std::size_t slice_index = 0;
  SliceLabel truth;
  std::string predicted;  ///< class name or "benign"
};

struct SliceRow {
  std::size_t slice_index = 0;
  std::string label;  ///< benign, malicious, withheld or mixed
  std::size_t samples = 0;
  Metrics metrics;
};

struct EvalReport {
  Averaging averaging = Averaging::macro;
  std::vector<std::string> classes;
  /// Benign and malicious (injection) slices, one row per slice index.
  std::vector<SliceRow> per_slice;
  /// Withheld slices, one row per slice index; never part of `aggregate`.
  std::vector<SliceRow> withheld;
  /// Headline: every injection slice.
  Metrics inject;
  std::size_t inject_samples = 0;
  /// Every benign and malicious slice.
  Metrics aggregate;
  std::size_t aggregate_samples = 0;
  ConfusionMatrix confusion;
  ConfusionMatrix inject_confusion;
};

/// Groups predictions by slice index. Throws InvalidArgument when traces
/// contribute different slice indices or the input is empty.
EvalReport per_slice_report(std::span<const SlicePrediction> predictions,
                            std::vector<std::string> classes,
                            Averaging averaging = Averaging::macro);

/// Same report after merging all malware classes into one positive class.
EvalReport collapse_to_detection(std::span<const SlicePrediction> predictions,
                                 Averaging averaging = Averaging::macro);

std::string format_percent(double ratio);  ///< "94.30"
std::string format_ratio(const MetricValue& v);  ///< "0.95" or "NA"

/// per_slice.csv, withheld.csv, confusion.csv and report.json in `dir`;
/// files are prefixed with `prefix`.
void write_report(const EvalReport& report, const std::filesystem::path& dir,
                  std::string_view prefix = "");

std::string report_json(const EvalReport& report);

}  // namespace sentinel
