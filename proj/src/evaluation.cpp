#include "sentinel/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "json.hpp"
#include "sentinel/error.hpp"
#include "text_util.hpp"

namespace sentinel {

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> classes, std::optional<std::string> negative)
    : ConfusionMatrix(classes, std::vector<std::vector<std::uint64_t>>(classes.size(),
                                                                       std::vector<std::uint64_t>(classes.size(), 0)),
                      std::move(negative)) {}

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> classes, std::vector<std::vector<std::uint64_t>> counts,
                                 std::optional<std::string> negative)
    : classes_(std::move(classes)), counts_(std::move(counts)) {
  std::set<std::string_view> seen;
  for (const auto& c : classes_)
    if (!seen.insert(c).second) throw InvalidArgument("duplicate class '" + c + "'");
  if (counts_.size() != classes_.size()) throw InvalidArgument("confusion matrix is not K x K");
  for (const auto& row : counts_)
    if (row.size() != classes_.size()) throw InvalidArgument("confusion matrix is not K x K");
  if (negative) {
    auto it = std::find(classes_.begin(), classes_.end(), *negative);
    if (it != classes_.end()) negative_ = static_cast<std::size_t>(it - classes_.begin());
  }
}

std::size_t ConfusionMatrix::index_of(std::string_view name) const {
  auto it = std::find(classes_.begin(), classes_.end(), name);
  if (it == classes_.end()) throw InvalidArgument("unknown class '" + std::string(name) + "'");
  return static_cast<std::size_t>(it - classes_.begin());
}

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted, std::uint64_t n) {
  if (truth >= size() || predicted >= size()) throw InvalidArgument("class index out of range");
  counts_[truth][predicted] += n;
}

void ConfusionMatrix::add(std::string_view truth, std::string_view predicted, std::uint64_t n) {
  add(index_of(truth), index_of(predicted), n);
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (const auto& row : counts_)
    for (auto v : row) t += v;
  return t;
}

std::uint64_t ConfusionMatrix::correct() const {
  std::uint64_t t = 0;
  for (std::size_t i = 0; i < size(); ++i) t += counts_[i][i];
  return t;
}

std::string_view to_string(Averaging a) { return a == Averaging::macro ? "macro" : "weighted"; }

Averaging parse_averaging(std::string_view text) {
  if (text == "macro") return Averaging::macro;
  if (text == "weighted") return Averaging::weighted;
  throw InvalidArgument("unknown averaging '" + std::string(text) + "' (expected macro or weighted)");
}

std::vector<ClassMetrics> per_class_metrics(const ConfusionMatrix& confusion) {
  std::vector<ClassMetrics> out;
  const auto k = confusion.size();
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t tp = confusion.at(c, c), fp = 0, fn = 0;
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += confusion.at(o, c);
      fn += confusion.at(c, o);
    }
    ClassMetrics m;
    m.class_name = confusion.classes()[c];
    m.support = tp + fn;
    if (tp + fp > 0) m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (tp + fn > 0) m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    // 2TP/(2TP+FP+FN) equals 2PR/(P+R) where both are defined and stays
    // defined (as 0) for a class that is present but never predicted.
    if (2 * tp + fp + fn > 0) m.f1 = static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
    out.push_back(std::move(m));
  }
  return out;
}

Metrics metrics(const ConfusionMatrix& confusion, Averaging averaging) {
  const auto total = confusion.total();
  if (total == 0) throw InvalidArgument("cannot compute metrics of an empty confusion matrix");
  Metrics out;
  out.accuracy = static_cast<double>(confusion.correct()) / static_cast<double>(total);

  auto per_class = per_class_metrics(confusion);
  const auto negative = confusion.negative();
  bool positive_truth = false;
  for (std::size_t c = 0; c < per_class.size(); ++c)
    if (c != negative && per_class[c].support > 0) positive_truth = true;
  if (!positive_truth) return out;

  auto average = [&](MetricValue ClassMetrics::*field) -> MetricValue {
    double sum = 0, weight = 0;
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      if (c == negative) continue;
      const auto& v = per_class[c].*field;
      if (!v) continue;
      double w = averaging == Averaging::macro ? 1.0 : static_cast<double>(per_class[c].support);
      sum += w * *v;
      weight += w;
    }
    if (weight == 0) return std::nullopt;
    return sum / weight;
  };
  out.precision = average(&ClassMetrics::precision);
  out.recall = average(&ClassMetrics::recall);
  out.f1 = average(&ClassMetrics::f1);
  return out;
}

namespace {

constexpr std::string_view kMaliciousClass = "malicious";

std::string detection_class(std::string_view name) {
  return name == kBenignClass ? std::string(kBenignClass) : std::string(kMaliciousClass);
}

std::string_view kind_name(SliceLabel::Kind kind) {
  switch (kind) {
    case SliceLabel::Kind::benign:
      return "benign";
    case SliceLabel::Kind::malicious:
      return "malicious";
    case SliceLabel::Kind::withheld:
      return "withheld";
  }
  return "benign";
}

}  // namespace

ConfusionMatrix collapse_to_detection(const ConfusionMatrix& confusion) {
  ConfusionMatrix out({std::string(kBenignClass), std::string(kMaliciousClass)});
  for (std::size_t t = 0; t < confusion.size(); ++t)
    for (std::size_t p = 0; p < confusion.size(); ++p) {
      auto v = confusion.at(t, p);
      if (v) out.add(detection_class(confusion.classes()[t]), detection_class(confusion.classes()[p]), v);
    }
  return out;
}

EvalReport per_slice_report(std::span<const SlicePrediction> predictions, std::vector<std::string> classes,
                            Averaging averaging) {
  if (predictions.empty()) throw InvalidArgument("no predictions to evaluate");
  std::map<std::string, std::set<std::size_t>> slices_of_trace;
  for (const auto& p : predictions) slices_of_trace[p.trace_id].insert(p.slice_index);
  const auto& reference = slices_of_trace.begin()->second;
  for (const auto& [trace, slices] : slices_of_trace)
    if (slices != reference)
      throw InvalidArgument("trace " + trace + " contributes different slice indices than " +
                            slices_of_trace.begin()->first);

  EvalReport report;
  report.averaging = averaging;
  report.classes = classes;
  report.confusion = ConfusionMatrix(classes);
  report.inject_confusion = ConfusionMatrix(classes);

  struct Group {
    ConfusionMatrix confusion;
    std::set<SliceLabel::Kind> kinds;
    std::size_t samples = 0;
  };
  std::map<std::size_t, Group> live, withheld;
  for (const auto& p : predictions) {
    auto truth = p.truth.target();
    auto& groups = p.truth.is_withheld() ? withheld : live;
    auto [it, inserted] = groups.try_emplace(p.slice_index, Group{ConfusionMatrix(classes), {}, 0});
    it->second.confusion.add(truth, p.predicted);
    it->second.kinds.insert(p.truth.kind);
    ++it->second.samples;
    if (p.truth.is_withheld()) continue;
    report.confusion.add(truth, p.predicted);
    ++report.aggregate_samples;
    if (p.truth.kind == SliceLabel::Kind::malicious) {
      report.inject_confusion.add(truth, p.predicted);
      ++report.inject_samples;
    }
  }
  auto rows = [&](const std::map<std::size_t, Group>& groups) {
    std::vector<SliceRow> out;
    for (const auto& [index, g] : groups) {
      SliceRow row;
      row.slice_index = index;
      row.label = g.kinds.size() == 1 ? std::string(kind_name(*g.kinds.begin())) : "mixed";
      row.samples = g.samples;
      row.metrics = metrics(g.confusion, averaging);
      out.push_back(std::move(row));
    }
    return out;
  };
  report.per_slice = rows(live);
  report.withheld = rows(withheld);
  if (report.aggregate_samples) report.aggregate = metrics(report.confusion, averaging);
  if (report.inject_samples) report.inject = metrics(report.inject_confusion, averaging);
  return report;
}

EvalReport collapse_to_detection(std::span<const SlicePrediction> predictions, Averaging averaging) {
  std::vector<SlicePrediction> binary;
  binary.reserve(predictions.size());
  for (const auto& p : predictions) {
    SlicePrediction b = p;
    if (!b.truth.is_benign()) b.truth.class_name = std::string(kMaliciousClass);
    b.predicted = detection_class(p.predicted);
    binary.push_back(std::move(b));
  }
  return per_slice_report(binary, {std::string(kBenignClass), std::string(kMaliciousClass)}, averaging);
}

std::string format_percent(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", ratio * 100.0);
  return buf;
}

std::string format_ratio(const MetricValue& v) {
  if (!v) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v);
  return buf;
}

namespace {

std::string rows_csv(const std::vector<SliceRow>& rows) {
  std::string out = "minute,label,samples,accuracy,precision,recall,f1\n";
  for (const auto& r : rows) {
    out += std::to_string(r.slice_index + 1) + "," + r.label + "," + std::to_string(r.samples) + "," +
           format_percent(r.metrics.accuracy) + "," + format_ratio(r.metrics.precision) + "," +
           format_ratio(r.metrics.recall) + "," + format_ratio(r.metrics.f1) + "\n";
  }
  return out;
}

std::string confusion_csv(const ConfusionMatrix& m) {
  std::string out = "truth\\predicted";
  for (const auto& c : m.classes()) out += "," + c;
  out += "\n";
  for (std::size_t t = 0; t < m.size(); ++t) {
    out += m.classes()[t];
    for (std::size_t p = 0; p < m.size(); ++p) out += "," + std::to_string(m.at(t, p));
    out += "\n";
  }
  return out;
}

nlohmann::ordered_json metric_json(const Metrics& m) {
  auto ratio = [](const MetricValue& v) -> nlohmann::ordered_json {
    if (!v) return "NA";
    return *v;
  };
  return {{"accuracy", m.accuracy}, {"precision", ratio(m.precision)}, {"recall", ratio(m.recall)}, {"f1", ratio(m.f1)}};
}

nlohmann::ordered_json rows_json(const std::vector<SliceRow>& rows) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    auto j = metric_json(r.metrics);
    j["slice_index"] = r.slice_index;
    j["label"] = r.label;
    j["samples"] = r.samples;
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace

std::string report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["averaging"] = to_string(report.averaging);
  j["classes"] = report.classes;
  j["inject"] = metric_json(report.inject);
  j["inject"]["samples"] = report.inject_samples;
  j["aggregate"] = metric_json(report.aggregate);
  j["aggregate"]["samples"] = report.aggregate_samples;
  j["per_slice"] = rows_json(report.per_slice);
  j["withheld"] = rows_json(report.withheld);
  j["confusion"] = report.confusion.counts();
  j["inject_confusion"] = report.inject_confusion.counts();
  return j.dump(2) + "\n";
}

void write_report(const EvalReport& report, const std::filesystem::path& dir, std::string_view prefix) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  auto path = [&](std::string_view name) { return (dir / (std::string(prefix) + std::string(name))).string(); };
  detail::write_file(path("per_slice.csv"), rows_csv(report.per_slice));
  detail::write_file(path("withheld.csv"), rows_csv(report.withheld));
  detail::write_file(path("confusion.csv"), confusion_csv(report.confusion));
  detail::write_file(path("inject_confusion.csv"), confusion_csv(report.inject_confusion));
  std::string summary = "scope,samples,accuracy,precision,recall,f1\n";
  auto line = [&](std::string_view scope, std::size_t n, const Metrics& m) {
    summary += std::string(scope) + "," + std::to_string(n) + "," + (n ? format_percent(m.accuracy) : "NA") + "," +
               format_ratio(m.precision) + "," + format_ratio(m.recall) + "," + format_ratio(m.f1) + "\n";
  };
  line("inject", report.inject_samples, report.inject);
  line("aggregate", report.aggregate_samples, report.aggregate);
  detail::write_file(path("summary.csv"), summary);
  detail::write_file(path("report.json"), report_json(report));
}

}  // namespace sentinel
