#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sentinel/trace.hpp"

namespace sentinel {

/// Training label of one time slice.
///
/// Slices before the injection are benign, the slice holding the injection is
/// malicious, and later slices are withheld: the malware is on the host but
/// may be idle, so they are kept out of training and reported separately.
struct SliceLabel {
  enum class Kind { benign, malicious, withheld };

  Kind kind = Kind::benign;
  std::string class_name;  ///< empty for benign

  static SliceLabel benign() { return {}; }
  static SliceLabel malicious(std::string c) { return {Kind::malicious, std::move(c)}; }
  static SliceLabel withheld(std::string c) { return {Kind::withheld, std::move(c)}; }

  bool is_benign() const noexcept { return kind == Kind::benign; }
  bool is_withheld() const noexcept { return kind == Kind::withheld; }

  /// Class a classifier should output for this slice ("benign" or the class).
  std::string target() const;

  bool operator==(const SliceLabel&) const = default;
};

inline constexpr std::string_view kBenignClass = "benign";

/// "benign", "malicious:<class>" or "withheld:<class>".
std::string to_string(const SliceLabel& label);
SliceLabel parse_slice_label(std::string_view text);

/// Index of the slice holding timestamp `ts_ns`: floor(ts * num_slices / duration).
std::size_t slice_index_of(std::int64_t ts_ns, std::int64_t duration_ns, std::size_t num_slices);

std::vector<SliceLabel> label_slices(const TraceMeta& meta, std::size_t num_slices);

// --- consensus class labeling over multi-engine scan reports ---

struct EngineVerdict {
  std::string engine;
  std::string raw_label;
};

struct ScanReport {
  std::string sample_id;
  std::vector<EngineVerdict> verdicts;
};

/// Reads a JSON report: {"sample_id": "...", "verdicts": [{"engine": "...", "label": "..."}, ...]}.
/// Engines must be unique within a report.
ScanReport read_scan_report(const std::filesystem::path& path);
ScanReport parse_scan_report(std::string_view json_text);

/// Lowercase vendor token -> canonical class name.
using AliasTable = std::map<std::string, std::string, std::less<>>;

/// `token<TAB>class` lines; blank lines and `#` comments ignored.
AliasTable parse_alias_table(std::string_view text);
AliasTable load_alias_table(const std::filesystem::path& path);

/// The alias table shipped with the tool.
const AliasTable& default_alias_table();

/// Lowercased alphanumeric tokens of a vendor label.
std::vector<std::string> tokenize_label(std::string_view raw_label);

/// Plurality vote over engines, one vote per engine per class. Returns
/// nullopt when no token maps to a class or the top count is tied.
/// Throws InvalidArgument on an empty report.
std::optional<std::string> consensus_class(const ScanReport& report, const AliasTable& aliases);

struct ClassCatalog {
  std::vector<std::string> classes{"trojan", "virus", "backdoor", "rootkit",
                                   "miner",  "grayware", "worm"};
  std::size_t min_samples = 100;
};

struct LabeledSample {
  std::string sample_id;
  std::optional<std::string> class_name;  ///< nullopt = no consensus ("none")

  bool operator==(const LabeledSample&) const = default;
};

struct PruneResult {
  std::vector<LabeledSample> retained;
  /// Surviving classes, most frequent first (ties by name).
  std::vector<std::string> classes;
  std::map<std::string, std::size_t> class_counts;  ///< before pruning
};

/// Drops unlabeled samples and classes with fewer than `catalog.min_samples`
/// members. Throws InvalidArgument when fewer than two classes survive.
PruneResult prune_classes(std::span<const LabeledSample> samples, const ClassCatalog& catalog);

}  // namespace sentinel
