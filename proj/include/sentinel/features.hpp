#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sentinel/labeling.hpp"
#include "sentinel/syscalls.hpp"
#include "sentinel/trace.hpp"

namespace sentinel {

inline constexpr std::size_t kMaxNGram = 5;

/// Ordered tuple of syscall names.
using NGram = std::vector<std::string>;
using NGramCounts = std::map<NGram, std::uint64_t>;

/// Splits a trace into `num_slices` equal time windows. An event at t lands in
/// floor(t * num_slices / duration). Throws InvalidArgument on zero duration
/// or zero slices.
std::vector<std::vector<SyscallEvent>> slice_events(const Trace& trace, std::size_t num_slices);

/// Stride-1 sliding window of width n over the syscall names.
NGramCounts extract_ngrams(std::span<const SyscallEvent> events, std::size_t n);

std::string join_ngram(const NGram& gram, char sep = '|');
NGram split_ngram(std::string_view text, char sep = '|');

struct VocabPolicy {
  enum class Kind { intersection, min_trace_fraction };
  Kind kind = Kind::intersection;
  double fraction = 1.0;  ///< used by min_trace_fraction

  static VocabPolicy intersection() { return {}; }
  static VocabPolicy min_fraction(double f) { return {Kind::min_trace_fraction, f}; }

  /// Units an n-gram must appear in, out of `units`.
  std::size_t required_units(std::size_t units) const;
};

std::string to_string(const VocabPolicy& policy);
VocabPolicy parse_vocab_policy(std::string_view text);

/// Admitted n-grams in lexicographic order; position is the feature column.
class NGramVocabulary {
 public:
  NGramVocabulary() = default;
  /// Sorts and deduplicates `ngrams`. Throws InvalidArgument when a gram's
  /// length differs from n.
  NGramVocabulary(std::size_t n, std::vector<NGram> ngrams, std::string policy = "intersection");

  std::size_t n() const noexcept { return n_; }
  std::size_t size() const noexcept { return ngrams_.size(); }
  bool empty() const noexcept { return ngrams_.empty(); }
  const std::vector<NGram>& ngrams() const noexcept { return ngrams_; }
  const std::string& policy() const noexcept { return policy_; }

  std::optional<std::uint32_t> column(const NGram& gram) const;

  /// Digest of n and the column order. Binds models to this feature space.
  const std::string& hash() const noexcept { return hash_; }

 private:
  std::size_t n_ = 0;
  std::vector<NGram> ngrams_;
  std::map<NGram, std::uint32_t, std::less<>> index_;
  std::string policy_;
  std::string hash_;
};

/// Counts in how many units (traces or slices) each n-gram occurs and admits
/// those meeting the policy.
class VocabularyBuilder {
 public:
  explicit VocabularyBuilder(std::size_t n) : n_(n) {}

  void add_unit(const NGramCounts& unit);
  /// Every gram in `grams` is counted once for this unit.
  void add_unit(std::span<const NGram> grams);

  std::size_t units() const noexcept { return units_; }

  /// Throws InvalidArgument when no units were added or nothing survives.
  NGramVocabulary finish(const VocabPolicy& policy) const;

 private:
  std::size_t n_;
  std::size_t units_ = 0;
  std::map<NGram, std::size_t> unit_counts_;
};

NGramVocabulary build_vocabulary(std::span<const NGramCounts> units, std::size_t n,
                                 const VocabPolicy& policy);

struct SparseEntry {
  std::uint32_t column = 0;
  double value = 0;

  bool operator==(const SparseEntry&) const = default;
};

/// Sorted by column, no duplicate columns, no explicit zeros.
using SparseVector = std::vector<SparseEntry>;

/// Copies in-vocabulary counts to their columns and drops the rest.
SparseVector vectorize(const NGramCounts& slice_ngrams, const NGramVocabulary& vocab);

enum class FeatureValues { raw, binary, normalized };
std::string_view to_string(FeatureValues v);
FeatureValues parse_feature_values(std::string_view text);

/// Transforms raw counts in place. `ngram_total` is the number of n-grams in
/// the slice before vocabulary filtering (used by `normalized`).
void apply_feature_values(SparseVector& v, FeatureValues mode, std::uint64_t ngram_total);

struct SliceFeatures {
  std::string trace_id;
  std::size_t slice_index = 0;
  SparseVector counts;
  SliceLabel label;

  bool operator==(const SliceFeatures&) const = default;
};

// --- encoded fast path -------------------------------------------------------

/// n-gram counts keyed by the base-|set| encoding of the id tuple, sorted by key.
using EncodedCounts = std::vector<std::pair<std::uint64_t, std::uint32_t>>;

/// Streaming n-gram counter over syscall ids. Uses a dense table when
/// base^n is small and a hash map otherwise.
class NGramCounter {
 public:
  NGramCounter(std::size_t base, std::size_t n);

  void push(SyscallId id);
  /// Forgets the history window and all counts.
  void reset();

  std::uint64_t total() const noexcept { return total_; }
  EncodedCounts counts() const;

 private:
  std::size_t n_;
  std::uint64_t modulus_;
  std::uint64_t base_;
  std::uint64_t key_ = 0;
  std::size_t filled_ = 0;
  std::uint64_t total_ = 0;
  bool dense_;
  std::vector<std::uint32_t> table_;
  std::vector<std::uint64_t> touched_;
  std::unordered_map<std::uint64_t, std::uint32_t> sparse_;
};

/// Maps encoded n-gram keys to vocabulary columns for one syscall set.
class VocabularyIndex {
 public:
  VocabularyIndex(const NGramVocabulary& vocab, const SyscallSet& set);

  const NGramVocabulary& vocabulary() const noexcept { return *vocab_; }
  std::optional<std::uint32_t> column(std::uint64_t key) const;

 private:
  const NGramVocabulary* vocab_;
  std::unordered_map<std::uint64_t, std::uint32_t> columns_;
};

struct FeaturizerOptions {
  std::size_t n = 3;
  std::size_t num_slices = 10;
  FeatureValues values = FeatureValues::raw;
};

struct SliceScan {
  EncodedCounts ngrams;
  std::size_t events = 0;    ///< all events in the slice
  std::size_t filtered = 0;  ///< events kept by the syscall filter
};

struct TraceScan {
  TraceMeta meta;
  std::vector<SliceScan> slices;

  std::size_t events() const;
  std::size_t dropped() const;
};

/// Filter + slice + n-gram extraction + vectorization over one syscall set.
class Featurizer {
 public:
  Featurizer(SyscallSet set, FeaturizerOptions options);

  const SyscallSet& syscalls() const noexcept { return set_; }
  const FeaturizerOptions& options() const noexcept { return options_; }

  TraceScan scan(const Trace& trace) const;

  NGram decode(std::uint64_t key) const;
  std::uint64_t encode(const NGram& gram) const;

  /// Distinct n-grams of a whole trace (one vocabulary unit per trace).
  std::vector<NGram> trace_ngrams(const TraceScan& scan) const;
  /// Distinct n-grams of each slice.
  std::vector<std::vector<NGram>> slice_ngrams(const TraceScan& scan) const;

  SparseVector vectorize(const SliceScan& slice, const VocabularyIndex& index) const;
  std::vector<SliceFeatures> featurize(const TraceScan& scan, const VocabularyIndex& index) const;

 private:
  SyscallSet set_;
  FeaturizerOptions options_;
};

// --- files -----------------------------------------------------------------

/// `#vocab n=<n> policy=<p> size=<k> hash=<h>` then one `a|b|c` n-gram per
/// line; the i-th n-gram line is column i.
void write_vocabulary(const NGramVocabulary& vocab, const std::filesystem::path& path);
void write_vocabulary(const NGramVocabulary& vocab, std::ostream& out);
NGramVocabulary read_vocabulary(const std::filesystem::path& path);
NGramVocabulary read_vocabulary(std::istream& in);

struct FeatureFileHeader {
  std::size_t n = 3;
  std::size_t num_slices = 10;
  std::string vocab_hash;
  FeatureValues values = FeatureValues::raw;

  bool operator==(const FeatureFileHeader&) const = default;
};

struct FeatureSet {
  FeatureFileHeader header;
  std::vector<SliceFeatures> rows;
};

/// `#features n=.. slices=.. vocab_hash=.. values=..` then one line per slice:
/// `trace_id<TAB>slice_index<TAB>label<TAB>col:val col:val ...`.
void write_features(const FeatureSet& features, const std::filesystem::path& path);
void write_features(const FeatureSet& features, std::ostream& out);
FeatureSet read_features(const std::filesystem::path& path);
FeatureSet read_features(std::istream& in);

/// Shortest decimal that round-trips to the same double.
std::string format_double(double v);

}  // namespace sentinel
