#include "sentinel/features.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "sentinel/digest.hpp"
#include "sentinel/error.hpp"
#include "text_util.hpp"

namespace sentinel {

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::vector<std::vector<SyscallEvent>> slice_events(const Trace& trace, std::size_t num_slices) {
  if (num_slices == 0) throw InvalidArgument("num_slices must be positive");
  if (trace.meta.duration_ns <= 0) throw InvalidArgument("trace has zero duration");
  std::vector<std::vector<SyscallEvent>> slices(num_slices);
  for (const auto& e : trace.events) {
    auto idx = slice_index_of(e.ts_ns, trace.meta.duration_ns, num_slices);
    if (idx >= num_slices) throw InvalidArgument("event beyond trace duration");
    slices[idx].push_back(e);
  }
  return slices;
}

NGramCounts extract_ngrams(std::span<const SyscallEvent> events, std::size_t n) {
  if (n == 0) throw InvalidArgument("n must be at least 1");
  NGramCounts counts;
  if (events.size() < n) return counts;
  NGram gram(n);
  for (std::size_t i = 0; i + n <= events.size(); ++i) {
    for (std::size_t k = 0; k < n; ++k) gram[k] = events[i + k].syscall;
    ++counts[gram];
  }
  return counts;
}

std::string join_ngram(const NGram& gram, char sep) {
  std::string out;
  for (std::size_t i = 0; i < gram.size(); ++i) {
    if (i) out += sep;
    out += gram[i];
  }
  return out;
}

NGram split_ngram(std::string_view text, char sep) {
  NGram gram;
  for (auto part : detail::split(text, sep)) gram.emplace_back(part);
  return gram;
}

std::size_t VocabPolicy::required_units(std::size_t units) const {
  if (kind == Kind::intersection) return std::max<std::size_t>(units, 1);
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("min_trace_fraction must be in (0, 1]");
  auto needed = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(units) - 1e-9));
  return std::max<std::size_t>(needed, 1);
}

std::string to_string(const VocabPolicy& policy) {
  if (policy.kind == VocabPolicy::Kind::intersection) return "intersection";
  return "min_trace_fraction:" + format_double(policy.fraction);
}

VocabPolicy parse_vocab_policy(std::string_view text) {
  if (text == "intersection") return VocabPolicy::intersection();
  constexpr std::string_view kFraction = "min_trace_fraction";
  if (text.starts_with(kFraction)) {
    auto rest = text.substr(kFraction.size());
    if (rest.empty()) return VocabPolicy::min_fraction(1.0);
    if (rest.front() == ':') {
      auto f = detail::parse_double(rest.substr(1));
      if (f && *f > 0.0 && *f <= 1.0) return VocabPolicy::min_fraction(*f);
    }
  }
  throw InvalidArgument("bad vocabulary policy '" + std::string(text) + "'");
}

NGramVocabulary::NGramVocabulary(std::size_t n, std::vector<NGram> ngrams, std::string policy)
    : n_(n), ngrams_(std::move(ngrams)), policy_(std::move(policy)) {
  if (n_ < 1 || n_ > kMaxNGram) throw InvalidArgument("n-gram length must be in [1, 5]");
  for (const auto& g : ngrams_)
    if (g.size() != n_) throw InvalidArgument("n-gram '" + join_ngram(g) + "' has wrong length");
  std::sort(ngrams_.begin(), ngrams_.end());
  ngrams_.erase(std::unique(ngrams_.begin(), ngrams_.end()), ngrams_.end());
  std::string canonical = "n=" + std::to_string(n_) + "\n";
  for (std::uint32_t i = 0; i < ngrams_.size(); ++i) {
    index_.emplace(ngrams_[i], i);
    canonical += join_ngram(ngrams_[i]);
    canonical += '\n';
  }
  hash_ = sha256_hex(canonical);
}

std::optional<std::uint32_t> NGramVocabulary::column(const NGram& gram) const {
  auto it = index_.find(gram);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void VocabularyBuilder::add_unit(const NGramCounts& unit) {
  ++units_;
  for (const auto& [gram, count] : unit)
    if (count > 0) ++unit_counts_[gram];
}

void VocabularyBuilder::add_unit(std::span<const NGram> grams) {
  ++units_;
  std::set<NGram> distinct(grams.begin(), grams.end());
  for (const auto& g : distinct) ++unit_counts_[g];
}

NGramVocabulary VocabularyBuilder::finish(const VocabPolicy& policy) const {
  if (units_ == 0) throw InvalidArgument("vocabulary needs at least one training unit");
  auto required = policy.required_units(units_);
  std::vector<NGram> kept;
  for (const auto& [gram, count] : unit_counts_)
    if (count >= required) kept.push_back(gram);
  if (kept.empty()) throw InvalidArgument("vocabulary policy " + to_string(policy) + " admitted no n-grams");
  return NGramVocabulary(n_, std::move(kept), to_string(policy));
}

NGramVocabulary build_vocabulary(std::span<const NGramCounts> units, std::size_t n,
                                 const VocabPolicy& policy) {
  VocabularyBuilder builder(n);
  for (const auto& u : units) builder.add_unit(u);
  return builder.finish(policy);
}

void apply_feature_values(SparseVector& v, FeatureValues mode, std::uint64_t ngram_total) {
  switch (mode) {
    case FeatureValues::raw:
      return;
    case FeatureValues::binary:
      for (auto& e : v) e.value = 1.0;
      return;
    case FeatureValues::normalized: {
      double denom = static_cast<double>(std::max<std::uint64_t>(ngram_total, 1));
      for (auto& e : v) e.value /= denom;
      return;
    }
  }
}

SparseVector vectorize(const NGramCounts& slice_ngrams, const NGramVocabulary& vocab) {
  SparseVector out;
  for (const auto& [gram, count] : slice_ngrams) {
    if (count == 0) continue;
    if (auto col = vocab.column(gram)) out.push_back({*col, static_cast<double>(count)});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.column < b.column; });
  return out;
}

std::string_view to_string(FeatureValues v) {
  switch (v) {
    case FeatureValues::raw:
      return "raw";
    case FeatureValues::binary:
      return "binary";
    case FeatureValues::normalized:
      return "normalized";
  }
  return "raw";
}

FeatureValues parse_feature_values(std::string_view text) {
  if (text == "raw") return FeatureValues::raw;
  if (text == "binary") return FeatureValues::binary;
  if (text == "normalized") return FeatureValues::normalized;
  throw InvalidArgument("bad feature value mode '" + std::string(text) + "'");
}

// --- NGramCounter --------------------------------------------------------------

namespace {

constexpr std::uint64_t kDenseLimit = 1ull << 22;

std::uint64_t checked_power(std::uint64_t base, std::size_t n) {
  std::uint64_t m = 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (base != 0 && m > (std::uint64_t{1} << 62) / base) throw InvalidArgument("n-gram key space too large");
    m *= base;
  }
  return m;
}

}  // namespace

NGramCounter::NGramCounter(std::size_t base, std::size_t n)
    : n_(n), modulus_(checked_power(base, n)), base_(base), dense_(modulus_ <= kDenseLimit) {
  if (n == 0 || n > kMaxNGram) throw InvalidArgument("n-gram length must be in [1, 5]");
  if (base == 0) throw InvalidArgument("empty syscall set");
  if (dense_) table_.assign(modulus_, 0);
}

void NGramCounter::push(SyscallId id) {
  key_ = (key_ * base_ + id) % modulus_;
  if (filled_ < n_) ++filled_;
  if (filled_ < n_) return;
  ++total_;
  if (dense_) {
    if (table_[key_]++ == 0) touched_.push_back(key_);
  } else {
    ++sparse_[key_];
  }
}

void NGramCounter::reset() {
  key_ = 0;
  filled_ = 0;
  total_ = 0;
  if (dense_) {
    for (auto k : touched_) table_[k] = 0;
    touched_.clear();
  } else {
    sparse_.clear();
  }
}

EncodedCounts NGramCounter::counts() const {
  EncodedCounts out;
  if (dense_) {
    out.reserve(touched_.size());
    for (auto k : touched_) out.emplace_back(k, table_[k]);
  } else {
    out.assign(sparse_.begin(), sparse_.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// --- VocabularyIndex / Featurizer -------------------------------------------------

namespace {

std::optional<std::uint64_t> encode_with(const NGram& gram, const SyscallSet& set) {
  std::uint64_t key = 0;
  for (const auto& name : gram) {
    auto id = set.id_of(name);
    if (!id) return std::nullopt;
    key = key * set.size() + *id;
  }
  return key;
}

}  // namespace

VocabularyIndex::VocabularyIndex(const NGramVocabulary& vocab, const SyscallSet& set) : vocab_(&vocab) {
  checked_power(set.size(), vocab.n());
  columns_.reserve(vocab.size());
  for (std::uint32_t col = 0; col < vocab.size(); ++col)
    if (auto key = encode_with(vocab.ngrams()[col], set)) columns_.emplace(*key, col);
}

std::optional<std::uint32_t> VocabularyIndex::column(std::uint64_t key) const {
  auto it = columns_.find(key);
  if (it == columns_.end()) return std::nullopt;
  return it->second;
}

std::size_t TraceScan::events() const {
  std::size_t total = 0;
  for (const auto& s : slices) total += s.events;
  return total;
}

std::size_t TraceScan::dropped() const {
  std::size_t total = 0;
  for (const auto& s : slices) total += s.events - s.filtered;
  return total;
}

Featurizer::Featurizer(SyscallSet set, FeaturizerOptions options) : set_(std::move(set)), options_(options) {
  if (options_.n < 1 || options_.n > kMaxNGram) throw InvalidArgument("n-gram length must be in [1, 5]");
  if (options_.num_slices == 0) throw InvalidArgument("num_slices must be positive");
  if (set_.size() == 0) throw InvalidArgument("empty syscall set");
  checked_power(set_.size(), options_.n);
}

TraceScan Featurizer::scan(const Trace& trace) const {
  const auto duration = trace.meta.duration_ns;
  if (duration <= 0) throw InvalidArgument("trace has zero duration");
  const auto num_slices = options_.num_slices;
  TraceScan out;
  out.meta = trace.meta;
  out.slices.resize(num_slices);
  NGramCounter counter(set_.size(), options_.n);
  std::size_t current = 0;
  for (const auto& e : trace.events) {
    auto s = slice_index_of(e.ts_ns, duration, num_slices);
    if (s >= num_slices) throw InvalidArgument("event beyond trace duration");
    if (s != current) {
      out.slices[current].ngrams = counter.counts();
      counter.reset();
      current = s;
    }
    auto& slice = out.slices[s];
    ++slice.events;
    if (auto id = set_.id_of(e.syscall)) {
      ++slice.filtered;
      counter.push(*id);
    }
  }
  out.slices[current].ngrams = counter.counts();
  return out;
}

NGram Featurizer::decode(std::uint64_t key) const {
  NGram gram(options_.n);
  for (std::size_t i = options_.n; i-- > 0;) {
    gram[i] = set_.name(static_cast<SyscallId>(key % set_.size()));
    key /= set_.size();
  }
  return gram;
}

std::uint64_t Featurizer::encode(const NGram& gram) const {
  if (gram.size() != options_.n) throw InvalidArgument("n-gram has wrong length");
  auto key = encode_with(gram, set_);
  if (!key) throw InvalidArgument("n-gram '" + join_ngram(gram) + "' outside the syscall set");
  return *key;
}

std::vector<NGram> Featurizer::trace_ngrams(const TraceScan& scan) const {
  std::vector<std::uint64_t> keys;
  for (const auto& s : scan.slices)
    for (const auto& [k, c] : s.ngrams) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  std::vector<NGram> out;
  out.reserve(keys.size());
  for (auto k : keys) out.push_back(decode(k));
  return out;
}

std::vector<std::vector<NGram>> Featurizer::slice_ngrams(const TraceScan& scan) const {
  std::vector<std::vector<NGram>> out;
  for (const auto& s : scan.slices) {
    auto& grams = out.emplace_back();
    for (const auto& [k, c] : s.ngrams) grams.push_back(decode(k));
  }
  return out;
}

SparseVector Featurizer::vectorize(const SliceScan& slice, const VocabularyIndex& index) const {
  SparseVector out;
  for (const auto& [key, count] : slice.ngrams)
    if (auto col = index.column(key)) out.push_back({*col, static_cast<double>(count)});
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.column < b.column; });
  auto n = options_.n;
  apply_feature_values(out, options_.values, slice.filtered >= n ? slice.filtered - n + 1 : 0);
  return out;
}

std::vector<SliceFeatures> Featurizer::featurize(const TraceScan& scan, const VocabularyIndex& index) const {
  auto labels = label_slices(scan.meta, options_.num_slices);
  std::vector<SliceFeatures> rows;
  rows.reserve(scan.slices.size());
  for (std::size_t i = 0; i < scan.slices.size(); ++i)
    rows.push_back({scan.meta.trace_id, i, vectorize(scan.slices[i], index), labels[i]});
  return rows;
}

// --- files ----------------------------------------------------------------------

namespace {

std::map<std::string, std::string> parse_header_fields(std::string_view line, std::string_view prefix,
                                                       std::size_t line_no) {
  if (!line.starts_with(prefix)) throw ParseError("missing '" + std::string(prefix) + "' header", line_no);
  std::map<std::string, std::string> fields;
  for (auto field : detail::split(line.substr(prefix.size()), ' ')) {
    if (field.empty()) continue;
    auto eq = field.find('=');
    if (eq == std::string_view::npos) throw ParseError("header field without '='", line_no);
    fields.emplace(std::string(field.substr(0, eq)), std::string(field.substr(eq + 1)));
  }
  return fields;
}

const std::string& require(const std::map<std::string, std::string>& fields, const std::string& key,
                           std::size_t line_no) {
  auto it = fields.find(key);
  if (it == fields.end()) throw ParseError("header lacks '" + key + "'", line_no);
  return it->second;
}

std::size_t require_size(const std::map<std::string, std::string>& fields, const std::string& key,
                         std::size_t line_no) {
  auto v = detail::parse_int<std::size_t>(require(fields, key, line_no));
  if (!v) throw ParseError("bad '" + key + "'", line_no);
  return *v;
}

std::string vocabulary_text(const NGramVocabulary& vocab) {
  std::string out = "#vocab n=" + std::to_string(vocab.n()) + " policy=" + vocab.policy() +
                    " size=" + std::to_string(vocab.size()) + " hash=" + vocab.hash() + "\n";
  for (const auto& g : vocab.ngrams()) {
    out += join_ngram(g);
    out += '\n';
  }
  return out;
}

NGramVocabulary parse_vocabulary(std::string_view text) {
  detail::LineReader lines(text);
  std::string_view line;
  if (!lines.next(line)) throw ParseError("empty vocabulary file", 1);
  auto fields = parse_header_fields(line, "#vocab ", 1);
  auto n = require_size(fields, "n", 1);
  auto size = require_size(fields, "size", 1);
  const auto& hash = require(fields, "hash", 1);
  const auto& policy = require(fields, "policy", 1);
  std::vector<NGram> grams;
  grams.reserve(size);
  while (lines.next(line)) {
    if (line.empty()) throw ParseError("empty n-gram line", lines.line_no());
    auto gram = split_ngram(line);
    if (gram.size() != n) throw ParseError("n-gram has wrong length", lines.line_no());
    if (!grams.empty() && !(grams.back() < gram))
      throw ParseError("n-grams not in strict lexicographic order", lines.line_no());
    grams.push_back(std::move(gram));
  }
  if (grams.size() != size) throw CorruptionError("vocabulary size mismatch: header says " + std::to_string(size));
  NGramVocabulary vocab(n, std::move(grams), policy);
  if (vocab.hash() != hash) throw CorruptionError("vocabulary hash mismatch");
  return vocab;
}

std::string features_text(const FeatureSet& fs) {
  std::string out = "#features n=" + std::to_string(fs.header.n) + " slices=" + std::to_string(fs.header.num_slices) +
                    " vocab_hash=" + fs.header.vocab_hash + " values=" + std::string(to_string(fs.header.values)) +
                    "\n";
  for (const auto& row : fs.rows) {
    out += row.trace_id;
    out += '\t';
    out += std::to_string(row.slice_index);
    out += '\t';
    out += to_string(row.label);
    out += '\t';
    bool first = true;
    for (const auto& e : row.counts) {
      if (!first) out += ' ';
      first = false;
      out += std::to_string(e.column);
      out += ':';
      out += format_double(e.value);
    }
    out += '\n';
  }
  return out;
}

FeatureSet parse_features(std::string_view text) {
  detail::LineReader lines(text);
  std::string_view line;
  if (!lines.next(line)) throw ParseError("empty feature file", 1);
  auto fields = parse_header_fields(line, "#features ", 1);
  FeatureSet fs;
  fs.header.n = require_size(fields, "n", 1);
  fs.header.num_slices = require_size(fields, "slices", 1);
  fs.header.vocab_hash = require(fields, "vocab_hash", 1);
  try {
    fs.header.values = parse_feature_values(require(fields, "values", 1));
  } catch (const InvalidArgument& e) {
    throw ParseError(e.what(), 1);
  }
  while (lines.next(line)) {
    auto parts = detail::split(line, '\t');
    if (parts.size() != 4) throw ParseError("expected 4 TAB-separated fields", lines.line_no());
    SliceFeatures row;
    row.trace_id = parts[0];
    auto idx = detail::parse_int<std::size_t>(parts[1]);
    if (!idx || *idx >= fs.header.num_slices) throw ParseError("bad slice index", lines.line_no());
    row.slice_index = *idx;
    try {
      row.label = parse_slice_label(parts[2]);
    } catch (const ParseError& e) {
      throw ParseError(e.what(), lines.line_no());
    }
    if (!parts[3].empty()) {
      for (auto pair : detail::split(parts[3], ' ')) {
        auto colon = pair.find(':');
        if (colon == std::string_view::npos) throw ParseError("bad column:value pair", lines.line_no());
        auto col = detail::parse_int<std::uint32_t>(pair.substr(0, colon));
        auto val = detail::parse_double(pair.substr(colon + 1));
        if (!col || !val) throw ParseError("bad column:value pair", lines.line_no());
        if (!row.counts.empty() && row.counts.back().column >= *col)
          throw ParseError("columns not strictly increasing", lines.line_no());
        row.counts.push_back({*col, *val});
      }
    }
    fs.rows.push_back(std::move(row));
  }
  return fs;
}

}  // namespace

void write_vocabulary(const NGramVocabulary& vocab, const std::filesystem::path& path) {
  detail::write_file(path.string(), vocabulary_text(vocab));
}

void write_vocabulary(const NGramVocabulary& vocab, std::ostream& out) { out << vocabulary_text(vocab); }

NGramVocabulary read_vocabulary(const std::filesystem::path& path) {
  return parse_vocabulary(detail::read_file(path.string()));
}

NGramVocabulary read_vocabulary(std::istream& in) {
  std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_vocabulary(text);
}

void write_features(const FeatureSet& features, const std::filesystem::path& path) {
  detail::write_file(path.string(), features_text(features));
}

void write_features(const FeatureSet& features, std::ostream& out) { out << features_text(features); }

FeatureSet read_features(const std::filesystem::path& path) {
  return parse_features(detail::read_file(path.string()));
}

FeatureSet read_features(std::istream& in) {
  std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_features(text);
}

}  // namespace sentinel
