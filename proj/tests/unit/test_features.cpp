#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "sentinel/error.hpp"
#include "sentinel/features.hpp"
#include "test_util.hpp"

using namespace sentinel;

namespace {

std::vector<SyscallEvent> events_of(const std::vector<std::string>& calls) {
  std::vector<SyscallEvent> ev;
  for (std::size_t i = 0; i < calls.size(); ++i) ev.push_back({static_cast<std::int64_t>(i), 1, "p", calls[i]});
  return ev;
}

// Straightforward sliding window, used as the oracle for extract_ngrams.
NGramCounts naive_ngrams(const std::vector<SyscallEvent>& ev, std::size_t n) {
  NGramCounts out;
  for (std::size_t i = 0; i + n <= ev.size(); ++i) {
    NGram g;
    for (std::size_t k = 0; k < n; ++k) g.push_back(ev[i + k].syscall);
    out[g] += 1;
  }
  return out;
}

Trace make_trace(std::vector<std::pair<std::int64_t, std::string>> ev, std::int64_t duration) {
  Trace t;
  t.meta = {"t", duration, std::nullopt, std::nullopt, Scenario::baseline};
  for (auto& [ts, c] : ev) t.events.push_back({ts, 1, "p", c});
  return t;
}

}  // namespace

TEST_CASE("bigram counts on a short sequence") {
  auto c = extract_ngrams(events_of({"read", "write", "open", "read", "write"}), 2);
  NGramCounts expected = {{{"read", "write"}, 2}, {{"write", "open"}, 1}, {{"open", "read"}, 1}};
  CHECK(c == expected);
}

TEST_CASE("repeated call gives one gram with count len-n+1") {
  auto c = extract_ngrams(events_of({"brk", "brk", "brk", "brk"}), 2);
  REQUIRE(c.size() == 1);
  CHECK(c.begin()->second == 3);
  CHECK(extract_ngrams(events_of({"brk"}), 2).empty());
  CHECK_THROWS_AS(extract_ngrams(events_of({"brk"}), 0), InvalidArgument);
}

TEST_CASE("extract_ngrams matches the sliding window oracle") {
  std::mt19937_64 rng(9);
  for (std::size_t n = 1; n <= 5; ++n) {
    auto t = testing::random_trace(rng, 500, 1000000, {"read", "write", "mmap", "brk"});
    CHECK(extract_ngrams(t.events, n) == naive_ngrams(t.events, n));
  }
}

TEST_CASE("slice boundaries use floor of t*S/duration") {
  const std::int64_t minute = 60'000'000'000;
  auto t = make_trace({{minute - 1, "read"}, {minute, "write"}, {10 * minute - 1, "brk"}}, 10 * minute);
  auto s = slice_events(t, 10);
  REQUIRE(s.size() == 10);
  CHECK(s[0].size() == 1);
  CHECK(s[0][0].syscall == "read");
  CHECK(s[1].size() == 1);
  CHECK(s[1][0].syscall == "write");
  CHECK(s[9].size() == 1);
  CHECK(slice_index_of(59'999'999'999, 10 * minute, 10) == 0);
  CHECK(slice_index_of(60'000'000'000, 10 * minute, 10) == 1);
  CHECK_THROWS_AS(slice_events(t, 0), InvalidArgument);
}

TEST_CASE("empty trace gives S empty slices") {
  auto s = slice_events(make_trace({}, 1000), 4);
  CHECK(s.size() == 4);
  for (const auto& x : s) CHECK(x.empty());
}

TEST_CASE("intersection and fraction vocabularies") {
  NGramCounts a = {{{"a"}, 1}, {{"b"}, 2}};
  NGramCounts b = {{{"b"}, 1}, {{"c"}, 5}};
  std::vector<NGramCounts> units = {a, b};
  auto inter = build_vocabulary(units, 1, VocabPolicy::intersection());
  CHECK(inter.ngrams() == std::vector<NGram>{{"b"}});
  auto half = build_vocabulary(units, 1, VocabPolicy::min_fraction(0.5));
  CHECK(half.ngrams() == std::vector<NGram>{{"a"}, {"b"}, {"c"}});
  CHECK(*half.column({"c"}) == 2);
  CHECK_FALSE(half.column({"d"}));

  std::vector<NGramCounts> disjoint = {{{{"a"}, 1}}, {{{"c"}, 1}}};
  CHECK_THROWS_AS(build_vocabulary(disjoint, 1, VocabPolicy::intersection()), InvalidArgument);
  CHECK_THROWS_AS(build_vocabulary({}, 1, VocabPolicy::intersection()), InvalidArgument);
}

TEST_CASE("vocabulary is order independent and hashes its column order") {
  NGramVocabulary v1(2, {{"b", "a"}, {"a", "b"}});
  NGramVocabulary v2(2, {{"a", "b"}, {"b", "a"}, {"a", "b"}});
  CHECK(v1.ngrams() == v2.ngrams());
  CHECK(v1.hash() == v2.hash());
  NGramVocabulary v3(2, {{"a", "b"}});
  CHECK(v1.hash() != v3.hash());
  CHECK_THROWS_AS(NGramVocabulary(2, {{"a"}}), InvalidArgument);
}

TEST_CASE("vectorize drops out-of-vocabulary grams") {
  NGramVocabulary v(2, {{"a", "b"}, {"c", "d"}});
  NGramCounts c = {{{"c", "d"}, 7}, {{"x", "y"}, 3}};
  auto vec = vectorize(c, v);
  CHECK(vec == SparseVector{{1, 7.0}});
  CHECK(vectorize({{{"x", "y"}, 3}}, v).empty());
}

TEST_CASE("feature value transforms") {
  SparseVector v = {{0, 3}, {2, 1}};
  auto b = v;
  apply_feature_values(b, FeatureValues::binary, 10);
  CHECK(b == SparseVector{{0, 1}, {2, 1}});
  auto n = v;
  apply_feature_values(n, FeatureValues::normalized, 8);
  CHECK(n == SparseVector{{0, 3.0 / 8}, {2, 1.0 / 8}});
  CHECK(parse_feature_values("binary") == FeatureValues::binary);
  CHECK_THROWS(parse_feature_values("log"));
}

TEST_CASE("encoded counter agrees with string extraction") {
  const auto& set = default_syscall_set();
  Featurizer fz(set, {3, 10, FeatureValues::raw});
  std::mt19937_64 rng(3);
  auto t = testing::random_trace(rng, 3000, 600'000'000'000, {"read", "write", "ptrace", "mmap", "brk", "poll"});
  auto scan = fz.scan(t);
  REQUIRE(scan.slices.size() == 10);
  auto slices = slice_events(t, 10);
  std::size_t dropped = 0;
  for (std::size_t s = 0; s < 10; ++s) {
    auto filtered = filter_events(slices[s], set);
    dropped += filtered.dropped;
    auto oracle = extract_ngrams(filtered.events, 3);
    NGramCounts got;
    for (auto [key, count] : scan.slices[s].ngrams) got[fz.decode(key)] += count;
    CHECK(got == oracle);
    CHECK(scan.slices[s].events == slices[s].size());
  }
  CHECK(scan.dropped() == dropped);
  CHECK(fz.encode({"read", "write", "mmap"}) == fz.encode(fz.decode(fz.encode({"read", "write", "mmap"}))));
}

TEST_CASE("dense and sparse counters agree") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> id(0, 34);
  NGramCounter dense(35, 3), sparse(35, 5);
  NGramCounter dense5(4, 5);
  std::vector<SyscallId> ids;
  for (int i = 0; i < 2000; ++i) ids.push_back(static_cast<SyscallId>(id(rng)));
  std::map<std::uint64_t, std::uint32_t> oracle3, oracle5;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    dense.push(ids[i]);
    sparse.push(ids[i]);
    if (i >= 2) oracle3[(ids[i - 2] * 35ull + ids[i - 1]) * 35 + ids[i]]++;
    if (i >= 4) {
      std::uint64_t k = 0;
      for (std::size_t j = i - 4; j <= i; ++j) k = k * 35 + ids[j];
      oracle5[k]++;
    }
  }
  CHECK(dense.counts() == EncodedCounts(oracle3.begin(), oracle3.end()));
  CHECK(sparse.counts() == EncodedCounts(oracle5.begin(), oracle5.end()));
  CHECK(dense.total() == 1998);
  dense.reset();
  CHECK(dense.counts().empty());
  CHECK(dense.total() == 0);
}

TEST_CASE("featurize emits one labeled row per slice") {
  Featurizer fz(default_syscall_set(), {2, 4, FeatureValues::raw});
  auto t = make_trace({{0, "read"}, {1, "write"}, {2, "read"}, {3, "write"}, {50, "read"}, {51, "write"}}, 100);
  t.meta.inject_ts_ns = 30;
  t.meta.class_label = "worm";
  auto scan = fz.scan(t);
  NGramVocabulary v(2, {{"read", "write"}});
  VocabularyIndex idx(v, fz.syscalls());
  auto rows = fz.featurize(scan, idx);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].counts == SparseVector{{0, 2}});
  CHECK(rows[0].label.is_benign());
  CHECK(rows[1].label == SliceLabel::malicious("worm"));
  CHECK(rows[2].counts == SparseVector{{0, 1}});
  CHECK(rows[2].label == SliceLabel::withheld("worm"));
  CHECK(rows[3].counts.empty());
}

TEST_CASE("vocabulary file round trip and corruption") {
  NGramVocabulary v(2, {{"a", "b"}, {"c", "d"}}, "min_trace_fraction:0.5");
  std::stringstream ss;
  write_vocabulary(v, ss);
  auto text = ss.str();
  std::istringstream in(text);
  auto back = read_vocabulary(in);
  CHECK(back.ngrams() == v.ngrams());
  CHECK(back.hash() == v.hash());
  CHECK(back.policy() == v.policy());

  auto swapped = text;
  auto pos = swapped.find("a|b");
  swapped.replace(pos, 3, "a|x");
  std::istringstream bad(swapped);
  CHECK_THROWS(read_vocabulary(bad));
  std::istringstream truncated(text.substr(0, text.size() - 4));
  CHECK_THROWS(read_vocabulary(truncated));
}

TEST_CASE("feature file round trip and errors") {
  FeatureSet fs;
  fs.header = {2, 10, "abc", FeatureValues::normalized};
  fs.rows.push_back({"t1", 0, {{0, 0.1}, {5, 1.0 / 3}}, SliceLabel::benign()});
  fs.rows.push_back({"t1", 4, {}, SliceLabel::malicious("rootkit")});
  fs.rows.push_back({"t1", 5, {{2, 7}}, SliceLabel::withheld("rootkit")});
  std::stringstream ss;
  write_features(fs, ss);
  std::istringstream in(ss.str());
  auto back = read_features(in);
  CHECK(back.header == fs.header);
  CHECK(back.rows == fs.rows);

  std::istringstream bad_label("#features n=2 slices=10 vocab_hash=abc values=raw\nt1\t0\tevil\t\n");
  CHECK_THROWS_AS(read_features(bad_label), ParseError);
  std::istringstream bad_entry("#features n=2 slices=10 vocab_hash=abc values=raw\nt1\t0\tbenign\t3:x\n");
  CHECK_THROWS_AS(read_features(bad_entry), ParseError);
}

TEST_CASE("format_double round trips") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 1000; ++i) {
    double x = u(rng);
    CHECK(std::stod(format_double(x)) == x);
  }
  CHECK(format_double(0.5) == "0.5");
  CHECK(format_double(7) == "7");
}
