#include "sentinel/labeling.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "json.hpp"

#include "sentinel/error.hpp"
#include "sentinel_default_aliases.hpp"
#include "text_util.hpp"

namespace sentinel {

std::string SliceLabel::target() const {
  return kind == Kind::benign ? std::string(kBenignClass) : class_name;
}

std::string to_string(const SliceLabel& label) {
  switch (label.kind) {
    case SliceLabel::Kind::benign:
      return std::string(kBenignClass);
    case SliceLabel::Kind::malicious:
      return "malicious:" + label.class_name;
    case SliceLabel::Kind::withheld:
      return "withheld:" + label.class_name;
  }
  return {};
}

SliceLabel parse_slice_label(std::string_view text) {
  if (text == kBenignClass) return SliceLabel::benign();
  auto colon = text.find(':');
  if (colon != std::string_view::npos && colon + 1 < text.size()) {
    auto kind = text.substr(0, colon);
    std::string cls(text.substr(colon + 1));
    if (kind == "malicious") return SliceLabel::malicious(std::move(cls));
    if (kind == "withheld") return SliceLabel::withheld(std::move(cls));
  }
  throw ParseError("bad slice label '" + std::string(text) + "'");
}

std::size_t slice_index_of(std::int64_t ts_ns, std::int64_t duration_ns, std::size_t num_slices) {
  auto idx = static_cast<__int128>(ts_ns) * static_cast<__int128>(num_slices) / duration_ns;
  return static_cast<std::size_t>(idx);
}

std::vector<SliceLabel> label_slices(const TraceMeta& meta, std::size_t num_slices) {
  if (num_slices == 0) throw InvalidArgument("num_slices must be positive");
  validate(meta);
  std::vector<SliceLabel> labels(num_slices);
  if (!meta.inject_ts_ns) return labels;
  auto inject = slice_index_of(*meta.inject_ts_ns, meta.duration_ns, num_slices);
  labels[inject] = SliceLabel::malicious(*meta.class_label);
  for (auto i = inject + 1; i < num_slices; ++i) labels[i] = SliceLabel::withheld(*meta.class_label);
  return labels;
}

ScanReport parse_scan_report(std::string_view json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("scan report: ") + e.what());
  }
  ScanReport report;
  try {
    report.sample_id = doc.at("sample_id").get<std::string>();
    std::set<std::string> engines;
    for (const auto& v : doc.at("verdicts")) {
      EngineVerdict verdict{v.at("engine").get<std::string>(), v.at("label").get<std::string>()};
      if (!engines.insert(verdict.engine).second)
        throw ParseError("scan report " + report.sample_id + ": duplicate engine '" + verdict.engine + "'");
      report.verdicts.push_back(std::move(verdict));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("scan report: ") + e.what());
  }
  return report;
}

ScanReport read_scan_report(const std::filesystem::path& path) {
  try {
    return parse_scan_report(detail::read_file(path.string()));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

AliasTable parse_alias_table(std::string_view text) {
  AliasTable table;
  detail::LineReader lines(text);
  std::string_view line;
  while (lines.next(line)) {
    auto trimmed = detail::trim(line);
    if (trimmed.empty() || trimmed.front() == '#') continue;
    auto parts = detail::split(trimmed, '\t');
    if (parts.size() != 2 || parts[0].empty() || parts[1].empty())
      throw ParseError("alias table: expected token<TAB>class", lines.line_no());
    std::string token(parts[0]);
    std::transform(token.begin(), token.end(), token.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    table[token] = std::string(parts[1]);
  }
  return table;
}

AliasTable load_alias_table(const std::filesystem::path& path) {
  return parse_alias_table(detail::read_file(path.string()));
}

const AliasTable& default_alias_table() {
  static const AliasTable table = parse_alias_table(kDefaultAliasTable);
  return table;
}

std::vector<std::string> tokenize_label(std::string_view raw_label) {
  std::vector<std::string> tokens;
  std::string current;
  for (unsigned char c : raw_label) {
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::optional<std::string> consensus_class(const ScanReport& report, const AliasTable& aliases) {
  if (report.verdicts.empty()) throw InvalidArgument("scan report " + report.sample_id + " has no verdicts");
  std::map<std::string, std::size_t> votes;
  for (const auto& verdict : report.verdicts) {
    std::set<std::string> engine_classes;
    for (const auto& token : tokenize_label(verdict.raw_label)) {
      auto it = aliases.find(token);
      if (it != aliases.end()) engine_classes.insert(it->second);
    }
    for (const auto& c : engine_classes) ++votes[c];
  }
  std::optional<std::string> best;
  std::size_t best_votes = 0;
  bool tied = false;
  for (const auto& [cls, n] : votes) {
    if (n > best_votes) {
      best = cls;
      best_votes = n;
      tied = false;
    } else if (n == best_votes) {
      tied = true;
    }
  }
  if (tied) return std::nullopt;
  return best;
}

PruneResult prune_classes(std::span<const LabeledSample> samples, const ClassCatalog& catalog) {
  PruneResult result;
  for (const auto& s : samples)
    if (s.class_name && *s.class_name != "none") ++result.class_counts[*s.class_name];

  std::vector<std::pair<std::string, std::size_t>> surviving;
  for (const auto& [cls, n] : result.class_counts)
    if (n >= catalog.min_samples) surviving.emplace_back(cls, n);
  std::stable_sort(surviving.begin(), surviving.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (surviving.size() < 2)
    throw InvalidArgument("fewer than 2 classes have at least " + std::to_string(catalog.min_samples) +
                          " samples");

  std::set<std::string> keep;
  for (const auto& [cls, n] : surviving) {
    result.classes.push_back(cls);
    keep.insert(cls);
  }
  for (const auto& s : samples)
    if (s.class_name && keep.contains(*s.class_name)) result.retained.push_back(s);
  return result;
}

}  // namespace sentinel
