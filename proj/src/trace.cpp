#include "sentinel/trace.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "sentinel/error.hpp"
#include "text_util.hpp"

namespace sentinel {
namespace detail {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string content;
  in.seekg(0, std::ios::end);
  auto size = in.tellg();
  if (size > 0) {
    content.resize(static_cast<std::size_t>(size));
    in.seekg(0);
    in.read(content.data(), size);
  }
  if (!in && !in.eof()) throw IoError("cannot read " + path);
  return content;
}

void write_file(const std::string& path, std::string_view content) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot write " + path);
  bool ok = std::fwrite(content.data(), 1, content.size(), f) == content.size();
  ok = (std::fclose(f) == 0) && ok;
  if (!ok) throw IoError("short write to " + path);
}

}  // namespace detail

namespace {

constexpr std::string_view kMetaPrefix = "#meta ";

bool valid_token(std::string_view s) { return !s.empty() && !detail::has_whitespace(s); }

bool valid_syscall(std::string_view s) {
  if (!valid_token(s)) return false;
  for (char c : s)
    if (c >= 'A' && c <= 'Z') return false;
  return true;
}

}  // namespace

std::string_view to_string(Scenario s) {
  return s == Scenario::baseline ? "baseline" : "application";
}

Scenario parse_scenario(std::string_view text) {
  if (text == "baseline") return Scenario::baseline;
  if (text == "application") return Scenario::application;
  throw InvalidArgument("unknown scenario '" + std::string(text) + "'");
}

void validate(const TraceMeta& meta) {
  if (!valid_token(meta.trace_id)) throw InvalidArgument("trace_id must be a non-empty token");
  if (meta.duration_ns <= 0) throw InvalidArgument("duration_ns must be positive");
  if (meta.inject_ts_ns.has_value() != meta.class_label.has_value())
    throw InvalidArgument("class_label must be present exactly when inject_ts_ns is");
  if (meta.inject_ts_ns && (*meta.inject_ts_ns < 0 || *meta.inject_ts_ns >= meta.duration_ns))
    throw InvalidArgument("inject_ts_ns " + std::to_string(*meta.inject_ts_ns) +
                          " outside [0, duration_ns)");
  if (meta.class_label && !valid_token(*meta.class_label))
    throw InvalidArgument("class_label must be a non-empty token");
}

void validate(const Trace& trace) {
  validate(trace.meta);
  std::int64_t prev = 0;
  for (std::size_t i = 0; i < trace.events.size(); ++i) {
    const auto& e = trace.events[i];
    if (e.ts_ns < 0) throw InvalidArgument("event " + std::to_string(i) + ": negative timestamp");
    if (e.ts_ns < prev) throw InvalidArgument("event " + std::to_string(i) + ": timestamps not sorted");
    if (e.ts_ns >= trace.meta.duration_ns)
      throw InvalidArgument("event " + std::to_string(i) + ": timestamp beyond duration");
    if (!valid_syscall(e.syscall))
      throw InvalidArgument("event " + std::to_string(i) + ": invalid syscall name");
    if (e.comm.empty() || e.comm.find_first_of("\t\n\r") != std::string::npos)
      throw InvalidArgument("event " + std::to_string(i) + ": invalid comm");
    prev = e.ts_ns;
  }
}

std::string format_meta(const TraceMeta& meta) {
  std::string out(kMetaPrefix);
  out += "trace_id=" + meta.trace_id;
  out += " duration_ns=" + std::to_string(meta.duration_ns);
  if (meta.inject_ts_ns) out += " inject_ts_ns=" + std::to_string(*meta.inject_ts_ns);
  if (meta.class_label) out += " class_label=" + *meta.class_label;
  out += " scenario=";
  out += to_string(meta.scenario);
  return out;
}

TraceMeta parse_meta(std::string_view line, std::size_t line_no) {
  if (!line.starts_with(kMetaPrefix)) throw ParseError("missing '#meta ' header", line_no);
  TraceMeta meta;
  bool have_id = false, have_duration = false, have_scenario = false;
  for (auto field : detail::split(line.substr(kMetaPrefix.size()), ' ')) {
    if (field.empty()) continue;
    auto eq = field.find('=');
    if (eq == std::string_view::npos) throw ParseError("header field without '='", line_no);
    auto key = field.substr(0, eq);
    auto value = field.substr(eq + 1);
    if (key == "trace_id") {
      meta.trace_id = value;
      have_id = true;
    } else if (key == "duration_ns") {
      auto v = detail::parse_int<std::int64_t>(value);
      if (!v) throw ParseError("bad duration_ns", line_no);
      meta.duration_ns = *v;
      have_duration = true;
    } else if (key == "inject_ts_ns") {
      auto v = detail::parse_int<std::int64_t>(value);
      if (!v) throw ParseError("bad inject_ts_ns", line_no);
      meta.inject_ts_ns = *v;
    } else if (key == "class_label") {
      meta.class_label = std::string(value);
    } else if (key == "scenario") {
      try {
        meta.scenario = parse_scenario(value);
      } catch (const InvalidArgument& e) {
        throw ParseError(e.what(), line_no);
      }
      have_scenario = true;
    } else {
      throw ParseError("unknown header key '" + std::string(key) + "'", line_no);
    }
  }
  if (!have_id || !have_duration || !have_scenario)
    throw ParseError("header needs trace_id, duration_ns and scenario", line_no);
  try {
    validate(meta);
  } catch (const InvalidArgument& e) {
    throw ParseError(e.what(), line_no);
  }
  return meta;
}

SyscallEvent parse_event_fields(std::string_view line, std::size_t line_no) {
  std::string_view fields[4];
  std::size_t start = 0;
  for (int i = 0; i < 4; ++i) {
    auto tab = i < 3 ? line.find('\t', start) : std::string_view::npos;
    if (i < 3 && tab == std::string_view::npos) throw ParseError("expected 4 TAB-separated fields", line_no);
    fields[i] = line.substr(start, i < 3 ? tab - start : std::string_view::npos);
    start = tab + 1;
  }
  if (fields[3].find('\t') != std::string_view::npos)
    throw ParseError("expected 4 TAB-separated fields", line_no);
  auto ts = detail::parse_int<std::int64_t>(fields[0]);
  if (!ts || *ts < 0) throw ParseError("bad timestamp", line_no);
  auto pid = detail::parse_int<std::int32_t>(fields[1]);
  if (!pid) throw ParseError("bad pid", line_no);
  if (fields[2].empty() || fields[2].find('\r') != std::string_view::npos)
    throw ParseError("bad comm", line_no);
  if (!valid_syscall(fields[3])) throw ParseError("bad syscall name", line_no);
  return SyscallEvent{*ts, *pid, std::string(fields[2]), std::string(fields[3])};
}

void append_event_fields(std::string& out, const SyscallEvent& e) {
  char buf[48];
  int len = std::snprintf(buf, sizeof buf, "%lld\t%d\t", static_cast<long long>(e.ts_ns), e.pid);
  out.append(buf, static_cast<std::size_t>(len));
  out += e.comm;
  out += '\t';
  out += e.syscall;
}

namespace {

Trace parse_trace(std::string_view text) {
  detail::LineReader lines(text);
  std::string_view line;
  if (!lines.next(line)) throw ParseError("empty trace file", 1);
  Trace trace;
  trace.meta = parse_meta(line, 1);
  std::int64_t prev = 0;
  while (lines.next(line)) {
    if (line.empty()) throw ParseError("empty event line", lines.line_no());
    auto event = parse_event_fields(line, lines.line_no());
    if (event.ts_ns < prev) throw ParseError("unsorted timestamps", lines.line_no());
    if (event.ts_ns >= trace.meta.duration_ns)
      throw ParseError("timestamp beyond duration_ns", lines.line_no());
    prev = event.ts_ns;
    trace.events.push_back(std::move(event));
  }
  return trace;
}

}  // namespace

Trace read_trace(const std::filesystem::path& path) {
  auto text = detail::read_file(path.string());
  try {
    return parse_trace(text);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.line());
  }
}

Trace read_trace(std::istream& in) {
  std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_trace(text);
}

TraceMeta read_trace_meta(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty trace file", 1);
  return parse_meta(line, 1);
}

namespace {

std::string serialize(const Trace& trace) {
  validate(trace);
  std::string out = format_meta(trace.meta);
  out += '\n';
  out.reserve(out.size() + trace.events.size() * 32);
  for (const auto& e : trace.events) {
    append_event_fields(out, e);
    out += '\n';
  }
  return out;
}

}  // namespace

void write_trace(const Trace& trace, const std::filesystem::path& path) {
  detail::write_file(path.string(), serialize(trace));
}

void write_trace(const Trace& trace, std::ostream& out) {
  auto text = serialize(trace);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed");
}

}  // namespace sentinel
