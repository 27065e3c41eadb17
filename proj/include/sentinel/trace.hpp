#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace sentinel {

/// One kernel entry-point invocation.
struct SyscallEvent {
  std::int64_t ts_ns = 0;  ///< nanoseconds since trace start
  std::int32_t pid = 0;
  std::string comm;     ///< process name
  std::string syscall;  ///< lowercase syscall name

  bool operator==(const SyscallEvent&) const = default;
};

enum class Scenario { baseline, application };

std::string_view to_string(Scenario s);
Scenario parse_scenario(std::string_view text);

struct TraceMeta {
  std::string trace_id;
  std::int64_t duration_ns = 0;
  std::optional<std::int64_t> inject_ts_ns;  ///< absent for benign traces
  std::optional<std::string> class_label;    ///< present iff inject_ts_ns is
  Scenario scenario = Scenario::baseline;

  bool operator==(const TraceMeta&) const = default;
};

/// A complete system-wide capture. Events are sorted by timestamp; ties keep
/// capture order.
struct Trace {
  TraceMeta meta;
  std::vector<SyscallEvent> events;

  bool operator==(const Trace&) const = default;
};

/// Throws InvalidArgument when `meta` breaks a TraceMeta invariant.
void validate(const TraceMeta& meta);

/// Throws InvalidArgument when `trace` breaks any Trace invariant.
void validate(const Trace& trace);

// Canonical text format:
//
//   #meta trace_id=<id> duration_ns=<n> [inject_ts_ns=<n> class_label=<c>] scenario=<s>
//   <ts_ns>\t<pid>\t<comm>\t<syscall>
//   ...
//
// UTF-8, LF line endings. A trailing newline after the last record is
// expected but not required.

Trace read_trace(const std::filesystem::path& path);
Trace read_trace(std::istream& in);

/// Reads only the header line of a trace file.
TraceMeta read_trace_meta(const std::filesystem::path& path);

void write_trace(const Trace& trace, const std::filesystem::path& path);
void write_trace(const Trace& trace, std::ostream& out);

std::string format_meta(const TraceMeta& meta);
TraceMeta parse_meta(std::string_view line, std::size_t line_no = 1);

/// Parses `ts<TAB>pid<TAB>comm<TAB>syscall`. Throws ParseError.
SyscallEvent parse_event_fields(std::string_view line, std::size_t line_no = 0);

/// Appends the canonical event line (without newline) to `out`.
void append_event_fields(std::string& out, const SyscallEvent& event);

}  // namespace sentinel
