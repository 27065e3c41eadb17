#include "sentinel/syscalls.hpp"

#include <limits>

#include "sentinel/error.hpp"
#include "text_util.hpp"

namespace sentinel {

SyscallSet::SyscallSet(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.size() > std::numeric_limits<SyscallId>::max())
    throw InvalidArgument("syscall set too large");
  ids_.reserve(names_.size());
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const auto& n = names_[i];
    if (n.empty() || detail::has_whitespace(n)) throw InvalidArgument("invalid syscall name '" + n + "'");
    for (char c : n)
      if (c >= 'A' && c <= 'Z') throw InvalidArgument("syscall name not lowercase: '" + n + "'");
    if (!ids_.emplace(n, static_cast<SyscallId>(i)).second)
      throw InvalidArgument("duplicate syscall '" + n + "'");
  }
}

std::optional<SyscallId> SyscallSet::id_of(std::string_view name) const {
  auto it = ids_.find(name);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

const SyscallSet& default_syscall_set() {
  static const SyscallSet set({
      "read",           "write",       "creat",     "open",        "openat",
      "unlink",         "chdir",       "access",    "utime",       "chmod",
      "ftruncate",      "rename",      "getdents",  "fstat",       "fstat64",
      "fadvise64",      "execve",      "rt_sigaction", "rt_sigprocmask", "kill",
      "tgkill",         "sched_yield", "send",      "bind",        "connect",
      "recvfrom",       "poll",        "epoll_create", "select",   "ioctl",
      "brk",            "mmap",        "mmap2",     "munmap",      "mprotect",
  });
  return set;
}

SyscallSet load_syscall_set(const std::filesystem::path& path) {
  auto text = detail::read_file(path.string());
  detail::LineReader lines(text);
  std::string_view line;
  std::vector<std::string> names;
  while (lines.next(line)) {
    line = detail::trim(line);
    if (line.empty() || line.front() == '#') continue;
    names.emplace_back(line);
  }
  if (names.empty()) throw InvalidArgument(path.string() + ": empty syscall set");
  return SyscallSet(std::move(names));
}

FilterResult filter_events(std::span<const SyscallEvent> events, const SyscallSet& set) {
  FilterResult out;
  out.events.reserve(events.size());
  for (const auto& e : events) {
    if (set.contains(e.syscall))
      out.events.push_back(e);
    else
      ++out.dropped;
  }
  return out;
}

}  // namespace sentinel
