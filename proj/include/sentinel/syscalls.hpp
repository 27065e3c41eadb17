#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sentinel/trace.hpp"

namespace sentinel {

/// Dense id of a syscall within a SyscallSet (its position in the set).
using SyscallId = std::uint16_t;

/// Ordered, duplicate-free set of lowercase syscall names. Membership lookups
/// are O(1); ids are positions in insertion order.
class SyscallSet {
 public:
  SyscallSet() = default;
  /// Throws InvalidArgument on duplicates, empty or non-lowercase names.
  explicit SyscallSet(std::vector<std::string> names);

  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::string& name(SyscallId id) const { return names_.at(id); }

  bool contains(std::string_view name) const { return id_of(name).has_value(); }
  std::optional<SyscallId> id_of(std::string_view name) const;

  bool operator==(const SyscallSet& other) const { return names_ == other.names_; }

 private:
  struct Hash {
    using is_transparent = void;
    std::size_t operator()(std::string_view s) const noexcept {
      return std::hash<std::string_view>{}(s);
    }
  };
  std::vector<std::string> names_;
  std::unordered_map<std::string, SyscallId, Hash, std::equal_to<>> ids_;
};

/// The 35 security-relevant calls the classifier is built on.
const SyscallSet& default_syscall_set();

/// One syscall name per line; blank lines and `#` comments are ignored.
SyscallSet load_syscall_set(const std::filesystem::path& path);

struct FilterResult {
  std::vector<SyscallEvent> events;
  std::size_t dropped = 0;
};

/// Keeps the events whose syscall is in `set`, preserving order, and counts
/// the rest.
FilterResult filter_events(std::span<const SyscallEvent> events, const SyscallSet& set);

}  // namespace sentinel
