#include <fstream>

#include "doctest.h"
#include "sentinel/error.hpp"
#include "sentinel/syscalls.hpp"
#include "test_util.hpp"

using namespace sentinel;

TEST_CASE("default set is the 35 listed calls in order") {
  const std::vector<std::string> expected = {
      "read",   "write",        "creat",          "open",        "openat", "unlink",  "chdir",   "access",
      "utime",  "chmod",        "ftruncate",      "rename",      "getdents", "fstat", "fstat64", "fadvise64",
      "execve", "rt_sigaction", "rt_sigprocmask", "kill",        "tgkill", "sched_yield", "send", "bind",
      "connect", "recvfrom",    "poll",           "epoll_create", "select", "ioctl",  "brk",     "mmap",
      "mmap2",  "munmap",       "mprotect"};
  const auto& set = default_syscall_set();
  CHECK(set.size() == 35);
  CHECK(set.names() == expected);
  CHECK(set.contains("execve"));
  CHECK_FALSE(set.contains("ptrace"));
  CHECK(*set.id_of("mprotect") == 34);
}

TEST_CASE("sets reject duplicates and bad names") {
  CHECK_THROWS_AS(SyscallSet({"read", "read"}), InvalidArgument);
  CHECK_THROWS_AS(SyscallSet({"Read"}), InvalidArgument);
  CHECK_THROWS_AS(SyscallSet({""}), InvalidArgument);
}

TEST_CASE("set file with comments") {
  testing::TempDir dir("sys");
  std::ofstream(dir / "s.txt") << "# io only\nread\n\nwrite\n";
  auto s = load_syscall_set(dir / "s.txt");
  CHECK(s.names() == std::vector<std::string>{"read", "write"});
}

TEST_CASE("filter keeps members in order and counts the rest") {
  const auto& set = default_syscall_set();
  auto r = filter_events({}, set);
  CHECK(r.events.empty());
  CHECK(r.dropped == 0);

  std::vector<SyscallEvent> ev = {{0, 1, "a", "read"}, {1, 1, "a", "ptrace"}, {2, 1, "a", "write"}};
  r = filter_events(ev, set);
  REQUIRE(r.events.size() == 2);
  CHECK(r.events[0].syscall == "read");
  CHECK(r.events[1].syscall == "write");
  CHECK(r.dropped == 1);

  std::vector<SyscallEvent> in_set = {{0, 1, "a", "mmap"}, {3, 2, "b", "brk"}};
  r = filter_events(in_set, set);
  CHECK(r.events == in_set);
  CHECK(r.dropped == 0);
}

TEST_CASE("filter matches a naive membership oracle and is idempotent") {
  std::mt19937_64 rng(5);
  auto t = testing::random_trace(rng, 2000, 1'000'000'000, {"read", "ptrace", "futex", "execve", "mmap2", "close"});
  const auto& set = default_syscall_set();
  auto r = filter_events(t.events, set);
  std::vector<SyscallEvent> oracle;
  for (const auto& e : t.events) {
    bool member = false;
    for (const auto& n : set.names()) member = member || n == e.syscall;
    if (member) oracle.push_back(e);
  }
  CHECK(r.events == oracle);
  CHECK(r.events.size() + r.dropped == t.events.size());
  auto again = filter_events(r.events, set);
  CHECK(again.events == r.events);
  CHECK(again.dropped == 0);
}
