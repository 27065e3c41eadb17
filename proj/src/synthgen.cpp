#include "sentinel/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "json.hpp"
#include "sentinel/error.hpp"
#include "sentinel/labeling.hpp"
#include "sentinel/parallel.hpp"
#include "text_util.hpp"

namespace sentinel {

namespace {

const std::vector<std::string> kHotCalls = {"read",  "write", "openat", "fstat", "poll",           "select",
                                            "ioctl", "mmap",  "munmap", "brk",   "rt_sigprocmask", "sched_yield"};
const std::vector<double> kHotWeights = {0.18, 0.14, 0.07, 0.08, 0.10, 0.05, 0.06, 0.07, 0.05, 0.06, 0.08, 0.06};
const std::vector<std::string> kOovCalls = {"futex", "clock_gettime", "epoll_wait", "getpid", "nanosleep", "close"};

const std::vector<std::string> kDefaultClasses = {"trojan", "virus", "backdoor", "rootkit", "miner", "grayware", "worm"};
// Every class cycles through the same calls in a different order.
const std::vector<std::string> kClassPool = {"poll", "read", "write", "send", "recvfrom", "fstat"};
const std::vector<std::vector<int>> kClassCycles = {
    {0, 1, 2, 3, 4, 5}, {0, 2, 4, 1, 3, 5}, {0, 3, 1, 5, 2, 4}, {0, 4, 2, 5, 1, 3},
    {0, 5, 3, 1, 4, 2}, {0, 2, 1, 4, 3, 5}, {0, 3, 5, 4, 1, 2}};
constexpr double kCycleFollow = 0.8;

std::size_t index_in(const std::vector<std::string>& vocab, std::string_view name) {
  auto it = std::find(vocab.begin(), vocab.end(), name);
  if (it == vocab.end()) throw InvalidArgument("call '" + std::string(name) + "' not in scenario vocabulary");
  return static_cast<std::size_t>(it - vocab.begin());
}

using Matrix = std::vector<std::vector<double>>;

Matrix zero_matrix(std::size_t v) { return Matrix(v, std::vector<double>(v, 0.0)); }

void normalize(std::vector<double>& row) {
  double s = std::accumulate(row.begin(), row.end(), 0.0);
  for (auto& x : row) x /= s;
}

// Hot-set chain with mildly perturbed rows and a uniform floor.
Matrix background_chain(const std::vector<std::string>& vocab, const std::vector<std::string>& calls,
                        const std::vector<double>& weights, double uniform_share, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(0.8, 1.2);
  const auto v = vocab.size();
  std::vector<std::size_t> ids;
  for (const auto& c : calls) ids.push_back(index_in(vocab, c));
  auto base = weights;
  normalize(base);
  std::vector<double> default_row(v, 0.0);
  for (std::size_t i = 0; i < ids.size(); ++i)
    default_row[ids[i]] = (1 - uniform_share) * base[i] + uniform_share / static_cast<double>(ids.size());
  Matrix m(v, default_row);
  for (auto from : ids) {
    std::vector<double> w(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) w[i] = base[i] * jitter(rng);
    normalize(w);
    std::fill(m[from].begin(), m[from].end(), 0.0);
    for (std::size_t i = 0; i < ids.size(); ++i)
      m[from][ids[i]] = (1 - uniform_share) * w[i] + uniform_share / static_cast<double>(ids.size());
  }
  return m;
}

Matrix cycle_chain(const std::vector<std::string>& vocab, const std::vector<std::string>& pool,
                   const std::vector<int>& cycle, double follow) {
  const auto v = vocab.size();
  std::vector<std::size_t> ids;
  for (int c : cycle) ids.push_back(index_in(vocab, pool[static_cast<std::size_t>(c)]));
  std::vector<double> spread(v, 0.0);
  for (auto id : ids) spread[id] = 1.0 / static_cast<double>(ids.size());
  Matrix m(v, spread);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto& row = m[ids[i]];
    for (auto id : ids) row[id] = (1 - follow) / static_cast<double>(ids.size());
    row[ids[(i + 1) % ids.size()]] += follow;
  }
  return m;
}

// Occasional process start: execve, access, mmap2, a run of mprotect, then
// rt_sigaction hands back to the background rows.
void add_spawns(Matrix& m, const std::vector<std::string>& vocab, double spawn_prob, double mprotect_loop) {
  const auto execve = index_in(vocab, "execve"), access = index_in(vocab, "access"), mmap2 = index_in(vocab, "mmap2"),
             mprotect = index_in(vocab, "mprotect"), sigaction = index_in(vocab, "rt_sigaction");
  const auto resume = m[execve];
  for (auto& row : m) {
    for (auto& x : row) x *= 1 - spawn_prob;
    row[execve] += spawn_prob;
  }
  auto only = [&](std::size_t from, std::size_t to) {
    std::fill(m[from].begin(), m[from].end(), 0.0);
    m[from][to] = 1.0;
  };
  only(execve, access);
  only(access, mmap2);
  only(mmap2, mprotect);
  std::fill(m[mprotect].begin(), m[mprotect].end(), 0.0);
  m[mprotect][mprotect] = mprotect_loop;
  m[mprotect][sigaction] = 1 - mprotect_loop;
  m[sigaction] = resume;
}

Matrix sequence_chain(const std::vector<std::string>& vocab, const std::vector<std::string>& sequence) {
  const auto v = vocab.size();
  auto m = zero_matrix(v);
  std::vector<std::size_t> ids;
  for (const auto& c : sequence) ids.push_back(index_in(vocab, c));
  for (std::size_t i = 0; i < ids.size(); ++i) m[ids[i]][ids[(i + 1) % ids.size()]] += 1.0;
  for (std::size_t r = 0; r < v; ++r) {
    if (std::accumulate(m[r].begin(), m[r].end(), 0.0) == 0) m[r][ids[0]] = 1.0;
    normalize(m[r]);
  }
  return m;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

const ClassBehavior& ScenarioSpec::class_behavior(std::string_view name) const {
  for (const auto& c : classes)
    if (c.profile.name == name) return c;
  throw InvalidArgument("unknown class '" + std::string(name) + "'");
}

std::vector<std::string> ScenarioSpec::class_names() const {
  std::vector<std::string> out;
  for (const auto& c : classes) out.push_back(c.profile.name);
  return out;
}

double ScenarioSpec::benign_rate_hz() const {
  double r = 0;
  for (const auto& p : benign_profiles) r += p.rate_hz;
  return r;
}

ScenarioSpec default_scenario(Scenario scenario, std::uint64_t seed) {
  ScenarioSpec spec;
  spec.scenario = scenario;
  spec.seed = seed;
  spec.vocabulary = default_syscall_set().names();
  const auto& vocab = spec.vocabulary;

  BehaviorProfile os;
  os.name = "os";
  os.transition = background_chain(vocab, kHotCalls, kHotWeights, 0.12, 0x05b0);
  add_spawns(os.transition, vocab, 0.01, 0.3);
  os.rate_hz = 50;
  os.burstiness = 0.3;
  os.oov_fraction = 0.1;
  os.oov_calls = kOovCalls;
  os.comms = {"systemd", "sshd", "cron", "rsyslogd", "bash"};
  os.base_pid = 300;
  spec.benign_profiles.push_back(os);

  if (scenario == Scenario::application) {
    BehaviorProfile web;
    web.name = "web";
    web.transition = background_chain(vocab, {"poll", "read", "write", "send", "recvfrom", "openat", "fstat", "mmap"},
                                      {0.22, 0.22, 0.18, 0.12, 0.12, 0.05, 0.05, 0.04}, 0.2, 0x3eb);
    add_spawns(web.transition, vocab, 0.0005, 0.3);  // worker restarts
    web.rate_hz = 450;
    web.burstiness = 0.4;
    web.oov_fraction = 0.15;
    web.oov_calls = kOovCalls;
    web.comms = {"apache2", "php-fpm", "mysqld"};
    web.base_pid = 2000;
    spec.benign_profiles.push_back(web);
  }

  spec.loader.name = "loader";
  // Unpacking: mmap2 then long mprotect runs.
  spec.loader.transition = sequence_chain(vocab, {"access", "mmap2", "mprotect", "rt_sigaction"});
  {
    auto mp = index_in(vocab, "mprotect");
    std::fill(spec.loader.transition[mp].begin(), spec.loader.transition[mp].end(), 0.0);
    spec.loader.transition[mp][mp] = 0.85;
    spec.loader.transition[mp][index_in(vocab, "rt_sigaction")] = 0.15;
    spec.loader.transition[index_in(vocab, "rt_sigaction")] = std::vector<double>(vocab.size(), 0.0);
    spec.loader.transition[index_in(vocab, "rt_sigaction")][index_in(vocab, "mmap2")] = 1.0;
  }
  spec.loader.rate_hz = 20000;
  spec.loader.comms = {"dropper"};
  spec.loader.base_pid = 31000;
  spec.loader_events = 60;

  for (std::size_t c = 0; c < kDefaultClasses.size(); ++c) {
    ClassBehavior cls;
    cls.profile.name = kDefaultClasses[c];
    cls.profile.transition = cycle_chain(vocab, kClassPool, kClassCycles[c], kCycleFollow);
    cls.profile.rate_hz = 20;
    cls.profile.burstiness = 0.2;
    cls.profile.comms = {"dropper"};
    cls.profile.base_pid = 31000;
    spec.classes.push_back(std::move(cls));
  }
  return spec;
}

namespace {

void validate_profile(const BehaviorProfile& p, std::size_t v) {
  if (p.name.empty()) throw InvalidArgument("profile without a name");
  if (!(p.rate_hz > 0) || !std::isfinite(p.rate_hz)) throw InvalidArgument("profile " + p.name + ": rate_hz must be > 0");
  if (!(p.burstiness >= 0)) throw InvalidArgument("profile " + p.name + ": burstiness must be >= 0");
  if (!(p.oov_fraction >= 0 && p.oov_fraction < 1)) throw InvalidArgument("profile " + p.name + ": oov_fraction must be in [0,1)");
  if (p.oov_fraction > 0 && p.oov_calls.empty()) throw InvalidArgument("profile " + p.name + ": oov_fraction without oov_calls");
  if (p.comms.empty()) throw InvalidArgument("profile " + p.name + ": no process names");
  if (p.transition.size() != v) throw InvalidArgument("profile " + p.name + ": transition matrix has wrong size");
  for (std::size_t r = 0; r < v; ++r) {
    if (p.transition[r].size() != v) throw InvalidArgument("profile " + p.name + ": transition matrix has wrong size");
    double s = 0;
    for (double x : p.transition[r]) {
      if (!(x >= 0)) throw InvalidArgument("profile " + p.name + ": negative transition probability");
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-9)
      throw InvalidArgument("profile " + p.name + ": transition row " + std::to_string(r) + " sums to " + std::to_string(s));
  }
}

}  // namespace

void validate(const ScenarioSpec& spec) {
  const auto v = spec.vocabulary.size();
  if (v == 0) throw InvalidArgument("scenario vocabulary is empty");
  if (!(spec.duration_s > 0)) throw InvalidArgument("duration_s must be > 0");
  auto [lo, hi] = spec.inject_window_s;
  if (!(lo >= 0 && lo < hi && hi <= spec.duration_s)) throw InvalidArgument("inject window must lie inside the duration");
  if (spec.benign_profiles.empty()) throw InvalidArgument("scenario has no benign profile");
  for (const auto& p : spec.benign_profiles) validate_profile(p, v);
  validate_profile(spec.loader, v);
  std::set<std::string> names;
  for (const auto& c : spec.classes) {
    validate_profile(c.profile, v);
    if (c.profile.name == kBenignClass) throw InvalidArgument("'benign' cannot be a malware class");
    if (!names.insert(c.profile.name).second) throw InvalidArgument("duplicate class " + c.profile.name);
    if (!(c.burst_rate_hz > 0)) throw InvalidArgument("class " + c.profile.name + ": burst_rate_hz must be > 0");
    if (!(c.active_min_s >= 0 && c.active_min_s <= c.active_max_s))
      throw InvalidArgument("class " + c.profile.name + ": bad active range");
  }
}

// --- config persistence ---------------------------------------------------------

namespace {

using nlohmann::ordered_json;

ordered_json profile_json(const BehaviorProfile& p, const std::vector<std::string>& vocab) {
  ordered_json t = ordered_json::object();
  for (std::size_t r = 0; r < p.transition.size(); ++r) {
    ordered_json row = ordered_json::object();
    for (std::size_t c = 0; c < p.transition[r].size(); ++c)
      if (p.transition[r][c] != 0) row[vocab[c]] = p.transition[r][c];
    t[vocab[r]] = std::move(row);
  }
  return {{"name", p.name},         {"rate_hz", p.rate_hz},     {"burstiness", p.burstiness},
          {"oov_fraction", p.oov_fraction}, {"oov_calls", p.oov_calls}, {"comms", p.comms},
          {"base_pid", p.base_pid}, {"transition", std::move(t)}};
}

BehaviorProfile profile_from_json(const ordered_json& j, const std::vector<std::string>& vocab) {
  BehaviorProfile p;
  p.name = j.at("name").get<std::string>();
  p.rate_hz = j.at("rate_hz").get<double>();
  p.burstiness = j.value("burstiness", 0.0);
  p.oov_fraction = j.value("oov_fraction", 0.0);
  p.oov_calls = j.value("oov_calls", std::vector<std::string>{});
  p.comms = j.value("comms", std::vector<std::string>{"proc"});
  p.base_pid = j.value("base_pid", 1000);
  p.transition = zero_matrix(vocab.size());
  for (const auto& [from, row] : j.at("transition").items())
    for (const auto& [to, prob] : row.items()) p.transition[index_in(vocab, from)][index_in(vocab, to)] = prob.get<double>();
  return p;
}

}  // namespace

ScenarioSpec load_scenario(const std::filesystem::path& path) {
  ScenarioSpec spec;
  try {
    auto j = ordered_json::parse(detail::read_file(path.string()));
    spec.scenario = parse_scenario(j.at("scenario").get<std::string>());
    spec.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    spec.duration_s = j.value("duration_s", 600.0);
    auto window = j.value("inject_window_s", std::vector<double>{240, 360});
    if (window.size() != 2) throw InvalidArgument("inject_window_s needs two values");
    spec.inject_window_s = {window[0], window[1]};
    spec.seed = j.value("seed", std::uint64_t{0});
    spec.loader_events = j.value("loader_events", std::size_t{60});
    for (const auto& p : j.at("benign_profiles")) spec.benign_profiles.push_back(profile_from_json(p, spec.vocabulary));
    spec.loader = profile_from_json(j.at("loader"), spec.vocabulary);
    for (const auto& c : j.at("classes")) {
      ClassBehavior cls;
      cls.profile = profile_from_json(c.at("profile"), spec.vocabulary);
      cls.burst_rate_hz = c.value("burst_rate_hz", 150.0);
      cls.burst_events = c.value("burst_events", std::size_t{800});
      cls.active_min_s = c.value("active_min_s", 20.0);
      cls.active_max_s = c.value("active_max_s", 200.0);
      spec.classes.push_back(std::move(cls));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
  validate(spec);
  return spec;
}

void save_scenario(const ScenarioSpec& spec, const std::filesystem::path& path) {
  validate(spec);
  ordered_json j;
  j["scenario"] = to_string(spec.scenario);
  j["vocabulary"] = spec.vocabulary;
  j["duration_s"] = spec.duration_s;
  j["inject_window_s"] = {spec.inject_window_s.first, spec.inject_window_s.second};
  j["seed"] = spec.seed;
  j["loader_events"] = spec.loader_events;
  j["benign_profiles"] = ordered_json::array();
  for (const auto& p : spec.benign_profiles) j["benign_profiles"].push_back(profile_json(p, spec.vocabulary));
  j["loader"] = profile_json(spec.loader, spec.vocabulary);
  j["classes"] = ordered_json::array();
  for (const auto& c : spec.classes)
    j["classes"].push_back({{"profile", profile_json(c.profile, spec.vocabulary)},
                            {"burst_rate_hz", c.burst_rate_hz},
                            {"burst_events", c.burst_events},
                            {"active_min_s", c.active_min_s},
                            {"active_max_s", c.active_max_s}});
  detail::write_file(path.string(), j.dump(2) + "\n");
}

// --- generation ------------------------------------------------------------------

std::uint64_t trace_seed(std::uint64_t corpus_seed, std::string_view trace_id) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : trace_id) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(corpus_seed) ^ h);
}

namespace {

struct Tagged {
  SyscallEvent event;
  bool malware;
};

// Emits events of one profile over [start_ns, end_ns), at most max_events.
class Emitter {
 public:
  Emitter(const BehaviorProfile& p, const std::vector<std::string>& vocab, std::uint64_t seed)
      : p_(p), vocab_(vocab), rng_(seed) {
    rows_.reserve(p.transition.size());
    for (const auto& row : p.transition) rows_.emplace_back(row.begin(), row.end());
    state_ = rows_[0](rng_);
  }

  std::int64_t run(std::int64_t start_ns, std::int64_t end_ns, double rate_hz, std::size_t max_events, bool malware,
                   std::vector<Tagged>& out) {
    std::exponential_distribution<double> gap(1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> comm(0, p_.comms.size() - 1);
    double t = static_cast<double>(start_ns) * 1e-9;
    std::int64_t second = -1;
    double multiplier = 1.0;
    std::int64_t last = start_ns;
    for (std::size_t emitted = 0; emitted < max_events;) {
      auto sec = static_cast<std::int64_t>(std::floor(t));
      if (sec != second) {
        second = sec;
        multiplier = burst_multiplier();
      }
      t += gap(rng_) / (rate_hz * multiplier);
      auto ts = static_cast<std::int64_t>(std::llround(t * 1e9));
      if (ts >= end_ns) break;
      SyscallEvent e;
      e.ts_ns = ts;
      auto ci = comm(rng_);
      e.comm = p_.comms[ci];
      e.pid = p_.base_pid + static_cast<std::int32_t>(ci);
      if (p_.oov_fraction > 0 && unit(rng_) < p_.oov_fraction) {
        std::uniform_int_distribution<std::size_t> pick(0, p_.oov_calls.size() - 1);
        e.syscall = p_.oov_calls[pick(rng_)];
      } else {
        state_ = rows_[state_](rng_);
        e.syscall = vocab_[state_];
      }
      out.push_back({std::move(e), malware});
      last = ts;
      ++emitted;
    }
    return last;
  }

 private:
  double burst_multiplier() {
    if (p_.burstiness <= 0) return 1.0;
    const double shape = 1.0 / (p_.burstiness * p_.burstiness);
    std::gamma_distribution<double> g(shape, 1.0 / shape);
    return std::max(g(rng_), 1e-3);
  }

  const BehaviorProfile& p_;
  const std::vector<std::string>& vocab_;
  std::mt19937_64 rng_;
  std::vector<std::discrete_distribution<std::size_t>> rows_;
  std::size_t state_ = 0;
};

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) { return splitmix64(seed ^ splitmix64(stream + 1)); }

}  // namespace

GeneratedTrace generate_trace_with_seed(const ScenarioSpec& spec, const std::optional<std::string>& class_name,
                                        const std::string& trace_id, std::uint64_t seed) {
  const ClassBehavior* cls = class_name ? &spec.class_behavior(*class_name) : nullptr;
  const auto duration_ns = static_cast<std::int64_t>(std::llround(spec.duration_s * 1e9));
  GeneratedTrace g;
  g.seed = seed;
  g.trace.meta.trace_id = trace_id;
  g.trace.meta.duration_ns = duration_ns;
  g.trace.meta.scenario = spec.scenario;

  std::vector<Tagged> events;
  std::uint64_t stream = 0;
  for (const auto& p : spec.benign_profiles) {
    Emitter em(p, spec.vocabulary, stream_seed(seed, stream++));
    em.run(0, duration_ns, p.rate_hz, std::numeric_limits<std::size_t>::max(), false, events);
  }
  if (cls) {
    std::mt19937_64 rng(stream_seed(seed, 1000));
    std::uniform_real_distribution<double> when(spec.inject_window_s.first, spec.inject_window_s.second);
    std::uniform_real_distribution<double> active(cls->active_min_s, cls->active_max_s);
    const auto inject = std::min<std::int64_t>(static_cast<std::int64_t>(std::llround(when(rng) * 1e9)), duration_ns - 1);
    const auto end = std::min<std::int64_t>(inject + static_cast<std::int64_t>(std::llround(active(rng) * 1e9)), duration_ns);
    g.trace.meta.inject_ts_ns = inject;
    g.trace.meta.class_label = cls->profile.name;
    g.malware_end_ns = end;

    // The loader's first event lands exactly at the injection time.
    SyscallEvent first{inject, spec.loader.base_pid, spec.loader.comms.front(), "execve"};
    events.push_back({first, true});
    Emitter loader(spec.loader, spec.vocabulary, stream_seed(seed, 1001));
    auto t = inject;
    if (spec.loader_events > 1)
      t = loader.run(inject, end, spec.loader.rate_hz, spec.loader_events - 1, true, events);
    Emitter body(cls->profile, spec.vocabulary, stream_seed(seed, 1002));
    t = body.run(t, end, cls->burst_rate_hz, cls->burst_events, true, events);
    body.run(t, end, cls->profile.rate_hz, std::numeric_limits<std::size_t>::max(), true, events);
  }
  std::stable_sort(events.begin(), events.end(),
                   [](const Tagged& a, const Tagged& b) { return a.event.ts_ns < b.event.ts_ns; });
  g.trace.events.reserve(events.size());
  g.from_malware.reserve(events.size());
  for (auto& e : events) {
    g.trace.events.push_back(std::move(e.event));
    g.from_malware.push_back(e.malware);
  }
  return g;
}

GeneratedTrace generate_trace(const ScenarioSpec& spec, const std::optional<std::string>& class_name,
                              const std::string& trace_id) {
  return generate_trace_with_seed(spec, class_name, trace_id, trace_seed(spec.seed, trace_id));
}

std::vector<ManifestRow> plan_corpus(const ScenarioSpec& spec, std::size_t per_class_count, std::size_t benign_count) {
  if (per_class_count == 0) throw InvalidArgument("per_class_count must be at least 1");
  std::vector<ManifestRow> rows;
  auto add = [&](const std::optional<std::string>& cls, std::size_t i) {
    char num[16];
    std::snprintf(num, sizeof num, "%04zu", i);
    ManifestRow r;
    r.trace_id = std::string(to_string(spec.scenario)) + "-" + cls.value_or(std::string(kBenignClass)) + "-" + num;
    r.class_name = cls;
    r.scenario = spec.scenario;
    r.seed = trace_seed(spec.seed, r.trace_id);
    r.file = "traces/" + r.trace_id + ".trace";
    rows.push_back(std::move(r));
  };
  for (const auto& c : spec.classes)
    for (std::size_t i = 0; i < per_class_count; ++i) add(c.profile.name, i);
  for (std::size_t i = 0; i < benign_count; ++i) add(std::nullopt, i);
  return rows;
}

std::vector<ManifestRow> generate_corpus(const ScenarioSpec& spec, std::size_t per_class_count,
                                         std::size_t benign_count, const std::filesystem::path& dir,
                                         std::size_t jobs) {
  validate(spec);
  auto rows = plan_corpus(spec, per_class_count, benign_count);
  if (spec.classes.size() > 1) {
    auto d = min_class_distance(spec);
    if (!(d > kMinClassDistance))
      throw InvalidArgument("class profiles collide: minimum trigram total-variation distance " + std::to_string(d));
  }
  std::error_code ec;
  std::filesystem::create_directories(dir / "traces", ec);
  if (ec) throw IoError("cannot create " + (dir / "traces").string() + ": " + ec.message());
  parallel_for(rows.size(), jobs, [&](std::size_t i) {
    auto& r = rows[i];
    auto g = generate_trace_with_seed(spec, r.class_name, r.trace_id, r.seed);
    r.inject_ts_ns = g.trace.meta.inject_ts_ns;
    r.malware_end_ns = g.malware_end_ns;
    write_trace(g.trace, dir / r.file);
  });
  write_manifest(rows, dir / "manifest.csv");
  return rows;
}

void write_manifest(std::span<const ManifestRow> rows, const std::filesystem::path& path) {
  std::string out = "trace_id,class,scenario,seed,inject_ts_ns,malware_end_ns,file\n";
  auto opt = [](const std::optional<std::int64_t>& v) { return v ? std::to_string(*v) : std::string(); };
  for (const auto& r : rows) {
    out += r.trace_id + "," + r.class_name.value_or(std::string(kBenignClass)) + "," + std::string(to_string(r.scenario)) +
           "," + std::to_string(r.seed) + "," + opt(r.inject_ts_ns) + "," + opt(r.malware_end_ns) + "," + r.file + "\n";
  }
  detail::write_file(path.string(), out);
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  auto text = detail::read_file(path.string());
  detail::LineReader lines(text);
  std::string_view line;
  if (!lines.next(line) || line != "trace_id,class,scenario,seed,inject_ts_ns,malware_end_ns,file")
    throw ParseError(path.string() + ": bad manifest header", 1);
  std::vector<ManifestRow> rows;
  while (lines.next(line)) {
    if (line.empty()) continue;
    auto f = detail::split(line, ',');
    auto bad = [&](const std::string& what) { return ParseError(path.string() + ": " + what, lines.line_no()); };
    if (f.size() != 7) throw bad("expected 7 fields");
    ManifestRow r;
    r.trace_id = std::string(f[0]);
    if (f[1] != kBenignClass) r.class_name = std::string(f[1]);
    r.scenario = parse_scenario(f[2]);
    auto seed = detail::parse_int<std::uint64_t>(f[3]);
    if (!seed) throw bad("bad seed");
    r.seed = *seed;
    auto opt = [&](std::string_view s) -> std::optional<std::int64_t> {
      if (s.empty()) return std::nullopt;
      auto v = detail::parse_int<std::int64_t>(s);
      if (!v) throw bad("bad timestamp");
      return v;
    };
    r.inject_ts_ns = opt(f[4]);
    r.malware_end_ns = opt(f[5]);
    r.file = std::string(f[6]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// --- statistics ------------------------------------------------------------------

std::vector<double> stationary_distribution(const std::vector<std::vector<double>>& transition) {
  const auto v = transition.size();
  if (v == 0) return {};
  std::vector<double> pi(v, 1.0 / static_cast<double>(v)), next(v);
  for (int it = 0; it < 100000; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < v; ++i)
      if (pi[i] != 0)
        for (std::size_t j = 0; j < v; ++j) next[j] += pi[i] * transition[i][j];
    // Averaging with the previous iterate damps periodic chains.
    double diff = 0;
    for (std::size_t j = 0; j < v; ++j) {
      next[j] = 0.5 * (next[j] + pi[j]);
      diff += std::abs(next[j] - pi[j]);
    }
    pi.swap(next);
    if (diff < 1e-15) break;
  }
  normalize(pi);
  return pi;
}

std::vector<double> trigram_distribution(const BehaviorProfile& profile) {
  const auto& t = profile.transition;
  const auto v = t.size();
  auto pi = stationary_distribution(t);
  std::vector<double> out(v * v * v, 0.0);
  for (std::size_t a = 0; a < v; ++a) {
    if (pi[a] == 0) continue;
    for (std::size_t b = 0; b < v; ++b) {
      double ab = pi[a] * t[a][b];
      if (ab == 0) continue;
      for (std::size_t c = 0; c < v; ++c) out[(a * v + b) * v + c] = ab * t[b][c];
    }
  }
  return out;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InvalidArgument("distributions differ in support size");
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

double min_class_distance(const ScenarioSpec& spec) {
  std::vector<std::vector<double>> dists;
  for (const auto& c : spec.classes) dists.push_back(trigram_distribution(c.profile));
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < dists.size(); ++i)
    for (std::size_t j = i + 1; j < dists.size(); ++j) best = std::min(best, total_variation(dists[i], dists[j]));
  return best;
}

double ks_uniform_pvalue(std::span<const double> samples, double lo, double hi) {
  if (samples.empty()) throw InvalidArgument("KS test needs at least one sample");
  if (!(lo < hi)) throw InvalidArgument("KS test needs lo < hi");
  std::vector<double> s(samples.begin(), samples.end());
  std::sort(s.begin(), s.end());
  const double n = static_cast<double>(s.size());
  double d = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    double f = std::clamp((s[i] - lo) / (hi - lo), 0.0, 1.0);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  const double sq = std::sqrt(n);
  const double lambda = (sq + 0.12 + 0.11 / sq) * d;
  if (lambda < 0.2) return 1.0;
  double p = 0;
  for (int k = 1; k <= 100; ++k) {
    double term = std::exp(-2.0 * k * k * lambda * lambda);
    p += (k % 2 ? 2.0 : -2.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(p, 0.0, 1.0);
}

}  // namespace sentinel
