#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sentinel/syscalls.hpp"
#include "sentinel/trace.hpp"

namespace sentinel {

/// A first-order Markov chain over the syscall vocabulary emitting events as
/// a burst-modulated Poisson process.
struct BehaviorProfile {
  std::string name;
  /// Row-stochastic matrix over `vocabulary` of the owning ScenarioSpec.
  std::vector<std::vector<double>> transition;
  double rate_hz = 1;
  /// Coefficient of variation of the per-second rate multiplier (0 = Poisson).
  double burstiness = 0;
  /// Share of events that are calls outside the vocabulary; they do not
  /// advance the chain.
  double oov_fraction = 0;
  std::vector<std::string> oov_calls;
  /// Process names; each event picks one, pid is derived from the index.
  std::vector<std::string> comms{"proc"};
  std::int32_t base_pid = 1000;
};

/// Malware behaviour of one class: a loader prefix, an install burst and a
/// steady phase that ends at a random time after injection.
struct ClassBehavior {
  BehaviorProfile profile;  ///< class chain; rate_hz is the steady-phase rate
  double burst_rate_hz = 150;
  std::size_t burst_events = 800;
  double active_min_s = 20;
  double active_max_s = 200;
};

struct ScenarioSpec {
  Scenario scenario = Scenario::baseline;
  std::vector<std::string> vocabulary;  ///< chain state space, in matrix order
  std::vector<BehaviorProfile> benign_profiles;
  BehaviorProfile loader;
  std::size_t loader_events = 60;
  std::vector<ClassBehavior> classes;
  double duration_s = 600;
  std::pair<double, double> inject_window_s{240, 360};
  std::uint64_t seed = 0;

  const ClassBehavior& class_behavior(std::string_view name) const;
  std::vector<std::string> class_names() const;
  double benign_rate_hz() const;
};

/// Built-in profiles for the 7 default classes over the default syscall set.
ScenarioSpec default_scenario(Scenario scenario, std::uint64_t seed = 0);

/// Throws InvalidArgument on a non-stochastic row, bad rate or bad window.
void validate(const ScenarioSpec& spec);

ScenarioSpec load_scenario(const std::filesystem::path& path);
void save_scenario(const ScenarioSpec& spec, const std::filesystem::path& path);

struct GeneratedTrace {
  Trace trace;
  /// Per event: true when the malware emitted it.
  std::vector<bool> from_malware;
  std::uint64_t seed = 0;
  std::optional<std::int64_t> malware_end_ns;
};

/// Seed of one trace's random stream, derived from the corpus seed and id.
std::uint64_t trace_seed(std::uint64_t corpus_seed, std::string_view trace_id);

/// `class_name` nullopt generates a benign trace. Throws InvalidArgument on an
/// unknown class.
GeneratedTrace generate_trace(const ScenarioSpec& spec, const std::optional<std::string>& class_name,
                              const std::string& trace_id);
GeneratedTrace generate_trace_with_seed(const ScenarioSpec& spec,
                                        const std::optional<std::string>& class_name,
                                        const std::string& trace_id, std::uint64_t seed);

struct ManifestRow {
  std::string trace_id;
  std::optional<std::string> class_name;
  Scenario scenario = Scenario::baseline;
  std::uint64_t seed = 0;
  std::optional<std::int64_t> inject_ts_ns;
  std::optional<std::int64_t> malware_end_ns;
  std::string file;  ///< relative to the corpus directory

  bool operator==(const ManifestRow&) const = default;
};

/// The traces a corpus of this size contains, in generation order.
std::vector<ManifestRow> plan_corpus(const ScenarioSpec& spec, std::size_t per_class_count,
                                     std::size_t benign_count);

/// Writes traces/<id>.trace and manifest.csv under `dir`. Checks class
/// profiles are pairwise distinguishable first. Throws InvalidArgument when
/// per_class_count is 0 or two class profiles collide.
std::vector<ManifestRow> generate_corpus(const ScenarioSpec& spec, std::size_t per_class_count,
                                         std::size_t benign_count,
                                         const std::filesystem::path& dir, std::size_t jobs = 1);

void write_manifest(std::span<const ManifestRow> rows, const std::filesystem::path& path);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);

// --- profile statistics ---

std::vector<double> stationary_distribution(const std::vector<std::vector<double>>& transition);
/// p(a,b,c) = pi(a) P(a,b) P(b,c), flattened row-major.
std::vector<double> trigram_distribution(const BehaviorProfile& profile);
double total_variation(std::span<const double> p, std::span<const double> q);
/// Smallest pairwise total-variation distance between class trigram distributions.
double min_class_distance(const ScenarioSpec& spec);
inline constexpr double kMinClassDistance = 0.1;

/// One-sample Kolmogorov-Smirnov test against U(lo, hi); returns the p-value.
double ks_uniform_pvalue(std::span<const double> samples, double lo, double hi);

}  // namespace sentinel
