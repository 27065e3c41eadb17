#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "sentinel/features.hpp"
#include "sentinel/trees.hpp"

namespace sentinel {

/// Everything a session needs to classify windows. Immutable once built and
/// shared read-only between sessions.
class ClassifierContext {
 public:
  /// Throws VocabularyMismatch when the model was trained on another vocabulary.
  ClassifierContext(TreeEnsembleModel model, NGramVocabulary vocabulary,
                    SyscallSet syscalls = default_syscall_set());

  static std::shared_ptr<const ClassifierContext> load(const std::filesystem::path& model_path,
                                                       const std::filesystem::path& vocab_path,
                                                       SyscallSet syscalls = default_syscall_set());

  const TreeEnsembleModel& model() const noexcept { return model_; }
  const NGramVocabulary& vocabulary() const noexcept { return vocabulary_; }
  const SyscallSet& syscalls() const noexcept { return syscalls_; }
  const VocabularyIndex& index() const noexcept { return index_; }
  FeatureValues feature_values() const noexcept { return values_; }

 private:
  TreeEnsembleModel model_;
  NGramVocabulary vocabulary_;
  SyscallSet syscalls_;
  VocabularyIndex index_;
  FeatureValues values_ = FeatureValues::raw;
};

struct WindowConfig {
  std::int64_t window_ns = 60'000'000'000;
  /// 0 means tumbling (stride == window).
  std::int64_t stride_ns = 0;

  std::int64_t stride() const noexcept { return stride_ns > 0 ? stride_ns : window_ns; }
};

struct WindowPrediction {
  std::size_t window_index = 0;
  Prediction prediction;
  std::size_t event_count = 0;
  std::size_t dropped_oov_count = 0;
  bool partial = false;
};

/// `P<TAB>window_index=..<TAB>class=..<TAB>scores=c:s,...<TAB>event_count=..<TAB>dropped_oov_count=..<TAB>partial=..`
std::string format_prediction_record(const TreeEnsembleModel& model, const WindowPrediction& p);
/// `X<TAB>line=..<TAB>error=..`
std::string format_error_record(std::size_t line, std::string_view message);

struct PredictionRecord {
  std::size_t window_index = 0;
  std::string class_name;
  std::vector<std::pair<std::string, double>> scores;
  std::size_t event_count = 0;
  std::size_t dropped_oov_count = 0;
  bool partial = false;

  bool operator==(const PredictionRecord&) const = default;
};

/// Parses a `P` record. Throws ParseError on anything else.
PredictionRecord parse_prediction_record(std::string_view line);

/// Per-connection state: open windows keyed by event time. Memory is bounded
/// by the open windows' n-gram tables, not by stream length.
class StreamSession {
 public:
  StreamSession(const ClassifierContext& context, WindowConfig config);

  /// Feeds one event; returns the windows it closed, in index order.
  /// Throws InvalidArgument when the event is older than the previous one.
  std::vector<WindowPrediction> push(const SyscallEvent& event);
  /// End of stream: flushes the open windows with partial=true.
  std::vector<WindowPrediction> finish();

  std::size_t open_windows() const noexcept { return open_.size(); }

 private:
  struct Window {
    std::size_t index;
    NGramCounter counter;
    std::size_t events = 0;
    std::size_t dropped = 0;
  };
  WindowPrediction close(Window& w, bool partial) const;
  std::int64_t window_end(std::size_t index) const;

  const ClassifierContext* context_;
  WindowConfig config_;
  std::deque<Window> open_;
  std::size_t next_index_ = 0;  ///< lowest window index not yet created
  std::int64_t last_ts_ = 0;
};

/// Offline counterpart of a StreamSession over a whole trace, built from the
/// string-level featurization operations.
std::vector<WindowPrediction> predict_trace_windows(const ClassifierContext& context,
                                                    const Trace& trace, WindowConfig config);

/// `E<TAB>ts_ns<TAB>pid<TAB>comm<TAB>syscall`.
std::string format_event_record(const SyscallEvent& event);

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;
};
/// "host:port".
Endpoint parse_endpoint(std::string_view text);

/// TCP service: one session per connection, newline-delimited records.
class StreamServer {
 public:
  StreamServer(std::shared_ptr<const ClassifierContext> context, WindowConfig config);
  ~StreamServer();
  StreamServer(const StreamServer&) = delete;
  StreamServer& operator=(const StreamServer&) = delete;

  /// Binds and listens; port 0 picks an ephemeral port.
  void listen(const Endpoint& endpoint);
  std::uint16_t port() const noexcept { return port_; }

  /// Accepts connections until stop(). Blocks.
  void serve();
  /// serve() on a background thread.
  void start();
  /// Stops accepting, closes the listening socket and waits for open sessions.
  void stop();

  /// Handles one connected socket to completion (used by serve()).
  void handle_connection(int fd) const;

 private:
  std::shared_ptr<const ClassifierContext> context_;
  WindowConfig config_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread accept_thread_;
  std::mutex sessions_mutex_;
  std::vector<std::thread> sessions_;
};

/// Streams a trace to a service, pacing by inter-arrival time divided by
/// `speed_factor` (infinity streams as fast as possible), then half-closes and
/// returns every record the service sent back. Throws IoError when the
/// connection is refused.
std::vector<std::string> replay(const Trace& trace, const Endpoint& target, double speed_factor);

}  // namespace sentinel
