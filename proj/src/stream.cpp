#include "sentinel/stream.hpp"

#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>

#include <spdlog/spdlog.h>

#include "sentinel/error.hpp"
#include "text_util.hpp"

namespace sentinel {

ClassifierContext::ClassifierContext(TreeEnsembleModel model, NGramVocabulary vocabulary, SyscallSet syscalls)
    : model_(std::move(model)),
      vocabulary_(std::move(vocabulary)),
      syscalls_(std::move(syscalls)),
      index_(vocabulary_, syscalls_) {
  check_vocabulary(model_, vocabulary_.hash());
  if (auto it = model_.hyperparams.find("feature_values"); it != model_.hyperparams.end())
    values_ = parse_feature_values(it->second);
}

std::shared_ptr<const ClassifierContext> ClassifierContext::load(const std::filesystem::path& model_path,
                                                                 const std::filesystem::path& vocab_path,
                                                                 SyscallSet syscalls) {
  return std::make_shared<const ClassifierContext>(load_model(model_path), read_vocabulary(vocab_path),
                                                   std::move(syscalls));
}

namespace {

Prediction classify(const ClassifierContext& ctx, const NGramCounts& grams, std::size_t filtered) {
  auto v = vectorize(grams, ctx.vocabulary());
  const auto n = ctx.vocabulary().n();
  apply_feature_values(v, ctx.feature_values(), filtered >= n ? filtered - n + 1 : 0);
  return predict(ctx.model(), v);
}

}  // namespace

std::string format_prediction_record(const TreeEnsembleModel& model, const WindowPrediction& p) {
  std::string out = "P\twindow_index=" + std::to_string(p.window_index) + "\tclass=" + p.prediction.class_name +
                    "\tscores=";
  for (std::size_t k = 0; k < p.prediction.scores.size(); ++k) {
    if (k) out += ",";
    out += model.classes[k] + ":" + format_double(p.prediction.scores[k]);
  }
  out += "\tevent_count=" + std::to_string(p.event_count) + "\tdropped_oov_count=" + std::to_string(p.dropped_oov_count) +
         "\tpartial=" + (p.partial ? "true" : "false");
  return out;
}

std::string format_error_record(std::size_t line, std::string_view message) {
  std::string clean(message);
  std::replace(clean.begin(), clean.end(), '\t', ' ');
  std::replace(clean.begin(), clean.end(), '\n', ' ');
  return "X\tline=" + std::to_string(line) + "\terror=" + clean;
}

PredictionRecord parse_prediction_record(std::string_view line) {
  auto fields = detail::split(line, '\t');
  if (fields.size() != 7 || fields[0] != "P") throw ParseError("not a prediction record", 1);
  auto value = [&](std::size_t i, std::string_view key) {
    auto f = fields[i];
    if (!f.starts_with(key) || f.size() <= key.size() || f[key.size()] != '=')
      throw ParseError("prediction record: expected field '" + std::string(key) + "'", 1);
    return f.substr(key.size() + 1);
  };
  auto number = [&](std::size_t i, std::string_view key) {
    auto v = detail::parse_int<std::size_t>(value(i, key));
    if (!v) throw ParseError("prediction record: bad " + std::string(key), 1);
    return *v;
  };
  PredictionRecord r;
  r.window_index = number(1, "window_index");
  r.class_name = std::string(value(2, "class"));
  for (auto pair : detail::split(value(3, "scores"), ',')) {
    auto colon = pair.rfind(':');
    if (colon == std::string_view::npos) throw ParseError("prediction record: bad score", 1);
    auto s = detail::parse_double(pair.substr(colon + 1));
    if (!s) throw ParseError("prediction record: bad score", 1);
    r.scores.emplace_back(std::string(pair.substr(0, colon)), *s);
  }
  r.event_count = number(4, "event_count");
  r.dropped_oov_count = number(5, "dropped_oov_count");
  auto partial = value(6, "partial");
  if (partial != "true" && partial != "false") throw ParseError("prediction record: bad partial flag", 1);
  r.partial = partial == "true";
  return r;
}

// --- session ---------------------------------------------------------------------

StreamSession::StreamSession(const ClassifierContext& context, WindowConfig config)
    : context_(&context), config_(config) {
  if (config_.window_ns <= 0) throw InvalidArgument("window length must be positive");
  if (config_.stride() > config_.window_ns) throw InvalidArgument("stride cannot exceed the window length");
}

std::int64_t StreamSession::window_end(std::size_t index) const {
  return static_cast<std::int64_t>(index) * config_.stride() + config_.window_ns;
}

WindowPrediction StreamSession::close(Window& w, bool partial) const {
  WindowPrediction p;
  p.window_index = w.index;
  p.event_count = w.events;
  p.dropped_oov_count = w.dropped;
  p.partial = partial;
  auto filtered = w.events - w.dropped;
  const auto& index = context_->index();
  SparseVector v;
  for (const auto& [key, count] : w.counter.counts())
    if (auto col = index.column(key)) v.push_back({*col, static_cast<double>(count)});
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.column < b.column; });
  const auto n = context_->vocabulary().n();
  apply_feature_values(v, context_->feature_values(), filtered >= n ? filtered - n + 1 : 0);
  p.prediction = predict(context_->model(), v);
  return p;
}

std::vector<WindowPrediction> StreamSession::push(const SyscallEvent& event) {
  if (event.ts_ns < 0) throw InvalidArgument("negative timestamp");
  const auto stride = config_.stride();
  if (event.ts_ns < last_ts_)
    throw InvalidArgument("event at " + std::to_string(event.ts_ns) + " ns is older than the previous event");
  last_ts_ = event.ts_ns;

  const auto last = static_cast<std::size_t>(event.ts_ns / stride);
  const auto n = context_->vocabulary().n();
  const auto base = context_->syscalls().size();
  for (; next_index_ <= last; ++next_index_) open_.push_back(Window{next_index_, NGramCounter(base, n)});

  std::vector<WindowPrediction> out;
  while (!open_.empty() && window_end(open_.front().index) <= event.ts_ns) {
    out.push_back(close(open_.front(), false));
    open_.pop_front();
  }
  auto id = context_->syscalls().id_of(event.syscall);
  for (auto& w : open_) {
    ++w.events;
    if (id) w.counter.push(*id);
    else ++w.dropped;
  }
  return out;
}

std::vector<WindowPrediction> StreamSession::finish() {
  std::vector<WindowPrediction> out;
  for (auto& w : open_) out.push_back(close(w, true));
  open_.clear();
  return out;
}

std::vector<WindowPrediction> predict_trace_windows(const ClassifierContext& context, const Trace& trace,
                                                    WindowConfig config) {
  std::vector<WindowPrediction> out;
  if (trace.events.empty()) return out;
  const auto stride = config.stride();
  const auto last_ts = trace.events.back().ts_ns;
  const auto windows = static_cast<std::size_t>(last_ts / stride) + 1;
  for (std::size_t w = 0; w < windows; ++w) {
    const auto start = static_cast<std::int64_t>(w) * stride;
    const auto end = start + config.window_ns;
    auto lo = std::lower_bound(trace.events.begin(), trace.events.end(), start,
                               [](const SyscallEvent& e, std::int64_t t) { return e.ts_ns < t; });
    auto hi = std::lower_bound(lo, trace.events.end(), end,
                               [](const SyscallEvent& e, std::int64_t t) { return e.ts_ns < t; });
    std::span<const SyscallEvent> window(lo, hi);
    auto filtered = filter_events(window, context.syscalls());
    auto grams = extract_ngrams(filtered.events, context.vocabulary().n());
    WindowPrediction p;
    p.window_index = w;
    p.event_count = window.size();
    p.dropped_oov_count = filtered.dropped;
    p.partial = last_ts < end;
    p.prediction = classify(context, grams, filtered.events.size());
    out.push_back(std::move(p));
  }
  return out;
}

std::string format_event_record(const SyscallEvent& event) {
  std::string out = "E\t";
  append_event_fields(out, event);
  return out;
}

Endpoint parse_endpoint(std::string_view text) {
  auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon == 0) throw InvalidArgument("endpoint must be host:port, got '" + std::string(text) + "'");
  auto port = detail::parse_int<std::uint16_t>(text.substr(colon + 1));
  if (!port) throw InvalidArgument("bad port in '" + std::string(text) + "'");
  return {std::string(text.substr(0, colon)), *port};
}

// --- sockets ---------------------------------------------------------------------

namespace {

void send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    auto n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError(std::string("send failed: ") + std::strerror(errno));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

// Splits a byte stream into lines; calls fn(line) for each complete line.
template <typename Fn>
bool read_lines(int fd, std::string& buffer, Fn&& fn) {
  char chunk[65536];
  auto n = ::recv(fd, chunk, sizeof chunk, 0);
  if (n < 0 && errno == EINTR) return true;
  if (n <= 0) return false;
  buffer.append(chunk, static_cast<std::size_t>(n));
  std::size_t start = 0;
  for (auto pos = buffer.find('\n'); pos != std::string::npos; pos = buffer.find('\n', start)) {
    fn(std::string_view(buffer).substr(start, pos - start));
    start = pos + 1;
  }
  buffer.erase(0, start);
  return true;
}

struct AddrInfo {
  addrinfo* list = nullptr;
  AddrInfo(const Endpoint& e, bool passive) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    if (passive) hints.ai_flags = AI_PASSIVE;
    auto port = std::to_string(e.port);
    int rc = ::getaddrinfo(e.host.empty() ? nullptr : e.host.c_str(), port.c_str(), &hints, &list);
    if (rc != 0) throw IoError("cannot resolve " + e.host + ": " + ::gai_strerror(rc));
  }
  ~AddrInfo() {
    if (list) ::freeaddrinfo(list);
  }
};

}  // namespace

StreamServer::StreamServer(std::shared_ptr<const ClassifierContext> context, WindowConfig config)
    : context_(std::move(context)), config_(config) {
  StreamSession probe(*context_, config_);  // validates the window config
}

StreamServer::~StreamServer() { stop(); }

void StreamServer::listen(const Endpoint& endpoint) {
  AddrInfo info(endpoint, true);
  for (auto* a = info.list; a; a = a->ai_next) {
    int fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(fd, a->ai_addr, a->ai_addrlen) == 0 && ::listen(fd, 64) == 0) {
      sockaddr_storage addr{};
      socklen_t len = sizeof addr;
      ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
      port_ = ntohs(addr.ss_family == AF_INET6 ? reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port
                                                : reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
      listen_fd_ = fd;
      spdlog::info("listening on {}:{}", endpoint.host, port_);
      return;
    }
    ::close(fd);
  }
  throw IoError("cannot listen on " + endpoint.host + ":" + std::to_string(endpoint.port) + ": " + std::strerror(errno));
}

void StreamServer::serve() {
  if (listen_fd_ < 0) throw InvalidArgument("serve() before listen()");
  while (!stopping_) {
    pollfd p{listen_fd_, POLLIN, 0};
    int rc = ::poll(&p, 1, 100);
    if (rc <= 0) continue;
    int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    std::lock_guard lock(sessions_mutex_);
    sessions_.emplace_back([this, fd] {
      try {
        handle_connection(fd);
      } catch (const std::exception& e) {
        spdlog::warn("connection ended: {}", e.what());
      }
      ::close(fd);
    });
  }
}

void StreamServer::start() {
  accept_thread_ = std::thread([this] { serve(); });
}

void StreamServer::stop() {
  stopping_ = true;
  if (accept_thread_.joinable()) accept_thread_.join();
  if (listen_fd_ >= 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
  }
  std::vector<std::thread> sessions;
  {
    std::lock_guard lock(sessions_mutex_);
    sessions.swap(sessions_);
  }
  for (auto& t : sessions) t.join();
}

void StreamServer::handle_connection(int fd) const {
  StreamSession session(*context_, config_);
  std::string buffer, out;
  std::size_t line_no = 0;
  auto emit = [&](const std::vector<WindowPrediction>& preds) {
    for (const auto& p : preds) out += format_prediction_record(context_->model(), p) + "\n";
  };
  auto on_line = [&](std::string_view line) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) return;
    try {
      if (!line.starts_with("E\t")) throw ParseError("expected an E record", line_no);
      emit(session.push(parse_event_fields(line.substr(2), line_no)));
    } catch (const Error& e) {
      out += format_error_record(line_no, e.what()) + "\n";
    }
  };
  while (read_lines(fd, buffer, on_line)) {
    if (!out.empty()) {
      send_all(fd, out);
      out.clear();
    }
  }
  if (!buffer.empty()) on_line(buffer);
  emit(session.finish());
  if (!out.empty()) send_all(fd, out);
  ::shutdown(fd, SHUT_WR);
}

std::vector<std::string> replay(const Trace& trace, const Endpoint& target, double speed_factor) {
  if (!(speed_factor > 0)) throw InvalidArgument("speed factor must be positive");
  AddrInfo info(target, false);
  int fd = -1;
  for (auto* a = info.list; a && fd < 0; a = a->ai_next) {
    fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) != 0) {
      ::close(fd);
      fd = -1;
    }
  }
  if (fd < 0) throw IoError("cannot connect to " + target.host + ":" + std::to_string(target.port) + ": " + std::strerror(errno));

  std::vector<std::string> records;
  std::thread reader([&] {
    std::string buffer;
    while (read_lines(fd, buffer, [&](std::string_view line) {
      if (!line.empty()) records.emplace_back(line);
    })) {
    }
  });
  try {
    std::string batch;
    const auto start = std::chrono::steady_clock::now();
    const bool paced = std::isfinite(speed_factor);
    const auto first_ts = trace.events.empty() ? 0 : trace.events.front().ts_ns;
    for (const auto& e : trace.events) {
      if (paced) {
        auto due = start + std::chrono::nanoseconds(static_cast<std::int64_t>(static_cast<double>(e.ts_ns - first_ts) / speed_factor));
        if (due > std::chrono::steady_clock::now()) {
          send_all(fd, batch);
          batch.clear();
          std::this_thread::sleep_until(due);
        }
      }
      batch += format_event_record(e);
      batch += '\n';
      if (batch.size() > (1 << 16)) {
        send_all(fd, batch);
        batch.clear();
      }
    }
    send_all(fd, batch);
  } catch (...) {
    ::shutdown(fd, SHUT_RDWR);
    reader.join();
    ::close(fd);
    throw;
  }
  ::shutdown(fd, SHUT_WR);
  reader.join();
  ::close(fd);
  return records;
}

}  // namespace sentinel
