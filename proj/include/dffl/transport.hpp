#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "dffl/codec.hpp"
#include "dffl/error.hpp"
#include "dffl/model.hpp"
#include "dffl/protocol.hpp"
#include "dffl/rng.hpp"
#include "dffl/simnet.hpp"
#include "dffl/text.hpp"

namespace dffl {

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  std::string to_string() const { return host + ":" + std::to_string(port); }
};

inline Endpoint parse_endpoint(std::string_view text) {
  auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon == 0) {
    throw ConfigError("address '" + std::string(text) + "' must look like host:port");
  }
  Endpoint e;
  e.host = std::string(text.substr(0, colon));
  long port = 0;
  try {
    port = parse_int(text.substr(colon + 1), "port");
  } catch (const ValidationError& err) {
    throw ConfigError(err.what());
  }
  if (port < 0 || port > 65535) throw ConfigError("port out of range in '" + std::string(text) + "'");
  e.port = static_cast<std::uint16_t>(port);
  return e;
}

inline std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  Socket(Socket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = o.fd_;
      o.fd_ = -1;
    }
    return *this;
  }
  ~Socket() { close(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }

  void close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

  void shutdown_write() const {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_WR);
  }

  // Wakes a thread blocked in recv on this socket.
  void shutdown_both() const {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  void send_all(std::string_view bytes) const {
    while (!bytes.empty()) {
      ssize_t n = ::send(fd_, bytes.data(), bytes.size(), MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw IoError(errno_text("send"));
      }
      bytes.remove_prefix(static_cast<std::size_t>(n));
    }
  }

  // Returns 0 at end of stream.
  std::size_t recv_some(char* buf, std::size_t cap) const {
    for (;;) {
      ssize_t n = ::recv(fd_, buf, cap, 0);
      if (n >= 0) return static_cast<std::size_t>(n);
      if (errno == EINTR) continue;
      throw IoError(errno_text("recv"));
    }
  }

 private:
  int fd_ = -1;
};

inline sockaddr_in resolve_ipv4(const Endpoint& e) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  int rc = ::getaddrinfo(e.host.c_str(), nullptr, &hints, &res);
  if (rc != 0 || !res) throw IoError("cannot resolve '" + e.host + "': " + gai_strerror(rc));
  sockaddr_in addr = *reinterpret_cast<sockaddr_in*>(res->ai_addr);
  ::freeaddrinfo(res);
  addr.sin_port = htons(e.port);
  return addr;
}

inline Socket listen_on(const Endpoint& e, std::uint16_t* bound_port = nullptr) {
  Socket s(::socket(AF_INET, SOCK_STREAM, 0));
  if (!s.valid()) throw IoError(errno_text("socket"));
  int one = 1;
  ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr = resolve_ipv4(e);
  if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    throw IoError(errno_text(("bind " + e.to_string()).c_str()));
  }
  if (::listen(s.fd(), 16) != 0) throw IoError(errno_text("listen"));
  if (bound_port) {
    socklen_t len = sizeof addr;
    ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    *bound_port = ntohs(addr.sin_port);
  }
  return s;
}

inline Socket connect_with_retries(const Endpoint& e, int attempts, std::chrono::milliseconds delay) {
  sockaddr_in addr = resolve_ipv4(e);
  std::string last;
  for (int i = 0; i < std::max(attempts, 1); ++i) {
    Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (!s.valid()) throw IoError(errno_text("socket"));
    if (::connect(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0) {
      int one = 1;
      ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      return s;
    }
    last = std::strerror(errno);
    std::this_thread::sleep_for(delay);
  }
  throw IoError("cannot connect to " + e.to_string() + " after " + std::to_string(attempts) + " attempts: " + last);
}

using Logger = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// Server

struct ServeOptions {
  // Real seconds per protocol second.
  double time_scale = 1.0;
  // Charged to the deadline as dispatch allowance and recorded as upload time.
  NetworkModel network;
  std::uint32_t max_frame = default_max_frame_size;
  Logger log;
  // Called with the bound port once the server is accepting connections.
  std::function<void(std::uint16_t)> on_listening;
};

struct ServeResult {
  Ledger ledger;
  std::vector<std::string> warnings;
};

namespace detail {

struct Connection {
  std::uint64_t id = 0;
  Socket socket;
  std::mutex write_mutex;
  std::optional<ClientId> client;
  bool closed = false;

  void write_frame(const std::string& frame) {
    std::lock_guard lock(write_mutex);
    socket.send_all(frame);
  }
};

struct Incoming {
  std::uint64_t connection = 0;
  std::optional<Message> message;  // empty when the connection ended
  std::string error;
};

template <typename T>
class Channel {
 public:
  void push(T v) {
    {
      std::lock_guard lock(mutex_);
      items_.push_back(std::move(v));
    }
    cv_.notify_one();
  }

  // Waits until an item arrives or `until` passes.
  std::optional<T> pop_until(std::optional<std::chrono::steady_clock::time_point> until) {
    std::unique_lock lock(mutex_);
    auto ready = [&] { return !items_.empty(); };
    if (until) {
      if (!cv_.wait_until(lock, *until, ready)) return std::nullopt;
    } else {
      cv_.wait(lock, ready);
    }
    T v = std::move(items_.front());
    items_.pop_front();
    return v;
  }

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<T> items_;
};

}  // namespace detail

// Runs one job to completion: sessions feed a single thread that owns the
// protocol state; deadline expiry enters the same ordered loop.
inline ServeResult serve(const Job& job, std::size_t expected_clients, const Endpoint& listen_address,
                         Evaluator evaluator, const ServeOptions& options = {}) {
  using Clock = std::chrono::steady_clock;
  if (!(options.time_scale > 0.0)) throw ConfigError("time_scale must be positive");
  options.network.validate();
  ServeResult result;
  auto log = [&](const std::string& s) {
    result.warnings.push_back(s);
    if (options.log) options.log(s);
  };

  std::uint16_t port = 0;
  Socket listener = listen_on(listen_address, &port);

  ServerTimings timings;
  timings.model_dispatch_time = transfer_time(job.initial_params.payload_bytes(), options.network);
  timings.notice_dispatch_time = transfer_time(0, options.network);
  timings.upload_transfer_time = timings.model_dispatch_time;
  FusionServer server(job, timings, expected_clients, std::move(evaluator));

  const auto t0 = Clock::now();
  auto now = [&] { return std::chrono::duration<double>(Clock::now() - t0).count() / options.time_scale; };
  auto wall = [&](double at) {
    return t0 + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(at * options.time_scale));
  };

  detail::Channel<detail::Incoming> channel;
  std::mutex connections_mutex;
  std::map<std::uint64_t, std::shared_ptr<detail::Connection>> connections;
  std::vector<std::thread> readers;
  std::atomic<bool> stopping{false};
  std::atomic<std::size_t> readers_done{0};

  std::thread acceptor([&] {
    std::uint64_t next_id = 1;
    while (!stopping) {
      pollfd p{listener.fd(), POLLIN, 0};
      int rc = ::poll(&p, 1, 50);
      if (rc <= 0 || stopping) continue;
      int fd = ::accept(listener.fd(), nullptr, nullptr);
      if (fd < 0) continue;
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      auto conn = std::make_shared<detail::Connection>();
      conn->id = next_id++;
      conn->socket = Socket(fd);
      {
        std::lock_guard lock(connections_mutex);
        connections[conn->id] = conn;
        readers.emplace_back([conn, &channel, &readers_done, max = options.max_frame] {
          FrameReader reader(max);
          std::vector<char> buf(64 * 1024);
          try {
            for (;;) {
              std::size_t n = conn->socket.recv_some(buf.data(), buf.size());
              if (n == 0) {
                reader.finish();
                break;
              }
              reader.feed(std::string_view(buf.data(), n));
              while (auto m = reader.next()) channel.push({conn->id, std::move(*m), {}});
            }
            channel.push({conn->id, std::nullopt, {}});
          } catch (const std::exception& e) {
            channel.push({conn->id, std::nullopt, e.what()});
          }
          ++readers_done;
        });
      }
    }
  });

  std::map<ClientId, std::uint64_t> client_connection;
  std::optional<std::pair<Clock::time_point, ServerTimer>> timer;

  auto find_connection = [&](std::uint64_t id) -> std::shared_ptr<detail::Connection> {
    std::lock_guard lock(connections_mutex);
    auto it = connections.find(id);
    return it == connections.end() ? nullptr : it->second;
  };

  auto send_to = [&](const std::shared_ptr<detail::Connection>& conn, const Message& m) {
    if (!conn || conn->closed) return;
    try {
      conn->write_frame(encode_message(m, options.max_frame));
    } catch (const IoError& e) {
      log("write to connection " + std::to_string(conn->id) + " failed: " + e.what());
    }
  };

  // Outputs of a DownloadJob go back on the connection that asked.
  auto apply = [&](ServerOutput out, std::optional<std::uint64_t> download_conn) {
    for (const auto& w : out.warnings) log(w);
    for (const auto& ob : out.messages) {
      std::shared_ptr<detail::Connection> conn;
      if (download_conn) {
        conn = find_connection(*download_conn);
        if (conn && ob.message.kind == MessageKind::JobPayload) {
          conn->client = ob.to;
          client_connection[ob.to] = conn->id;
        }
      } else if (auto it = client_connection.find(ob.to); it != client_connection.end()) {
        conn = find_connection(it->second);
      }
      send_to(conn, ob.message);
    }
    if (out.arm_timer) timer = std::make_pair(wall(out.arm_timer->first), out.arm_timer->second);
  };

  auto drop = [&](const std::shared_ptr<detail::Connection>& conn, const std::string& why) {
    if (!conn || conn->closed) return;
    conn->closed = true;
    conn->socket.shutdown_both();
    if (conn->client) {
      log("client " + std::to_string(*conn->client) + " lost: " + why);
      client_connection.erase(*conn->client);
      apply(server.on_disconnect(*conn->client, now()), std::nullopt);
    }
  };

  // Half-close first so queued frames reach clients before any reset, then
  // give readers a moment to see the clients hang up.
  auto shutdown_all = [&] {
    stopping = true;
    acceptor.join();
    std::vector<std::thread> to_join;
    {
      std::lock_guard lock(connections_mutex);
      for (auto& [id, c] : connections) c->socket.shutdown_write();
      to_join.swap(readers);
    }
    auto give_up = Clock::now() + std::chrono::seconds(2);
    while (readers_done < to_join.size() && Clock::now() < give_up) {
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    {
      std::lock_guard lock(connections_mutex);
      for (auto& [id, c] : connections) c->socket.shutdown_both();
    }
    for (auto& t : to_join) t.join();
  };

  try {
    if (options.on_listening) options.on_listening(port);
    apply(server.start(now()), std::nullopt);
    while (!server.finished()) {
      std::optional<Clock::time_point> until;
      if (timer) until = timer->first;
      auto in = channel.pop_until(until);
      if (!in) {
        auto t = timer->second;
        timer.reset();
        // wait_until may return a hair before the deadline once converted back
        // to protocol seconds.
        double at = now();
        if (server.round_state().deadline && at < *server.round_state().deadline) {
          at = *server.round_state().deadline;
        }
        apply(server.on_timer(t, at), std::nullopt);
        continue;
      }
      auto conn = find_connection(in->connection);
      if (!in->message) {
        drop(conn, in->error.empty() ? "connection closed" : in->error);
        continue;
      }
      if (!conn || conn->closed) continue;
      const Message& m = *in->message;
      bool is_download = m.kind == MessageKind::DownloadJob;
      if (!is_download && conn->client != m.client) {
        drop(conn, "message claims client id " + std::to_string(m.client));
        continue;
      }
      try {
        apply(server.handle(m, now()), is_download ? std::optional(conn->id) : std::nullopt);
      } catch (const ProtocolError& e) {
        drop(conn, std::string("protocol error: ") + e.what());
      }
    }
  } catch (...) {
    shutdown_all();
    throw;
  }
  shutdown_all();
  result.ledger = server.ledger();
  return result;
}

// ---------------------------------------------------------------------------
// Client

struct ClientRunOptions {
  double time_scale = 1.0;
  int connect_attempts = 50;
  std::chrono::milliseconds retry_delay{100};
  std::uint32_t max_frame = default_max_frame_size;
  AccuracySource accuracy_source = AccuracySource::training_set;
  double holdout_fraction = 0.2;
  Logger log;
};

struct ClientRunResult {
  ClientState state;
  std::vector<std::string> warnings;
  bool shut_down = false;
};

// Executes the client state machine against a live server. Training runs
// for real; its modelled duration is then waited out while still reading
// the connection, so a deadline can cut it short.
inline ClientRunResult run_client(const Endpoint& server_address, ClientId requested_id, const Dataset& data,
                                  const ComputeProfile& compute, std::uint64_t seed, const ClientRunOptions& options = {}) {
  using Clock = std::chrono::steady_clock;
  if (!(options.time_scale > 0.0)) throw ConfigError("time_scale must be positive");
  data.validate();
  compute.validate();
  ClientRunResult result;
  auto log = [&](const std::string& s) {
    result.warnings.push_back(s);
    if (options.log) options.log(s);
  };

  std::optional<std::pair<Dataset, Dataset>> split;
  std::size_t train_size = data.size();
  if (options.accuracy_source == AccuracySource::holdout) {
    auto held = static_cast<std::size_t>(std::llround(options.holdout_fraction * static_cast<double>(data.size())));
    train_size = data.size() - std::clamp<std::size_t>(held, 1, data.size() - 1);
  }

  FusionClient client(requested_id, static_cast<double>(train_size));
  Socket sock = connect_with_retries(server_address, options.connect_attempts, options.retry_delay);
  FrameReader reader(options.max_frame);
  std::optional<std::pair<Clock::time_point, std::uint32_t>> training_done;
  bool done = false;

  auto apply = [&](ClientOutput out) {
    for (const auto& w : out.warnings) log(w);
    for (const auto& m : out.messages) sock.send_all(encode_message(m, options.max_frame));
    if (out.done) {
      done = true;
      training_done.reset();
      return;
    }
    if (out.train) {
      const ClientId id = client.state().client_id;
      const auto& job = *client.job();
      const Dataset* train_set = &data;
      if (options.accuracy_source == AccuracySource::holdout) {
        if (!split) split = split_holdout(data, options.holdout_fraction, derive_seed(seed, id, 0, Purpose::holdout_split));
        train_set = &split->first;
      }
      auto started = Clock::now();
      auto tr = train_local(out.train->start_params, *train_set, job.trainer,
                            derive_seed(seed, id, out.train->round, Purpose::train));
      if (split) tr.local_accuracy = evaluate(tr.params, split->second);
      double t = compute_training_time(compute, train_set->size(), job.trainer.epochs,
                                       derive_seed(seed, id, out.train->round, Purpose::compute_jitter));
      client.set_training_result(out.train->round, std::move(tr), t);
      training_done = std::make_pair(
          started + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(t * options.time_scale)),
          out.train->round);
    }
  };

  apply(client.start());
  std::vector<char> buf(64 * 1024);
  while (!done) {
    int timeout_ms = -1;
    if (training_done) {
      auto left = std::chrono::duration_cast<std::chrono::milliseconds>(training_done->first - Clock::now()).count();
      timeout_ms = static_cast<int>(std::max<long long>(0, left));
    }
    pollfd p{sock.fd(), POLLIN, 0};
    int rc = ::poll(&p, 1, timeout_ms);
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw IoError(errno_text("poll"));
    }
    if (!(p.revents & (POLLIN | POLLHUP | POLLERR))) {
      if (training_done && Clock::now() >= training_done->first) {
        auto round = training_done->second;
        training_done.reset();
        apply(client.on_training_finished(round));
      }
      continue;
    }
    std::size_t n = sock.recv_some(buf.data(), buf.size());
    if (n == 0) {
      reader.finish();
      throw IoError("server closed the connection before the job finished");
    }
    reader.feed(std::string_view(buf.data(), n));
    while (!done) {
      auto m = reader.next();
      if (!m) break;
      if (m->kind == MessageKind::Shutdown) result.shut_down = true;
      apply(client.handle(*m));
    }
  }
  result.state = client.state();
  return result;
}

}  // namespace dffl
