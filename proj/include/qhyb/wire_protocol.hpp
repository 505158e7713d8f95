#pragma once

// Request/reply framing between the dispatcher and the runtimes.
//
// Wire format: [u32 big-endian body length][UTF-8 JSON object]. Every body
// carries a snake_case "type" field naming the message variant. A
// connection carries at most one request in flight; the reply must arrive
// before the next request is sent.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <variant>

#include "qhyb/core_model.hpp"

namespace qhyb::wire {

inline constexpr std::size_t kMaxFrameBody = 16u * 1024u * 1024u;
inline constexpr std::uint16_t kQuantumRuntimePort = 5556;
inline constexpr std::uint16_t kClassicalRuntimePort = 5557;

struct InitRequest {
  std::string job_id;
  Json config = Json::object();
  bool operator==(const InitRequest&) const = default;
};

struct InitReply {
  bool ok = true;
  std::optional<std::string> error;
  bool operator==(const InitReply&) const = default;
};

struct ClassicalStepRequest {
  // Absent only on the first step of a job.
  std::optional<Histogram> measurements;
  bool operator==(const ClassicalStepRequest&) const = default;
};

struct ClassicalStepReply {
  struct Done {
    Json final_payload;
    bool operator==(const Done&) const = default;
  };
  std::variant<std::string, Done> outcome;

  bool done() const noexcept { return std::holds_alternative<Done>(outcome); }
  bool operator==(const ClassicalStepReply&) const = default;
};

struct QuantumExecuteRequest {
  std::string circuit;
  std::int64_t shots = 1;
  std::optional<std::uint64_t> seed;
  bool operator==(const QuantumExecuteRequest&) const = default;
};

struct QuantumExecuteReply {
  Histogram histogram;
  // Time the runtime spent executing, so callers can separate their own
  // overhead from runtime compute.
  std::optional<Micros> busy_us;
  bool operator==(const QuantumExecuteReply&) const = default;
};

struct TerminateRequest {
  bool operator==(const TerminateRequest&) const = default;
};

struct TerminateReply {
  bool operator==(const TerminateReply&) const = default;
};

struct ErrorReply {
  std::string code;
  std::string message;
  bool operator==(const ErrorReply&) const = default;
};

using Message = std::variant<InitRequest, InitReply, ClassicalStepRequest, ClassicalStepReply,
                             QuantumExecuteRequest, QuantumExecuteReply, TerminateRequest,
                             TerminateReply, ErrorReply>;

std::string_view type_name(const Message& m) noexcept;
bool is_request(const Message& m) noexcept;
/// True when `reply` is an acceptable answer to `request` (ErrorReply always is).
bool answers(const Message& request, const Message& reply) noexcept;

Json to_json(const Message& m);
Message message_from_json(const Json& j);

class ProtocolError : public std::runtime_error {
 public:
  enum class Kind { Oversize, BadFrame, Timeout, ProtocolViolation, ConnectionLost, ConnectFailed };

  ProtocolError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

std::string encode_frame(const Message& m);
/// Decodes one complete frame (header included). Throws BadFrame on a
/// length mismatch, invalid JSON or an unknown type.
Message decode_frame(std::string_view frame);

using Clock = std::chrono::steady_clock;

/// Owning file descriptor.
class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) noexcept : fd_(fd) {}
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept;
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  ~Fd() { reset(); }

  int get() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  void reset() noexcept;

 private:
  int fd_ = -1;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = kQuantumRuntimePort;
};

class Listener {
 public:
  /// Port 0 binds an ephemeral port; see port().
  static Listener bind(const std::string& host, std::uint16_t port);

  std::uint16_t port() const noexcept { return port_; }
  int fd() const noexcept { return fd_.get(); }

 private:
  Listener(Fd fd, std::uint16_t port) : fd_(std::move(fd)), port_(port) {}
  Fd fd_;
  std::uint16_t port_;
};

/// Client side of a runtime connection. Confined to one owner at a time.
class Connection {
 public:
  static Connection connect(const Endpoint& ep, std::chrono::milliseconds timeout);
  explicit Connection(Fd fd);

  /// Sends `msg` and waits for its single reply.
  Message request(const Message& msg, std::chrono::milliseconds deadline);

  /// Low-level frame I/O, used by the serving side.
  void send(const Message& msg);
  std::optional<Message> receive(std::optional<Clock::time_point> until);

  /// Requests sent minus replies received: 0 or 1.
  int outstanding() const noexcept { return outstanding_; }
  bool usable() const noexcept { return fd_.valid() && !broken_; }
  int fd() const noexcept { return fd_.get(); }
  void shutdown() noexcept;

 private:
  bool fill(std::optional<Clock::time_point> until);

  Fd fd_;
  std::string buffer_;
  int outstanding_ = 0;
  bool broken_ = false;
};

using Handler = std::function<Message(const Message&)>;

/// Accept loop: one thread per connection, one request in flight per
/// connection. Malformed frames get ErrorReply{"bad_frame"} and a handler
/// exception gets ErrorReply{"internal"}; both close the connection.
class Server {
 public:
  Server(Listener listener, Handler handler);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Blocks until stop().
  void run();
  /// Runs the accept loop on a background thread.
  void start();
  void stop();

  std::uint16_t port() const noexcept { return listener_.port(); }

 private:
  void serve_connection(Fd fd, std::shared_ptr<std::atomic<bool>> done);

  Listener listener_;
  Handler handler_;
  Fd wake_read_;
  Fd wake_write_;
  std::atomic<bool> stopping_{false};
  std::mutex mu_;
  std::list<int> open_fds_;
  struct Worker {
    std::shared_ptr<std::atomic<bool>> done;
    std::jthread thread;
  };
  std::list<Worker> workers_;
  std::jthread acceptor_;
};

}  // namespace qhyb::wire
