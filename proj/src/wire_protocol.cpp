#include "qhyb/wire_protocol.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <system_error>

namespace qhyb::wire {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

[[noreturn]] void throw_errno(const std::string& what) {
  throw std::system_error(errno, std::generic_category(), what);
}

ProtocolError bad_frame(const std::string& why) {
  return ProtocolError(ProtocolError::Kind::BadFrame, "bad frame: " + why);
}

std::uint32_t read_be32(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) |
         std::uint32_t{p[3]};
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

int remaining_ms(std::optional<Clock::time_point> until) {
  if (!until) return -1;
  const auto left =
      std::chrono::duration_cast<std::chrono::milliseconds>(*until - Clock::now()).count();
  return left <= 0 ? 0 : static_cast<int>(std::min<long long>(left, 1 << 30));
}

}  // namespace

std::string_view type_name(const Message& m) noexcept {
  static constexpr std::string_view names[] = {
      "init_request",          "init_reply",         "classical_step_request",
      "classical_step_reply",  "quantum_execute_request", "quantum_execute_reply",
      "terminate_request",     "terminate_reply",    "error_reply"};
  return names[m.index()];
}

bool is_request(const Message& m) noexcept {
  return std::holds_alternative<InitRequest>(m) || std::holds_alternative<ClassicalStepRequest>(m) ||
         std::holds_alternative<QuantumExecuteRequest>(m) ||
         std::holds_alternative<TerminateRequest>(m);
}

bool answers(const Message& request, const Message& reply) noexcept {
  if (std::holds_alternative<ErrorReply>(reply)) return true;
  if (std::holds_alternative<InitRequest>(request)) return std::holds_alternative<InitReply>(reply);
  if (std::holds_alternative<ClassicalStepRequest>(request))
    return std::holds_alternative<ClassicalStepReply>(reply);
  if (std::holds_alternative<QuantumExecuteRequest>(request))
    return std::holds_alternative<QuantumExecuteReply>(reply);
  if (std::holds_alternative<TerminateRequest>(request))
    return std::holds_alternative<TerminateReply>(reply);
  return false;
}

Json to_json(const Message& m) {
  Json j = std::visit(
      Overloaded{
          [](const InitRequest& r) { return Json{{"job_id", r.job_id}, {"config", r.config}}; },
          [](const InitReply& r) {
            Json out{{"ok", r.ok}};
            if (r.error) out["error"] = *r.error;
            return out;
          },
          [](const ClassicalStepRequest& r) {
            return Json{{"measurements", r.measurements ? Json(*r.measurements) : Json(nullptr)}};
          },
          [](const ClassicalStepReply& r) {
            if (const auto* c = std::get_if<std::string>(&r.outcome)) return Json{{"circuit", *c}};
            return Json{{"done", true},
                        {"final_payload", std::get<ClassicalStepReply::Done>(r.outcome).final_payload}};
          },
          [](const QuantumExecuteRequest& r) {
            Json out{{"circuit", r.circuit}, {"shots", r.shots}};
            if (r.seed) out["seed"] = *r.seed;
            return out;
          },
          [](const QuantumExecuteReply& r) {
            Json out{{"histogram", r.histogram}};
            if (r.busy_us) out["busy_us"] = *r.busy_us;
            return out;
          },
          [](const TerminateRequest&) { return Json::object(); },
          [](const TerminateReply&) { return Json::object(); },
          [](const ErrorReply& r) { return Json{{"code", r.code}, {"message", r.message}}; },
      },
      m);
  // "type" first keeps frames readable in captures.
  Json out{{"type", type_name(m)}};
  out.update(j);
  return out;
}

Message message_from_json(const Json& j) {
  if (!j.is_object()) throw bad_frame("body is not a JSON object");
  auto type_it = j.find("type");
  if (type_it == j.end() || !type_it->is_string()) throw bad_frame("missing string field \"type\"");
  const auto type = type_it->get<std::string>();
  try {
    if (type == "init_request") {
      return InitRequest{j.at("job_id").get<std::string>(), j.value("config", Json::object())};
    }
    if (type == "init_reply") {
      InitReply r{j.at("ok").get<bool>(), std::nullopt};
      if (j.contains("error") && !j["error"].is_null()) r.error = j["error"].get<std::string>();
      return r;
    }
    if (type == "classical_step_request") {
      ClassicalStepRequest r;
      if (auto it = j.find("measurements"); it != j.end() && !it->is_null()) {
        r.measurements = it->get<Histogram>();
      }
      return r;
    }
    if (type == "classical_step_reply") {
      if (j.value("done", false)) {
        return ClassicalStepReply{ClassicalStepReply::Done{j.value("final_payload", Json(nullptr))}};
      }
      return ClassicalStepReply{j.at("circuit").get<std::string>()};
    }
    if (type == "quantum_execute_request") {
      QuantumExecuteRequest r{j.at("circuit").get<std::string>(), j.at("shots").get<std::int64_t>(),
                              std::nullopt};
      if (j.contains("seed") && !j["seed"].is_null()) r.seed = j["seed"].get<std::uint64_t>();
      return r;
    }
    if (type == "quantum_execute_reply") {
      QuantumExecuteReply r{j.at("histogram").get<Histogram>(), std::nullopt};
      if (j.contains("busy_us") && !j["busy_us"].is_null()) r.busy_us = j["busy_us"].get<Micros>();
      return r;
    }
    if (type == "terminate_request") return TerminateRequest{};
    if (type == "terminate_reply") return TerminateReply{};
    if (type == "error_reply") {
      return ErrorReply{j.at("code").get<std::string>(), j.value("message", std::string{})};
    }
  } catch (const Json::exception& e) {
    throw bad_frame(type + ": " + e.what());
  }
  throw bad_frame("unknown message type \"" + type + "\"");
}

std::string encode_frame(const Message& m) {
  std::string body;
  try {
    body = to_json(m).dump();
  } catch (const Json::exception& e) {
    throw bad_frame(e.what());
  }
  if (body.size() > kMaxFrameBody) {
    throw ProtocolError(ProtocolError::Kind::Oversize,
                        "frame body of " + std::to_string(body.size()) + " bytes exceeds 16 MiB");
  }
  const auto n = static_cast<std::uint32_t>(body.size());
  std::string frame;
  frame.reserve(4 + body.size());
  frame.push_back(static_cast<char>(n >> 24));
  frame.push_back(static_cast<char>((n >> 16) & 0xff));
  frame.push_back(static_cast<char>((n >> 8) & 0xff));
  frame.push_back(static_cast<char>(n & 0xff));
  frame += body;
  return frame;
}

Message decode_frame(std::string_view frame) {
  if (frame.size() < 4) throw bad_frame("truncated header");
  const std::uint32_t n = read_be32(frame);
  if (n > kMaxFrameBody) throw bad_frame("declared length exceeds 16 MiB");
  if (frame.size() - 4 != n) throw bad_frame("length prefix does not match body");
  Json j = Json::parse(frame.substr(4), nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw bad_frame("body is not valid JSON");
  return message_from_json(j);
}

Fd& Fd::operator=(Fd&& o) noexcept {
  if (this != &o) {
    reset();
    fd_ = std::exchange(o.fd_, -1);
  }
  return *this;
}

void Fd::reset() noexcept {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

namespace {

sockaddr_in resolve_ipv4(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  const std::string h = host.empty() || host == "localhost" ? "127.0.0.1" : host;
  if (::inet_pton(AF_INET, h.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(h.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
    throw ProtocolError(ProtocolError::Kind::ConnectFailed, "cannot resolve host " + host);
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return addr;
}

}  // namespace

Listener Listener::bind(const std::string& host, std::uint16_t port) {
  Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd.valid()) throw_errno("socket");
  int one = 1;
  ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr = resolve_ipv4(host, port);
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    throw_errno("bind " + host + ":" + std::to_string(port));
  }
  if (::listen(fd.get(), 128) != 0) throw_errno("listen");
  socklen_t len = sizeof addr;
  ::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&addr), &len);
  return Listener(std::move(fd), ntohs(addr.sin_port));
}

Connection::Connection(Fd fd) : fd_(std::move(fd)) { set_nodelay(fd_.get()); }

Connection Connection::connect(const Endpoint& ep, std::chrono::milliseconds timeout) {
  Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC | SOCK_NONBLOCK, 0));
  if (!fd.valid()) throw_errno("socket");
  sockaddr_in addr = resolve_ipv4(ep.host, ep.port);
  const std::string where = ep.host + ":" + std::to_string(ep.port);
  if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    if (errno != EINPROGRESS) {
      throw ProtocolError(ProtocolError::Kind::ConnectFailed,
                          "connect " + where + ": " + std::strerror(errno));
    }
    pollfd p{fd.get(), POLLOUT, 0};
    const int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (rc <= 0) throw ProtocolError(ProtocolError::Kind::ConnectFailed, "connect " + where + ": timed out");
    int err = 0;
    socklen_t len = sizeof err;
    ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) {
      throw ProtocolError(ProtocolError::Kind::ConnectFailed,
                          "connect " + where + ": " + std::strerror(err));
    }
  }
  const int flags = ::fcntl(fd.get(), F_GETFL);
  ::fcntl(fd.get(), F_SETFL, flags & ~O_NONBLOCK);
  return Connection(std::move(fd));
}

void Connection::send(const Message& msg) {
  const std::string frame = encode_frame(msg);
  std::size_t off = 0;
  while (off < frame.size()) {
    const ssize_t n = ::send(fd_.get(), frame.data() + off, frame.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      broken_ = true;
      throw ProtocolError(ProtocolError::Kind::ConnectionLost,
                          std::string("send: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
}

bool Connection::fill(std::optional<Clock::time_point> until) {
  for (;;) {
    pollfd p{fd_.get(), POLLIN, 0};
    const int rc = ::poll(&p, 1, remaining_ms(until));
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw_errno("poll");
    }
    if (rc == 0) return false;
    char buf[64 * 1024];
    const ssize_t n = ::recv(fd_.get(), buf, sizeof buf, 0);
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      broken_ = true;
      throw ProtocolError(ProtocolError::Kind::ConnectionLost,
                          std::string("recv: ") + std::strerror(errno));
    }
    if (n == 0) {
      broken_ = true;
      throw ProtocolError(ProtocolError::Kind::ConnectionLost, "peer closed the connection");
    }
    buffer_.append(buf, static_cast<std::size_t>(n));
    return true;
  }
}

std::optional<Message> Connection::receive(std::optional<Clock::time_point> until) {
  for (;;) {
    if (buffer_.size() >= 4) {
      const std::uint32_t n = read_be32(buffer_);
      if (n > kMaxFrameBody) {
        broken_ = true;
        throw bad_frame("declared length " + std::to_string(n) + " exceeds 16 MiB");
      }
      if (buffer_.size() >= 4 + std::size_t{n}) {
        const std::string frame = buffer_.substr(0, 4 + n);
        buffer_.erase(0, 4 + n);
        try {
          return decode_frame(frame);
        } catch (const ProtocolError&) {
          broken_ = true;
          throw;
        }
      }
    }
    if (!fill(until)) return std::nullopt;
  }
}

Message Connection::request(const Message& msg, std::chrono::milliseconds deadline) {
  if (!fd_.valid()) throw ProtocolError(ProtocolError::Kind::ConnectionLost, "connection closed");
  if (outstanding_ != 0) {
    throw ProtocolError(ProtocolError::Kind::ProtocolViolation,
                        "request sent while a reply is still outstanding");
  }
  if (broken_) throw ProtocolError(ProtocolError::Kind::ConnectionLost, "connection is unusable");
  // Anything readable now is either EOF or a frame nobody asked for.
  if (!buffer_.empty()) {
    broken_ = true;
    throw ProtocolError(ProtocolError::Kind::ProtocolViolation, "unsolicited frame from peer");
  }
  pollfd p{fd_.get(), POLLIN, 0};
  if (::poll(&p, 1, 0) > 0) {
    char c;
    const ssize_t n = ::recv(fd_.get(), &c, 1, MSG_PEEK | MSG_DONTWAIT);
    broken_ = true;
    if (n > 0) throw ProtocolError(ProtocolError::Kind::ProtocolViolation, "unsolicited frame from peer");
    throw ProtocolError(ProtocolError::Kind::ConnectionLost, "peer closed the connection");
  }

  send(msg);
  outstanding_ = 1;
  auto reply = receive(Clock::now() + deadline);
  if (!reply) {
    broken_ = true;
    throw ProtocolError(ProtocolError::Kind::Timeout,
                        std::string(type_name(msg)) + " timed out after " +
                            std::to_string(deadline.count()) + " ms");
  }
  outstanding_ = 0;
  if (!answers(msg, *reply)) {
    broken_ = true;
    throw ProtocolError(ProtocolError::Kind::ProtocolViolation,
                        std::string(type_name(*reply)) + " does not answer " +
                            std::string(type_name(msg)));
  }
  if (!buffer_.empty()) {
    broken_ = true;
    throw ProtocolError(ProtocolError::Kind::ProtocolViolation, "more than one reply to one request");
  }
  return *reply;
}

void Connection::shutdown() noexcept {
  if (fd_.valid()) ::shutdown(fd_.get(), SHUT_RDWR);
}

Server::Server(Listener listener, Handler handler)
    : listener_(std::move(listener)), handler_(std::move(handler)) {
  int fds[2];
  if (::pipe2(fds, O_CLOEXEC) != 0) throw_errno("pipe2");
  wake_read_ = Fd(fds[0]);
  wake_write_ = Fd(fds[1]);
}

Server::~Server() { stop(); }

void Server::start() {
  acceptor_ = std::jthread([this] { run(); });
}

void Server::run() {
  while (!stopping_) {
    pollfd fds[2] = {{listener_.fd(), POLLIN, 0}, {wake_read_.get(), POLLIN, 0}};
    if (::poll(fds, 2, -1) < 0) {
      if (errno == EINTR) continue;
      throw_errno("poll");
    }
    if (stopping_ || (fds[1].revents & POLLIN)) break;
    if (!(fds[0].revents & POLLIN)) continue;
    Fd client(::accept4(listener_.fd(), nullptr, nullptr, SOCK_CLOEXEC));
    if (!client.valid()) continue;
    std::lock_guard lock(mu_);
    if (stopping_) break;
    workers_.remove_if([](const Worker& w) { return w.done->load(); });
    open_fds_.push_back(client.get());
    auto done = std::make_shared<std::atomic<bool>>(false);
    workers_.push_back(Worker{done, std::jthread([this, done, fd = std::move(client)]() mutable {
                                serve_connection(std::move(fd), done);
                              })});
  }
}

void Server::serve_connection(Fd fd, std::shared_ptr<std::atomic<bool>> done) {
  const int raw = fd.get();
  Connection conn(std::move(fd));
  try {
    while (!stopping_) {
      std::optional<Message> request;
      try {
        request = conn.receive(std::nullopt);
      } catch (const ProtocolError& e) {
        if (e.kind() == ProtocolError::Kind::ConnectionLost) break;
        conn.send(ErrorReply{"bad_frame", e.what()});
        break;
      }
      if (!request) break;
      Message reply;
      try {
        reply = handler_(*request);
      } catch (const std::exception& e) {
        conn.send(ErrorReply{"internal", e.what()});
        break;
      } catch (...) {
        conn.send(ErrorReply{"internal", "unknown handler failure"});
        break;
      }
      conn.send(reply);
    }
  } catch (const std::exception&) {
    // Peer went away mid-reply; nothing left to tell it.
  }
  std::lock_guard lock(mu_);
  open_fds_.remove(raw);
  conn.shutdown();
  done->store(true);
}

void Server::stop() {
  if (stopping_.exchange(true)) {
    if (acceptor_.joinable()) acceptor_.join();
    return;
  }
  const char byte = 1;
  [[maybe_unused]] auto n = ::write(wake_write_.get(), &byte, 1);
  if (acceptor_.joinable()) acceptor_.join();
  std::list<Worker> workers;
  {
    std::lock_guard lock(mu_);
    for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
    workers.swap(workers_);
  }
  workers.clear();  // joins
}

}  // namespace qhyb::wire
