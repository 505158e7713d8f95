#include "qhyb/classical_runtime.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/prctl.h>
#include <sys/stat.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include <cerrno>
#include <cstring>

extern char** environ;

namespace qhyb::classical {

namespace {

using Clock = std::chrono::steady_clock;
using namespace std::chrono_literals;

std::atomic<int> g_live{0};

// Landlock uapi; declared here because the installed headers predate the
// network rules.
constexpr std::uint64_t kFsExecute = 1ull << 0;
constexpr std::uint64_t kFsWriteFile = 1ull << 1;
constexpr std::uint64_t kFsReadFile = 1ull << 2;
constexpr std::uint64_t kFsReadDir = 1ull << 3;
constexpr std::uint64_t kFsAllV1 = (1ull << 13) - 1;
constexpr std::uint64_t kFsRefer = 1ull << 13;
constexpr std::uint64_t kFsTruncate = 1ull << 14;
constexpr std::uint64_t kFsIoctlDev = 1ull << 15;
constexpr std::uint64_t kNetBindTcp = 1ull << 0;
constexpr std::uint64_t kNetConnectTcp = 1ull << 1;
constexpr int kRulePathBeneath = 1;
constexpr unsigned kCreateRulesetVersion = 1u << 0;

struct RulesetAttr {
  std::uint64_t handled_access_fs;
  std::uint64_t handled_access_net;
};

struct __attribute__((packed)) PathBeneathAttr {
  std::uint64_t allowed_access;
  std::int32_t parent_fd;
};

std::uint64_t handled_fs(int abi) {
  std::uint64_t fs = kFsAllV1;
  if (abi >= 2) fs |= kFsRefer;
  if (abi >= 3) fs |= kFsTruncate;
  if (abi >= 5) fs |= kFsIoctlDev;
  return fs;
}

void add_path_rule(int ruleset, const std::filesystem::path& path, std::uint64_t access) {
  const int fd = ::open(path.c_str(), O_PATH | O_CLOEXEC);
  if (fd < 0) return;
  struct stat st {};
  if (::fstat(fd, &st) == 0 && !S_ISDIR(st.st_mode))
    access &= kFsExecute | kFsWriteFile | kFsReadFile | kFsTruncate | kFsIoctlDev;
  PathBeneathAttr attr{access, fd};
  if (::syscall(SYS_landlock_add_rule, ruleset, kRulePathBeneath, &attr, 0) != 0)
    spdlog::debug("landlock rule for {} rejected: {}", path.string(), std::strerror(errno));
  ::close(fd);
}

/// Built in the parent; the child only has to call restrict_self.
wire::Fd build_ruleset(const std::filesystem::path& exe_dir, const std::filesystem::path& work_dir,
                       const std::vector<std::filesystem::path>& extra) {
  const int abi = sandbox_abi();
  if (abi <= 0) return {};
  const std::uint64_t fs = handled_fs(abi);
  RulesetAttr attr{fs, abi >= 4 ? (kNetBindTcp | kNetConnectTcp) : 0};
  const std::size_t size = abi >= 4 ? sizeof(RulesetAttr) : sizeof(std::uint64_t);
  wire::Fd ruleset(static_cast<int>(::syscall(SYS_landlock_create_ruleset, &attr, size, 0)));
  if (!ruleset.valid()) {
    spdlog::warn("landlock ruleset creation failed: {}", std::strerror(errno));
    return {};
  }
  ::fcntl(ruleset.get(), F_SETFD, FD_CLOEXEC);

  const std::uint64_t read = kFsExecute | kFsReadFile | kFsReadDir;
  for (const char* dir : {"/usr", "/lib", "/lib64", "/lib32", "/bin", "/sbin", "/etc", "/opt", "/proc",
                          "/sys/devices/system/cpu"})
    add_path_rule(ruleset.get(), dir, read);
  add_path_rule(ruleset.get(), "/dev", read | kFsWriteFile | (abi >= 5 ? kFsIoctlDev : 0));
  add_path_rule(ruleset.get(), exe_dir, read);
  for (const auto& p : extra) add_path_rule(ruleset.get(), p, read);
  add_path_rule(ruleset.get(), work_dir, fs);
  return ruleset;
}

void set_nonblocking(int fd) { ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL) | O_NONBLOCK); }

struct Pipe {
  wire::Fd read;
  wire::Fd write;
};

Pipe make_pipe() {
  int fds[2];
  if (::pipe2(fds, O_CLOEXEC) != 0)
    throw RuntimeError(RuntimeError::Kind::SpawnFailed, std::string("pipe: ") + std::strerror(errno));
  return {wire::Fd(fds[0]), wire::Fd(fds[1])};
}

Micros micros_since(Clock::time_point t0) {
  return std::chrono::duration_cast<std::chrono::microseconds>(Clock::now() - t0).count();
}

}  // namespace

std::string_view to_string(HandleState s) noexcept {
  switch (s) {
    case HandleState::Spawned: return "spawned";
    case HandleState::Ready: return "ready";
    case HandleState::Stepping: return "stepping";
    case HandleState::Terminated: return "terminated";
  }
  return "?";
}

int sandbox_abi() {
  static const int abi = [] {
    const long v = ::syscall(SYS_landlock_create_ruleset, nullptr, 0, kCreateRulesetVersion);
    return v < 0 ? 0 : static_cast<int>(v);
  }();
  return abi;
}

std::string program_identity(const HybridProgram& program) {
  std::string id = program.executable_path;
  for (const auto& a : program.args) {
    id.push_back('\0');
    id += a;
  }
  return id;
}

int RuntimeHandle::live_handles() noexcept { return g_live.load(); }

std::unique_ptr<RuntimeHandle> RuntimeHandle::spawn(const HybridProgram& program, const Json& config,
                                                    const SpawnOptions& options) {
  using Kind = RuntimeError::Kind;
  static const bool sigpipe_ignored = [] {
    ::signal(SIGPIPE, SIG_IGN);
    return true;
  }();
  (void)sigpipe_ignored;

  const auto t0 = Clock::now();
  std::error_code ec;
  const std::filesystem::path exe = std::filesystem::absolute(program.executable_path, ec);
  if (program.executable_path.empty() || ec || ::access(exe.c_str(), X_OK) != 0 ||
      std::filesystem::is_directory(exe, ec))
    throw RuntimeError(Kind::SpawnFailed, "not an executable file: " + program.executable_path);

  std::unique_ptr<RuntimeHandle> h(new RuntimeHandle());
  h->identity_ = program_identity(program);
  h->output_cap_ = options.output_cap;
  h->grace_ = options.terminate_grace;
  h->work_dir_ = options.work_root / ("run-" + make_uuid());
  std::filesystem::create_directories(h->work_dir_, ec);
  if (ec) throw RuntimeError(Kind::SpawnFailed, "cannot create work directory: " + ec.message());

  wire::Fd ruleset;
  if (options.sandbox) {
    ruleset = build_ruleset(exe.parent_path(), h->work_dir_, options.extra_read_paths);
    if (!ruleset.valid()) spdlog::warn("running {} without a filesystem sandbox", exe.string());
  }

  // Everything the child needs is prepared before fork.
  std::vector<std::string> argv_s{exe.string()};
  argv_s.insert(argv_s.end(), program.args.begin(), program.args.end());
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    const std::string kv(*e);
    const auto eq = kv.find('=');
    if (eq != std::string::npos) env[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  for (const auto& [k, v] : program.environment) env[k] = v;
  env["PYTHONUNBUFFERED"] = "1";
  env["QHYB_WORK_DIR"] = h->work_dir_.string();
  std::vector<std::string> env_s;
  for (const auto& [k, v] : env) env_s.push_back(k + "=" + v);
  std::vector<char*> argv, envp;
  for (auto& s : argv_s) argv.push_back(s.data());
  argv.push_back(nullptr);
  for (auto& s : env_s) envp.push_back(s.data());
  envp.push_back(nullptr);
  const std::string work = h->work_dir_.string();

  Pipe in = make_pipe(), out = make_pipe(), err = make_pipe(), status = make_pipe();

  const pid_t pid = ::fork();
  if (pid < 0) throw RuntimeError(Kind::SpawnFailed, std::string("fork: ") + std::strerror(errno));
  if (pid == 0) {
    // Child: async-signal-safe calls only.
    ::setpgid(0, 0);
    ::dup2(in.read.get(), 0);
    ::dup2(out.write.get(), 1);
    ::dup2(err.write.get(), 2);
    int code = 0;
    if (::chdir(work.c_str()) != 0) code = errno;
    if (code == 0 && ruleset.valid()) {
      if (::prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 ||
          ::syscall(SYS_landlock_restrict_self, ruleset.get(), 0) != 0)
        code = errno;
    }
    if (code == 0) {
      ::execve(argv[0], argv.data(), envp.data());
      code = errno;
    }
    [[maybe_unused]] auto n = ::write(status.write.get(), &code, sizeof code);
    ::_exit(127);
  }

  ::setpgid(pid, pid);  // also done in the child; whichever runs first wins
  h->pid_ = pid;
  h->spawned_at_ = t0;
  ++g_live;
  in.read.reset();
  out.write.reset();
  err.write.reset();
  status.write.reset();
  h->stdin_ = std::move(in.write);
  h->stdout_ = std::move(out.read);
  h->stderr_ = std::move(err.read);
  set_nonblocking(h->stdout_.get());
  set_nonblocking(h->stderr_.get());
  h->stderr_thread_ = std::jthread([raw = h.get()] { raw->drain_stderr(); });

  int child_errno = 0;
  ssize_t n;
  do {
    n = ::read(status.read.get(), &child_errno, sizeof child_errno);
  } while (n < 0 && errno == EINTR);
  if (n == sizeof child_errno) {
    h->terminate();
    throw RuntimeError(Kind::SpawnFailed, "exec failed: " + std::string(std::strerror(child_errno)));
  }

  try {
    h->write_line(Json{{"config", config}}.dump());
    const Json ready = h->read_json_line(t0 + options.init_timeout, {}, Kind::InitTimeout);
    if (!ready.is_object() || ready.contains("error") || !ready.value("ready", false)) {
      throw RuntimeError(Kind::BadReply, "program did not acknowledge its configuration: " + ready.dump());
    }
  } catch (RuntimeError& e) {
    const std::string diag = h->terminate();
    throw RuntimeError(e.kind(), e.what(), diag);
  }
  h->state_ = HandleState::Ready;
  h->spawn_us_ = micros_since(t0);
  return h;
}

RuntimeHandle::~RuntimeHandle() { terminate(); }

void RuntimeHandle::drain_stderr() {
  struct Done {
    std::atomic<bool>& flag;
    ~Done() { flag = true; }
  } done{drain_done_};
  char buf[4096];
  while (!stop_drain_.load()) {
    pollfd p{stderr_.get(), POLLIN, 0};
    const int r = ::poll(&p, 1, 50);
    if (r < 0 && errno != EINTR) return;
    if (r <= 0) continue;
    const ssize_t n = ::read(stderr_.get(), buf, sizeof buf);
    if (n == 0) return;
    if (n < 0) {
      if (errno == EAGAIN || errno == EINTR) continue;
      return;
    }
    std::lock_guard lock(stderr_mu_);
    const std::size_t room = output_cap_ > stderr_text_.size() ? output_cap_ - stderr_text_.size() : 0;
    stderr_text_.append(buf, std::min(room, static_cast<std::size_t>(n)));
  }
}

std::string RuntimeHandle::diagnostics() const {
  std::lock_guard lock(stderr_mu_);
  return stderr_text_;
}

void RuntimeHandle::write_line(const std::string& line) {
  std::string data = line;
  data.push_back('\n');
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::write(stdin_.get(), data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      child_exited("writing to the program");
    }
    off += static_cast<std::size_t>(n);
  }
  ++lines_written_;
}

void RuntimeHandle::child_exited(const std::string& context) {
  // Give the stderr drain a moment to pick up the last words.
  std::this_thread::sleep_for(20ms);
  std::string status;
  int ws = 0;
  if (!reaped_ && ::waitpid(pid_, &ws, WNOHANG) == pid_) {
    reaped_ = true;
    if (WIFEXITED(ws)) status = " (exit status " + std::to_string(WEXITSTATUS(ws)) + ")";
    if (WIFSIGNALED(ws)) status = " (killed by signal " + std::to_string(WTERMSIG(ws)) + ")";
  }
  throw RuntimeError(RuntimeError::Kind::ChildExited, "program exited while " + context + status,
                     diagnostics());
}

Json RuntimeHandle::read_json_line(Clock::time_point until, std::stop_token stop,
                                   RuntimeError::Kind timeout_kind) {
  using Kind = RuntimeError::Kind;
  std::size_t scanned = 0;
  for (;;) {
    const auto nl = stdout_buffer_.find('\n', scanned);
    if (nl != std::string::npos) {
      std::string line = stdout_buffer_.substr(0, nl);
      stdout_buffer_.erase(0, nl + 1);
      ++lines_read_;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      try {
        return Json::parse(line);
      } catch (const Json::parse_error&) {
        if (line.size() > 200) line = line.substr(0, 200) + "...";
        throw RuntimeError(Kind::BadReply, "program wrote a line that is not JSON: " + line, diagnostics());
      }
    }
    scanned = stdout_buffer_.size();
    if (stdout_buffer_.size() > output_cap_)
      throw RuntimeError(Kind::BadReply, "program output line exceeds the size cap", diagnostics());
    if (stop.stop_requested()) throw RuntimeError(Kind::Cancelled, "cancelled");

    const auto now = Clock::now();
    if (now >= until)
      throw RuntimeError(timeout_kind, timeout_kind == Kind::InitTimeout ? "program did not become ready in time"
                                                                          : "program did not reply in time",
                         diagnostics());
    const auto slice = std::min<Clock::duration>(until - now, 50ms);
    pollfd p{stdout_.get(), POLLIN, 0};
    const int r = ::poll(&p, 1, static_cast<int>(std::chrono::ceil<std::chrono::milliseconds>(slice).count()));
    if (r <= 0) continue;
    char buf[8192];
    const ssize_t n = ::read(stdout_.get(), buf, sizeof buf);
    if (n == 0) child_exited("a reply was pending");
    if (n < 0) {
      if (errno == EAGAIN || errno == EINTR) continue;
      child_exited("a reply was pending");
    }
    stdout_buffer_.append(buf, static_cast<std::size_t>(n));
  }
}

wire::ClassicalStepReply RuntimeHandle::step(const std::optional<Histogram>& measurements,
                                             std::chrono::milliseconds deadline, std::stop_token stop) {
  using Kind = RuntimeError::Kind;
  if (state_ != HandleState::Ready)
    throw RuntimeError(Kind::NotReady, "handle is " + std::string(to_string(state_)));
  const auto until = Clock::now() + deadline;
  state_ = HandleState::Stepping;
  Json request{{"measurements", nullptr}};
  if (measurements) request["measurements"] = *measurements;
  write_line(request.dump());
  const Json reply = read_json_line(until, stop, Kind::StepTimeout);

  wire::ClassicalStepReply out;
  if (reply.is_object() && reply.contains("circuit") && reply["circuit"].is_string()) {
    out.outcome = reply["circuit"].get<std::string>();
  } else if (reply.is_object() && reply.value("done", false) == true) {
    out.outcome = wire::ClassicalStepReply::Done{reply.value("final_payload", Json())};
  } else {
    std::string text = reply.dump();
    if (text.size() > 200) text = text.substr(0, 200) + "...";
    throw RuntimeError(Kind::BadReply, "reply has neither a circuit nor done: " + text, diagnostics());
  }
  state_ = HandleState::Ready;
  return out;
}

std::string RuntimeHandle::terminate() {
  if (state_ == HandleState::Terminated || pid_ < 0) return final_diagnostics_;
  const auto t0 = Clock::now();
  stdin_.reset();

  int ws = 0;
  const auto until = t0 + grace_;
  auto pause = 1ms;
  while (!reaped_) {
    const pid_t r = ::waitpid(pid_, &ws, WNOHANG);
    if (r == pid_ || (r < 0 && errno == ECHILD)) {
      reaped_ = true;
      break;
    }
    if (Clock::now() >= until) break;
    std::this_thread::sleep_for(pause);
    pause = std::min(pause * 2, std::chrono::milliseconds(20));
  }
  // Always sweep the group so grandchildren do not outlive the handle.
  ::kill(-pid_, SIGKILL);
  if (!reaped_) {
    while (::waitpid(pid_, &ws, 0) < 0 && errno == EINTR) {
    }
    reaped_ = true;
  }

  // Collect whatever standard error is still buffered, then stop the drain.
  const auto drain_until = Clock::now() + 100ms;
  while (!drain_done_.load() && Clock::now() < drain_until) std::this_thread::sleep_for(1ms);
  stop_drain_ = true;
  if (stderr_thread_.joinable()) stderr_thread_.join();
  stdout_.reset();
  stderr_.reset();

  std::error_code ec;
  std::filesystem::remove_all(work_dir_, ec);
  state_ = HandleState::Terminated;
  --g_live;
  terminate_us_ = micros_since(t0);
  final_diagnostics_ = diagnostics();
  return final_diagnostics_;
}

HandlePool::HandlePool(std::size_t capacity, std::chrono::milliseconds max_age)
    : capacity_(capacity), max_age_(max_age) {}

HandlePool::~HandlePool() { clear(); }

std::size_t HandlePool::size() const {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (const auto& [k, q] : handles_) n += q.size();
  return n;
}

std::size_t HandlePool::size(const HybridProgram& program) const {
  std::lock_guard lock(mu_);
  const auto it = handles_.find(program_identity(program));
  return it == handles_.end() ? 0 : it->second.size();
}

std::unique_ptr<RuntimeHandle> HandlePool::take(const HybridProgram& program) {
  std::vector<std::unique_ptr<RuntimeHandle>> stale;
  std::unique_ptr<RuntimeHandle> found;
  {
    std::lock_guard lock(mu_);
    const auto it = handles_.find(program_identity(program));
    if (it == handles_.end()) return nullptr;
    auto& q = it->second;
    while (!q.empty()) {
      auto h = std::move(q.front());
      q.pop_front();
      if (h->state() == HandleState::Ready && Clock::now() - h->spawned_at() < max_age_) {
        found = std::move(h);
        break;
      }
      stale.push_back(std::move(h));
    }
    if (q.empty()) handles_.erase(it);
  }
  stale.clear();  // terminates outside the lock
  return found;
}

bool HandlePool::put(std::unique_ptr<RuntimeHandle> handle) {
  if (!handle) return false;
  {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (const auto& [k, q] : handles_) n += q.size();
    if (n < capacity_ && handle->state() == HandleState::Ready) {
      handles_[handle->identity()].push_back(std::move(handle));
      return true;
    }
  }
  handle->terminate();
  return false;
}

void HandlePool::clear() {
  std::map<std::string, std::deque<std::unique_ptr<RuntimeHandle>>> all;
  {
    std::lock_guard lock(mu_);
    all.swap(handles_);
  }
}

}  // namespace qhyb::classical
