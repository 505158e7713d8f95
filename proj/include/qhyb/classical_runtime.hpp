#pragma once

// Classical runtime: hosts a user hybrid program as a child process and
// speaks the newline-delimited JSON stdio contract with it.
//
//   dispatcher -> child   {"config": {...}}                 once, at spawn
//   child -> dispatcher   {"ready": true}                   (or {"error": "..."})
//   dispatcher -> child   {"measurements": <histogram>|null}
//   child -> dispatcher   {"circuit": "<cqasm>"}  or  {"done": true, "final_payload": ...}
//
// Exactly one output line per input line. Standard error is captured as
// diagnostics. The child runs in its own process group and work directory;
// where the kernel supports Landlock it may only read system directories
// and its own executable's directory, may only write inside its work
// directory, and cannot bind or connect TCP sockets.

#include <sys/types.h>

#include <atomic>
#include <chrono>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <stop_token>
#include <string>
#include <thread>
#include <vector>

#include "qhyb/core_model.hpp"
#include "qhyb/wire_protocol.hpp"

namespace qhyb::classical {

struct SpawnOptions {
  std::filesystem::path work_root = std::filesystem::temp_directory_path() / "qhyb-runtimes";
  std::chrono::milliseconds init_timeout{30'000};
  std::chrono::milliseconds terminate_grace{2'000};
  std::size_t output_cap = 1u << 20;
  bool sandbox = true;
  std::vector<std::filesystem::path> extra_read_paths;
};

enum class HandleState { Spawned, Ready, Stepping, Terminated };

std::string_view to_string(HandleState s) noexcept;

class RuntimeError : public std::runtime_error {
 public:
  enum class Kind { SpawnFailed, InitTimeout, StepTimeout, BadReply, ChildExited, Cancelled, NotReady };

  RuntimeError(Kind kind, const std::string& what, std::string diagnostics = {})
      : std::runtime_error(what), kind_(kind), diagnostics_(std::move(diagnostics)) {}

  Kind kind() const noexcept { return kind_; }
  const std::string& diagnostics() const noexcept { return diagnostics_; }

 private:
  Kind kind_;
  std::string diagnostics_;
};

/// Landlock ABI version available to children, 0 when unsupported.
int sandbox_abi();

/// Pool key: (executable_path, args).
std::string program_identity(const HybridProgram& program);

class RuntimeHandle {
 public:
  /// Starts the program, writes the config line and waits for readiness.
  static std::unique_ptr<RuntimeHandle> spawn(const HybridProgram& program, const Json& config,
                                              const SpawnOptions& options);

  ~RuntimeHandle();
  RuntimeHandle(const RuntimeHandle&) = delete;
  RuntimeHandle& operator=(const RuntimeHandle&) = delete;

  /// One request line out, one reply line back. `measurements` is null only
  /// on the first step of a job.
  wire::ClassicalStepReply step(const std::optional<Histogram>& measurements,
                                std::chrono::milliseconds deadline, std::stop_token stop = {});

  /// Closes stdin, waits out the grace period, then kills the process
  /// group. Idempotent; returns captured standard error.
  std::string terminate();

  pid_t pid() const noexcept { return pid_; }
  HandleState state() const noexcept { return state_; }
  const std::string& identity() const noexcept { return identity_; }
  const std::filesystem::path& work_dir() const noexcept { return work_dir_; }
  std::chrono::steady_clock::time_point spawned_at() const noexcept { return spawned_at_; }
  Micros spawn_duration_us() const noexcept { return spawn_us_; }
  Micros termination_duration_us() const noexcept { return terminate_us_; }
  std::uint64_t lines_written() const noexcept { return lines_written_; }
  std::uint64_t lines_read() const noexcept { return lines_read_; }
  /// Captured standard error so far.
  std::string diagnostics() const;

  /// Handles spawned and not yet terminated, process-wide.
  static int live_handles() noexcept;

 private:
  RuntimeHandle() = default;

  void write_line(const std::string& line);
  Json read_json_line(std::chrono::steady_clock::time_point until, std::stop_token stop,
                      RuntimeError::Kind timeout_kind);
  [[noreturn]] void child_exited(const std::string& context);
  void drain_stderr();

  pid_t pid_ = -1;
  bool reaped_ = false;
  HandleState state_ = HandleState::Spawned;
  std::string identity_;
  std::filesystem::path work_dir_;
  std::size_t output_cap_ = 1u << 20;
  std::chrono::milliseconds grace_{2'000};
  std::chrono::steady_clock::time_point spawned_at_;
  Micros spawn_us_ = 0;
  Micros terminate_us_ = 0;
  wire::Fd stdin_;
  wire::Fd stdout_;
  wire::Fd stderr_;
  std::string stdout_buffer_;
  std::uint64_t lines_written_ = 0;
  std::uint64_t lines_read_ = 0;
  mutable std::mutex stderr_mu_;
  std::string stderr_text_;
  std::atomic<bool> stop_drain_{false};
  std::atomic<bool> drain_done_{false};
  std::jthread stderr_thread_;
  std::string final_diagnostics_;
};

/// Prewarmed handles keyed by program identity. Handles older than
/// max_age are recycled on access.
class HandlePool {
 public:
  explicit HandlePool(std::size_t capacity,
                      std::chrono::milliseconds max_age = std::chrono::minutes(10));
  ~HandlePool();

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const;
  std::size_t size(const HybridProgram& program) const;

  /// A Ready handle for the program, or nullptr.
  std::unique_ptr<RuntimeHandle> take(const HybridProgram& program);
  /// False (and the handle is terminated) when the pool is full.
  bool put(std::unique_ptr<RuntimeHandle> handle);
  void clear();

 private:
  std::size_t capacity_;
  std::chrono::milliseconds max_age_;
  mutable std::mutex mu_;
  std::map<std::string, std::deque<std::unique_ptr<RuntimeHandle>>> handles_;
};

}  // namespace qhyb::classical
