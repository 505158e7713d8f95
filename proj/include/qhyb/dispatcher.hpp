#pragma once

// Task manager: drives one job through its lifecycle, talking to the
// quantum runtime over the wire protocol and to the user's hybrid program
// through a classical runtime handle.

#include <chrono>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <optional>
#include <stop_token>
#include <string>

#include "qhyb/classical_runtime.hpp"
#include "qhyb/core_model.hpp"
#include "qhyb/wire_protocol.hpp"

namespace qhyb {

struct DispatchConfig {
  std::chrono::milliseconds step_deadline{60'000};
  std::chrono::milliseconds job_timeout_default{kDefaultJobTimeoutMs};
  std::size_t hot_pool_size = 0;
  wire::Endpoint quantum_endpoint;
  std::chrono::milliseconds connect_timeout{2'000};
  classical::SpawnOptions spawn;
  // Spawn a replacement after a job consumed a pooled handle.
  bool replenish_pool = false;
};

struct JobError {
  std::string code;
  std::string message;
  std::string diagnostics;

  bool operator==(const JobError&) const = default;
};

void to_json(Json& j, const JobError& e);
void from_json(const Json& j, JobError& e);

struct JobOutcome {
  JobState final_state = JobState::Failed;
  std::optional<JobResult> result;  // present iff Completed
  std::optional<JobError> error;
  // Histograms recorded before the job stopped, whatever the outcome.
  std::int64_t iterations_completed = 0;
  Micros quantum_busy_us = 0;
  bool pool_hit = false;
};

/// Serializes use of one quantum backend. Tracks the largest number of
/// simultaneous holders ever observed so tests can assert exclusivity.
class BackendGate {
 public:
  /// False when `until` passes or a stop is requested first.
  bool acquire(std::chrono::steady_clock::time_point until, std::stop_token stop = {});
  void release();

  bool busy() const;
  int max_concurrent() const;
  std::uint64_t acquisitions() const;

 private:
  mutable std::mutex mu_;
  std::condition_variable_any cv_;
  int holders_ = 0;
  int max_holders_ = 0;
  std::uint64_t acquisitions_ = 0;
};

JobKind detect_kind(const JobPayload& payload) noexcept;

class Dispatcher {
 public:
  /// Called after every state change of the job being run.
  using Observer = std::function<void(const Job&)>;

  explicit Dispatcher(DispatchConfig config);
  ~Dispatcher();

  /// Runs a Dispatched job to a terminal state. `job` is updated in place.
  JobOutcome run(Job& job, std::stop_token stop = {}, const Observer& observer = {});
  JobOutcome run_pure(Job& job, std::stop_token stop = {}, const Observer& observer = {});
  JobOutcome run_hybrid(Job& job, std::stop_token stop = {}, const Observer& observer = {});

  /// Spawns up to min(n, free pool capacity) Ready handles; returns how many.
  int prewarm(const HybridProgram& program, int n);

  const DispatchConfig& config() const noexcept { return config_; }
  BackendGate& gate() noexcept { return gate_; }
  classical::HandlePool& pool() noexcept { return pool_; }

 private:
  DispatchConfig config_;
  BackendGate gate_;
  classical::HandlePool pool_;
};

}  // namespace qhyb
