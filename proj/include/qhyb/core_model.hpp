#pragma once

// Shared domain types for the orchestration stack and the job lifecycle
// state machine. Everything here is a plain value type; the JSON form
// produced by the to_json/from_json overloads is the canonical external
// representation used by the REST API and the accounting ledger.

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace qhyb {

using Json = nlohmann::json;

/// Milliseconds since the Unix epoch.
using TimestampMs = std::int64_t;
/// Durations in LatencyReport are integer microseconds.
using Micros = std::int64_t;

inline constexpr std::int64_t kDefaultJobTimeoutMs = 300'000;

TimestampMs now_ms();

/// Random RFC 4122 version-4 identifier.
std::string make_uuid();

enum class JobKind { PureQuantum, Hybrid };

enum class JobState {
  Queued,
  Dispatched,
  Initializing,
  RunningClassical,
  RunningQuantum,
  Finalizing,
  Completed,
  Failed,
  TimedOut,
  Cancelled,
};

inline constexpr JobState kAllJobStates[] = {
    JobState::Queued,         JobState::Dispatched,       JobState::Initializing,
    JobState::RunningClassical, JobState::RunningQuantum, JobState::Finalizing,
    JobState::Completed,      JobState::Failed,           JobState::TimedOut,
    JobState::Cancelled,
};

enum class BackendStatus { Idle, Executing, Calibrating, Offline };

enum class LifecycleEvent {
  Dispatch,
  InitOk,
  ClassicalStep,
  QuantumStep,
  Finalize,
  Complete,
  Fail,
  Timeout,
  Cancel,
};

inline constexpr LifecycleEvent kAllLifecycleEvents[] = {
    LifecycleEvent::Dispatch, LifecycleEvent::InitOk,   LifecycleEvent::ClassicalStep,
    LifecycleEvent::QuantumStep, LifecycleEvent::Finalize, LifecycleEvent::Complete,
    LifecycleEvent::Fail,     LifecycleEvent::Timeout,  LifecycleEvent::Cancel,
};

bool is_terminal(JobState s) noexcept;

std::string_view to_string(JobKind k) noexcept;
std::string_view to_string(JobState s) noexcept;
std::string_view to_string(BackendStatus s) noexcept;
std::string_view to_string(LifecycleEvent e) noexcept;

// The parse_* functions throw std::invalid_argument on unknown names.
JobKind parse_job_kind(std::string_view s);
JobState parse_job_state(std::string_view s);
BackendStatus parse_backend_status(std::string_view s);

struct Origin {
  std::string cluster;
  std::string user;

  bool operator==(const Origin&) const = default;
};

struct CircuitText {
  std::string text;

  bool operator==(const CircuitText&) const = default;
};

struct HybridProgram {
  std::string executable_path;
  std::vector<std::string> args;
  int max_iterations = 100;
  // Extra environment for the child process (SLURM submissions carry one).
  std::map<std::string, std::string> environment;

  bool operator==(const HybridProgram&) const = default;
};

using JobPayload = std::variant<CircuitText, HybridProgram>;

struct Job {
  std::string id;
  Origin origin;
  JobKind kind = JobKind::PureQuantum;
  JobPayload payload;
  std::int64_t shots = 1024;
  std::int64_t priority = 0;
  std::optional<std::string> reservation_id;
  std::int64_t timeout_ms = kDefaultJobTimeoutMs;
  JobState state = JobState::Queued;
  TimestampMs submitted_at = 0;
  std::optional<TimestampMs> started_at;
  std::optional<TimestampMs> finished_at;
  std::string backend;
  // Base seed for the emulator; iteration i samples with seed + i.
  std::optional<std::uint64_t> seed;

  bool operator==(const Job&) const = default;
};

struct Histogram {
  std::map<std::string, std::uint64_t> counts;
  std::uint64_t shots = 0;

  bool operator==(const Histogram&) const = default;
};

struct LatencyReport {
  Micros initialization = 0;
  std::vector<Micros> per_step_execution;
  Micros termination = 0;

  bool operator==(const LatencyReport&) const = default;
};

struct JobResult {
  std::vector<Histogram> histograms;
  std::optional<Json> final_payload;
  std::int64_t iterations = 0;
  LatencyReport latency;

  bool operator==(const JobResult&) const = default;
};

struct AccountingRecord {
  std::string job_id;
  Origin origin;
  std::string backend;
  TimestampMs submitted_at = 0;
  std::optional<TimestampMs> started_at;
  std::optional<TimestampMs> finished_at;
  JobState final_state = JobState::Completed;
  std::int64_t quantum_busy_ms = 0;
  std::int64_t iterations = 0;

  bool operator==(const AccountingRecord&) const = default;
};

/// Exclusive window [start, end) on one backend.
struct Reservation {
  std::string id;
  Origin holder;
  std::string backend;
  TimestampMs start = 0;
  TimestampMs end = 0;

  bool operator==(const Reservation&) const = default;
  bool active_at(TimestampMs t) const noexcept { return start <= t && t < end; }
};

class IllegalTransition : public std::logic_error {
 public:
  IllegalTransition(JobState from, LifecycleEvent event);

  JobState from() const noexcept { return from_; }
  LifecycleEvent event() const noexcept { return event_; }

 private:
  JobState from_;
  LifecycleEvent event_;
};

/// Target of (state, event) for a job of the given kind, or nullopt when
/// the pair has no edge.
std::optional<JobState> transition_target(JobState from, LifecycleEvent event,
                                          JobKind kind) noexcept;

/// Moves the job along a legal edge. started_at is stamped on the first
/// dispatch and finished_at on entry to a terminal state.
Job advance_state(Job job, LifecycleEvent event, TimestampMs now);
Job advance_state(Job job, LifecycleEvent event);

class HistogramError : public std::runtime_error {
 public:
  enum class Kind { WidthMismatch, CountMismatch, BadKey };

  HistogramError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Throws HistogramError unless every key is a `qubits`-wide bitstring and
/// the counts sum to shots.
void validate_histogram(const Histogram& h, int qubits);

JobKind kind_of(const JobPayload& payload) noexcept;

// JSON (snake_case field names; enums as lower snake_case strings).
void to_json(Json& j, const Origin& o);
void from_json(const Json& j, Origin& o);
void to_json(Json& j, const JobPayload& p);
void from_json(const Json& j, JobPayload& p);
void to_json(Json& j, const Job& job);
void from_json(const Json& j, Job& job);
void to_json(Json& j, const Histogram& h);
void from_json(const Json& j, Histogram& h);
void to_json(Json& j, const LatencyReport& r);
void from_json(const Json& j, LatencyReport& r);
void to_json(Json& j, const JobResult& r);
void from_json(const Json& j, JobResult& r);
void to_json(Json& j, const AccountingRecord& r);
void from_json(const Json& j, AccountingRecord& r);
void to_json(Json& j, const Reservation& r);
void from_json(const Json& j, Reservation& r);

}  // namespace qhyb
