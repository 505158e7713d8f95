#include "qhyb/core_model.hpp"

#include <array>
#include <chrono>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <random>

namespace qhyb {

TimestampMs now_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

std::string make_uuid() {
  static std::mutex mu;
  static std::mt19937_64 rng{std::random_device{}()};
  std::uint64_t hi = 0;
  std::uint64_t lo = 0;
  {
    std::lock_guard lock(mu);
    hi = rng();
    lo = rng();
  }
  hi = (hi & 0xffffffffffff0fffULL) | 0x0000000000004000ULL;  // version 4
  lo = (lo & 0x3fffffffffffffffULL) | 0x8000000000000000ULL;  // RFC 4122 variant
  std::array<char, 37> buf{};
  std::snprintf(buf.data(), buf.size(), "%08x-%04x-%04x-%04x-%012llx",
                static_cast<unsigned>(hi >> 32), static_cast<unsigned>((hi >> 16) & 0xffff),
                static_cast<unsigned>(hi & 0xffff), static_cast<unsigned>(lo >> 48),
                static_cast<unsigned long long>(lo & 0xffffffffffffULL));
  return std::string(buf.data(), 36);
}

bool is_terminal(JobState s) noexcept {
  switch (s) {
    case JobState::Completed:
    case JobState::Failed:
    case JobState::TimedOut:
    case JobState::Cancelled:
      return true;
    default:
      return false;
  }
}

std::string_view to_string(JobKind k) noexcept {
  return k == JobKind::Hybrid ? "hybrid" : "pure_quantum";
}

std::string_view to_string(JobState s) noexcept {
  switch (s) {
    case JobState::Queued: return "queued";
    case JobState::Dispatched: return "dispatched";
    case JobState::Initializing: return "initializing";
    case JobState::RunningClassical: return "running_classical";
    case JobState::RunningQuantum: return "running_quantum";
    case JobState::Finalizing: return "finalizing";
    case JobState::Completed: return "completed";
    case JobState::Failed: return "failed";
    case JobState::TimedOut: return "timed_out";
    case JobState::Cancelled: return "cancelled";
  }
  return "unknown";
}

std::string_view to_string(BackendStatus s) noexcept {
  switch (s) {
    case BackendStatus::Idle: return "idle";
    case BackendStatus::Executing: return "executing";
    case BackendStatus::Calibrating: return "calibrating";
    case BackendStatus::Offline: return "offline";
  }
  return "unknown";
}

std::string_view to_string(LifecycleEvent e) noexcept {
  switch (e) {
    case LifecycleEvent::Dispatch: return "dispatch";
    case LifecycleEvent::InitOk: return "init_ok";
    case LifecycleEvent::ClassicalStep: return "classical_step";
    case LifecycleEvent::QuantumStep: return "quantum_step";
    case LifecycleEvent::Finalize: return "finalize";
    case LifecycleEvent::Complete: return "complete";
    case LifecycleEvent::Fail: return "fail";
    case LifecycleEvent::Timeout: return "timeout";
    case LifecycleEvent::Cancel: return "cancel";
  }
  return "unknown";
}

JobKind parse_job_kind(std::string_view s) {
  if (s == "pure_quantum") return JobKind::PureQuantum;
  if (s == "hybrid") return JobKind::Hybrid;
  throw std::invalid_argument("unknown job kind: " + std::string(s));
}

JobState parse_job_state(std::string_view s) {
  for (JobState st : kAllJobStates) {
    if (to_string(st) == s) return st;
  }
  throw std::invalid_argument("unknown job state: " + std::string(s));
}

BackendStatus parse_backend_status(std::string_view s) {
  for (BackendStatus st : {BackendStatus::Idle, BackendStatus::Executing,
                           BackendStatus::Calibrating, BackendStatus::Offline}) {
    if (to_string(st) == s) return st;
  }
  throw std::invalid_argument("unknown backend status: " + std::string(s));
}

IllegalTransition::IllegalTransition(JobState from, LifecycleEvent event)
    : std::logic_error("illegal transition: " + std::string(to_string(event)) + " from " +
                       std::string(to_string(from))),
      from_(from),
      event_(event) {}

std::optional<JobState> transition_target(JobState from, LifecycleEvent event,
                                          JobKind kind) noexcept {
  using S = JobState;
  using E = LifecycleEvent;
  const bool hybrid = kind == JobKind::Hybrid;
  switch (from) {
    case S::Queued:
      if (event == E::Dispatch) return S::Dispatched;
      if (event == E::Cancel) return S::Cancelled;
      break;
    case S::Dispatched:
      if (event == E::Dispatch) return hybrid ? S::Initializing : S::RunningQuantum;
      if (event == E::Fail) return S::Failed;
      break;
    case S::Initializing:
      if (event == E::InitOk) return S::RunningClassical;
      if (event == E::Fail) return S::Failed;
      if (event == E::Timeout) return S::TimedOut;
      break;
    case S::RunningClassical:
      if (event == E::ClassicalStep) return S::RunningQuantum;
      if (event == E::Finalize) return S::Finalizing;
      if (event == E::Fail) return S::Failed;
      if (event == E::Timeout) return S::TimedOut;
      break;
    case S::RunningQuantum:
      if (event == E::QuantumStep && hybrid) return S::RunningClassical;
      if (event == E::Finalize && !hybrid) return S::Finalizing;
      if (event == E::Fail) return S::Failed;
      if (event == E::Timeout) return S::TimedOut;
      break;
    case S::Finalizing:
      if (event == E::Complete) return S::Completed;
      if (event == E::Fail) return S::Failed;
      break;
    case S::Completed:
    case S::Failed:
    case S::TimedOut:
    case S::Cancelled:
      break;
  }
  return std::nullopt;
}

Job advance_state(Job job, LifecycleEvent event, TimestampMs now) {
  const auto target = transition_target(job.state, event, job.kind);
  if (!target) throw IllegalTransition(job.state, event);
  if (job.state == JobState::Queued && *target == JobState::Dispatched && !job.started_at) {
    job.started_at = now;
  }
  job.state = *target;
  if (is_terminal(job.state)) job.finished_at = now;
  return job;
}

Job advance_state(Job job, LifecycleEvent event) {
  return advance_state(std::move(job), event, now_ms());
}

void validate_histogram(const Histogram& h, int qubits) {
  std::uint64_t total = 0;
  for (const auto& [key, count] : h.counts) {
    if (key.find_first_not_of("01") != std::string::npos) {
      throw HistogramError(HistogramError::Kind::BadKey, "non-binary key '" + key + "'");
    }
    if (static_cast<int>(key.size()) != qubits) {
      throw HistogramError(HistogramError::Kind::WidthMismatch,
                           "key '" + key + "' is " + std::to_string(key.size()) +
                               " bits wide, expected " + std::to_string(qubits));
    }
    total += count;
  }
  if (total != h.shots) {
    throw HistogramError(HistogramError::Kind::CountMismatch,
                         "counts sum to " + std::to_string(total) + ", shots is " +
                             std::to_string(h.shots));
  }
}

JobKind kind_of(const JobPayload& payload) noexcept {
  return std::holds_alternative<HybridProgram>(payload) ? JobKind::Hybrid
                                                        : JobKind::PureQuantum;
}

namespace {

template <typename T>
Json opt_to_json(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

template <typename T>
std::optional<T> opt_from_json(const Json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->template get<T>();
}

}  // namespace

void to_json(Json& j, const Origin& o) { j = Json{{"cluster", o.cluster}, {"user", o.user}}; }

void from_json(const Json& j, Origin& o) {
  j.at("cluster").get_to(o.cluster);
  j.at("user").get_to(o.user);
}

void to_json(Json& j, const JobPayload& p) {
  if (const auto* c = std::get_if<CircuitText>(&p)) {
    j = Json{{"type", "circuit_text"}, {"circuit", c->text}};
    return;
  }
  const auto& h = std::get<HybridProgram>(p);
  j = Json{{"type", "hybrid_program"},
           {"executable_path", h.executable_path},
           {"args", h.args},
           {"max_iterations", h.max_iterations}};
  if (!h.environment.empty()) j["environment"] = h.environment;
}

void from_json(const Json& j, JobPayload& p) {
  const auto type = j.at("type").get<std::string>();
  if (type == "circuit_text") {
    p = CircuitText{j.at("circuit").get<std::string>()};
  } else if (type == "hybrid_program") {
    HybridProgram h;
    j.at("executable_path").get_to(h.executable_path);
    if (j.contains("args")) j.at("args").get_to(h.args);
    if (j.contains("max_iterations")) j.at("max_iterations").get_to(h.max_iterations);
    if (j.contains("environment")) j.at("environment").get_to(h.environment);
    p = std::move(h);
  } else {
    throw std::invalid_argument("unknown payload type: " + type);
  }
}

void to_json(Json& j, const Job& job) {
  j = Json{{"id", job.id},
           {"origin", job.origin},
           {"kind", to_string(job.kind)},
           {"payload", job.payload},
           {"shots", job.shots},
           {"priority", job.priority},
           {"reservation_id", opt_to_json(job.reservation_id)},
           {"timeout", job.timeout_ms},
           {"state", to_string(job.state)},
           {"submitted_at", job.submitted_at},
           {"started_at", opt_to_json(job.started_at)},
           {"finished_at", opt_to_json(job.finished_at)},
           {"backend", job.backend},
           {"seed", opt_to_json(job.seed)}};
}

void from_json(const Json& j, Job& job) {
  j.at("id").get_to(job.id);
  j.at("origin").get_to(job.origin);
  job.kind = parse_job_kind(j.at("kind").get<std::string>());
  j.at("payload").get_to(job.payload);
  j.at("shots").get_to(job.shots);
  job.priority = j.value("priority", std::int64_t{0});
  job.reservation_id = opt_from_json<std::string>(j, "reservation_id");
  job.timeout_ms = j.value("timeout", kDefaultJobTimeoutMs);
  job.state = parse_job_state(j.at("state").get<std::string>());
  j.at("submitted_at").get_to(job.submitted_at);
  job.started_at = opt_from_json<TimestampMs>(j, "started_at");
  job.finished_at = opt_from_json<TimestampMs>(j, "finished_at");
  job.backend = j.value("backend", std::string{});
  job.seed = opt_from_json<std::uint64_t>(j, "seed");
}

void to_json(Json& j, const Histogram& h) {
  j = Json{{"counts", h.counts}, {"shots", h.shots}};
}

void from_json(const Json& j, Histogram& h) {
  j.at("counts").get_to(h.counts);
  j.at("shots").get_to(h.shots);
}

void to_json(Json& j, const LatencyReport& r) {
  j = Json{{"initialization", r.initialization},
           {"per_step_execution", r.per_step_execution},
           {"termination", r.termination}};
}

void from_json(const Json& j, LatencyReport& r) {
  j.at("initialization").get_to(r.initialization);
  j.at("per_step_execution").get_to(r.per_step_execution);
  j.at("termination").get_to(r.termination);
}

void to_json(Json& j, const JobResult& r) {
  j = Json{{"histograms", r.histograms},
           {"final_payload", r.final_payload ? *r.final_payload : Json(nullptr)},
           {"iterations", r.iterations},
           {"latency", r.latency}};
}

void from_json(const Json& j, JobResult& r) {
  j.at("histograms").get_to(r.histograms);
  r.final_payload.reset();
  if (auto it = j.find("final_payload"); it != j.end() && !it->is_null()) r.final_payload = *it;
  j.at("iterations").get_to(r.iterations);
  j.at("latency").get_to(r.latency);
}

void to_json(Json& j, const AccountingRecord& r) {
  j = Json{{"job_id", r.job_id},
           {"origin", r.origin},
           {"backend", r.backend},
           {"submitted_at", r.submitted_at},
           {"started_at", opt_to_json(r.started_at)},
           {"finished_at", opt_to_json(r.finished_at)},
           {"final_state", to_string(r.final_state)},
           {"quantum_busy_ms", r.quantum_busy_ms},
           {"iterations", r.iterations}};
}

void from_json(const Json& j, AccountingRecord& r) {
  j.at("job_id").get_to(r.job_id);
  j.at("origin").get_to(r.origin);
  j.at("backend").get_to(r.backend);
  j.at("submitted_at").get_to(r.submitted_at);
  r.started_at = opt_from_json<TimestampMs>(j, "started_at");
  r.finished_at = opt_from_json<TimestampMs>(j, "finished_at");
  r.final_state = parse_job_state(j.at("final_state").get<std::string>());
  j.at("quantum_busy_ms").get_to(r.quantum_busy_ms);
  j.at("iterations").get_to(r.iterations);
}

void to_json(Json& j, const Reservation& r) {
  j = Json{{"id", r.id},
           {"holder", r.holder},
           {"backend", r.backend},
           {"start", r.start},
           {"end", r.end}};
}

void from_json(const Json& j, Reservation& r) {
  j.at("id").get_to(r.id);
  j.at("holder").get_to(r.holder);
  j.at("backend").get_to(r.backend);
  j.at("start").get_to(r.start);
  j.at("end").get_to(r.end);
}

}  // namespace qhyb
