#include "qhyb/dispatcher.hpp"

#include <spdlog/spdlog.h>

#include "qhyb/cqasm.hpp"

namespace qhyb {

namespace {

using Clock = std::chrono::steady_clock;
using namespace std::chrono_literals;

Micros micros_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration_cast<std::chrono::microseconds>(b - a).count();
}

std::string_view runtime_error_code(classical::RuntimeError::Kind k) {
  using K = classical::RuntimeError::Kind;
  switch (k) {
    case K::SpawnFailed: return "spawn_failed";
    case K::InitTimeout: return "timeout";
    case K::StepTimeout: return "timeout";
    case K::BadReply: return "bad_reply";
    case K::ChildExited: return "child_exited";
    case K::Cancelled: return "cancelled";
    case K::NotReady: return "internal";
  }
  return "internal";
}

struct GateHold {
  BackendGate& gate;
  ~GateHold() { gate.release(); }
};

// Shared bookkeeping for one job run.
class Run {
 public:
  Run(Job& job, std::stop_token stop, const Dispatcher::Observer& observer, const DispatchConfig& config)
      : job_(job), stop_(std::move(stop)), observer_(observer), config_(config) {
    const auto timeout = job.timeout_ms > 0 ? std::chrono::milliseconds(job.timeout_ms) : config.job_timeout_default;
    job_deadline_ = Clock::now() + timeout;
  }

  void advance(LifecycleEvent e) {
    job_ = advance_state(std::move(job_), e, now_ms());
    if (observer_) observer_(job_);
  }

  /// Deadline for the next runtime exchange.
  Clock::time_point step_until() const { return std::min(Clock::now() + config_.step_deadline, job_deadline_); }
  std::chrono::milliseconds step_budget() const {
    return std::max(1ms, std::chrono::ceil<std::chrono::milliseconds>(step_until() - Clock::now()));
  }
  bool expired() const { return Clock::now() >= job_deadline_; }
  std::stop_token stop() const { return stop_; }

  JobOutcome fail(std::string code, std::string message, std::string diagnostics = {}) {
    if (code == "timeout" && transition_target(job_.state, LifecycleEvent::Timeout, job_.kind)) {
      advance(LifecycleEvent::Timeout);
    } else if (!is_terminal(job_.state)) {
      advance(LifecycleEvent::Fail);
    }
    outcome_.final_state = job_.state;
    outcome_.error = JobError{std::move(code), std::move(message), std::move(diagnostics)};
    return outcome_;
  }

  JobOutcome& outcome() { return outcome_; }
  Job& job() { return job_; }

 private:
  Job& job_;
  std::stop_token stop_;
  const Dispatcher::Observer& observer_;
  const DispatchConfig& config_;
  Clock::time_point job_deadline_;
  JobOutcome outcome_;
};

struct QuantumCall {
  std::optional<Histogram> histogram;
  Micros round_trip_us = 0;
  Micros busy_us = 0;
  std::optional<JobError> error;
};

QuantumCall execute(wire::Connection& conn, const std::string& text, int qubits, const Job& job,
                    std::int64_t iteration, std::chrono::milliseconds budget) {
  QuantumCall call;
  wire::QuantumExecuteRequest req{text, job.shots, std::nullopt};
  if (job.seed) req.seed = *job.seed + static_cast<std::uint64_t>(iteration);
  const auto t0 = Clock::now();
  wire::Message reply;
  try {
    reply = conn.request(req, budget);
  } catch (const wire::ProtocolError& e) {
    call.error = JobError{e.kind() == wire::ProtocolError::Kind::Timeout ? "timeout" : "protocol_error", e.what(), {}};
    return call;
  }
  call.round_trip_us = micros_between(t0, Clock::now());
  if (const auto* err = std::get_if<wire::ErrorReply>(&reply)) {
    call.error = JobError{err->code, err->message, {}};
    return call;
  }
  const auto& r = std::get<wire::QuantumExecuteReply>(reply);
  try {
    validate_histogram(r.histogram, qubits);
  } catch (const HistogramError& e) {
    call.error = JobError{"bad_histogram", e.what(), {}};
    return call;
  }
  call.histogram = r.histogram;
  call.busy_us = std::min(r.busy_us.value_or(0), call.round_trip_us);
  return call;
}

}  // namespace

bool BackendGate::acquire(Clock::time_point until, std::stop_token stop) {
  std::unique_lock lock(mu_);
  if (!cv_.wait_until(lock, stop, until, [&] { return holders_ == 0; })) return false;
  ++holders_;
  ++acquisitions_;
  max_holders_ = std::max(max_holders_, holders_);
  return true;
}

void BackendGate::release() {
  {
    std::lock_guard lock(mu_);
    --holders_;
  }
  cv_.notify_one();
}

bool BackendGate::busy() const {
  std::lock_guard lock(mu_);
  return holders_ > 0;
}

int BackendGate::max_concurrent() const {
  std::lock_guard lock(mu_);
  return max_holders_;
}

std::uint64_t BackendGate::acquisitions() const {
  std::lock_guard lock(mu_);
  return acquisitions_;
}

JobKind detect_kind(const JobPayload& payload) noexcept { return kind_of(payload); }

Dispatcher::Dispatcher(DispatchConfig config)
    : config_(std::move(config)), pool_(config_.hot_pool_size) {}

Dispatcher::~Dispatcher() = default;

JobOutcome Dispatcher::run(Job& job, std::stop_token stop, const Observer& observer) {
  job.kind = detect_kind(job.payload);
  return job.kind == JobKind::Hybrid ? run_hybrid(job, stop, observer) : run_pure(job, stop, observer);
}

JobOutcome Dispatcher::run_pure(Job& job, std::stop_token stop, const Observer& observer) {
  Run run(job, std::move(stop), observer, config_);
  const std::string text = std::get<CircuitText>(job.payload).text;

  cqasm::Circuit circuit;
  try {
    circuit = cqasm::parse(text);
  } catch (const cqasm::ParseError& e) {
    return run.fail("parse_error", e.what());
  }

  std::optional<wire::Connection> conn;
  try {
    conn.emplace(wire::Connection::connect(config_.quantum_endpoint, config_.connect_timeout));
  } catch (const wire::ProtocolError& e) {
    return run.fail("connect_failed", e.what());
  }

  if (!gate_.acquire(run.step_until(), run.stop())) {
    return run.fail(run.stop().stop_requested() ? "cancelled" : "timeout", "quantum backend not acquired");
  }
  QuantumCall call;
  {
    GateHold hold{gate_};
    run.advance(LifecycleEvent::Dispatch);  // -> RunningQuantum
    call = execute(*conn, text, circuit.qubits, job, 0, run.step_budget());
    if (call.error) return run.fail(call.error->code, call.error->message);
    run.advance(LifecycleEvent::Finalize);
  }

  run.outcome().quantum_busy_us = call.busy_us;
  run.outcome().iterations_completed = 1;
  JobResult result;
  result.histograms.push_back(std::move(*call.histogram));
  result.iterations = 1;
  result.latency.initialization = 0;
  result.latency.per_step_execution.push_back(call.round_trip_us - call.busy_us);
  result.latency.termination = 0;
  run.advance(LifecycleEvent::Complete);
  run.outcome().final_state = job.state;
  run.outcome().result = std::move(result);
  return run.outcome();
}

JobOutcome Dispatcher::run_hybrid(Job& job, std::stop_token stop, const Observer& observer) {
  Run run(job, std::move(stop), observer, config_);
  const HybridProgram program = std::get<HybridProgram>(job.payload);
  run.advance(LifecycleEvent::Dispatch);  // -> Initializing

  JobResult result;
  std::unique_ptr<classical::RuntimeHandle> handle;
  bool replenish = false;
  // Whatever happens from here on, the handle is terminated before returning.
  auto finish = [&](JobOutcome outcome) {
    if (handle) {
      const std::string diag = handle->terminate();
      if (outcome.error && outcome.error->diagnostics.empty()) outcome.error->diagnostics = diag;
    }
    if (replenish) prewarm(program, 1);
    return outcome;
  };

  const auto init_start = Clock::now();
  handle = pool_.take(program);
  if (handle) {
    run.outcome().pool_hit = true;
    replenish = config_.replenish_pool;
  } else {
    auto opts = config_.spawn;
    opts.init_timeout = std::min(opts.init_timeout, run.step_budget());
    try {
      Json config{{"job_id", job.id}, {"shots", job.shots}, {"max_iterations", program.max_iterations}};
      handle = classical::RuntimeHandle::spawn(program, config, opts);
    } catch (const classical::RuntimeError& e) {
      return finish(run.fail(std::string(runtime_error_code(e.kind())), e.what(), e.diagnostics()));
    }
  }
  result.latency.initialization = micros_between(init_start, Clock::now());
  if (run.stop().stop_requested()) return finish(run.fail("cancelled", "job cancelled"));
  run.advance(LifecycleEvent::InitOk);  // -> RunningClassical

  std::optional<wire::Connection> conn;
  std::optional<Histogram> measurements;
  for (;;) {
    if (run.stop().stop_requested()) return finish(run.fail("cancelled", "job cancelled"));
    if (run.expired()) return finish(run.fail("timeout", "job exceeded its timeout"));
    const auto iteration_start = Clock::now();
    wire::ClassicalStepReply reply;
    try {
      reply = handle->step(measurements, run.step_budget(), run.stop());
    } catch (const classical::RuntimeError& e) {
      return finish(run.fail(std::string(runtime_error_code(e.kind())), e.what(), e.diagnostics()));
    }
    // A timeout outranks a done message that arrived too late.
    if (run.expired()) return finish(run.fail("timeout", "job exceeded its timeout"));
    if (reply.done()) {
      result.final_payload = std::get<wire::ClassicalStepReply::Done>(reply.outcome).final_payload;
      break;
    }
    const auto iteration = static_cast<std::int64_t>(result.histograms.size());
    if (iteration >= program.max_iterations) break;

    const auto& text = std::get<std::string>(reply.outcome);
    cqasm::Circuit circuit;
    try {
      circuit = cqasm::parse(text);
    } catch (const cqasm::ParseError& e) {
      return finish(run.fail("parse_error", e.what()));
    }
    if (!conn) {
      try {
        conn.emplace(wire::Connection::connect(config_.quantum_endpoint, config_.connect_timeout));
      } catch (const wire::ProtocolError& e) {
        return finish(run.fail("connect_failed", e.what()));
      }
    }
    if (!gate_.acquire(run.step_until(), run.stop())) {
      return finish(run.fail(run.stop().stop_requested() ? "cancelled" : "timeout", "quantum backend not acquired"));
    }
    QuantumCall call;
    {
      GateHold hold{gate_};
      run.advance(LifecycleEvent::ClassicalStep);  // -> RunningQuantum
      call = execute(*conn, text, circuit.qubits, job, iteration, run.step_budget());
      if (call.error) return finish(run.fail(call.error->code, call.error->message));
      run.advance(LifecycleEvent::QuantumStep);  // -> RunningClassical
    }
    result.latency.per_step_execution.push_back(micros_between(iteration_start, Clock::now()) - call.busy_us);
    run.outcome().quantum_busy_us += call.busy_us;
    result.histograms.push_back(std::move(*call.histogram));
    run.outcome().iterations_completed = iteration + 1;
    measurements = result.histograms.back();
  }

  run.advance(LifecycleEvent::Finalize);  // -> Finalizing
  handle->terminate();
  result.latency.termination = handle->termination_duration_us();
  result.iterations = static_cast<std::int64_t>(result.histograms.size());
  run.advance(LifecycleEvent::Complete);
  run.outcome().final_state = job.state;
  run.outcome().result = std::move(result);
  return finish(run.outcome());
}

int Dispatcher::prewarm(const HybridProgram& program, int n) {
  int warmed = 0;
  for (int i = 0; i < n && pool_.size() < pool_.capacity(); ++i) {
    try {
      if (!pool_.put(classical::RuntimeHandle::spawn(program, Json::object(), config_.spawn))) break;
      ++warmed;
    } catch (const classical::RuntimeError& e) {
      spdlog::warn("prewarm of {} failed: {}", program.executable_path, e.what());
    }
  }
  return warmed;
}

void to_json(Json& j, const JobError& e) {
  j = Json{{"code", e.code}, {"message", e.message}, {"diagnostics", e.diagnostics}};
}

void from_json(const Json& j, JobError& e) {
  j.at("code").get_to(e.code);
  e.message = j.value("message", std::string{});
  e.diagnostics = j.value("diagnostics", std::string{});
}

}  // namespace qhyb
