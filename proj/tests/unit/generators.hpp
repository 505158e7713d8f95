#pragma once

// Random value generators shared by the property-style tests.

#include <random>
#include <string>

#include "qhyb/core_model.hpp"
#include "qhyb/cqasm.hpp"
#include "qhyb/wire_protocol.hpp"

namespace qhyb::testing {

using Rng = std::mt19937_64;

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline std::string random_word(Rng& rng, int max_len = 12) {
  static const std::string alphabet = "abcdefghijklmnopqrstuvwxyz0123456789-_";
  std::string out(static_cast<std::size_t>(uniform_int(rng, 1, max_len)), 'a');
  for (char& c : out) c = alphabet[static_cast<std::size_t>(uniform_int(rng, 0, int(alphabet.size()) - 1))];
  return out;
}

inline Histogram random_histogram(Rng& rng) {
  const int width = uniform_int(rng, 1, 6);
  Histogram h;
  const int keys = uniform_int(rng, 1, 5);
  for (int k = 0; k < keys; ++k) {
    std::string key(static_cast<std::size_t>(width), '0');
    for (char& c : key) c = uniform_int(rng, 0, 1) ? '1' : '0';
    const auto n = static_cast<std::uint64_t>(uniform_int(rng, 0, 5000));
    h.counts[key] += n;
  }
  for (const auto& [k, v] : h.counts) h.shots += v;
  return h;
}

inline cqasm::Circuit random_circuit(Rng& rng, int qubits, int depth, bool measure) {
  cqasm::Circuit c;
  c.qubits = qubits;
  for (int d = 0; d < depth; ++d) {
    const int kind = uniform_int(rng, 0, qubits > 1 ? 2 : 1);
    const int target = uniform_int(rng, 0, qubits - 1);
    if (kind == 0) {
      c.statements.push_back(cqasm::Gate1{static_cast<cqasm::SingleGate>(uniform_int(rng, 0, 7)), target});
    } else if (kind == 1) {
      const double angle = std::uniform_real_distribution<double>(-7.0, 7.0)(rng);
      c.statements.push_back(
          cqasm::Rotation{static_cast<cqasm::RotationAxis>(uniform_int(rng, 0, 2)), target, angle});
    } else {
      int control = uniform_int(rng, 0, qubits - 2);
      if (control >= target) ++control;
      c.statements.push_back(
          cqasm::Gate2{static_cast<cqasm::TwoQubitGate>(uniform_int(rng, 0, 1)), control, target});
    }
  }
  if (measure) c.statements.push_back(cqasm::MeasureAll{});
  return c;
}

inline Job random_job(Rng& rng) {
  Job job;
  job.id = make_uuid();
  job.origin = {random_word(rng), random_word(rng)};
  if (uniform_int(rng, 0, 1)) {
    job.payload = CircuitText{"version 1.0; qubits 2; H q[0]; measure_all"};
  } else {
    HybridProgram p{"/opt/" + random_word(rng), {}, uniform_int(rng, 1, 50), {}};
    for (int i = uniform_int(rng, 0, 3); i > 0; --i) p.args.push_back(random_word(rng));
    if (uniform_int(rng, 0, 1)) p.environment["PATH"] = "/bin";
    job.payload = p;
  }
  job.kind = kind_of(job.payload);
  job.shots = uniform_int(rng, 1, 100000);
  job.priority = uniform_int(rng, -10, 10);
  if (uniform_int(rng, 0, 1)) job.reservation_id = random_word(rng);
  job.timeout_ms = uniform_int(rng, 1, 1'000'000);
  job.state = kAllJobStates[static_cast<std::size_t>(uniform_int(rng, 0, 9))];
  job.submitted_at = 1'700'000'000'000 + uniform_int(rng, 0, 1'000'000);
  if (job.state != JobState::Queued) job.started_at = job.submitted_at + 5;
  if (is_terminal(job.state)) job.finished_at = job.submitted_at + 50;
  job.backend = "emulator-1";
  if (uniform_int(rng, 0, 1)) job.seed = rng();
  return job;
}

inline wire::Message random_message(Rng& rng) {
  switch (uniform_int(rng, 0, 8)) {
    case 0: {
      Json cfg = {{"n", uniform_int(rng, 0, 9)}, {"name", random_word(rng)}};
      return wire::InitRequest{make_uuid(), cfg};
    }
    case 1:
      return uniform_int(rng, 0, 1) ? wire::InitReply{true, std::nullopt}
                                    : wire::InitReply{false, random_word(rng)};
    case 2:
      return uniform_int(rng, 0, 1) ? wire::ClassicalStepRequest{std::nullopt}
                                    : wire::ClassicalStepRequest{random_histogram(rng)};
    case 3:
      if (uniform_int(rng, 0, 1)) {
        return wire::ClassicalStepReply{cqasm::print(random_circuit(rng, 3, 4, true))};
      }
      return wire::ClassicalStepReply{
          wire::ClassicalStepReply::Done{Json{{"iterations", uniform_int(rng, 0, 100)}}}};
    case 4: {
      wire::QuantumExecuteRequest r{cqasm::print(random_circuit(rng, 2, 3, true)),
                                    uniform_int(rng, 1, 10000), std::nullopt};
      if (uniform_int(rng, 0, 1)) r.seed = rng();
      return r;
    }
    case 5: {
      wire::QuantumExecuteReply r{random_histogram(rng), std::nullopt};
      if (uniform_int(rng, 0, 1)) r.busy_us = uniform_int(rng, 0, 100000);
      return r;
    }
    case 6: return wire::TerminateRequest{};
    case 7: return wire::TerminateReply{};
    default: return wire::ErrorReply{random_word(rng), "msg " + random_word(rng, 40)};
  }
}

}  // namespace qhyb::testing
