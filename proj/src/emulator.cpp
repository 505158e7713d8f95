#include "qhyb/emulator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <thread>

namespace qhyb::emulator {

namespace {

using Matrix2 = std::array<Amplitude, 4>;  // row-major [[a, b], [c, d]]

constexpr Amplitude kI{0.0, 1.0};

Matrix2 single_matrix(cqasm::SingleGate g) {
  using cqasm::SingleGate;
  const double r = 1.0 / std::numbers::sqrt2;
  switch (g) {
    case SingleGate::H: return {r, r, r, -r};
    case SingleGate::X: return {0.0, 1.0, 1.0, 0.0};
    case SingleGate::Y: return {0.0, -kI, kI, 0.0};
    case SingleGate::Z: return {1.0, 0.0, 0.0, -1.0};
    case SingleGate::S: return {1.0, 0.0, 0.0, kI};
    case SingleGate::Sdag: return {1.0, 0.0, 0.0, -kI};
    case SingleGate::T: return {1.0, 0.0, 0.0, std::polar(1.0, std::numbers::pi / 4)};
    case SingleGate::Tdag: return {1.0, 0.0, 0.0, std::polar(1.0, -std::numbers::pi / 4)};
  }
  return {1.0, 0.0, 0.0, 1.0};
}

Matrix2 rotation_matrix(cqasm::RotationAxis axis, double theta) {
  using cqasm::RotationAxis;
  const double c = std::cos(theta / 2);
  const double s = std::sin(theta / 2);
  switch (axis) {
    case RotationAxis::Rx: return {c, -kI * s, -kI * s, c};
    case RotationAxis::Ry: return {c, -s, s, c};
    case RotationAxis::Rz: return {std::polar(1.0, -theta / 2), 0.0, 0.0, std::polar(1.0, theta / 2)};
  }
  return {1.0, 0.0, 0.0, 1.0};
}

void apply_single(StateVector& state, const Matrix2& m, int target) {
  const std::uint64_t bit = std::uint64_t{1} << target;
  auto& a = state.amplitudes;
  for (std::uint64_t i = 0; i < a.size(); ++i) {
    if (i & bit) continue;
    const Amplitude a0 = a[i];
    const Amplitude a1 = a[i | bit];
    a[i] = m[0] * a0 + m[1] * a1;
    a[i | bit] = m[2] * a0 + m[3] * a1;
  }
}

void check_width(int qubits) {
  if (qubits > cqasm::kMaxQubits) {
    throw EmulatorError(EmulatorError::Kind::TooManyQubits,
                        std::to_string(qubits) + " qubits exceeds the limit of " +
                            std::to_string(cqasm::kMaxQubits));
  }
}

}  // namespace

StateVector StateVector::zero(int qubits) {
  check_width(qubits);
  StateVector s;
  s.qubits = qubits;
  s.amplitudes.assign(std::size_t{1} << qubits, Amplitude{0.0, 0.0});
  s.amplitudes[0] = 1.0;
  return s;
}

double StateVector::norm_squared() const noexcept {
  double total = 0.0;
  for (const auto& a : amplitudes) total += std::norm(a);
  return total;
}

void apply(StateVector& state, const cqasm::Statement& statement) {
  std::visit(
      [&](const auto& st) {
        using T = std::decay_t<decltype(st)>;
        if constexpr (std::is_same_v<T, cqasm::Gate1>) {
          apply_single(state, single_matrix(st.name), st.target);
        } else if constexpr (std::is_same_v<T, cqasm::Rotation>) {
          apply_single(state, rotation_matrix(st.name, st.angle), st.target);
        } else if constexpr (std::is_same_v<T, cqasm::Gate2>) {
          const std::uint64_t cbit = std::uint64_t{1} << st.control;
          const std::uint64_t tbit = std::uint64_t{1} << st.target;
          auto& a = state.amplitudes;
          for (std::uint64_t i = 0; i < a.size(); ++i) {
            if (!(i & cbit)) continue;
            if (st.name == cqasm::TwoQubitGate::CNOT) {
              if (!(i & tbit)) std::swap(a[i], a[i | tbit]);
            } else if (i & tbit) {
              a[i] = -a[i];
            }
          }
        }
      },
      statement);
}

StateVector statevector(const cqasm::Circuit& circuit) {
  StateVector state = StateVector::zero(circuit.qubits);
  for (const auto& st : circuit.statements) apply(state, st);
  return state;
}

std::string basis_label(std::uint64_t index, int qubits) {
  std::string label(static_cast<std::size_t>(qubits), '0');
  for (int q = 0; q < qubits; ++q) {
    if (index & (std::uint64_t{1} << q)) label[static_cast<std::size_t>(qubits - 1 - q)] = '1';
  }
  return label;
}

Histogram sample(const StateVector& state, std::int64_t shots, std::uint64_t seed) {
  if (shots < 1) throw EmulatorError(EmulatorError::Kind::InvalidShots, "shots must be >= 1");
  std::vector<double> cumulative(state.amplitudes.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < cumulative.size(); ++i) {
    acc += std::norm(state.amplitudes[i]);
    cumulative[i] = acc;
  }
  std::mt19937_64 rng(seed);
  std::vector<std::uint64_t> hits(cumulative.size(), 0);
  for (std::int64_t s = 0; s < shots; ++s) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * acc;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    // u < acc, so the search always lands on an outcome with nonzero mass.
    if (it == cumulative.end()) --it;
    ++hits[static_cast<std::size_t>(it - cumulative.begin())];
  }
  Histogram h;
  h.shots = static_cast<std::uint64_t>(shots);
  for (std::size_t i = 0; i < hits.size(); ++i) {
    if (hits[i] != 0) h.counts.emplace(basis_label(i, state.qubits), hits[i]);
  }
  return h;
}

Histogram simulate(const cqasm::Circuit& circuit, std::int64_t shots, std::uint64_t seed) {
  check_width(circuit.qubits);
  if (!circuit.ends_in_measure_all()) {
    throw EmulatorError(EmulatorError::Kind::NoMeasurement, "circuit does not end in measure_all");
  }
  if (shots < 1) throw EmulatorError(EmulatorError::Kind::InvalidShots, "shots must be >= 1");
  return sample(statevector(circuit), shots, seed);
}

QuantumRuntime::QuantumRuntime(RuntimeOptions options) : options_(options) {}

void QuantumRuntime::set_qpu_delay(std::chrono::milliseconds delay) {
  std::lock_guard lock(exec_mu_);
  options_.qpu_delay = delay;
}

std::uint64_t QuantumRuntime::executions() const {
  std::lock_guard lock(exec_mu_);
  return executions_;
}

wire::Message QuantumRuntime::handle(const wire::Message& request) {
  if (std::holds_alternative<wire::TerminateRequest>(request)) return wire::TerminateReply{};
  const auto* exec = std::get_if<wire::QuantumExecuteRequest>(&request);
  if (exec == nullptr) {
    return wire::ErrorReply{"unsupported", "quantum runtime cannot handle " +
                                               std::string(wire::type_name(request))};
  }
  cqasm::Circuit circuit;
  try {
    circuit = cqasm::parse(exec->circuit);
  } catch (const cqasm::ParseError& e) {
    return wire::ErrorReply{"parse_error", e.what()};
  }

  std::lock_guard lock(exec_mu_);
  const auto started = std::chrono::steady_clock::now();
  if (options_.qpu_delay.count() > 0) std::this_thread::sleep_for(options_.qpu_delay);
  Histogram histogram;
  try {
    histogram = simulate(circuit, exec->shots, exec->seed.value_or(options_.default_seed));
  } catch (const EmulatorError& e) {
    return wire::ErrorReply{"execution_error", e.what()};
  }
  ++executions_;
  const auto busy = std::chrono::duration_cast<std::chrono::microseconds>(
                        std::chrono::steady_clock::now() - started)
                        .count();
  return wire::QuantumExecuteReply{std::move(histogram), busy};
}

QuantumRuntimeServer::QuantumRuntimeServer(const std::string& host, std::uint16_t port,
                                           RuntimeOptions options)
    : runtime_(options),
      server_(wire::Listener::bind(host, port),
              [this](const wire::Message& m) { return runtime_.handle(m); }) {
  server_.start();
}

}  // namespace qhyb::emulator
