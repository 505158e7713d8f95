#pragma once

// Dense statevector emulator for the cQASM subset, and the quantum runtime
// server that exposes it over the wire protocol.
//
// Amplitude index bit i holds qubit i, so a histogram key printed with
// qubit 0 as the rightmost character is just the index in binary.
//
// Sampling uses std::mt19937_64, whose output sequence is fixed by the
// standard; a uniform double in [0, 1) is built from the top 53 bits of
// each draw. The seed -> histogram mapping is therefore stable across
// runs and toolchains.

#include <chrono>
#include <complex>
#include <cstdint>
#include <mutex>
#include <stdexcept>
#include <vector>

#include "qhyb/core_model.hpp"
#include "qhyb/cqasm.hpp"
#include "qhyb/wire_protocol.hpp"

namespace qhyb::emulator {

using Amplitude = std::complex<double>;

struct StateVector {
  int qubits = 0;
  std::vector<Amplitude> amplitudes;

  /// |0...0> on n qubits.
  static StateVector zero(int qubits);
  double norm_squared() const noexcept;
};

class EmulatorError : public std::runtime_error {
 public:
  enum class Kind { TooManyQubits, NoMeasurement, InvalidShots };

  EmulatorError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Applies one statement in place; MeasureAll is a no-op here.
void apply(StateVector& state, const cqasm::Statement& statement);

/// Final state of the circuit's gates applied to |0...0>.
StateVector statevector(const cqasm::Circuit& circuit);

/// Bitstring for a basis index, qubit 0 rightmost.
std::string basis_label(std::uint64_t index, int qubits);

Histogram sample(const StateVector& state, std::int64_t shots, std::uint64_t seed);

/// statevector() followed by sampling `shots` outcomes. The circuit must
/// end in measure_all.
Histogram simulate(const cqasm::Circuit& circuit, std::int64_t shots, std::uint64_t seed);

struct RuntimeOptions {
  // Artificial per-execution delay modelling slow hardware.
  std::chrono::milliseconds qpu_delay{0};
  std::uint64_t default_seed = 0x5eed;
};

/// Quantum runtime: answers QuantumExecuteRequest with a histogram. One
/// execution at a time per runtime instance.
class QuantumRuntime {
 public:
  explicit QuantumRuntime(RuntimeOptions options = {});

  wire::Message handle(const wire::Message& request);

  void set_qpu_delay(std::chrono::milliseconds delay);
  std::uint64_t executions() const;

 private:
  mutable std::mutex exec_mu_;
  RuntimeOptions options_;
  std::uint64_t executions_ = 0;
};

/// QuantumRuntime served on a TCP listener (background accept thread).
class QuantumRuntimeServer {
 public:
  QuantumRuntimeServer(const std::string& host, std::uint16_t port, RuntimeOptions options = {});

  std::uint16_t port() const noexcept { return server_.port(); }
  QuantumRuntime& runtime() noexcept { return runtime_; }
  void stop() { server_.stop(); }

 private:
  QuantumRuntime runtime_;
  wire::Server server_;
};

}  // namespace qhyb::emulator
