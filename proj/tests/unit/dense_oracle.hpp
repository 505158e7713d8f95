#pragma once

// Independent statevector oracle: builds the full 2^n x 2^n unitary for each
// statement as a Kronecker product (or basis permutation for two-qubit
// gates) and multiplies it into the state. Slow, but shares no code with
// the emulator's in-place kernels.

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "qhyb/cqasm.hpp"

namespace qhyb::testing {

using Cx = std::complex<double>;
using Dense = std::vector<std::vector<Cx>>;

inline Dense identity(std::size_t n) {
  Dense m(n, std::vector<Cx>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) m[i][i] = 1.0;
  return m;
}

inline Dense kron(const Dense& a, const Dense& b) {
  const std::size_t n = a.size();
  const std::size_t m = b.size();
  Dense out(n * m, std::vector<Cx>(n * m, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < m; ++k)
        for (std::size_t l = 0; l < m; ++l) out[i * m + k][j * m + l] = a[i][j] * b[k][l];
  return out;
}

inline Dense gate_matrix(const cqasm::Statement& st) {
  using namespace cqasm;
  const Cx i{0.0, 1.0};
  const double pi = std::numbers::pi;
  if (const auto* g = std::get_if<Gate1>(&st)) {
    const double r = 1.0 / std::sqrt(2.0);
    switch (g->name) {
      case SingleGate::H: return {{r, r}, {r, -r}};
      case SingleGate::X: return {{0, 1}, {1, 0}};
      case SingleGate::Y: return {{0, -i}, {i, 0}};
      case SingleGate::Z: return {{1, 0}, {0, -1}};
      case SingleGate::S: return {{1, 0}, {0, i}};
      case SingleGate::Sdag: return {{1, 0}, {0, -i}};
      case SingleGate::T: return {{1, 0}, {0, std::exp(i * pi / 4.0)}};
      case SingleGate::Tdag: return {{1, 0}, {0, std::exp(-i * pi / 4.0)}};
    }
  }
  const auto& r = std::get<Rotation>(st);
  const double c = std::cos(r.angle / 2);
  const double s = std::sin(r.angle / 2);
  switch (r.name) {
    case RotationAxis::Rx: return {{c, -i * s}, {-i * s, c}};
    case RotationAxis::Ry: return {{c, -s}, {s, c}};
    case RotationAxis::Rz: return {{std::exp(-i * r.angle / 2.0), 0}, {0, std::exp(i * r.angle / 2.0)}};
  }
  return identity(2);
}

/// Full-register operator; qubit q is bit q of the basis index, so the
/// Kronecker order runs from the highest qubit down to qubit 0.
inline Dense full_operator(const cqasm::Statement& st, int qubits) {
  using namespace cqasm;
  const std::size_t dim = std::size_t{1} << qubits;
  if (const auto* g2 = std::get_if<Gate2>(&st)) {
    Dense m(dim, std::vector<Cx>(dim, 0.0));
    for (std::size_t col = 0; col < dim; ++col) {
      const bool c = (col >> g2->control) & 1;
      const bool t = (col >> g2->target) & 1;
      if (g2->name == TwoQubitGate::CNOT) {
        const std::size_t row = c ? col ^ (std::size_t{1} << g2->target) : col;
        m[row][col] = 1.0;
      } else {
        m[col][col] = (c && t) ? -1.0 : 1.0;
      }
    }
    return m;
  }
  if (std::holds_alternative<MeasureAll>(st)) return identity(dim);
  const int target = std::holds_alternative<Gate1>(st) ? std::get<Gate1>(st).target
                                                       : std::get<Rotation>(st).target;
  Dense op = identity(1);
  for (int q = qubits - 1; q >= 0; --q) op = kron(op, q == target ? gate_matrix(st) : identity(2));
  return op;
}

inline std::vector<Cx> dense_statevector(const cqasm::Circuit& c) {
  const std::size_t dim = std::size_t{1} << c.qubits;
  std::vector<Cx> psi(dim, 0.0);
  psi[0] = 1.0;
  for (const auto& st : c.statements) {
    const Dense op = full_operator(st, c.qubits);
    std::vector<Cx> next(dim, 0.0);
    for (std::size_t r = 0; r < dim; ++r)
      for (std::size_t k = 0; k < dim; ++k) next[r] += op[r][k] * psi[k];
    psi = std::move(next);
  }
  return psi;
}

}  // namespace qhyb::testing
