#pragma once

// The cQASM subset exchanged between the classical and quantum runtimes.
//
//   version 1.0
//   qubits 2
//   H q[0]
//   CNOT q[0], q[1]      # two-qubit form: control, target
//   Rx q[1], 0.25        # rotation angle in radians, decimal literal only
//   measure_all          # optional, must be last
//
// Statements are separated by ';' or newlines, gate names and keywords are
// case-insensitive, and '#' comments run to end of line.

#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace qhyb::cqasm {

inline constexpr int kMaxQubits = 20;

enum class SingleGate { H, X, Y, Z, S, Sdag, T, Tdag };
enum class RotationAxis { Rx, Ry, Rz };
enum class TwoQubitGate { CNOT, CZ };

struct Gate1 {
  SingleGate name;
  int target;
  bool operator==(const Gate1&) const = default;
};

struct Rotation {
  RotationAxis name;
  int target;
  double angle;
  bool operator==(const Rotation&) const = default;
};

struct Gate2 {
  TwoQubitGate name;
  int control;
  int target;
  bool operator==(const Gate2&) const = default;
};

struct MeasureAll {
  bool operator==(const MeasureAll&) const = default;
};

using Statement = std::variant<Gate1, Rotation, Gate2, MeasureAll>;

struct Circuit {
  std::string version = "1.0";
  int qubits = 1;
  std::vector<Statement> statements;

  bool operator==(const Circuit&) const = default;
  bool ends_in_measure_all() const noexcept;
};

class ParseError : public std::runtime_error {
 public:
  enum class Kind {
    SyntaxError,
    UnknownGate,
    QubitOutOfRange,
    MissingHeader,
    TrailingAfterMeasure,
  };

  ParseError(Kind kind, int line, int column, const std::string& message);

  Kind kind() const noexcept { return kind_; }
  int line() const noexcept { return line_; }
  int column() const noexcept { return column_; }

 private:
  Kind kind_;
  int line_;
  int column_;
};

std::string_view to_string(ParseError::Kind kind) noexcept;
std::string_view to_string(SingleGate g) noexcept;
std::string_view to_string(RotationAxis r) noexcept;
std::string_view to_string(TwoQubitGate g) noexcept;

Circuit parse(std::string_view text);

/// Canonical single-line form; parse(print(c)) == c for valid circuits.
std::string print(const Circuit& circuit);

}  // namespace qhyb::cqasm
