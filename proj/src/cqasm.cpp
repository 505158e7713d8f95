#include "qhyb/cqasm.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <optional>

namespace qhyb::cqasm {

ParseError::ParseError(Kind kind, int line, int column, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + " at " + std::to_string(line) + ":" +
                         std::to_string(column) + ": " + message),
      kind_(kind),
      line_(line),
      column_(column) {}

std::string_view to_string(ParseError::Kind kind) noexcept {
  switch (kind) {
    case ParseError::Kind::SyntaxError: return "SyntaxError";
    case ParseError::Kind::UnknownGate: return "UnknownGate";
    case ParseError::Kind::QubitOutOfRange: return "QubitOutOfRange";
    case ParseError::Kind::MissingHeader: return "MissingHeader";
    case ParseError::Kind::TrailingAfterMeasure: return "TrailingAfterMeasure";
  }
  return "ParseError";
}

std::string_view to_string(SingleGate g) noexcept {
  switch (g) {
    case SingleGate::H: return "H";
    case SingleGate::X: return "X";
    case SingleGate::Y: return "Y";
    case SingleGate::Z: return "Z";
    case SingleGate::S: return "S";
    case SingleGate::Sdag: return "Sdag";
    case SingleGate::T: return "T";
    case SingleGate::Tdag: return "Tdag";
  }
  return "?";
}

std::string_view to_string(RotationAxis r) noexcept {
  switch (r) {
    case RotationAxis::Rx: return "Rx";
    case RotationAxis::Ry: return "Ry";
    case RotationAxis::Rz: return "Rz";
  }
  return "?";
}

std::string_view to_string(TwoQubitGate g) noexcept {
  return g == TwoQubitGate::CNOT ? "CNOT" : "CZ";
}

bool Circuit::ends_in_measure_all() const noexcept {
  return !statements.empty() && std::holds_alternative<MeasureAll>(statements.back());
}

namespace {

enum class Tok { Ident, Number, LBracket, RBracket, Comma, Separator, End };

struct Token {
  Tok kind;
  std::string_view text;
  int line;
  int column;
};

class Lexer {
 public:
  explicit Lexer(std::string_view src) : src_(src) {}

  Token next() {
    skip_blanks();
    const int line = line_;
    const int col = col_;
    if (pos_ >= src_.size()) return {Tok::End, {}, line, col};
    const char c = src_[pos_];
    if (c == '\n' || c == ';') {
      advance();
      return {Tok::Separator, src_.substr(pos_ - 1, 1), line, col};
    }
    if (c == '[' || c == ']' || c == ',') {
      advance();
      const Tok k = c == '[' ? Tok::LBracket : c == ']' ? Tok::RBracket : Tok::Comma;
      return {k, src_.substr(pos_ - 1, 1), line, col};
    }
    const std::size_t start = pos_;
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      while (pos_ < src_.size() &&
             (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_')) {
        advance();
      }
      return {Tok::Ident, src_.substr(start, pos_ - start), line, col};
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '+') {
      if (c == '-' || c == '+') advance();
      while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) advance();
      if (pos_ < src_.size() && src_[pos_] == '.') {
        advance();
        while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) advance();
      }
      if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
        advance();
        if (pos_ < src_.size() && (src_[pos_] == '+' || src_[pos_] == '-')) advance();
        while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) advance();
      }
      return {Tok::Number, src_.substr(start, pos_ - start), line, col};
    }
    throw ParseError(ParseError::Kind::SyntaxError, line, col,
                     std::string("unexpected character '") + c + "'");
  }

 private:
  void advance() {
    if (src_[pos_] == '\n') {
      ++line_;
      col_ = 1;
    } else {
      ++col_;
    }
    ++pos_;
  }

  void skip_blanks() {
    while (pos_ < src_.size()) {
      const char c = src_[pos_];
      if (c == '#') {
        while (pos_ < src_.size() && src_[pos_] != '\n') advance();
      } else if (c == ' ' || c == '\t' || c == '\r') {
        advance();
      } else {
        return;
      }
    }
  }

  std::string_view src_;
  std::size_t pos_ = 0;
  int line_ = 1;
  int col_ = 1;
};

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return out;
}

std::optional<SingleGate> single_gate(const std::string& name) {
  static constexpr SingleGate all[] = {SingleGate::H, SingleGate::X,    SingleGate::Y,
                                       SingleGate::Z, SingleGate::S,    SingleGate::Sdag,
                                       SingleGate::T, SingleGate::Tdag};
  for (SingleGate g : all) {
    if (lower(to_string(g)) == name) return g;
  }
  return std::nullopt;
}

std::optional<RotationAxis> rotation(const std::string& name) {
  for (RotationAxis r : {RotationAxis::Rx, RotationAxis::Ry, RotationAxis::Rz}) {
    if (lower(to_string(r)) == name) return r;
  }
  return std::nullopt;
}

std::optional<TwoQubitGate> two_qubit(const std::string& name) {
  if (name == "cnot") return TwoQubitGate::CNOT;
  if (name == "cz") return TwoQubitGate::CZ;
  return std::nullopt;
}

class Parser {
 public:
  explicit Parser(std::string_view text) : lexer_(text) { tok_ = lexer_.next(); }

  Circuit run() {
    Circuit circuit;
    skip_separators();
    parse_version(circuit);
    end_statement();
    skip_separators();
    parse_qubits(circuit);
    end_statement();
    for (skip_separators(); tok_.kind != Tok::End; skip_separators()) {
      if (circuit.ends_in_measure_all()) {
        throw ParseError(ParseError::Kind::TrailingAfterMeasure, tok_.line, tok_.column,
                         "statement after measure_all");
      }
      circuit.statements.push_back(parse_statement(circuit.qubits));
      end_statement();
    }
    return circuit;
  }

 private:
  [[noreturn]] void fail(ParseError::Kind kind, const Token& at, const std::string& msg) {
    throw ParseError(kind, at.line, at.column, msg);
  }

  void bump() { tok_ = lexer_.next(); }

  void skip_separators() {
    while (tok_.kind == Tok::Separator) bump();
  }

  void end_statement() {
    if (tok_.kind != Tok::Separator && tok_.kind != Tok::End) {
      fail(ParseError::Kind::SyntaxError, tok_,
           "expected ';' or newline, found '" + std::string(tok_.text) + "'");
    }
  }

  Token expect(Tok kind, const char* what) {
    if (tok_.kind != kind) {
      const std::string found = tok_.kind == Tok::End ? "end of input" : "'" + std::string(tok_.text) + "'";
      fail(ParseError::Kind::SyntaxError, tok_, std::string("expected ") + what + ", found " + found);
    }
    Token t = tok_;
    bump();
    return t;
  }

  void parse_version(Circuit& c) {
    if (tok_.kind != Tok::Ident || lower(tok_.text) != "version") {
      fail(ParseError::Kind::MissingHeader, tok_, "circuit must start with 'version 1.0'");
    }
    bump();
    const Token v = expect(Tok::Number, "version number");
    if (v.text != "1.0") fail(ParseError::Kind::SyntaxError, v, "unsupported version " + std::string(v.text));
    c.version = std::string(v.text);
  }

  void parse_qubits(Circuit& c) {
    if (tok_.kind != Tok::Ident || lower(tok_.text) != "qubits") {
      fail(ParseError::Kind::MissingHeader, tok_, "expected 'qubits N' after version");
    }
    bump();
    const Token n = expect(Tok::Number, "qubit count");
    c.qubits = parse_index(n);
    if (c.qubits < 1 || c.qubits > kMaxQubits) {
      fail(ParseError::Kind::SyntaxError, n,
           "qubit count must be in 1.." + std::to_string(kMaxQubits));
    }
  }

  int parse_index(const Token& t) {
    int value = 0;
    const char* first = t.text.data();
    const char* last = first + t.text.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last || t.text.front() == '-' || t.text.front() == '+') {
      fail(ParseError::Kind::SyntaxError, t, "expected a non-negative integer, found '" + std::string(t.text) + "'");
    }
    return value;
  }

  int parse_qubit(int qubits) {
    const Token q = expect(Tok::Ident, "qubit operand q[<int>]");
    if (lower(q.text) != "q") fail(ParseError::Kind::SyntaxError, q, "expected qubit register 'q'");
    expect(Tok::LBracket, "'['");
    const Token idx = expect(Tok::Number, "qubit index");
    const int index = parse_index(idx);
    if (index >= qubits) {
      fail(ParseError::Kind::QubitOutOfRange, idx,
           "qubit " + std::to_string(index) + " out of range for " + std::to_string(qubits) + " qubits");
    }
    expect(Tok::RBracket, "']'");
    return index;
  }

  double parse_angle() {
    const Token t = expect(Tok::Number, "angle");
    double value = 0.0;
    const char* first = t.text.data();
    const char* last = first + t.text.size();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last || !std::isfinite(value)) {
      fail(ParseError::Kind::SyntaxError, t, "invalid angle '" + std::string(t.text) + "'");
    }
    return value;
  }

  Statement parse_statement(int qubits) {
    const Token name_tok = expect(Tok::Ident, "gate name");
    const std::string name = lower(name_tok.text);
    if (name == "measure_all") return MeasureAll{};
    if (auto g = single_gate(name)) return Gate1{*g, parse_qubit(qubits)};
    if (auto r = rotation(name)) {
      const int target = parse_qubit(qubits);
      expect(Tok::Comma, "','");
      return Rotation{*r, target, parse_angle()};
    }
    if (auto g = two_qubit(name)) {
      const Token at = tok_;
      const int control = parse_qubit(qubits);
      expect(Tok::Comma, "','");
      const int target = parse_qubit(qubits);
      if (control == target) fail(ParseError::Kind::SyntaxError, at, "control and target must differ");
      return Gate2{*g, control, target};
    }
    fail(ParseError::Kind::UnknownGate, name_tok, "unknown gate '" + std::string(name_tok.text) + "'");
  }

  Lexer lexer_;
  Token tok_{};
};

std::string format_angle(double angle) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, angle);
  return std::string(buf, ptr);
}

}  // namespace

Circuit parse(std::string_view text) { return Parser(text).run(); }

std::string print(const Circuit& circuit) {
  std::string out = "version " + circuit.version + "; qubits " + std::to_string(circuit.qubits);
  auto qubit = [](int i) { return "q[" + std::to_string(i) + "]"; };
  for (const Statement& st : circuit.statements) {
    out += "; ";
    std::visit(
        [&](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, Gate1>) {
            out += std::string(to_string(s.name)) + " " + qubit(s.target);
          } else if constexpr (std::is_same_v<T, Rotation>) {
            out += std::string(to_string(s.name)) + " " + qubit(s.target) + ", " + format_angle(s.angle);
          } else if constexpr (std::is_same_v<T, Gate2>) {
            out += std::string(to_string(s.name)) + " " + qubit(s.control) + ", " + qubit(s.target);
          } else {
            out += "measure_all";
          }
        },
        st);
  }
  return out;
}

}  // namespace qhyb::cqasm
