#pragma once

#include <stdexcept>
#include <string>

namespace prunability {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Vector/matrix sizes disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf, failed eigensolver, divergent training, broken gradient.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// A precondition on an argument was violated.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Malformed input file. Carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, long line = -1)
      : Error(line >= 0 ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

}  // namespace prunability
