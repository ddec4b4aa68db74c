#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace qflow {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on an argument was violated.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Text input could not be parsed. Carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

/// Loaded data parsed fine but violates a domain invariant.
class InvariantViolation : public Error {
 public:
  using Error::Error;
};

class TokenizationError : public Error {
 public:
  using Error::Error;
};

/// A caption prefix already has the maximum length; the caller must terminate it.
class MustTerminate : public Error {
 public:
  using Error::Error;
};

/// Correlation is undefined because one of the inputs is constant.
class UndefinedCorrelation : public Error {
 public:
  using Error::Error;
};

/// Non-finite values showed up in a gradient or objective.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace qflow
