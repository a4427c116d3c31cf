#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sonoalign {

// Shape or dimension disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid scalar argument (e.g. clamp with lo > hi).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A primitive produced NaN/Inf, or a loss function evaluated to a
// non-finite value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input data violates a documented invariant (similarity tables,
// configuration files, record schemas).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A label string is not part of a task's closed vocabulary.
class ResolutionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Malformed input file; carries the 1-based line number when known.
class ParseError : public ValidationError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : ValidationError("line " + std::to_string(line) + ": " + what),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Checkpoint carries an unsupported format version.
class VersionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sonoalign
