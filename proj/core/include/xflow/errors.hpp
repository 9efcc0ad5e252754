#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace xflow {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input violates a documented contract (bad file content, bad config,
/// incompatible model/spec). The CLI maps these to exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed input text. `line()` is 1-based, 0 when not line-oriented.
class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t line);
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Tensor shape mismatch inside the differentiation engine.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace xflow
