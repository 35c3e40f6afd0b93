#pragma once

#include <stdexcept>
#include <string>

namespace cohesion {

// Base class for every error raised by the library. Callers that only care
// about "something went wrong with the inputs" can catch this one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed text input; carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  explicit ParseError(const std::string& what) : Error(what), line_(0) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Binary file does not follow the expected layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Row/column counts disagree with what the caller expected.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

// Values are present but unusable (NaN, Inf, degenerate users...).
class DataError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace cohesion
