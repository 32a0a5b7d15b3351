#pragma once

#include <stdexcept>
#include <string>

namespace affkit {

/// Base class for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad caller input: shapes, flags, config values, malformed files.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A file that does not parse. Carries the byte offset or line where parsing stopped.
class FormatError : public ValidationError {
 public:
  FormatError(const std::string& what, std::size_t position)
      : ValidationError(what), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

/// Numerical breakdown during training or evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ValidationError(message);
}

}  // namespace detail
}  // namespace affkit
