#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace skimlite {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed, truncated or inconsistent file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Range reads, HTTP failures, local I/O failures.
class TransportError : public Error {
 public:
  using Error::Error;
};

/// The requested file or dataset does not exist.
class NotFoundError : public TransportError {
 public:
  using TransportError::TransportError;
};

/// Query text that does not parse. `position` is a byte offset into the
/// offending expression (or JSON payload).
class QueryError : public Error {
 public:
  QueryError(const std::string& message, std::size_t position)
      : Error(message + " (at position " + std::to_string(position) + ")"),
        message_(message),
        position_(position) {}

  std::size_t position() const noexcept { return position_; }
  /// The message without the position suffix.
  const std::string& message() const noexcept { return message_; }

 private:
  std::string message_;
  std::size_t position_;
};

/// A syntactically valid query that cannot be planned against a schema.
class PlanError : public Error {
 public:
  using Error::Error;
};

}  // namespace skimlite
