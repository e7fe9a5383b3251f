// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace trainwatch {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Precondition violated by the caller (bad sizes, out-of-range parameters).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed telemetry, config or dataset input. Carries the byte offset
/// (within the offending line) and the field that failed, when known.
class ParseError : public Error {
 public:
  ParseError(std::string message, std::size_t offset, std::string field)
      : Error(build(message, offset, field)),
        offset_(offset),
        field_(std::move(field)),
        detail_(std::move(message)) {}

  std::size_t offset() const noexcept { return offset_; }
  const std::string& field() const noexcept { return field_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  static std::string build(const std::string& message, std::size_t offset, const std::string& field) {
    std::string out = message + " (byte " + std::to_string(offset);
    if (!field.empty()) out += ", field '" + field + "'";
    return out + ")";
  }

  std::size_t offset_;
  std::string field_;
  std::string detail_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace trainwatch
