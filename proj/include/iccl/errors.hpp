// SPDX-License-Identifier: Apache-2.0
//
// Exception types shared across the library.

#pragma once

#include <stdexcept>
#include <string>

namespace iccl {

struct NotSymmetricError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NotPositiveDefiniteError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DimensionMismatchError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IndexOutOfRangeError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct InvalidConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct InvalidInitError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DivergedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Config-file validation failure; carries the offending field when known.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg, std::string field_name = "")
      : std::runtime_error(msg), field(std::move(field_name)) {}
  std::string field;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace iccl
