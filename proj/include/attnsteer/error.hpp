//*****************************************************************************
// Copyright 2026 The attnsteer Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//*****************************************************************************

#pragma once

#include <stdexcept>
#include <string>

namespace attnsteer {

/// Error categories double as the CLI's process exit codes.
enum class ErrorKind : int {
  usage = 1,
  data = 2,
  numeric = 3,
};

/// Base exception. `code()` is a stable machine-readable identifier used by
/// the HTTP API (e.g. "empty_region_selection").
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string code, const std::string& message)
      : std::runtime_error(message), kind_(kind), code_(std::move(code)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& code() const noexcept { return code_; }

 private:
  ErrorKind kind_;
  std::string code_;
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& message, std::string code = "usage")
      : Error(ErrorKind::usage, std::move(code), message) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& message)
      : Error(ErrorKind::usage, "shape_mismatch", message) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& message, std::string code = "data")
      : Error(ErrorKind::data, std::move(code), message) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& message, std::string code = "numeric_overflow")
      : Error(ErrorKind::numeric, std::move(code), message) {}
};

}  // namespace attnsteer
