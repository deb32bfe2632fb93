// Copyright 2026 The jneeg Authors
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

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace jneeg {

enum class ErrorCode {
  range,
  count,
  framing,
  desync,
  protocol_state,
  design,
  shape,
  size,
  calibration,
  config,
  state,
  session,
  parse,
  io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::range: return "range";
    case ErrorCode::count: return "count";
    case ErrorCode::framing: return "framing";
    case ErrorCode::desync: return "desync";
    case ErrorCode::protocol_state: return "protocol_state";
    case ErrorCode::design: return "design";
    case ErrorCode::shape: return "shape";
    case ErrorCode::size: return "size";
    case ErrorCode::calibration: return "calibration";
    case ErrorCode::config: return "config";
    case ErrorCode::state: return "state";
    case ErrorCode::session: return "session";
    case ErrorCode::parse: return "parse";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

/// Single exception type for the library; callers switch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace jneeg
