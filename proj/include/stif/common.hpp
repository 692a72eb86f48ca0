// Copyright 2026 The Stif Authors
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

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>

namespace stif {

inline constexpr const char* kVersion = "1.0.0";
inline constexpr const char* kSchemaVersion = "1.0.0";

// Thrown when an argument violates a documented precondition.
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Thrown when tensor shapes are incompatible.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Thrown when a numeric operation produces NaN/Inf or otherwise degenerates.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown on malformed files or configs.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline bool is_finite(double v) { return std::isfinite(v); }

// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
  double w = std::remainder(a, 2.0 * std::numbers::pi);
  if (w <= -std::numbers::pi) w += 2.0 * std::numbers::pi;
  return w;
}

}  // namespace stif
