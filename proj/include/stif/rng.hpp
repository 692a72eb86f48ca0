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

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "stif/common.hpp"

namespace stif {

// All randomness in the project flows through Rng. The engine is
// std::mt19937_64, whose output sequence is fixed by the C++ standard, and
// every value mapping (uniform doubles, gaussians, bounded ints, poisson) is
// implemented here rather than with std::*_distribution, whose sequences are
// implementation-defined. Given a seed, the stream of draws is therefore
// reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive. Rejection sampling, no modulo bias.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw InvalidArgument("uniform_int: hi < lo");
    uint64_t n = static_cast<uint64_t>(hi - lo) + 1;
    if (n == 0) return static_cast<int64_t>(next_u64());  // full 64-bit range
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return lo + static_cast<int64_t>(x % n);
  }

  // Standard normal via basic Box-Muller (cosine branch). Two uniforms are
  // consumed per call; no state is cached so serialization is engine-only.
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  double gaussian(double mean, double sigma) { return mean + sigma * gaussian(); }

  // Poisson by Knuth's sequential search; adequate for small rates.
  int poisson(double lambda) {
    if (lambda < 0.0) throw InvalidArgument("poisson: negative rate");
    if (lambda == 0.0) return 0;
    double limit = std::exp(-lambda);
    int k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform();
    } while (p > limit);
    return k - 1;
  }

  // Engine state round-trips through the standard textual representation.
  std::string state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    if (is.fail()) throw ParseError("Rng::set_state: malformed engine state");
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace stif
