// Copyright 2026 The capforge Authors.
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
#include <span>
#include <string_view>

namespace capforge {

// Counter-based, splittable 64-bit generator.
//
// A stream is identified by a 64-bit key. Draw i (1-based) of the stream is
//   splitmix64_finalize(key + i * 0x9E3779B97F4A7C15)
// where splitmix64_finalize is the SplitMix64 output function
//   z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//   z ^= z >> 27; z *= 0x94D049BB133111EB;
//   z ^= z >> 31.
// Seeding sets key = finalize(seed). split(s) derives a child stream with
// key = finalize(key ^ finalize(s + 0xD1B54A32D192ED03)) and a fresh counter,
// so child streams do not depend on how many draws the parent has made.
//
// All derived distributions are implemented here (not via <random>) so the
// bit pattern of every draw is fixed across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();

  // Uniform float in [0, 1) with 24 bits of mantissa.
  float uniform();
  // Uniform double in [0, 1) with 53 bits.
  double uniform_double();
  // Uniform integer in [0, n). Rejection sampling, unbiased. n > 0.
  std::uint64_t below(std::uint64_t n);
  // Standard normal via Box-Muller (one output per two uniforms, no caching).
  double normal();
  // Normal(0, stddev) resampled until |x| <= bound_sigmas * stddev.
  double truncated_normal(double stddev, double bound_sigmas = 2.0);

  Rng split(std::uint64_t stream) const;
  Rng split(std::string_view label) const;

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64_finalize(std::uint64_t z);
// FNV-1a 64-bit, used to turn names into stream ids.
std::uint64_t fnv1a64(std::string_view text);

}  // namespace capforge
