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


#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "capforge/rng.h"

namespace capforge {
namespace {

TEST(Rng, SeedZeroIsTheSplitMix64ReferenceSequence) {
  // finalize(0) == 0, so the stream starts from state 0 of the published
  // generator.
  Rng rng(0);
  EXPECT_EQ(rng.next_u64(), 0xE220A8397B1DCDAFull);
  EXPECT_EQ(rng.next_u64(), 0x6E789E6AA1B965F4ull);
  EXPECT_EQ(rng.next_u64(), 0x06C45D188009454Full);
}

TEST(Rng, Fnv1aReferenceValues) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ull);
}

TEST(Rng, SplitIgnoresParentPosition) {
  Rng a(7), b(7);
  for (int i = 0; i < 5; ++i) b.next_u64();
  Rng ca = a.split("dropout"), cb = b.split("dropout");
  for (int i = 0; i < 10; ++i) EXPECT_EQ(ca.next_u64(), cb.next_u64());
  EXPECT_NE(a.split(1).next_u64(), a.split(2).next_u64());
  EXPECT_NE(a.split("x").next_u64(), a.split("y").next_u64());
}

TEST(Rng, UniformRanges) {
  Rng rng(3);
  double total = 0;
  for (int i = 0; i < 20000; ++i) {
    const float f = rng.uniform();
    const double d = rng.uniform_double();
    ASSERT_GE(f, 0.0f);
    ASSERT_LT(f, 1.0f);
    ASSERT_GE(d, 0.0);
    ASSERT_LT(d, 1.0);
    total += d;
  }
  EXPECT_NEAR(total / 20000, 0.5, 0.01);
}

TEST(Rng, BelowCoversRangeEvenly) {
  Rng rng(5);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const auto v = rng.below(7);
    ASSERT_LT(v, 7u);
    ++counts[v];
  }
  for (int c : counts) EXPECT_NEAR(c, 10000, 400);
}

TEST(Rng, TruncatedNormalStaysInBounds) {
  Rng rng(9);
  double sq = 0;
  for (int i = 0; i < 20000; ++i) {
    const double x = rng.truncated_normal(0.02);
    ASSERT_LE(std::abs(x), 0.04);
    sq += x * x;
  }
  // variance of a standard normal truncated at +-2: 0.7737
  EXPECT_NEAR(std::sqrt(sq / 20000), 0.02 * std::sqrt(0.7737), 0.0005);
}

TEST(Rng, ShuffleIsAPermutationAndDeterministic) {
  std::vector<int> a(50), b(50);
  std::iota(a.begin(), a.end(), 0);
  b = a;
  Rng r1(11), r2(11);
  r1.shuffle(std::span<int>(a));
  r2.shuffle(std::span<int>(b));
  EXPECT_EQ(a, b);
  EXPECT_EQ(std::set<int>(a.begin(), a.end()).size(), 50u);
  std::vector<int> sorted(50);
  std::iota(sorted.begin(), sorted.end(), 0);
  EXPECT_NE(a, sorted);
}

}  // namespace
}  // namespace capforge
