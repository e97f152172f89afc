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
#include <string>
#include <string_view>
#include <vector>

#include "capforge/tensor.h"

namespace capforge {

// How a tensor is filled when it is randomly initialized.
enum class InitKind {
  kKaimingUniform,  // U(-b, b), b = sqrt(6 / fan_in)
  kBertNormal,      // N(0, 0.02^2) truncated at +-2 sigma
  kZeros,
  kOnes,
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
  InitKind init = InitKind::kZeros;
  bool trainable = true;
  std::size_t fan_in = 0;
};

// Ordered, uniquely named collection of model tensors: trainable
// parameters plus non-trainable buffers such as batch-norm statistics.
class ParamStore {
 public:
  Tensor add(std::string name, Shape shape, InitKind init, bool trainable = true,
             std::size_t fan_in = 0);

  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<NamedTensor>& entries() { return entries_; }
  const NamedTensor* find(std::string_view name) const;
  NamedTensor* find(std::string_view name);
  const NamedTensor& at(std::string_view name) const;

  std::vector<NamedTensor*> trainable();
  void zero_grad();
  std::size_t scalar_count() const;

  // Value-level equality of names, shapes and bits.
  bool bitwise_equal(const ParamStore& other) const;

 private:
  std::vector<NamedTensor> entries_;
};

// Deterministic initial values for `entry`: the stream is
// Rng(seed).split(entry.name), so draws do not depend on registration order.
std::vector<float> draw_initial_values(const NamedTensor& entry, std::uint64_t seed);
void initialize_randomly(ParamStore& store, std::uint64_t seed);

// Segment-wise prefix match on dot-separated names; "*" matches one segment.
// "decoder.*.crossattn" matches "decoder.block3.crossattn.wq".
bool name_matches(std::string_view pattern, std::string_view name);

}  // namespace capforge
