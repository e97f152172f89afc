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

#include "capforge/params.h"

#include <cmath>
#include <cstring>

#include "capforge/error.h"

namespace capforge {

Tensor ParamStore::add(std::string name, Shape shape, InitKind init, bool trainable,
                       std::size_t fan_in) {
  if (find(name) != nullptr) throw InvariantError("duplicate parameter name " + name);
  Tensor t = Tensor::zeros(std::move(shape), trainable);
  entries_.push_back(NamedTensor{std::move(name), t, init, trainable, fan_in});
  return t;
}

const NamedTensor* ParamStore::find(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

NamedTensor* ParamStore::find(std::string_view name) {
  for (auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

const NamedTensor& ParamStore::at(std::string_view name) const {
  const auto* e = find(name);
  if (e == nullptr) throw InvariantError("no parameter named " + std::string(name));
  return *e;
}

std::vector<NamedTensor*> ParamStore::trainable() {
  std::vector<NamedTensor*> out;
  for (auto& e : entries_)
    if (e.trainable && e.tensor.requires_grad()) out.push_back(&e);
  return out;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

bool ParamStore::bitwise_equal(const ParamStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.tensor.shape() != b.tensor.shape()) return false;
    if (std::memcmp(a.tensor.data().data(), b.tensor.data().data(), a.tensor.numel() * sizeof(float)) != 0)
      return false;
  }
  return true;
}

std::vector<float> draw_initial_values(const NamedTensor& entry, std::uint64_t seed) {
  std::vector<float> values(entry.tensor.numel());
  Rng rng = Rng(seed).split(entry.name);
  switch (entry.init) {
    case InitKind::kKaimingUniform: {
      if (entry.fan_in == 0) throw InvariantError(entry.name + ": Kaiming init needs fan_in");
      const double bound = std::sqrt(6.0 / static_cast<double>(entry.fan_in));
      for (auto& v : values) v = static_cast<float>((2.0 * rng.uniform_double() - 1.0) * bound);
      break;
    }
    case InitKind::kBertNormal:
      for (auto& v : values) v = static_cast<float>(rng.truncated_normal(0.02, 2.0));
      break;
    case InitKind::kZeros:
      break;
    case InitKind::kOnes:
      for (auto& v : values) v = 1.0f;
      break;
  }
  return values;
}

void initialize_randomly(ParamStore& store, std::uint64_t seed) {
  for (auto& e : store.entries()) {
    const auto values = draw_initial_values(e, seed);
    std::copy(values.begin(), values.end(), e.tensor.mutable_data().begin());
  }
}

bool name_matches(std::string_view pattern, std::string_view name) {
  auto next_segment = [](std::string_view& s) {
    const auto dot = s.find('.');
    std::string_view seg = s.substr(0, dot);
    s = dot == std::string_view::npos ? std::string_view{} : s.substr(dot + 1);
    return seg;
  };
  bool name_done = name.empty();
  while (!pattern.empty()) {
    if (name_done) return false;
    const auto p = next_segment(pattern);
    const auto n = next_segment(name);
    name_done = name.empty();
    if (p != "*" && p != n) return false;
  }
  return true;
}

}  // namespace capforge
