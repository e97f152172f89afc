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
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "capforge/params.h"
#include "capforge/tensor.h"

namespace capforge::checkpoint {

// ACPT1 layout:
//   "ACPT1\0\0\0"                     8-byte magic
//   u64 header_length                 little endian
//   header_length bytes of JSON       {"version":1,"tensors":[{name,dtype,shape,offset}],
//                                      "metadata":{...}}
//   payload                           f32 little endian; offsets are relative
//                                     to the payload start
inline constexpr char kMagic[8] = {'A', 'C', 'P', 'T', '1', '\0', '\0', '\0'};
inline constexpr int kVersion = 1;

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::vector<TensorRecord> tensors;
  std::string metadata_json = "{}";  // free-form JSON object

  const TensorRecord* find(std::string_view name) const;
};

std::vector<std::uint8_t> encode(const Checkpoint& ckpt);
// FormatError on bad magic, truncation, malformed manifest or a payload
// whose length disagrees with the shapes.
Checkpoint decode(std::span<const std::uint8_t> bytes);

void save_file(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_file(const std::filesystem::path& path);

// Snapshot of every tensor in the store, in registration order.
Checkpoint from_params(const ParamStore& params, std::string metadata_json = "{}");

// Copies every store tensor from the checkpoint. All names must be present
// with identical shapes; problems are reported together in one InputError.
void load_into(ParamStore& params, const Checkpoint& ckpt);

// Union of two checkpoints; a name present in both is an InputError.
Checkpoint merge(const Checkpoint& a, const Checkpoint& b);

// Which parameters come from a pretrained checkpoint and which are drawn
// fresh. A name is random if it matches any random prefix, otherwise
// pretrained if it matches a pretrained prefix. Prefixes are segment-wise
// and accept "*" for one segment.
struct InitPolicy {
  std::vector<std::string> pretrained_prefixes{"encoder", "decoder"};
  std::vector<std::string> random_prefixes{"decoder.*.crossattn"};
  // Rows of pretrained tensors that are drawn fresh anyway. The checkpoint
  // tensor may be shorter than the model tensor as long as every missing
  // row is listed here.
  std::map<std::string, std::vector<std::size_t>> random_rows;
  std::uint64_t seed = 0;
};

// Pretrained decoder with fresh cross-attention and fresh soc/eoc rows in
// the word embedding and output bias.
InitPolicy pretrained_decoder_policy(std::int32_t soc_id, std::int32_t eoc_id, std::uint64_t seed,
                                     bool pretrained_encoder = false);
// Nothing loaded.
InitPolicy all_random_policy(std::uint64_t seed);

enum class Status { kPretrainedMatch, kRandom, kMismatch };
const char* status_name(Status s);

struct AuditEntry {
  std::string name;
  Shape shape;
  std::string partition;  // "pretrained", "random" or "unmatched"
  Status status = Status::kMismatch;
  std::size_t random_rows = 0;
  std::string detail;  // why a mismatch was reported
};

struct AuditReport {
  std::vector<AuditEntry> entries;
  std::size_t pretrained_match = 0, random = 0, mismatches = 0;
  std::size_t total_scalars = 0;

  bool ok() const { return mismatches == 0; }
  const AuditEntry* find(std::string_view name) const;
  std::string to_json(const InitPolicy& policy) const;
};

// Fills `params` according to the policy. Throws InputError listing every
// unmatched parameter, missing pretrained tensor and shape clash at once.
AuditReport apply_init_policy(ParamStore& params, const Checkpoint& pretrained,
                              const InitPolicy& policy);

// Replays the policy and classifies each parameter without modifying it.
AuditReport verify(const ParamStore& params, const Checkpoint& pretrained,
                   const InitPolicy& policy);

}  // namespace capforge::checkpoint
