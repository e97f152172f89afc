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


#include "capforge/checkpoint.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <sstream>

#include "capforge/bytes.h"
#include "capforge/error.h"
#include "json.hpp"

namespace capforge::checkpoint {

using nlohmann::json;

const TensorRecord* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::vector<std::uint8_t> encode(const Checkpoint& ckpt) {
  json manifest;
  manifest["version"] = kVersion;
  manifest["tensors"] = json::array();
  std::set<std::string_view> seen;
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    if (!seen.insert(t.name).second) throw InvariantError("checkpoint: duplicate tensor " + t.name);
    if (shape_numel(t.shape) != t.values.size()) {
      throw InvariantError("checkpoint: " + t.name + " has " + std::to_string(t.values.size()) +
                           " values for shape " + shape_str(t.shape));
    }
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      if (!std::isfinite(t.values[i])) {
        throw InvariantError("checkpoint: non-finite value in " + t.name + " at index " +
                             std::to_string(i));
      }
    }
    manifest["tensors"].push_back(
        {{"name", t.name}, {"dtype", "f32"}, {"shape", t.shape}, {"offset", offset}});
    offset += 4 * t.values.size();
  }
  try {
    manifest["metadata"] = json::parse(ckpt.metadata_json);
  } catch (const json::exception& e) {
    throw InvariantError(std::string("checkpoint: metadata is not JSON: ") + e.what());
  }
  const std::string header = manifest.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.reserve(16 + header.size() + offset);
  bytes::put_u64(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  for (const auto& t : ckpt.tensors)
    for (float v : t.values) bytes::put_f32(out, v);
  return out;
}

Checkpoint decode(std::span<const std::uint8_t> in) {
  if (in.size() < 16) throw FormatError("ACPT1: truncated header (" + std::to_string(in.size()) + " bytes)");
  if (std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0) throw FormatError("ACPT1: bad magic");
  const std::uint64_t header_len = bytes::get_u64(in, 8);
  if (header_len > in.size() - 16) throw FormatError("ACPT1: truncated manifest");
  const std::size_t payload_at = 16 + static_cast<std::size_t>(header_len);
  const std::size_t payload_size = in.size() - payload_at;

  json manifest;
  try {
    manifest = json::parse(in.begin() + 16, in.begin() + static_cast<long>(payload_at));
  } catch (const json::exception& e) {
    throw FormatError(std::string("ACPT1: malformed manifest: ") + e.what());
  }

  struct Slot {
    std::size_t index;
    std::uint64_t offset, size;
  };
  Checkpoint ckpt;
  std::vector<Slot> slots;
  std::set<std::string> names;
  std::uint64_t total = 0;
  try {
    if (manifest.at("version").get<int>() != kVersion) {
      throw FormatError("ACPT1: unsupported version " + manifest.at("version").dump());
    }
    for (const auto& entry : manifest.at("tensors")) {
      TensorRecord rec;
      rec.name = entry.at("name").get<std::string>();
      if (entry.at("dtype").get<std::string>() != "f32") {
        throw FormatError("ACPT1: " + rec.name + " has unsupported dtype " + entry.at("dtype").dump());
      }
      rec.shape = entry.at("shape").get<Shape>();
      if (!names.insert(rec.name).second) throw FormatError("ACPT1: duplicate tensor " + rec.name);
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const std::uint64_t size = 4 * shape_numel(rec.shape);
      slots.push_back({ckpt.tensors.size(), offset, size});
      total += size;
      ckpt.tensors.push_back(std::move(rec));
    }
    ckpt.metadata_json = manifest.contains("metadata") ? manifest.at("metadata").dump() : "{}";
  } catch (const json::exception& e) {
    throw FormatError(std::string("ACPT1: malformed manifest: ") + e.what());
  }

  if (total != payload_size) {
    throw FormatError("ACPT1: payload length " + std::to_string(payload_size) +
                      " bytes but manifest shapes need " + std::to_string(total));
  }
  std::sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) { return a.offset < b.offset; });
  std::uint64_t end = 0;
  for (const auto& s : slots) {
    const auto& name = ckpt.tensors[s.index].name;
    if (s.offset % 4 != 0) throw FormatError("ACPT1: misaligned offset for " + name);
    if (s.offset < end) throw FormatError("ACPT1: overlapping payload at " + name);
    if (s.offset + s.size > payload_size) throw FormatError("ACPT1: " + name + " runs past the payload");
    end = s.offset + s.size;
    auto& values = ckpt.tensors[s.index].values;
    values.resize(s.size / 4);
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = bytes::get_f32(in, payload_at + s.offset + 4 * i);
  }
  return ckpt;
}

void save_file(const std::filesystem::path& path, const Checkpoint& ckpt) {
  bytes::write_file(path, encode(ckpt));
}

Checkpoint load_file(const std::filesystem::path& path) {
  const auto data = bytes::read_file(path);
  try {
    return decode(data);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Checkpoint from_params(const ParamStore& params, std::string metadata_json) {
  Checkpoint ckpt;
  ckpt.metadata_json = std::move(metadata_json);
  for (const auto& e : params.entries()) {
    const auto data = e.tensor.data();
    ckpt.tensors.push_back({e.name, e.tensor.shape(), std::vector<float>(data.begin(), data.end())});
  }
  return ckpt;
}

namespace {

[[noreturn]] void throw_all(const std::string& what, const std::vector<std::string>& problems) {
  std::ostringstream msg;
  msg << what << ": " << problems.size() << " problem(s)";
  for (const auto& p : problems) msg << "\n  " << p;
  throw InputError(msg.str());
}

bool any_match(const std::vector<std::string>& patterns, std::string_view name) {
  return std::any_of(patterns.begin(), patterns.end(),
                     [&](const std::string& p) { return name_matches(p, name); });
}

bool same_bits(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

// Values a parameter must hold under the policy.
struct Plan {
  std::string partition;
  std::vector<float> expected;
  std::size_t random_rows = 0;
  std::string problem;
};

Plan plan_for(const NamedTensor& e, const Checkpoint& ckpt, const InitPolicy& policy) {
  Plan plan;
  if (any_match(policy.random_prefixes, e.name)) {
    plan.partition = "random";
    plan.expected = draw_initial_values(e, policy.seed);
    return plan;
  }
  if (!any_match(policy.pretrained_prefixes, e.name)) {
    plan.partition = "unmatched";
    plan.problem = e.name + ": matches neither the pretrained nor the random prefixes";
    return plan;
  }
  plan.partition = "pretrained";
  const TensorRecord* rec = ckpt.find(e.name);
  if (rec == nullptr) {
    plan.problem = e.name + ": missing from the pretrained checkpoint";
    return plan;
  }
  const Shape& want = e.tensor.shape();
  const std::size_t rows = want.empty() ? 1 : want[0];
  const std::size_t row_size = rows == 0 ? 0 : e.tensor.numel() / rows;
  std::vector<std::size_t> fresh;
  if (auto it = policy.random_rows.find(e.name); it != policy.random_rows.end()) fresh = it->second;
  for (std::size_t r : fresh) {
    if (r >= rows) {
      plan.problem = e.name + ": random row " + std::to_string(r) + " outside " + shape_str(want);
      return plan;
    }
  }

  const bool same_trailing = rec->shape.size() == want.size() && !want.empty() &&
                             std::equal(want.begin() + 1, want.end(), rec->shape.begin() + 1);
  const std::size_t have_rows = same_trailing ? rec->shape[0] : 0;
  bool ok = rec->shape == want;
  if (!ok && same_trailing && have_rows < rows) {
    ok = true;
    for (std::size_t r = have_rows; r < rows; ++r)
      if (std::find(fresh.begin(), fresh.end(), r) == fresh.end()) ok = false;
  }
  if (!ok) {
    plan.problem = e.name + ": shape clash, model " + shape_str(want) + " vs checkpoint " +
                   shape_str(rec->shape);
    return plan;
  }

  plan.expected.assign(e.tensor.numel(), 0.0f);
  std::copy(rec->values.begin(), rec->values.end(), plan.expected.begin());
  if (!fresh.empty()) {
    const auto drawn = draw_initial_values(e, policy.seed);
    std::sort(fresh.begin(), fresh.end());
    fresh.erase(std::unique(fresh.begin(), fresh.end()), fresh.end());
    for (std::size_t r : fresh)
      std::copy_n(drawn.begin() + static_cast<long>(r * row_size), row_size,
                  plan.expected.begin() + static_cast<long>(r * row_size));
    plan.random_rows = fresh.size();
  }
  return plan;
}

void tally(AuditReport& report, AuditEntry entry, std::size_t scalars) {
  switch (entry.status) {
    case Status::kPretrainedMatch: ++report.pretrained_match; break;
    case Status::kRandom: ++report.random; break;
    case Status::kMismatch: ++report.mismatches; break;
  }
  report.total_scalars += scalars;
  report.entries.push_back(std::move(entry));
}

}  // namespace

void load_into(ParamStore& params, const Checkpoint& ckpt) {
  std::vector<std::string> problems;
  for (const auto& e : params.entries()) {
    const auto* rec = ckpt.find(e.name);
    if (rec == nullptr) {
      problems.push_back(e.name + ": missing from checkpoint");
    } else if (rec->shape != e.tensor.shape()) {
      problems.push_back(e.name + ": shape clash, model " + shape_str(e.tensor.shape()) +
                         " vs checkpoint " + shape_str(rec->shape));
    }
  }
  if (!problems.empty()) throw_all("checkpoint does not fit the model", problems);
  for (auto& e : params.entries()) {
    const auto* rec = ckpt.find(e.name);
    std::copy(rec->values.begin(), rec->values.end(), e.tensor.mutable_data().begin());
  }
}

Checkpoint merge(const Checkpoint& a, const Checkpoint& b) {
  Checkpoint out = a;
  for (const auto& t : b.tensors) {
    if (out.find(t.name) != nullptr) throw InputError("checkpoint merge: " + t.name + " in both inputs");
    out.tensors.push_back(t);
  }
  return out;
}

InitPolicy pretrained_decoder_policy(std::int32_t soc_id, std::int32_t eoc_id, std::uint64_t seed,
                                     bool pretrained_encoder) {
  InitPolicy p;
  p.seed = seed;
  p.pretrained_prefixes = {"decoder"};
  p.random_prefixes = {"decoder.*.crossattn"};
  if (pretrained_encoder) {
    p.pretrained_prefixes.insert(p.pretrained_prefixes.begin(), "encoder");
  } else {
    p.random_prefixes.insert(p.random_prefixes.begin(), "encoder");
  }
  const std::vector<std::size_t> rows{static_cast<std::size_t>(soc_id), static_cast<std::size_t>(eoc_id)};
  p.random_rows["decoder.embeddings.word"] = rows;
  p.random_rows["decoder.output.bias"] = rows;
  return p;
}

InitPolicy all_random_policy(std::uint64_t seed) {
  InitPolicy p;
  p.seed = seed;
  p.pretrained_prefixes.clear();
  p.random_prefixes = {"encoder", "decoder"};
  return p;
}

const char* status_name(Status s) {
  switch (s) {
    case Status::kPretrainedMatch: return "pretrained-match";
    case Status::kRandom: return "random";
    case Status::kMismatch: return "mismatch";
  }
  return "?";
}

const AuditEntry* AuditReport::find(std::string_view name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::string AuditReport::to_json(const InitPolicy& policy) const {
  json j;
  j["seed"] = policy.seed;
  j["pretrained_prefixes"] = policy.pretrained_prefixes;
  j["random_prefixes"] = policy.random_prefixes;
  j["random_rows"] = policy.random_rows;
  j["counts"] = {{"pretrained-match", pretrained_match},
                 {"random", random},
                 {"mismatch", mismatches},
                 {"tensors", entries.size()},
                 {"scalars", total_scalars}};
  j["parameters"] = json::array();
  for (const auto& e : entries) {
    json p{{"name", e.name}, {"shape", e.shape}, {"partition", e.partition}, {"status", status_name(e.status)}};
    if (e.random_rows > 0) p["random_rows"] = e.random_rows;
    if (!e.detail.empty()) p["detail"] = e.detail;
    j["parameters"].push_back(std::move(p));
  }
  return j.dump(2);
}

AuditReport apply_init_policy(ParamStore& params, const Checkpoint& pretrained,
                              const InitPolicy& policy) {
  std::vector<Plan> plans;
  std::vector<std::string> problems;
  for (const auto& e : params.entries()) {
    plans.push_back(plan_for(e, pretrained, policy));
    if (!plans.back().problem.empty()) problems.push_back(plans.back().problem);
  }
  if (!problems.empty()) throw_all("init policy cannot be applied", problems);
  for (std::size_t i = 0; i < plans.size(); ++i) {
    auto& e = params.entries()[i];
    std::copy(plans[i].expected.begin(), plans[i].expected.end(), e.tensor.mutable_data().begin());
  }
  return verify(params, pretrained, policy);
}

AuditReport verify(const ParamStore& params, const Checkpoint& pretrained,
                   const InitPolicy& policy) {
  AuditReport report;
  for (const auto& e : params.entries()) {
    Plan plan = plan_for(e, pretrained, policy);
    AuditEntry entry{e.name, e.tensor.shape(), plan.partition, Status::kMismatch, plan.random_rows, plan.problem};
    if (plan.problem.empty()) {
      const auto actual = e.tensor.data();
      if (same_bits(actual, plan.expected)) {
        entry.status = plan.partition == "random" ? Status::kRandom : Status::kPretrainedMatch;
      } else {
        std::size_t i = 0;
        while (i < actual.size() &&
               std::memcmp(&actual[i], &plan.expected[i], sizeof(float)) == 0) ++i;
        entry.detail = "value differs from the " + plan.partition + " source at index " + std::to_string(i);
      }
    }
    tally(report, std::move(entry), e.tensor.numel());
  }
  return report;
}

}  // namespace capforge::checkpoint
