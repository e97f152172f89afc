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


#include "capforge/dataset.h"

#include <algorithm>
#include <sstream>

#include "capforge/bytes.h"
#include "capforge/error.h"
#include "json.hpp"

namespace capforge {

using nlohmann::json;

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  const std::string text = bytes::read_text_file(path);
  const auto base = path.parent_path();
  std::vector<ManifestEntry> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    try {
      const json j = json::parse(line);
      ManifestEntry e;
      e.line = lineno;
      std::filesystem::path audio = j.at("audio").get<std::string>();
      e.audio = audio.is_absolute() ? audio : base / audio;
      if (j.contains("captions")) e.captions = j.at("captions").get<std::vector<std::string>>();
      out.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw InputError(where + ": " + ex.what());
    }
  }
  if (out.empty()) throw InputError(path.string() + ": manifest has no entries");
  return out;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  const auto base = path.parent_path();
  std::string text;
  for (const auto& e : entries) {
    auto rel = e.audio.lexically_relative(base.empty() ? std::filesystem::path(".") : base);
    if (rel.empty() || rel.native().starts_with("..")) rel = e.audio;
    text += json{{"audio", rel.generic_string()}, {"captions", e.captions}}.dump() + "\n";
  }
  bytes::write_text_file(path, text);
}

TokenIds encode_checked(std::string_view caption, const Vocabulary& vocab, std::size_t max_tokens) {
  const std::string norm = normalize_text(caption);
  if (norm.empty()) throw InputError("caption is empty after normalization");
  TokenIds ids = encode_caption(norm, vocab);
  if (std::find(ids.begin(), ids.end(), vocab.unk_id()) != ids.end()) {
    throw InputError("caption \"" + norm + "\" needs [UNK]");
  }
  if (ids.size() > max_tokens) {
    throw InputError("caption \"" + norm + "\" has " + std::to_string(ids.size()) + " tokens, limit " +
                     std::to_string(max_tokens));
  }
  return ids;
}

std::vector<Clip> load_dataset(const std::filesystem::path& manifest, const Vocabulary& vocab,
                               std::size_t max_tokens) {
  std::vector<Clip> clips;
  for (const auto& e : read_manifest(manifest)) {
    const std::string where = manifest.string() + ":" + std::to_string(e.line);
    Clip c;
    c.key = e.audio.string();
    try {
      c.mel = dsp::load_features(e.audio);
      for (const auto& cap : e.captions) {
        c.tokens.push_back(encode_checked(cap, vocab, max_tokens));
        c.captions.push_back(normalize_text(cap));
      }
    } catch (const InputError& ex) {
      throw InputError(where + ": " + ex.what());
    }
    clips.push_back(std::move(c));
  }
  return clips;
}

}  // namespace capforge
