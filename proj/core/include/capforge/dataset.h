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

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "capforge/dsp.h"
#include "capforge/tensor.h"
#include "capforge/tokenizer.h"

namespace capforge {

// One line of a JSON-lines manifest: {"audio": path, "captions": [...]}.
// Relative audio paths are resolved against the manifest's directory.
struct ManifestEntry {
  std::filesystem::path audio;
  std::vector<std::string> captions;
  std::size_t line = 0;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
// Audio paths are written relative to the manifest directory when possible.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

struct Clip {
  std::string key;  // audio path as given
  dsp::LogMelSpectrogram mel;
  std::vector<std::string> captions;  // normalized text
  std::vector<TokenIds> tokens;       // soc ... eoc
  Tensor features;                    // cached encoder output, if any
};

// Normalizes and encodes a caption. InputError when it is empty, needs
// [UNK], or exceeds max_tokens ids.
TokenIds encode_checked(std::string_view caption, const Vocabulary& vocab, std::size_t max_tokens);

// Loads features (MELS1 or WAV) and encodes every caption. Errors carry the
// manifest line number.
std::vector<Clip> load_dataset(const std::filesystem::path& manifest, const Vocabulary& vocab,
                               std::size_t max_tokens);

}  // namespace capforge
