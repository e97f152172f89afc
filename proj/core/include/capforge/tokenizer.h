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
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace capforge {

using TokenIds = std::vector<std::int32_t>;

inline constexpr std::string_view kSocToken = "<soc>";
inline constexpr std::string_view kEocToken = "<eoc>";
inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::size_t kMaxWordChars = 100;

// Token list with dense ids (line order of the vocab file).
class Vocabulary {
 public:
  // Requires [UNK] and [PAD] once each. "<soc>" and "<eoc>" must either both
  // be present once, or both be absent, in which case they are appended as
  // the last two ids (a stock BERT vocab file stays row-aligned).
  explicit Vocabulary(std::vector<std::string> tokens);

  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::int32_t id) const;
  std::optional<std::int32_t> find(std::string_view token) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::int32_t soc_id() const { return soc_; }
  std::int32_t eoc_id() const { return eoc_; }
  std::int32_t unk_id() const { return unk_; }
  std::int32_t pad_id() const { return pad_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
  std::int32_t soc_ = -1, eoc_ = -1, unk_ = -1, pad_ = -1;
};

// Lowercases, removes Unicode punctuation (general category P*), collapses
// whitespace runs to one space and trims.
std::string normalize_text(std::string_view text);

// Greedy longest-match-first WordPiece for one word; continuation pieces
// carry "##". Words with no full segmentation, or longer than 100 code
// points, become a single [UNK].
TokenIds wordpiece(std::string_view word, const Vocabulary& vocab);

// [soc] + WordPiece of each whitespace-separated word + [eoc].
TokenIds encode_caption(std::string_view normalized_text, const Vocabulary& vocab);

// Drops soc/eoc/pad, fuses "##" pieces onto the previous piece.
std::string decode_caption(std::span<const std::int32_t> ids, const Vocabulary& vocab);

// Whitespace split of normalize_text(text); the word tokens used by metrics.
std::vector<std::string> metric_tokens(std::string_view text);

}  // namespace capforge
