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

#include "capforge/tokenizer.h"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <unicode/uchar.h>
#include <unicode/utf8.h>

#include "capforge/bytes.h"
#include "capforge/error.h"

namespace capforge {

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const bool has_soc = std::find(tokens_.begin(), tokens_.end(), kSocToken) != tokens_.end();
  const bool has_eoc = std::find(tokens_.begin(), tokens_.end(), kEocToken) != tokens_.end();
  if (has_soc != has_eoc) {
    throw InputError("vocabulary must contain both <soc> and <eoc> or neither");
  }
  if (!has_soc) {
    tokens_.emplace_back(kSocToken);
    tokens_.emplace_back(kEocToken);
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second) {
      throw InputError("duplicate vocabulary token '" + tokens_[i] + "' at line " +
                       std::to_string(i + 1));
    }
  }
  auto required = [&](std::string_view t) {
    auto id = find(t);
    if (!id) throw InputError("vocabulary is missing required token " + std::string(t));
    return *id;
  };
  soc_ = required(kSocToken);
  eoc_ = required(kEocToken);
  unk_ = required(kUnkToken);
  pad_ = required(kPadToken);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::istringstream in(bytes::read_text_file(path));
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  while (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
  return Vocabulary(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::string text;
  for (const auto& t : tokens_) text += t + "\n";
  bytes::write_text_file(path, text);
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InvariantError("token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<std::int32_t> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  const auto* s = reinterpret_cast<const std::uint8_t*>(text.data());
  const auto length = static_cast<std::int32_t>(text.size());
  std::int32_t i = 0;
  while (i < length) {
    UChar32 c;
    U8_NEXT(s, i, length, c);
    if (c < 0) c = 0xFFFD;  // invalid UTF-8 becomes U+FFFD
    if (u_isUWhiteSpace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (u_ispunct(c)) continue;
    c = u_tolower(c);
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    char buf[U8_MAX_LENGTH];
    std::int32_t n = 0;
    U8_APPEND_UNSAFE(reinterpret_cast<std::uint8_t*>(buf), n, c);
    out.append(buf, static_cast<std::size_t>(n));
  }
  return out;
}

namespace {

// Byte offsets of code point boundaries, including the end.
std::vector<std::size_t> code_point_offsets(std::string_view word) {
  std::vector<std::size_t> offsets;
  const auto* s = reinterpret_cast<const std::uint8_t*>(word.data());
  const auto length = static_cast<std::int32_t>(word.size());
  std::int32_t i = 0;
  while (i < length) {
    offsets.push_back(static_cast<std::size_t>(i));
    U8_FWD_1(s, i, length);
  }
  offsets.push_back(word.size());
  return offsets;
}

}  // namespace

TokenIds wordpiece(std::string_view word, const Vocabulary& vocab) {
  const auto offsets = code_point_offsets(word);
  const std::size_t chars = offsets.size() - 1;
  if (chars == 0) return {};
  if (chars > kMaxWordChars) return {vocab.unk_id()};
  TokenIds pieces;
  std::size_t start = 0;
  std::string candidate;
  while (start < chars) {
    std::size_t end = chars;
    std::optional<std::int32_t> match;
    while (end > start) {
      candidate.assign(start > 0 ? "##" : "");
      candidate.append(word.substr(offsets[start], offsets[end] - offsets[start]));
      if ((match = vocab.find(candidate))) break;
      --end;
    }
    if (!match) return {vocab.unk_id()};
    pieces.push_back(*match);
    start = end;
  }
  return pieces;
}

TokenIds encode_caption(std::string_view text, const Vocabulary& vocab) {
  TokenIds ids{vocab.soc_id()};
  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && text[pos] == ' ') ++pos;
    std::size_t end = text.find(' ', pos);
    if (end == std::string_view::npos) end = text.size();
    if (end > pos) {
      const auto pieces = wordpiece(text.substr(pos, end - pos), vocab);
      ids.insert(ids.end(), pieces.begin(), pieces.end());
    }
    pos = end;
  }
  ids.push_back(vocab.eoc_id());
  return ids;
}

std::string decode_caption(std::span<const std::int32_t> ids, const Vocabulary& vocab) {
  std::string out;
  for (std::int32_t id : ids) {
    const std::string& tok = vocab.token(id);
    if (id == vocab.soc_id() || id == vocab.eoc_id() || id == vocab.pad_id()) continue;
    if (tok.size() > 2 && tok.starts_with("##")) {
      out.append(tok, 2);
    } else {
      if (!out.empty()) out.push_back(' ');
      out.append(tok);
    }
  }
  return out;
}

std::vector<std::string> metric_tokens(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in(normalize_text(text));
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

}  // namespace capforge
