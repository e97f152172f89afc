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
#include <map>
#include <span>
#include <vector>

#include "capforge/model.h"
#include "capforge/tokenizer.h"

namespace capforge::infer {

inline constexpr std::size_t kMaxBeamWidth = 5;
inline constexpr std::size_t kDefaultMaxTokens = 50;

// Supplies next-token logits for a prefix that starts with soc.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::vector<float> next_logits(std::span<const std::int32_t> prefix) = 0;
};

struct Hypothesis {
  TokenIds ids;        // soc first
  double score = 0.0;  // sum of per-step log-softmax values
  bool finished = false;

  std::size_t generated() const { return ids.empty() ? 0 : ids.size() - 1; }
};

struct DecodeOptions {
  std::int32_t soc_id = 0;
  std::int32_t eoc_id = 0;
  std::size_t max_tokens = kDefaultMaxTokens;  // generated tokens, eoc included
  double length_alpha = 0.0;  // rank by score / generated^alpha when > 0
};

// log-softmax in double precision.
std::vector<double> log_softmax(std::span<const float> logits);

// Argmax at each step (ties to the lowest id) until eoc or max_tokens.
Hypothesis greedy_decode(StepScorer& scorer, const DecodeOptions& opts);

// Beam search over cumulative log-probabilities. Each step keeps the best
// (width - finished) expansions, ordered by score, then parent beam, then
// the token's own log-probability, then token id. Hypotheses ending in eoc
// or reaching max_tokens retire to the finished pool. Returns the finished
// pool ranked best first. Width must be in [1, 5].
std::vector<Hypothesis> beam_search(StepScorer& scorer, std::size_t width,
                                    const DecodeOptions& opts);

// Scorer over a trained model with per-prefix cached decode sessions.
class ModelScorer : public StepScorer {
 public:
  ModelScorer(const CaptionModel& model, Tensor features);

  std::size_t vocab_size() const override;
  std::vector<float> next_logits(std::span<const std::int32_t> prefix) override;

 private:
  const CaptionModel& model_;
  Tensor features_;
  std::map<TokenIds, decoder::DecodeSession> sessions_;  // keyed by consumed prefix
};

// Generated words for the best hypothesis plus its score.
struct Caption {
  std::string text;
  double score = 0.0;
  TokenIds ids;
};
Caption caption_features(const CaptionModel& model, const Vocabulary& vocab, const Tensor& features,
                         std::size_t beam_width, double length_alpha = 0.0);

}  // namespace capforge::infer
