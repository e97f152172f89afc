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


#include "capforge/infer.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "capforge/error.h"

namespace capforge::infer {

std::vector<double> log_softmax(std::span<const float> logits) {
  if (logits.empty()) throw InvariantError("log_softmax: empty logits");
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

namespace {

std::vector<double> step_log_probs(StepScorer& scorer, std::span<const std::int32_t> prefix) {
  const auto logits = scorer.next_logits(prefix);
  if (logits.size() != scorer.vocab_size()) {
    throw InvariantError("scorer returned " + std::to_string(logits.size()) + " logits for vocab " +
                         std::to_string(scorer.vocab_size()));
  }
  return log_softmax(logits);
}

double ranking_score(const Hypothesis& h, double alpha) {
  if (alpha <= 0.0) return h.score;
  return h.score / std::pow(static_cast<double>(std::max<std::size_t>(1, h.generated())), alpha);
}

}  // namespace

Hypothesis greedy_decode(StepScorer& scorer, const DecodeOptions& opts) {
  Hypothesis h{{opts.soc_id}, 0.0, false};
  while (!h.finished) {
    const auto lp = step_log_probs(scorer, h.ids);
    const auto best = static_cast<std::int32_t>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    h.ids.push_back(best);
    h.score += lp[static_cast<std::size_t>(best)];
    h.finished = best == opts.eoc_id || h.generated() >= opts.max_tokens;
  }
  return h;
}

std::vector<Hypothesis> beam_search(StepScorer& scorer, std::size_t width, const DecodeOptions& opts) {
  if (width < 1 || width > kMaxBeamWidth) {
    throw InputError("beam width " + std::to_string(width) + " outside [1, " +
                     std::to_string(kMaxBeamWidth) + "]");
  }
  struct Candidate {
    double score;
    std::size_t beam;
    double token_lp;
    std::int32_t token;
  };
  std::vector<Hypothesis> active{{{opts.soc_id}, 0.0, false}};
  std::vector<Hypothesis> finished;
  while (!active.empty() && finished.size() < width) {
    std::vector<Candidate> cands;
    for (std::size_t b = 0; b < active.size(); ++b) {
      const auto lp = step_log_probs(scorer, active[b].ids);
      for (std::size_t t = 0; t < lp.size(); ++t)
        cands.push_back({active[b].score + lp[t], b, lp[t], static_cast<std::int32_t>(t)});
    }
    const std::size_t keep = std::min(width - finished.size(), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<long>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.beam != b.beam) return a.beam < b.beam;
                        if (a.token_lp != b.token_lp) return a.token_lp > b.token_lp;
                        return a.token < b.token;
                      });
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Hypothesis h = active[cands[i].beam];
      h.ids.push_back(cands[i].token);
      h.score = cands[i].score;
      h.finished = cands[i].token == opts.eoc_id || h.generated() >= opts.max_tokens;
      (h.finished ? finished : next).push_back(std::move(h));
    }
    active = std::move(next);
  }
  std::stable_sort(finished.begin(), finished.end(), [&](const Hypothesis& a, const Hypothesis& b) {
    return ranking_score(a, opts.length_alpha) > ranking_score(b, opts.length_alpha);
  });
  return finished;
}

ModelScorer::ModelScorer(const CaptionModel& model, Tensor features)
    : model_(model), features_(std::move(features)) {}

std::size_t ModelScorer::vocab_size() const { return model_.config().vocab_size; }

std::vector<float> ModelScorer::next_logits(std::span<const std::int32_t> prefix) {
  if (prefix.empty()) throw InvariantError("next_logits: empty prefix");
  TokenIds parent(prefix.begin(), prefix.end() - 1);
  decoder::DecodeSession session = parent.empty() ? model_.start_session(features_) : [&] {
    auto it = sessions_.find(parent);
    if (it != sessions_.end()) return it->second;
    // No cached parent: replay the prefix from scratch.
    auto s = model_.start_session(features_);
    for (auto t : parent) s.step(t);
    return s;
  }();
  auto logits = session.step(prefix.back());
  sessions_.insert_or_assign(TokenIds(prefix.begin(), prefix.end()), std::move(session));
  return logits;
}

Caption caption_features(const CaptionModel& model, const Vocabulary& vocab, const Tensor& features,
                         std::size_t beam_width, double length_alpha) {
  ModelScorer scorer(model, features);
  DecodeOptions opts{vocab.soc_id(), vocab.eoc_id(), std::min(model.config().max_len, kDefaultMaxTokens),
                     length_alpha};
  const Hypothesis best = beam_width == 1 ? greedy_decode(scorer, opts)
                                          : beam_search(scorer, beam_width, opts).front();
  return {decode_caption(best.ids, vocab), best.score, best.ids};
}

}  // namespace capforge::infer
