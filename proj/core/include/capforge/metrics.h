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

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace capforge::metrics {

using Words = std::vector<std::string>;

struct EvalItem {
  std::string key;
  Words candidate;
  std::vector<Words> references;  // at least one
};
using Corpus = std::vector<EvalItem>;

// Corpus BLEU_n: clipped n-gram precisions pooled over the corpus, geometric
// mean over orders 1..n, brevity penalty exp(1 - r/c) when c < r with r the
// sum of closest reference lengths (ties to the shorter reference).
double bleu(const Corpus& corpus, int n);

// LCS F-measure with beta 1.2, using the best precision and the best recall
// over the references; corpus mean.
double rouge_l(const Corpus& corpus);
std::vector<double> rouge_l_items(const Corpus& corpus);

// CIDEr-D: TF-IDF n-gram vectors (n = 1..4) with document frequencies over
// the reference sets, clipped cosine, Gaussian length penalty (sigma 6),
// scaled by 10 and averaged over orders and references. As in the common
// reference implementation, the length compared in the penalty is the
// number of bigrams.
double cider_d(const Corpus& corpus);
std::vector<double> cider_d_items(const Corpus& corpus);

// METEOR without synonymy: exact matches, then Porter-stem matches among the
// words still unaligned. F = PR / (0.9 P + 0.1 R), penalty
// 0.5 (chunks / matches)^3, best reference per item; corpus mean.
double meteor_lite(const Corpus& corpus);
std::vector<double> meteor_lite_items(const Corpus& corpus);
double meteor_lite_pair(const Words& candidate, const Words& reference);

// Original Porter (1980) stemmer for lowercase ASCII words; other input is
// returned unchanged.
std::string porter_stem(std::string_view word);

// Mean of CIDEr and SPICE.
double spider(double cider, double spice);

struct MetricReport {
  std::size_t items = 0;
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double meteor_lite = 0.0;
  double cider = 0.0;
  std::optional<double> spice;
  std::optional<double> spider;
  std::string spider_omitted_reason;
  std::vector<std::string> keys;
  std::vector<double> rouge_l_items, meteor_lite_items, cider_items;

  std::string to_json() const;
};

// Throws InputError for an empty corpus or an item without references.
MetricReport evaluate(const Corpus& corpus, std::optional<double> spice = std::nullopt);

}  // namespace capforge::metrics
