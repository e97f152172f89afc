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


#include "capforge/metrics.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

#include "capforge/error.h"
#include "json.hpp"

namespace capforge::metrics {

namespace {

using Ngram = std::vector<std::string>;
using NgramCounts = std::map<Ngram, double>;

NgramCounts count_ngrams(const Words& words, std::size_t n) {
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) counts[Ngram(words.begin() + static_cast<long>(i), words.begin() + static_cast<long>(i + n))] += 1.0;
  return counts;
}

void check_corpus(const Corpus& corpus, std::string_view metric) {
  if (corpus.empty()) throw InputError(std::string(metric) + ": empty corpus");
  for (const auto& item : corpus)
    if (item.references.empty()) throw InputError(std::string(metric) + ": item " + item.key + " has no references");
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

// ---- BLEU ------------------------------------------------------------------

double bleu(const Corpus& corpus, int n) {
  check_corpus(corpus, "bleu");
  if (n < 1 || n > 4) throw InputError("bleu: order " + std::to_string(n) + " outside 1..4");
  std::vector<double> matched(static_cast<std::size_t>(n), 0.0), total(static_cast<std::size_t>(n), 0.0);
  double cand_len = 0.0, ref_len = 0.0;
  for (const auto& item : corpus) {
    const double c = static_cast<double>(item.candidate.size());
    cand_len += c;
    double best = -1.0;
    for (const auto& ref : item.references) {
      const double r = static_cast<double>(ref.size());
      if (best < 0.0 || std::abs(r - c) < std::abs(best - c) || (std::abs(r - c) == std::abs(best - c) && r < best)) best = r;
    }
    ref_len += best;
    for (int k = 1; k <= n; ++k) {
      const auto cand = count_ngrams(item.candidate, static_cast<std::size_t>(k));
      NgramCounts max_ref;
      for (const auto& ref : item.references)
        for (const auto& [g, cnt] : count_ngrams(ref, static_cast<std::size_t>(k))) max_ref[g] = std::max(max_ref[g], cnt);
      for (const auto& [g, cnt] : cand) {
        total[static_cast<std::size_t>(k - 1)] += cnt;
        auto it = max_ref.find(g);
        if (it != max_ref.end()) matched[static_cast<std::size_t>(k - 1)] += std::min(cnt, it->second);
      }
    }
  }
  if (cand_len == 0.0) return 0.0;
  double log_sum = 0.0;
  for (int k = 0; k < n; ++k) {
    if (matched[static_cast<std::size_t>(k)] == 0.0) return 0.0;
    log_sum += std::log(matched[static_cast<std::size_t>(k)] / total[static_cast<std::size_t>(k)]);
  }
  const double bp = cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0;
  return bp * std::exp(log_sum / n);
}

// ---- ROUGE-L ---------------------------------------------------------------

namespace {

std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

std::vector<double> rouge_l_items(const Corpus& corpus) {
  check_corpus(corpus, "rouge_l");
  constexpr double kBeta = 1.2;
  std::vector<double> out;
  for (const auto& item : corpus) {
    double p = 0.0, r = 0.0;
    for (const auto& ref : item.references) {
      const double lcs = static_cast<double>(lcs_length(item.candidate, ref));
      if (!item.candidate.empty()) p = std::max(p, lcs / static_cast<double>(item.candidate.size()));
      if (!ref.empty()) r = std::max(r, lcs / static_cast<double>(ref.size()));
    }
    out.push_back(p > 0.0 && r > 0.0 ? (1 + kBeta * kBeta) * p * r / (r + kBeta * kBeta * p) : 0.0);
  }
  return out;
}

double rouge_l(const Corpus& corpus) { return mean(rouge_l_items(corpus)); }

// ---- CIDEr-D ---------------------------------------------------------------

namespace {

constexpr std::size_t kCiderOrders = 4;
constexpr double kCiderSigma = 6.0;

struct TfIdf {
  std::array<std::map<Ngram, double>, kCiderOrders> vec;
  std::array<double, kCiderOrders> norm{};
  double length = 0.0;
};

TfIdf tf_idf(const Words& words, const std::map<Ngram, double>& df, double log_refs) {
  TfIdf out;
  for (std::size_t n = 1; n <= kCiderOrders; ++n) {
    for (const auto& [g, tf] : count_ngrams(words, n)) {
      auto it = df.find(g);
      const double idf = log_refs - std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
      const double v = tf * idf;
      out.vec[n - 1][g] = v;
      out.norm[n - 1] += v * v;
      if (n == 2) out.length += tf;
    }
  }
  for (auto& x : out.norm) x = std::sqrt(x);
  return out;
}

double cider_sim(const TfIdf& hyp, const TfIdf& ref) {
  const double delta = hyp.length - ref.length;
  double total = 0.0;
  for (std::size_t n = 0; n < kCiderOrders; ++n) {
    double val = 0.0;
    for (const auto& [g, v] : hyp.vec[n]) {
      auto it = ref.vec[n].find(g);
      if (it != ref.vec[n].end()) val += std::min(v, it->second) * it->second;
    }
    if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) val /= hyp.norm[n] * ref.norm[n];
    total += val * std::exp(-(delta * delta) / (2 * kCiderSigma * kCiderSigma));
  }
  return total;
}

}  // namespace

std::vector<double> cider_d_items(const Corpus& corpus) {
  check_corpus(corpus, "cider");
  std::map<Ngram, double> df;
  for (const auto& item : corpus) {
    std::map<Ngram, bool> seen;
    for (const auto& ref : item.references)
      for (std::size_t n = 1; n <= kCiderOrders; ++n)
        for (const auto& kv : count_ngrams(ref, n)) seen[kv.first] = true;
    for (const auto& kv : seen) df[kv.first] += 1.0;
  }
  const double log_refs = std::log(static_cast<double>(corpus.size()));
  std::vector<double> out;
  for (const auto& item : corpus) {
    const TfIdf hyp = tf_idf(item.candidate, df, log_refs);
    double sum = 0.0;
    for (const auto& ref : item.references) sum += cider_sim(hyp, tf_idf(ref, df, log_refs));
    out.push_back(sum / kCiderOrders / static_cast<double>(item.references.size()) * 10.0);
  }
  return out;
}

double cider_d(const Corpus& corpus) { return mean(cider_d_items(corpus)); }

// ---- Porter stemmer --------------------------------------------------------

namespace {

bool is_cons(const std::string& w, std::size_t i) {
  switch (w[i]) {
    case 'a': case 'e': case 'i': case 'o': case 'u': return false;
    case 'y': return i == 0 ? true : !is_cons(w, i - 1);
    default: return true;
  }
}

// Number of VC sequences in [C](VC)^m[V].
int measure(const std::string& w) {
  int m = 0;
  bool prev_vowel = false;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const bool cons = is_cons(w, i);
    if (cons && prev_vowel) ++m;
    prev_vowel = !cons;
  }
  return m;
}

bool has_vowel(const std::string& w) {
  for (std::size_t i = 0; i < w.size(); ++i)
    if (!is_cons(w, i)) return true;
  return false;
}

bool ends_double_cons(const std::string& w) {
  const std::size_t n = w.size();
  return n >= 2 && w[n - 1] == w[n - 2] && is_cons(w, n - 1);
}

bool ends_cvc(const std::string& w) {
  const std::size_t n = w.size();
  return n >= 3 && is_cons(w, n - 3) && !is_cons(w, n - 2) && is_cons(w, n - 1) && w[n - 1] != 'w' &&
         w[n - 1] != 'x' && w[n - 1] != 'y';
}

struct Rule {
  std::string_view suffix, replacement;
  std::function<bool(const std::string&)> condition;  // on the stem; empty = always
};

// First rule whose suffix matches decides; a failed condition leaves the word.
std::string apply_rules(const std::string& w, const std::vector<Rule>& rules) {
  for (const auto& r : rules) {
    if (!w.ends_with(r.suffix)) continue;
    std::string stem = w.substr(0, w.size() - r.suffix.size());
    if (!r.condition || r.condition(stem)) return stem + std::string(r.replacement);
    return w;
  }
  return w;
}

const auto kPositive = [](const std::string& s) { return measure(s) > 0; };
const auto kAboveOne = [](const std::string& s) { return measure(s) > 1; };

std::string step1ab(std::string w) {
  w = apply_rules(w, {{"sses", "ss", {}}, {"ies", "i", {}}, {"ss", "ss", {}}, {"s", "", {}}});
  if (w.ends_with("eed")) {
    const std::string stem = w.substr(0, w.size() - 3);
    return measure(stem) > 0 ? stem + "ee" : w;
  }
  std::string stem;
  bool stripped = false;
  for (std::string_view suffix : {"ed", "ing"}) {
    if (w.ends_with(suffix)) {
      stem = w.substr(0, w.size() - suffix.size());
      if (has_vowel(stem)) {
        stripped = true;
        break;
      }
    }
  }
  if (!stripped) return w;
  if (stem.ends_with("at") || stem.ends_with("bl") || stem.ends_with("iz")) return stem + "e";
  if (ends_double_cons(stem)) {
    const char last = stem.back();
    return last == 'l' || last == 's' || last == 'z' ? stem : stem.substr(0, stem.size() - 1);
  }
  if (measure(stem) == 1 && ends_cvc(stem)) return stem + "e";
  return stem;
}

std::string step1c(std::string w) {
  if (w.ends_with("y") && has_vowel(w.substr(0, w.size() - 1))) w.back() = 'i';
  return w;
}

std::string step2(const std::string& w) {
  static const std::vector<Rule> rules{
      {"ational", "ate", kPositive}, {"tional", "tion", kPositive}, {"enci", "ence", kPositive},
      {"anci", "ance", kPositive},   {"izer", "ize", kPositive},    {"abli", "able", kPositive},
      {"alli", "al", kPositive},     {"entli", "ent", kPositive},   {"eli", "e", kPositive},
      {"ousli", "ous", kPositive},   {"ization", "ize", kPositive}, {"ation", "ate", kPositive},
      {"ator", "ate", kPositive},    {"alism", "al", kPositive},    {"iveness", "ive", kPositive},
      {"fulness", "ful", kPositive}, {"ousness", "ous", kPositive}, {"aliti", "al", kPositive},
      {"iviti", "ive", kPositive},   {"biliti", "ble", kPositive}};
  return apply_rules(w, rules);
}

std::string step3(const std::string& w) {
  static const std::vector<Rule> rules{
      {"icate", "ic", kPositive}, {"ative", "", kPositive}, {"alize", "al", kPositive},
      {"iciti", "ic", kPositive}, {"ical", "ic", kPositive}, {"ful", "", kPositive},
      {"ness", "", kPositive}};
  return apply_rules(w, rules);
}

std::string step4(const std::string& w) {
  static const std::vector<Rule> rules{
      {"al", "", kAboveOne},   {"ance", "", kAboveOne}, {"ence", "", kAboveOne}, {"er", "", kAboveOne},
      {"ic", "", kAboveOne},   {"able", "", kAboveOne}, {"ible", "", kAboveOne}, {"ant", "", kAboveOne},
      {"ement", "", kAboveOne}, {"ment", "", kAboveOne}, {"ent", "", kAboveOne},
      {"ion", "",
       [](const std::string& s) { return measure(s) > 1 && !s.empty() && (s.back() == 's' || s.back() == 't'); }},
      {"ou", "", kAboveOne},   {"ism", "", kAboveOne},  {"ate", "", kAboveOne},  {"iti", "", kAboveOne},
      {"ous", "", kAboveOne},  {"ive", "", kAboveOne},  {"ize", "", kAboveOne}};
  return apply_rules(w, rules);
}

std::string step5(std::string w) {
  if (w.ends_with("e")) {
    const std::string stem = w.substr(0, w.size() - 1);
    const int m = measure(stem);
    if (m > 1 || (m == 1 && !ends_cvc(stem))) w = stem;
  }
  if (w.ends_with("ll") && measure(w.substr(0, w.size() - 1)) > 1) w.pop_back();
  return w;
}

}  // namespace

std::string porter_stem(std::string_view word) {
  if (word.empty()) return {};
  for (char c : word)
    if (c < 'a' || c > 'z') return std::string(word);
  std::string w(word);
  w = step1ab(std::move(w));
  w = step1c(std::move(w));
  w = step2(w);
  w = step3(w);
  w = step4(w);
  return step5(std::move(w));
}

// ---- METEOR-lite -----------------------------------------------------------

double meteor_lite_pair(const Words& candidate, const Words& reference) {
  constexpr double kAlpha = 0.9, kGamma = 0.5, kBeta = 3.0;
  if (candidate.empty() || reference.empty()) return 0.0;
  // ref_of[i] = aligned reference position of candidate word i, or npos.
  constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  std::vector<std::size_t> ref_of(candidate.size(), kNone);
  std::vector<bool> ref_used(reference.size(), false);

  // Within a stage each candidate word takes the reference position right
  // after its predecessor's if that matches, else the earliest free match.
  auto run_stage = [&](const std::function<bool(std::size_t, std::size_t)>& same) {
    for (std::size_t i = 0; i < candidate.size(); ++i) {
      if (ref_of[i] != kNone) continue;
      std::size_t pick = kNone;
      if (i > 0 && ref_of[i - 1] != kNone) {
        const std::size_t next = ref_of[i - 1] + 1;
        if (next < reference.size() && !ref_used[next] && same(i, next)) pick = next;
      }
      for (std::size_t j = 0; pick == kNone && j < reference.size(); ++j)
        if (!ref_used[j] && same(i, j)) pick = j;
      if (pick != kNone) {
        ref_of[i] = pick;
        ref_used[pick] = true;
      }
    }
  };
  run_stage([&](std::size_t i, std::size_t j) { return candidate[i] == reference[j]; });
  std::vector<std::string> cand_stems, ref_stems;
  for (const auto& w : candidate) cand_stems.push_back(porter_stem(w));
  for (const auto& w : reference) ref_stems.push_back(porter_stem(w));
  run_stage([&](std::size_t i, std::size_t j) { return cand_stems[i] == ref_stems[j]; });

  std::size_t matches = 0, chunks = 0;
  std::size_t prev_i = kNone, prev_j = kNone;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    if (ref_of[i] == kNone) continue;
    ++matches;
    if (prev_i == kNone || prev_i + 1 != i || prev_j + 1 != ref_of[i]) ++chunks;
    prev_i = i;
    prev_j = ref_of[i];
  }
  if (matches == 0) return 0.0;
  const double p = static_cast<double>(matches) / static_cast<double>(candidate.size());
  const double r = static_cast<double>(matches) / static_cast<double>(reference.size());
  const double fmean = p * r / (kAlpha * p + (1 - kAlpha) * r);
  const double penalty = kGamma * std::pow(static_cast<double>(chunks) / static_cast<double>(matches), kBeta);
  return fmean * (1 - penalty);
}

std::vector<double> meteor_lite_items(const Corpus& corpus) {
  check_corpus(corpus, "meteor_lite");
  std::vector<double> out;
  for (const auto& item : corpus) {
    double best = 0.0;
    for (const auto& ref : item.references) best = std::max(best, meteor_lite_pair(item.candidate, ref));
    out.push_back(best);
  }
  return out;
}

double meteor_lite(const Corpus& corpus) { return mean(meteor_lite_items(corpus)); }

// ---- SPIDEr and reports ----------------------------------------------------

double spider(double cider, double spice) { return 0.5 * (cider + spice); }

MetricReport evaluate(const Corpus& corpus, std::optional<double> spice) {
  check_corpus(corpus, "evaluate");
  MetricReport r;
  r.items = corpus.size();
  for (int n = 1; n <= 4; ++n) r.bleu[static_cast<std::size_t>(n - 1)] = bleu(corpus, n);
  r.rouge_l_items = rouge_l_items(corpus);
  r.meteor_lite_items = meteor_lite_items(corpus);
  r.cider_items = cider_d_items(corpus);
  r.rouge_l = mean(r.rouge_l_items);
  r.meteor_lite = mean(r.meteor_lite_items);
  r.cider = mean(r.cider_items);
  for (const auto& item : corpus) r.keys.push_back(item.key);
  r.spice = spice;
  if (spice) {
    r.spider = spider(r.cider, *spice);
  } else {
    r.spider_omitted_reason = "SPICE not supplied; it needs an external scene-graph parser";
  }
  return r;
}

std::string MetricReport::to_json() const {
  using nlohmann::ordered_json;
  ordered_json raw, scaled;
  auto put = [&](const char* name, double v) {
    raw[name] = v;
    scaled[name] = v * 100.0;
  };
  for (int n = 0; n < 4; ++n) put(("bleu" + std::to_string(n + 1)).c_str(), bleu[static_cast<std::size_t>(n)]);
  put("rouge_l", rouge_l);
  put("meteor_lite", meteor_lite);
  put("cider", cider);
  if (spice) put("spice", *spice);
  if (spider) put("spider", *spider);

  ordered_json j;
  j["items"] = items;
  j["raw"] = raw;
  j["x100"] = scaled;
  ordered_json deviations = ordered_json::array();
  deviations.push_back("meteor_lite uses exact and Porter-stem matching only (no WordNet synonyms); "
                       "not comparable to METEOR 1.5");
  if (!spider) deviations.push_back("spider omitted: " + spider_omitted_reason);
  j["deviations"] = deviations;
  ordered_json per_item = ordered_json::array();
  for (std::size_t i = 0; i < keys.size(); ++i) {
    per_item.push_back({{"key", keys[i]},
                        {"rouge_l", rouge_l_items[i]},
                        {"meteor_lite", meteor_lite_items[i]},
                        {"cider", cider_items[i]}});
  }
  j["per_item"] = per_item;
  return j.dump(2);
}

}  // namespace capforge::metrics
