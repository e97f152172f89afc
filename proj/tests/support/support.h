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
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "capforge/checkpoint.h"
#include "capforge/decoder.h"
#include "capforge/encoder.h"
#include "capforge/infer.h"
#include "capforge/model_config.h"
#include "capforge/params.h"
#include "capforge/rng.h"
#include "capforge/tensor.h"

namespace capforge::testing {

// ---- finite differences ----

using ScalarFn = std::function<TensorD(const std::vector<TensorD>&)>;

struct GradCheckResult {
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  double frac_within = 1.0;  // share of coordinates with rel error < tight
  std::string worst;         // "input[i][j]: analytic a, numeric n"

  bool passed(double max_tol = 1e-3, double share = 0.95) const;
  std::string summary() const;
};

// Compares reverse-mode gradients of f with central differences in double
// precision. Every input is differentiated; f must rebuild its graph from
// the inputs on each call and return a scalar.
//   rel = |a - n| / max(|a|, |n|, floor)
GradCheckResult grad_check(const ScalarFn& f, std::vector<TensorD> inputs, double step = 1e-4,
                           double tight = 1e-4, double floor = 1e-6);

// sum(x * w) for a fixed weight tensor: turns any output into a scalar
// without the cancellations of a plain sum (softmax rows sum to 1).
TensorD weighted_sum(const TensorD& x, const TensorD& w);

// One differentiable op on random inputs of the given shapes.
struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  std::function<TensorD(const std::vector<TensorD>&)> op;
};
std::vector<OpCase> op_gradient_cases();
GradCheckResult check_op(const OpCase& c);

// A full encoder conv block in training mode and a full decoder block
// (self-attention, cross-attention, feed-forward) in double precision.
GradCheckResult check_encoder_block(std::uint64_t seed);
GradCheckResult check_decoder_block(std::uint64_t seed);

// ---- random data ----

TensorD random_tensor_d(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0);
Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0);
// Overwrites every tensor of the store with U(lo, hi) draws.
void fill_uniform(ParamStore& store, std::uint64_t seed, double lo, double hi);

// Decoder sizes small enough for exhaustive property sweeps.
ModelConfig small_config(std::size_t vocab_size, std::size_t hidden = 16, std::size_t heads = 2,
                         std::size_t blocks = 2);

// Double-precision weights with U(-scale, scale) matrices and layer-norm
// gains in [0.5, 1.5]. The returned handles share storage with the struct,
// so perturbing a handle perturbs the weights.
decoder::AttentionWeights<double> random_attention_d(std::size_t d, Rng& rng, double scale = 0.5);
decoder::BlockWeights<double> random_block_d(std::size_t d, std::size_t ffn, Rng& rng, double scale = 0.5);
std::vector<TensorD> attention_tensors(const decoder::AttentionWeights<double>& w);
std::vector<TensorD> block_tensors(const decoder::BlockWeights<double>& w);

encoder::ConvBlockWeights<double> random_conv_block_d(std::size_t cin, std::size_t cout, Rng& rng);
std::vector<TensorD> conv_block_tensors(const encoder::ConvBlockWeights<double>& w);

// ---- decoder oracles ----

// Per-head loop evaluation of multi-head attention in double precision:
// projections, per-head scaled scores with the optional additive mask,
// softmax, weighted values, concatenation and the output projection.
std::vector<double> naive_attention(const Tensor& query_in, const Tensor& memory,
                                    const decoder::AttentionWeights<float>& w, std::size_t heads,
                                    const Tensor* mask = nullptr, double scale_override = 0.0);

// One random causality probe on a small random decoder: token j of a
// random sequence is replaced, and position-embedding gradients are taken
// from the logits of rows before j.
struct CausalityProbe {
  std::size_t n = 0, j = 0;
  double earlier_rows_diff = 0.0;     // max |logit change| over rows < j
  double later_rows_diff = 0.0;       // max |logit change| over rows >= j
  double future_grad = 0.0;           // max |d rows<j / d position[k]|, k >= j
  double past_grad = 0.0;             // same for k < j
};
CausalityProbe causality_probe(std::uint64_t seed);

// ---- decoding ----

// Scorer with fixed per-prefix logits: a map from the prefix after soc to
// a logit row, with `fallback` for prefixes not in the map.
class TableScorer : public infer::StepScorer {
 public:
  TableScorer(std::size_t vocab, std::vector<float> fallback) : vocab_(vocab), fallback_(std::move(fallback)) {}
  void set(TokenIds tail, std::vector<float> logits) { table_[std::move(tail)] = std::move(logits); }
  std::size_t vocab_size() const override { return vocab_; }
  std::vector<float> next_logits(std::span<const std::int32_t> prefix) override;
  std::size_t calls = 0;

 private:
  std::size_t vocab_;
  std::vector<float> fallback_;
  std::map<TokenIds, std::vector<float>> table_;
};

// Logits drawn from a stream keyed by the prefix, optionally rounded to a
// coarse grid so that ties are common.
class HashScorer : public infer::StepScorer {
 public:
  HashScorer(std::size_t vocab, std::uint64_t seed, double grid = 0.0) : vocab_(vocab), seed_(seed), grid_(grid) {}
  std::size_t vocab_size() const override { return vocab_; }
  std::vector<float> next_logits(std::span<const std::int32_t> prefix) override;

 private:
  std::size_t vocab_;
  std::uint64_t seed_;
  double grid_;
};

// Two tokens then eoc: soc->1 is likelier than soc->2, but every
// continuation of 1 is flat while 2 is almost surely followed by eoc.
// Vocabulary {0: soc, 1, 2, 3: eoc}.
TableScorer trap_scorer();

// Best finished sequence by exhaustive enumeration (sum of log-softmax),
// with sequences forced to end at max_tokens.
infer::Hypothesis exhaustive_best(infer::StepScorer& scorer, const infer::DecodeOptions& opts);

// Greedy and width-1 beam on a small random model with random features.
struct BeamGreedyCase {
  infer::Hypothesis greedy, beam;
};
BeamGreedyCase beam_greedy_case(std::uint64_t seed);

// ---- pretrained sources ----

// Toy pretrained checkpoint for a captioning model with config `full`: a
// language-model-only decoder with two fewer vocabulary rows, merged with
// encoder tensors. Every value is distinct from any fresh initialization.
checkpoint::Checkpoint toy_pretrained_source(const ModelConfig& full, std::uint64_t seed);

// ---- filesystem ----

// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag);
  ~ScratchDir();
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace capforge::testing
