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
#include <span>
#include <vector>

#include "capforge/model_config.h"
#include "capforge/params.h"
#include "capforge/tensor.h"

namespace capforge::decoder {

// Projections are stored [in x out] and applied as x * W + b.
template <typename S>
struct AttentionWeights {
  BasicTensor<S> wq, bq, wk, bk, wv, bv;  // the learnable query/key/value maps
  BasicTensor<S> wo, bo;                  // output projection over concatenated heads
  BasicTensor<S> ln_gamma, ln_beta;       // add & norm
};

template <typename S>
struct FeedForwardWeights {
  BasicTensor<S> w1, b1;  // [D x ffn_dim]
  BasicTensor<S> w2, b2;  // [ffn_dim x D]
  BasicTensor<S> ln_gamma, ln_beta;
};

template <typename S>
struct BlockWeights {
  AttentionWeights<S> self_attn;
  AttentionWeights<S> cross_attn;  // undefined tensors in language-model-only mode
  FeedForwardWeights<S> ffn;
};

template <typename S>
struct DecoderWeights {
  BasicTensor<S> word_embedding;      // [V x D], also the output classifier
  BasicTensor<S> position_embedding;  // [max_positions x D]
  BasicTensor<S> emb_ln_gamma, emb_ln_beta;
  std::vector<BlockWeights<S>> blocks;
  BasicTensor<S> output_bias;  // [V]
};

// Dropout settings threaded through a forward pass.
struct Context {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
};

inline constexpr double kMaskedScore = -1e30;

DecoderWeights<float> register_weights(ParamStore& store, const ModelConfig& config);

// Additive N x N mask: 0 where key j <= query i (and ids[j] != pad_id),
// kMaskedScore elsewhere.
template <typename S>
BasicTensor<S> causal_mask(std::size_t n, std::span<const std::int32_t> ids = {},
                           std::int32_t pad_id = -1);

// Multi-head scaled dot-product attention without residual or norm:
//   head_h = Softmax((Q Wq)_h (K Wk)_h^T / sqrt(d) + mask) (V Wv)_h
// with d = D / heads and heads taken as contiguous column slices; the
// concatenated heads go through Wo. Queries come from `query_in`, keys and
// values from `memory`.
template <typename S>
BasicTensor<S> attention(const BasicTensor<S>& query_in, const BasicTensor<S>& memory,
                         const AttentionWeights<S>& w, std::size_t heads,
                         const BasicTensor<S>* additive_mask = nullptr);

// LayerNorm(dropout(attention(H, H, mask)) + H). The mask must block every
// key j > i; anything else is rejected.
template <typename S>
BasicTensor<S> causal_self_attention(const BasicTensor<S>& h, const AttentionWeights<S>& w,
                                     std::size_t heads, const BasicTensor<S>& mask,
                                     const Context& ctx);

// LayerNorm(dropout(attention(H, I, I)) + H): queries from the decoder
// state, keys and values from the encoder features.
template <typename S>
BasicTensor<S> cross_attention(const BasicTensor<S>& h, const BasicTensor<S>& features,
                               const AttentionWeights<S>& w, std::size_t heads,
                               const Context& ctx);

// LayerNorm(dropout(FC2(GELU(FC1(x)))) + x).
template <typename S>
BasicTensor<S> feed_forward(const BasicTensor<S>& x, const FeedForwardWeights<S>& w,
                            const Context& ctx);

// self-attention -> cross-attention (skipped when `features` is undefined)
// -> feed-forward.
template <typename S>
BasicTensor<S> block_forward(const BasicTensor<S>& h, const BasicTensor<S>& features,
                             const BlockWeights<S>& w, std::size_t heads,
                             const BasicTensor<S>& mask, const Context& ctx);

// Token + learned position embeddings, embedding LayerNorm, the block
// stack, then logits = H * E^T + b with E the word-embedding matrix.
// Returns [N x V].
template <typename S>
BasicTensor<S> forward(std::span<const std::int32_t> ids, const BasicTensor<S>& features,
                       const DecoderWeights<S>& w, const ModelConfig& config, const Context& ctx,
                       std::int32_t pad_id = -1);

// Incremental eval-mode decoding with cached keys and values. step(t)
// consumes token t at the next position and returns the logits for the
// position after it; the result equals the last row of forward() on the
// whole prefix. Copyable, so beam hypotheses can fork a session.
class DecodeSession {
 public:
  DecodeSession(const DecoderWeights<float>& weights, const ModelConfig& config,
                const Tensor& features);

  std::vector<float> step(std::int32_t token);
  std::size_t length() const { return length_; }

 private:
  const DecoderWeights<float>* weights_;
  const ModelConfig* config_;
  std::vector<std::vector<float>> self_keys_, self_values_;  // per block, row-major
  std::vector<Tensor> cross_keys_, cross_values_;
  std::size_t length_ = 0;
};

}  // namespace capforge::decoder
