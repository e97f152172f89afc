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

#include "capforge/decoder.h"

#include <cmath>
#include <numeric>
#include <string>

#include "capforge/error.h"

namespace capforge::decoder {

namespace {

AttentionWeights<float> register_attention(ParamStore& store, const std::string& p, std::size_t d) {
  AttentionWeights<float> w;
  w.wq = store.add(p + "wq", {d, d}, InitKind::kBertNormal);
  w.bq = store.add(p + "bq", {d}, InitKind::kZeros);
  w.wk = store.add(p + "wk", {d, d}, InitKind::kBertNormal);
  w.bk = store.add(p + "bk", {d}, InitKind::kZeros);
  w.wv = store.add(p + "wv", {d, d}, InitKind::kBertNormal);
  w.bv = store.add(p + "bv", {d}, InitKind::kZeros);
  w.wo = store.add(p + "wo", {d, d}, InitKind::kBertNormal);
  w.bo = store.add(p + "bo", {d}, InitKind::kZeros);
  w.ln_gamma = store.add(p + "ln.gamma", {d}, InitKind::kOnes);
  w.ln_beta = store.add(p + "ln.beta", {d}, InitKind::kZeros);
  return w;
}

// Attention over already-projected q [N x D], k and v [M x D].
template <typename S>
BasicTensor<S> attend(const BasicTensor<S>& q, const BasicTensor<S>& k, const BasicTensor<S>& v,
                      std::size_t heads, const BasicTensor<S>* mask) {
  const std::size_t d = q.dim(1), dh = d / heads;
  const S inv_sqrt = S{1} / std::sqrt(static_cast<S>(dh));
  std::vector<BasicTensor<S>> parts;
  parts.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = heads == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
    const auto kh = heads == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
    const auto vh = heads == 1 ? v : slice_cols(v, h * dh, (h + 1) * dh);
    auto scores = scale(matmul_transposed(qh, kh), inv_sqrt);
    if (mask != nullptr) scores = add(scores, *mask);
    parts.push_back(matmul(softmax(scores, -1), vh));
  }
  return heads == 1 ? parts.front() : concat_cols(parts);
}

template <typename S>
BasicTensor<S> maybe_dropout(const BasicTensor<S>& x, const Context& ctx) {
  if (!ctx.training || ctx.dropout <= 0.0) return x;
  if (ctx.rng == nullptr) throw InvariantError("decoder: training-mode dropout needs an rng");
  return dropout(x, ctx.dropout, true, *ctx.rng);
}

}  // namespace

DecoderWeights<float> register_weights(ParamStore& store, const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.hidden, v = config.vocab_size;
  DecoderWeights<float> w;
  w.word_embedding = store.add("decoder.embeddings.word", {v, d}, InitKind::kBertNormal);
  w.position_embedding = store.add("decoder.embeddings.position", {config.max_positions, d}, InitKind::kBertNormal);
  w.emb_ln_gamma = store.add("decoder.embeddings.ln.gamma", {d}, InitKind::kOnes);
  w.emb_ln_beta = store.add("decoder.embeddings.ln.beta", {d}, InitKind::kZeros);
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    const std::string p = "decoder.block" + std::to_string(b) + ".";
    BlockWeights<float> blk;
    blk.self_attn = register_attention(store, p + "selfattn.", d);
    if (!config.language_model_only) blk.cross_attn = register_attention(store, p + "crossattn.", d);
    blk.ffn.w1 = store.add(p + "ffn.w1", {d, config.ffn_dim}, InitKind::kBertNormal);
    blk.ffn.b1 = store.add(p + "ffn.b1", {config.ffn_dim}, InitKind::kZeros);
    blk.ffn.w2 = store.add(p + "ffn.w2", {config.ffn_dim, d}, InitKind::kBertNormal);
    blk.ffn.b2 = store.add(p + "ffn.b2", {d}, InitKind::kZeros);
    blk.ffn.ln_gamma = store.add(p + "ffn.ln.gamma", {d}, InitKind::kOnes);
    blk.ffn.ln_beta = store.add(p + "ffn.ln.beta", {d}, InitKind::kZeros);
    w.blocks.push_back(std::move(blk));
  }
  w.output_bias = store.add("decoder.output.bias", {v}, InitKind::kZeros);
  return w;
}

template <typename S>
BasicTensor<S> causal_mask(std::size_t n, std::span<const std::int32_t> ids, std::int32_t pad_id) {
  std::vector<S> m(n * n, S{0});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const bool future = j > i;
      const bool pad = !ids.empty() && ids[j] == pad_id;
      if (future || pad) m[i * n + j] = static_cast<S>(kMaskedScore);
    }
  return BasicTensor<S>({n, n}, std::move(m));
}

template <typename S>
BasicTensor<S> attention(const BasicTensor<S>& query_in, const BasicTensor<S>& memory,
                         const AttentionWeights<S>& w, std::size_t heads,
                         const BasicTensor<S>* additive_mask) {
  if (query_in.rank() != 2 || memory.rank() != 2 || query_in.dim(1) != memory.dim(1)) {
    throw ShapeError("attention: hidden size mismatch between " + shape_str(query_in.shape()) +
                     " and " + shape_str(memory.shape()));
  }
  const std::size_t d = query_in.dim(1);
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: hidden " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  if (additive_mask != nullptr &&
      additive_mask->shape() != Shape{query_in.dim(0), memory.dim(0)}) {
    throw ShapeError("attention: mask shape " + shape_str(additive_mask->shape()));
  }
  const auto q = linear(query_in, w.wq, w.bq);
  const auto k = linear(memory, w.wk, w.bk);
  const auto v = linear(memory, w.wv, w.bv);
  return linear(attend(q, k, v, heads, additive_mask), w.wo, w.bo);
}

template <typename S>
BasicTensor<S> causal_self_attention(const BasicTensor<S>& h, const AttentionWeights<S>& w,
                                     std::size_t heads, const BasicTensor<S>& mask,
                                     const Context& ctx) {
  const std::size_t n = h.dim(0);
  if (mask.shape() != Shape{n, n}) throw ShapeError("self-attention: mask must be N x N");
  const auto m = mask.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (m[i * n + j] > static_cast<S>(kMaskedScore / 2)) {
        throw InvariantError("self-attention: mask lets position " + std::to_string(i) +
                             " see future position " + std::to_string(j));
      }
  auto out = maybe_dropout(attention(h, h, w, heads, &mask), ctx);
  return layer_norm(add(out, h), w.ln_gamma, w.ln_beta);
}

template <typename S>
BasicTensor<S> cross_attention(const BasicTensor<S>& h, const BasicTensor<S>& features,
                               const AttentionWeights<S>& w, std::size_t heads,
                               const Context& ctx) {
  if (features.rank() != 2 || features.dim(1) != h.dim(1)) {
    throw ShapeError("cross-attention: decoder state " + shape_str(h.shape()) +
                     " and encoder output " + shape_str(features.shape()) + " differ in D");
  }
  auto out = maybe_dropout(attention<S>(h, features, w, heads, nullptr), ctx);
  return layer_norm(add(out, h), w.ln_gamma, w.ln_beta);
}

template <typename S>
BasicTensor<S> feed_forward(const BasicTensor<S>& x, const FeedForwardWeights<S>& w,
                            const Context& ctx) {
  auto inner = gelu(linear(x, w.w1, w.b1));
  auto out = maybe_dropout(linear(inner, w.w2, w.b2), ctx);
  return layer_norm(add(out, x), w.ln_gamma, w.ln_beta);
}

template <typename S>
BasicTensor<S> block_forward(const BasicTensor<S>& h, const BasicTensor<S>& features,
                             const BlockWeights<S>& w, std::size_t heads,
                             const BasicTensor<S>& mask, const Context& ctx) {
  auto x = causal_self_attention(h, w.self_attn, heads, mask, ctx);
  if (features.defined()) {
    if (!w.cross_attn.wq.defined()) throw InvariantError("decoder block has no cross-attention weights");
    x = cross_attention(x, features, w.cross_attn, heads, ctx);
  }
  return feed_forward(x, w.ffn, ctx);
}

template <typename S>
BasicTensor<S> forward(std::span<const std::int32_t> ids, const BasicTensor<S>& features,
                       const DecoderWeights<S>& w, const ModelConfig& config, const Context& ctx,
                       std::int32_t pad_id) {
  const std::size_t n = ids.size();
  if (n == 0) throw ShapeError("decoder: empty token sequence");
  if (n > config.max_positions) {
    throw ShapeError("decoder: " + std::to_string(n) + " tokens exceed " +
                     std::to_string(config.max_positions) + " positions");
  }
  if (!config.language_model_only && !features.defined()) {
    throw InvariantError("decoder: encoder features required");
  }
  std::vector<std::int32_t> positions(n);
  std::iota(positions.begin(), positions.end(), 0);
  auto x = add(embedding(w.word_embedding, ids), embedding(w.position_embedding, std::span<const std::int32_t>(positions)));
  x = maybe_dropout(layer_norm(x, w.emb_ln_gamma, w.emb_ln_beta), ctx);
  const auto mask = causal_mask<S>(n, ids, pad_id);
  const BasicTensor<S> memory = config.language_model_only ? BasicTensor<S>() : features;
  for (const auto& blk : w.blocks) x = block_forward(x, memory, blk, config.num_heads, mask, ctx);
  return add_bias(matmul_transposed(x, w.word_embedding), w.output_bias);
}

// ---- DecodeSession ---------------------------------------------------------

DecodeSession::DecodeSession(const DecoderWeights<float>& weights, const ModelConfig& config,
                             const Tensor& features)
    : weights_(&weights), config_(&config) {
  NoGradGuard no_grad;
  const std::size_t blocks = weights.blocks.size();
  self_keys_.resize(blocks);
  self_values_.resize(blocks);
  if (!config.language_model_only) {
    if (!features.defined() || features.rank() != 2 || features.dim(1) != config.hidden) {
      throw ShapeError("decode session: encoder features must be [T' x " +
                       std::to_string(config.hidden) + "]");
    }
    for (const auto& blk : weights.blocks) {
      cross_keys_.push_back(linear(features, blk.cross_attn.wk, blk.cross_attn.bk));
      cross_values_.push_back(linear(features, blk.cross_attn.wv, blk.cross_attn.bv));
    }
  }
}

std::vector<float> DecodeSession::step(std::int32_t token) {
  NoGradGuard no_grad;
  const auto& w = *weights_;
  const std::size_t d = config_->hidden, heads = config_->num_heads;
  if (length_ >= config_->max_positions) throw ShapeError("decode session: out of positions");
  const std::int32_t ids[1] = {token};
  const std::int32_t pos[1] = {static_cast<std::int32_t>(length_)};
  auto x = add(embedding(w.word_embedding, std::span<const std::int32_t>(ids)),
               embedding(w.position_embedding, std::span<const std::int32_t>(pos)));
  x = layer_norm(x, w.emb_ln_gamma, w.emb_ln_beta);
  const std::size_t n = length_ + 1;
  for (std::size_t b = 0; b < w.blocks.size(); ++b) {
    const auto& blk = w.blocks[b];
    const auto& sa = blk.self_attn;
    const auto q = linear(x, sa.wq, sa.bq);
    const auto k_new = linear(x, sa.wk, sa.bk);
    const auto v_new = linear(x, sa.wv, sa.bv);
    self_keys_[b].insert(self_keys_[b].end(), k_new.data().begin(), k_new.data().end());
    self_values_[b].insert(self_values_[b].end(), v_new.data().begin(), v_new.data().end());
    const Tensor keys({n, d}, self_keys_[b]);
    const Tensor values({n, d}, self_values_[b]);
    const auto attn = linear(attend(q, keys, values, heads, static_cast<const Tensor*>(nullptr)), sa.wo, sa.bo);
    x = layer_norm(add(attn, x), sa.ln_gamma, sa.ln_beta);
    if (!config_->language_model_only) {
      const auto& ca = blk.cross_attn;
      const auto cq = linear(x, ca.wq, ca.bq);
      const auto cross = linear(attend(cq, cross_keys_[b], cross_values_[b], heads, static_cast<const Tensor*>(nullptr)), ca.wo, ca.bo);
      x = layer_norm(add(cross, x), ca.ln_gamma, ca.ln_beta);
    }
    x = feed_forward(x, blk.ffn, Context{});
  }
  ++length_;
  const auto logits = add_bias(matmul_transposed(x, w.word_embedding), w.output_bias);
  return std::vector<float>(logits.data().begin(), logits.data().end());
}

// ---- instantiation ---------------------------------------------------------

#define CAPFORGE_INSTANTIATE_DECODER(S)                                                          \
  template BasicTensor<S> causal_mask<S>(std::size_t, std::span<const std::int32_t>,            \
                                         std::int32_t);                                          \
  template BasicTensor<S> attention(const BasicTensor<S>&, const BasicTensor<S>&,                \
                                    const AttentionWeights<S>&, std::size_t,                     \
                                    const BasicTensor<S>*);                                      \
  template BasicTensor<S> causal_self_attention(const BasicTensor<S>&,                           \
                                                const AttentionWeights<S>&, std::size_t,         \
                                                const BasicTensor<S>&, const Context&);          \
  template BasicTensor<S> cross_attention(const BasicTensor<S>&, const BasicTensor<S>&,          \
                                          const AttentionWeights<S>&, std::size_t,               \
                                          const Context&);                                       \
  template BasicTensor<S> feed_forward(const BasicTensor<S>&, const FeedForwardWeights<S>&,      \
                                       const Context&);                                          \
  template BasicTensor<S> block_forward(const BasicTensor<S>&, const BasicTensor<S>&,            \
                                        const BlockWeights<S>&, std::size_t,                     \
                                        const BasicTensor<S>&, const Context&);                  \
  template BasicTensor<S> forward(std::span<const std::int32_t>, const BasicTensor<S>&,          \
                                  const DecoderWeights<S>&, const ModelConfig&, const Context&,  \
                                  std::int32_t);

CAPFORGE_INSTANTIATE_DECODER(float)
CAPFORGE_INSTANTIATE_DECODER(double)

#undef CAPFORGE_INSTANTIATE_DECODER

}  // namespace capforge::decoder
