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

#include <gtest/gtest.h>

#include <cmath>

#include "capforge/decoder.h"
#include "capforge/error.h"
#include "support.h"

namespace capforge {
namespace {

using decoder::AttentionWeights;

AttentionWeights<float> identity_attention(std::size_t d) {
  AttentionWeights<float> w;
  auto eye = [d] {
    Tensor t = Tensor::zeros({d, d});
    for (std::size_t i = 0; i < d; ++i) t.mutable_data()[i * d + i] = 1.0f;
    return t;
  };
  w.wq = eye(), w.wk = eye(), w.wv = eye(), w.wo = eye();
  w.bq = Tensor::zeros({d}), w.bk = Tensor::zeros({d}), w.bv = Tensor::zeros({d}), w.bo = Tensor::zeros({d});
  w.ln_gamma = Tensor::full({d}, 1.0f);
  w.ln_beta = Tensor::zeros({d});
  return w;
}

AttentionWeights<float> random_attention(std::size_t d, Rng& rng) {
  AttentionWeights<float> w;
  for (Tensor* t : {&w.wq, &w.wk, &w.wv, &w.wo}) *t = testing::random_tensor({d, d}, rng, -0.5, 0.5);
  for (Tensor* t : {&w.bq, &w.bk, &w.bv, &w.bo, &w.ln_beta}) *t = testing::random_tensor({d}, rng, -0.1, 0.1);
  w.ln_gamma = testing::random_tensor({d}, rng, 0.5, 1.5);
  return w;
}

// LayerNorm with unit gain and zero shift, eps 1e-12.
std::vector<double> plain_layer_norm(const std::vector<double>& row) {
  double mu = 0, var = 0;
  for (double v : row) mu += v;
  mu /= row.size();
  for (double v : row) var += (v - mu) * (v - mu);
  var /= row.size();
  std::vector<double> out;
  for (double v : row) out.push_back((v - mu) / std::sqrt(var + 1e-12));
  return out;
}

std::vector<double> row_of(const Tensor& t, std::size_t i) {
  const std::size_t d = t.dim(1);
  return {t.data().begin() + i * d, t.data().begin() + (i + 1) * d};
}

TEST(CrossAttention, SingleFeatureFrameIsCopiedToEveryRow) {
  Rng rng(1);
  const std::size_t d = 8;
  const auto w = identity_attention(d);
  const Tensor h = testing::random_tensor({5, d}, rng);
  const Tensor feat = testing::random_tensor({1, d}, rng);
  const Tensor att = decoder::attention(h, feat, w, 2);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(att.data()[i * d + c], feat.data()[c], 1e-6);

  const Tensor out = decoder::cross_attention(h, feat, w, 2, {});
  for (std::size_t i = 0; i < 5; ++i) {
    auto pre = row_of(h, i);
    for (std::size_t c = 0; c < d; ++c) pre[c] += feat.data()[c];
    const auto expect = plain_layer_norm(pre);
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out.data()[i * d + c], expect[c], 1e-5);
  }
}

TEST(CrossAttention, ZeroFeaturesLeaveOnlyTheResidual) {
  Rng rng(2);
  const std::size_t d = 8;
  const auto w = identity_attention(d);
  const Tensor h = testing::random_tensor({4, d}, rng);
  const Tensor out = decoder::cross_attention(h, Tensor::zeros({3, d}), w, 4, {});
  for (std::size_t i = 0; i < 4; ++i) {
    const auto expect = plain_layer_norm(row_of(h, i));
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out.data()[i * d + c], expect[c], 1e-5);
  }
}

TEST(CrossAttention, MatchesPerHeadLoop) {
  Rng rng(3);
  for (std::size_t heads : {1u, 2u, 4u}) {
    const std::size_t d = 12 - 12 % heads;
    const auto w = random_attention(d, rng);
    const Tensor h = testing::random_tensor({6, d}, rng);
    const Tensor feat = testing::random_tensor({5, d}, rng);
    const Tensor got = decoder::attention(h, feat, w, heads);
    const auto want = testing::naive_attention(h, feat, w, heads);
    for (std::size_t k = 0; k < want.size(); ++k) EXPECT_NEAR(got.data()[k], want[k], 1e-5) << heads;
  }
}

TEST(CrossAttention, ScalesByPerHeadWidth) {
  Rng rng(4);
  const std::size_t d = 16, heads = 4;
  const auto w = random_attention(d, rng);
  const Tensor h = testing::random_tensor({3, d}, rng, -2, 2);
  const Tensor feat = testing::random_tensor({4, d}, rng, -2, 2);
  const Tensor got = decoder::attention(h, feat, w, heads);
  const auto model_width = testing::naive_attention(h, feat, w, heads, nullptr, 1.0 / std::sqrt(double(d)));
  double gap = 0;
  for (std::size_t k = 0; k < model_width.size(); ++k) gap = std::max(gap, std::abs(got.data()[k] - model_width[k]));
  EXPECT_GT(gap, 1e-3);
}

TEST(CrossAttention, RejectsWidthMismatch) {
  Rng rng(5);
  const auto w = identity_attention(8);
  EXPECT_THROW(decoder::cross_attention(testing::random_tensor({2, 8}, rng), testing::random_tensor({2, 6}, rng), w, 2, {}),
               ShapeError);
}

TEST(SelfAttention, SingleTokenAttendsToItself) {
  Rng rng(6);
  const std::size_t d = 8;
  const auto w = identity_attention(d);
  const Tensor h = testing::random_tensor({1, d}, rng);
  const Tensor mask = decoder::causal_mask<float>(1);
  const Tensor att = decoder::attention(h, h, w, 2, &mask);
  for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(att.data()[c], h.data()[c], 1e-6);
  const Tensor out = decoder::causal_self_attention(h, w, 2, mask, {});
  auto pre = row_of(h, 0);
  for (auto& v : pre) v *= 2;
  const auto expect = plain_layer_norm(pre);
  for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out.data()[c], expect[c], 1e-5);
}

TEST(SelfAttention, EqualScoresSplitEvenly) {
  Rng rng(7);
  const std::size_t d = 8;
  auto w = identity_attention(d);
  w.wk = Tensor::zeros({d, d});
  const Tensor h = testing::random_tensor({2, d}, rng);
  const Tensor mask = decoder::causal_mask<float>(2);
  const Tensor att = decoder::attention(h, h, w, 1, &mask);
  for (std::size_t c = 0; c < d; ++c) {
    EXPECT_NEAR(att.data()[c], h.data()[c], 1e-6);
    EXPECT_NEAR(att.data()[d + c], 0.5 * (h.data()[c] + h.data()[d + c]), 1e-6);
  }
}

TEST(SelfAttention, MaskedAttentionMatchesPerHeadLoop) {
  Rng rng(8);
  const std::size_t d = 12;
  const auto w = random_attention(d, rng);
  const Tensor h = testing::random_tensor({7, d}, rng);
  const Tensor mask = decoder::causal_mask<float>(7);
  const Tensor got = decoder::attention(h, h, w, 3, &mask);
  const auto want = testing::naive_attention(h, h, w, 3, &mask);
  for (std::size_t k = 0; k < want.size(); ++k) EXPECT_NEAR(got.data()[k], want[k], 1e-5);
}

TEST(SelfAttention, RejectsMaskThatSeesTheFuture) {
  Rng rng(9);
  const auto w = identity_attention(8);
  const Tensor h = testing::random_tensor({3, 8}, rng);
  Tensor open = Tensor::zeros({3, 3});
  EXPECT_THROW(decoder::causal_self_attention(h, w, 2, open, {}), InvariantError);
  Tensor mask = decoder::causal_mask<float>(3);
  mask.mutable_data()[1 * 3 + 2] = 0.0f;
  EXPECT_THROW(decoder::causal_self_attention(h, w, 2, mask, {}), InvariantError);
}

TEST(CausalMask, PaddingKeysAreBlocked) {
  const std::vector<std::int32_t> ids{1, 5, 0, 0};
  const Tensor m = decoder::causal_mask<float>(4, ids, 0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const bool open = j <= i && ids[j] != 0;
      EXPECT_EQ(m.data()[i * 4 + j] == 0.0f, open) << i << "," << j;
    }
}

TEST(Causality, EditsNeverReachEarlierPositions) {
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    const auto p = testing::causality_probe(seed);
    EXPECT_LE(p.earlier_rows_diff, 1e-6) << "seed " << seed;
    EXPECT_LE(p.future_grad, 1e-6) << "seed " << seed;
    EXPECT_GT(p.later_rows_diff, 1e-4) << "seed " << seed;
    EXPECT_GT(p.past_grad, 1e-6) << "seed " << seed;
  }
}

struct SmallDecoder {
  ModelConfig cfg;
  ParamStore store;
  decoder::DecoderWeights<float> w;
  explicit SmallDecoder(std::uint64_t seed, std::size_t vocab = 11) : cfg(testing::small_config(vocab)) {
    w = decoder::register_weights(store, cfg);
    testing::fill_uniform(store, seed, -0.5, 0.5);
  }
};

TEST(Decoder, OutputShapeAndErrors) {
  SmallDecoder m(10);
  Rng rng(10);
  const Tensor feat = testing::random_tensor({3, m.cfg.hidden}, rng);
  const std::vector<std::int32_t> ids{1, 4, 2};
  EXPECT_EQ(decoder::forward<float>(ids, feat, m.w, m.cfg, {}).shape(), (Shape{3, 11}));
  EXPECT_THROW(decoder::forward<float>(std::vector<std::int32_t>{}, feat, m.w, m.cfg, {}), ShapeError);
  EXPECT_THROW(decoder::forward<float>(std::vector<std::int32_t>(65, 1), feat, m.w, m.cfg, {}), ShapeError);
  EXPECT_THROW(decoder::forward<float>(std::vector<std::int32_t>{1, 11}, feat, m.w, m.cfg, {}), ShapeError);
  EXPECT_THROW(decoder::forward<float>(ids, Tensor{}, m.w, m.cfg, {}), InvariantError);
}

TEST(Decoder, FeaturesInfluenceEveryPosition) {
  SmallDecoder m(11);
  Rng rng(11);
  const Tensor a = testing::random_tensor({4, m.cfg.hidden}, rng);
  const Tensor b = testing::random_tensor({4, m.cfg.hidden}, rng);
  const std::vector<std::int32_t> ids{1, 3, 3, 7, 2};
  const Tensor la = decoder::forward<float>(ids, a, m.w, m.cfg, {});
  const Tensor lb = decoder::forward<float>(ids, b, m.w, m.cfg, {});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    double diff = 0;
    for (std::size_t c = 0; c < 11; ++c) diff = std::max(diff, double(std::abs(la.data()[i * 11 + c] - lb.data()[i * 11 + c])));
    EXPECT_GT(diff, 1e-4) << i;
  }
}

TEST(Decoder, ClassifierSharesTheWordEmbedding) {
  SmallDecoder m(12);
  for (const auto& entry : m.store.entries()) EXPECT_EQ(entry.name.find("output.weight"), std::string::npos);
  EXPECT_TRUE(m.store.at("decoder.embeddings.word").tensor.shares_storage_with(m.w.word_embedding));

  // Logits are H E^T + b: recompute them from the final states implied by
  // a one-hot perturbation of a single embedding row that is never input.
  Rng rng(12);
  const Tensor feat = testing::random_tensor({2, m.cfg.hidden}, rng);
  const std::vector<std::int32_t> ids{1, 2, 3};
  const Tensor before = decoder::forward<float>(ids, feat, m.w, m.cfg, {});
  const std::size_t r = 9, d = m.cfg.hidden;
  std::vector<float> delta(d);
  for (auto& v : delta) v = static_cast<float>(rng.uniform_double() - 0.5);
  auto word = m.w.word_embedding;
  for (std::size_t c = 0; c < d; ++c) word.mutable_data()[r * d + c] += delta[c];
  const Tensor after = decoder::forward<float>(ids, feat, m.w, m.cfg, {});
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t c = 0; c < 11; ++c) {
      if (c == r) {
        EXPECT_NE(before.data()[i * 11 + c], after.data()[i * 11 + c]);
      } else {
        EXPECT_EQ(before.data()[i * 11 + c], after.data()[i * 11 + c]);
      }
    }
}

TEST(DecodeSession, MatchesFullForwardOnEveryPrefix) {
  for (std::uint64_t seed : {13u, 14u, 15u}) {
    SmallDecoder m(seed);
    Rng rng(seed);
    const Tensor feat = testing::random_tensor({1 + rng.below(5), m.cfg.hidden}, rng);
    decoder::DecodeSession session(m.w, m.cfg, feat);
    std::vector<std::int32_t> prefix;
    for (int step = 0; step < 12; ++step) {
      prefix.push_back(static_cast<std::int32_t>(rng.below(11)));
      const auto logits = session.step(prefix.back());
      const Tensor full = decoder::forward<float>(prefix, feat, m.w, m.cfg, {});
      const std::size_t last = prefix.size() - 1;
      for (std::size_t c = 0; c < 11; ++c) EXPECT_NEAR(logits[c], full.data()[last * 11 + c], 1e-5);
    }
    EXPECT_EQ(session.length(), 12u);
  }
}

TEST(DecodeSession, ForkedSessionsAreIndependent) {
  SmallDecoder m(16);
  Rng rng(16);
  const Tensor feat = testing::random_tensor({3, m.cfg.hidden}, rng);
  decoder::DecodeSession a(m.w, m.cfg, feat);
  a.step(1);
  decoder::DecodeSession b = a;
  const auto la = a.step(4);
  const auto lb = b.step(5);
  const auto la2 = decoder::DecodeSession(a).step(6);
  EXPECT_NE(la, lb);
  const Tensor full = decoder::forward<float>(std::vector<std::int32_t>{1, 5}, feat, m.w, m.cfg, {});
  for (std::size_t c = 0; c < 11; ++c) EXPECT_NEAR(lb[c], full.data()[11 + c], 1e-5);
  (void)la2;
}

TEST(Decoder, TrainingDropoutIsSeededAndEvalIsNot) {
  SmallDecoder m(17);
  Rng rng(17);
  const Tensor feat = testing::random_tensor({2, m.cfg.hidden}, rng);
  const std::vector<std::int32_t> ids{1, 2, 3, 4};
  Rng r1(5), r2(5);
  const Tensor a = decoder::forward<float>(ids, feat, m.w, m.cfg, {true, 0.2, &r1});
  const Tensor b = decoder::forward<float>(ids, feat, m.w, m.cfg, {true, 0.2, &r2});
  const Tensor e = decoder::forward<float>(ids, feat, m.w, m.cfg, {});
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  EXPECT_FALSE(std::equal(a.data().begin(), a.data().end(), e.data().begin()));
}

TEST(DecoderGradient, BlockMatchesFiniteDifferences) {
  const auto r = testing::check_decoder_block(18);
  EXPECT_TRUE(r.passed()) << r.summary();
}

TEST(DecoderGradient, FullStackMatchesFiniteDifferences) {
  Rng rng(19);
  const std::size_t d = 8, vocab = 7;
  ModelConfig cfg = testing::small_config(vocab, d, 2, 2);
  cfg.max_positions = 6;
  decoder::DecoderWeights<double> w;
  w.word_embedding = testing::random_tensor_d({vocab, d}, rng);
  w.position_embedding = testing::random_tensor_d({6, d}, rng);
  w.emb_ln_gamma = testing::random_tensor_d({d}, rng, 0.5, 1.5);
  w.emb_ln_beta = testing::random_tensor_d({d}, rng, -0.1, 0.1);
  for (int b = 0; b < 2; ++b) w.blocks.push_back(testing::random_block_d(d, cfg.ffn_dim, rng));
  w.output_bias = testing::random_tensor_d({vocab}, rng, -0.1, 0.1);
  const TensorD feat = testing::random_tensor_d({2, d}, rng);
  const std::vector<std::int32_t> ids{1, 3, 3, 6};
  const TensorD out_w = testing::random_tensor_d({4, vocab}, rng);
  std::vector<TensorD> inputs{w.word_embedding, w.position_embedding, w.emb_ln_gamma, w.emb_ln_beta, w.output_bias, feat};
  for (const auto& t : testing::block_tensors(w.blocks[0])) inputs.push_back(t);
  const auto r = testing::grad_check(
      [&](const std::vector<TensorD>&) {
        return testing::weighted_sum(decoder::forward<double>(ids, feat, w, cfg, {}), out_w);
      },
      inputs);
  EXPECT_TRUE(r.passed()) << r.summary();
}

}  // namespace
}  // namespace capforge
