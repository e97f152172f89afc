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


#include "support.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <unistd.h>

#include "capforge/model.h"

namespace capforge::testing {

bool GradCheckResult::passed(double max_tol, double share) const {
  return coordinates > 0 && max_rel_error < max_tol && frac_within >= share;
}

std::string GradCheckResult::summary() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu coords, max rel %.3g, %.1f%% < tight", coordinates, max_rel_error,
                100.0 * frac_within);
  std::string s = buf;
  if (!worst.empty()) s += ", worst " + worst;
  return s;
}

GradCheckResult grad_check(const ScalarFn& f, std::vector<TensorD> inputs, double step, double tight,
                           double floor) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  const TensorD out = f(inputs);
  out.backward();

  GradCheckResult r;
  std::size_t good = 0;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    TensorD& x = inputs[i];
    const std::vector<double> analytic = x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                                       : std::vector<double>(x.numel(), 0.0);
    auto values = x.mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + step;
      const double up = f(inputs).item();
      values[j] = saved - step;
      const double down = f(inputs).item();
      values[j] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[j];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++r.coordinates;
      if (rel < tight) ++good;
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        std::ostringstream w;
        w << "input[" << i << "][" << j << "]: analytic " << a << ", numeric " << numeric;
        r.worst = w.str();
      }
    }
  }
  r.frac_within = r.coordinates ? static_cast<double>(good) / r.coordinates : 0.0;
  return r;
}

TensorD weighted_sum(const TensorD& x, const TensorD& w) { return sum(mul(x, w)); }

TensorD random_tensor_d(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform_double();
  return TensorD(std::move(shape), std::move(v));
}

Tensor random_tensor(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(lo + (hi - lo) * rng.uniform_double());
  return Tensor(std::move(shape), std::move(v));
}

void fill_uniform(ParamStore& store, std::uint64_t seed, double lo, double hi) {
  Rng root(seed);
  for (auto& e : store.entries()) {
    Rng rng = root.split(e.name);
    for (auto& x : e.tensor.mutable_data()) x = static_cast<float>(lo + (hi - lo) * rng.uniform_double());
  }
}

decoder::AttentionWeights<double> random_attention_d(std::size_t d, Rng& rng, double scale) {
  decoder::AttentionWeights<double> w;
  w.wq = random_tensor_d({d, d}, rng, -scale, scale);
  w.bq = random_tensor_d({d}, rng, -0.1, 0.1);
  w.wk = random_tensor_d({d, d}, rng, -scale, scale);
  w.bk = random_tensor_d({d}, rng, -0.1, 0.1);
  w.wv = random_tensor_d({d, d}, rng, -scale, scale);
  w.bv = random_tensor_d({d}, rng, -0.1, 0.1);
  w.wo = random_tensor_d({d, d}, rng, -scale, scale);
  w.bo = random_tensor_d({d}, rng, -0.1, 0.1);
  w.ln_gamma = random_tensor_d({d}, rng, 0.5, 1.5);
  w.ln_beta = random_tensor_d({d}, rng, -0.1, 0.1);
  return w;
}

decoder::BlockWeights<double> random_block_d(std::size_t d, std::size_t ffn, Rng& rng, double scale) {
  decoder::BlockWeights<double> b;
  b.self_attn = random_attention_d(d, rng, scale);
  b.cross_attn = random_attention_d(d, rng, scale);
  b.ffn.w1 = random_tensor_d({d, ffn}, rng, -scale, scale);
  b.ffn.b1 = random_tensor_d({ffn}, rng, -0.1, 0.1);
  b.ffn.w2 = random_tensor_d({ffn, d}, rng, -scale, scale);
  b.ffn.b2 = random_tensor_d({d}, rng, -0.1, 0.1);
  b.ffn.ln_gamma = random_tensor_d({d}, rng, 0.5, 1.5);
  b.ffn.ln_beta = random_tensor_d({d}, rng, -0.1, 0.1);
  return b;
}

std::vector<TensorD> attention_tensors(const decoder::AttentionWeights<double>& w) {
  return {w.wq, w.bq, w.wk, w.bk, w.wv, w.bv, w.wo, w.bo, w.ln_gamma, w.ln_beta};
}

std::vector<TensorD> block_tensors(const decoder::BlockWeights<double>& w) {
  auto out = attention_tensors(w.self_attn);
  for (const auto& t : attention_tensors(w.cross_attn)) out.push_back(t);
  for (const auto& t : {w.ffn.w1, w.ffn.b1, w.ffn.w2, w.ffn.b2, w.ffn.ln_gamma, w.ffn.ln_beta}) out.push_back(t);
  return out;
}

encoder::ConvBlockWeights<double> random_conv_block_d(std::size_t cin, std::size_t cout, Rng& rng) {
  encoder::ConvBlockWeights<double> w;
  const double b1 = std::sqrt(6.0 / (cin * 9)), b2 = std::sqrt(6.0 / (cout * 9));
  w.conv1 = random_tensor_d({cout, cin, 3, 3}, rng, -b1, b1);
  w.bn1_gamma = random_tensor_d({cout}, rng, 0.5, 1.5);
  w.bn1_beta = random_tensor_d({cout}, rng, -0.1, 0.1);
  w.bn1_stats = {TensorD::zeros({cout}), TensorD::full({cout}, 1.0)};
  w.conv2 = random_tensor_d({cout, cout, 3, 3}, rng, -b2, b2);
  w.bn2_gamma = random_tensor_d({cout}, rng, 0.5, 1.5);
  w.bn2_beta = random_tensor_d({cout}, rng, -0.1, 0.1);
  w.bn2_stats = {TensorD::zeros({cout}), TensorD::full({cout}, 1.0)};
  return w;
}

std::vector<TensorD> conv_block_tensors(const encoder::ConvBlockWeights<double>& w) {
  return {w.conv1, w.bn1_gamma, w.bn1_beta, w.conv2, w.bn2_gamma, w.bn2_beta};
}

std::vector<double> naive_attention(const Tensor& query_in, const Tensor& memory,
                                    const decoder::AttentionWeights<float>& w, std::size_t heads,
                                    const Tensor* mask, double scale_override) {
  const std::size_t n = query_in.dim(0), m = memory.dim(0), d = query_in.dim(1), dh = d / heads;
  auto project = [&](const Tensor& x, const Tensor& wt, const Tensor& b, std::size_t rows) {
    std::vector<double> out(rows * d);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        double acc = b.data()[c];
        for (std::size_t k = 0; k < d; ++k) acc += double(x.data()[i * d + k]) * wt.data()[k * d + c];
        out[i * d + c] = acc;
      }
    return out;
  };
  const auto q = project(query_in, w.wq, w.bq, n);
  const auto k = project(memory, w.wk, w.bk, m);
  const auto v = project(memory, w.wv, w.bv, m);
  const double scale = scale_override > 0.0 ? scale_override : 1.0 / std::sqrt(double(dh));
  std::vector<double> concat(n * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> score(m);
      double top = -1e300;
      for (std::size_t j = 0; j < m; ++j) {
        double dot = 0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) dot += q[i * d + c] * k[j * d + c];
        score[j] = dot * scale + (mask ? double(mask->data()[i * m + j]) : 0.0);
        top = std::max(top, score[j]);
      }
      double z = 0;
      for (auto& s : score) z += (s = std::exp(s - top));
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) concat[i * d + c] += score[j] / z * v[j * d + c];
    }
  }
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      double acc = w.bo.data()[c];
      for (std::size_t k2 = 0; k2 < d; ++k2) acc += concat[i * d + k2] * w.wo.data()[k2 * d + c];
      out[i * d + c] = acc;
    }
  return out;
}

CausalityProbe causality_probe(std::uint64_t seed) {
  Rng rng(seed);
  static const std::size_t widths[] = {8, 12, 16};
  const std::size_t d = widths[rng.below(3)];
  std::size_t heads = 1 + rng.below(4);
  while (d % heads != 0) --heads;
  const std::size_t vocab = 5 + rng.below(20);
  ModelConfig cfg = small_config(vocab, d, heads, 1 + rng.below(3));
  ParamStore store;
  const auto w = decoder::register_weights(store, cfg);
  fill_uniform(store, seed, -0.5, 0.5);
  // Gains near zero would flatten the logits and hide real leaks.
  for (auto& e : store.entries())
    if (e.name.ends_with("gamma"))
      for (auto& v : e.tensor.mutable_data()) v = static_cast<float>(0.5 + rng.uniform_double());

  CausalityProbe p;
  p.n = 2 + rng.below(9);
  p.j = 1 + rng.below(p.n - 1);
  const Tensor features = random_tensor({1 + rng.below(4), d}, rng);
  std::vector<std::int32_t> ids(p.n);
  for (auto& id : ids) id = static_cast<std::int32_t>(rng.below(vocab));
  auto changed = ids;
  changed[p.j] = static_cast<std::int32_t>((ids[p.j] + 1 + rng.below(vocab - 1)) % vocab);

  const decoder::Context ctx;
  Tensor a, b;
  {
    NoGradGuard no_grad;
    a = decoder::forward<float>(ids, features, w, cfg, ctx);
    b = decoder::forward<float>(changed, features, w, cfg, ctx);
  }
  for (std::size_t i = 0; i < p.n; ++i)
    for (std::size_t c = 0; c < vocab; ++c) {
      const double diff = std::abs(double(a.data()[i * vocab + c]) - b.data()[i * vocab + c]);
      (i < p.j ? p.earlier_rows_diff : p.later_rows_diff) =
          std::max(i < p.j ? p.earlier_rows_diff : p.later_rows_diff, diff);
    }

  store.zero_grad();
  const Tensor logits = decoder::forward<float>(ids, features, w, cfg, ctx);
  const Tensor head = slice_rows(logits, 0, p.j);
  sum(mul(head, random_tensor(head.shape(), rng))).backward();
  const auto g = w.position_embedding.grad();
  for (std::size_t k = 0; k < p.n; ++k)
    for (std::size_t c = 0; c < d; ++c) {
      const double v = std::abs(double(g[k * d + c]));
      (k < p.j ? p.past_grad : p.future_grad) = std::max(k < p.j ? p.past_grad : p.future_grad, v);
    }
  return p;
}

std::vector<float> TableScorer::next_logits(std::span<const std::int32_t> prefix) {
  ++calls;
  const TokenIds tail(prefix.begin() + 1, prefix.end());
  auto it = table_.find(tail);
  return it == table_.end() ? fallback_ : it->second;
}

std::vector<float> HashScorer::next_logits(std::span<const std::int32_t> prefix) {
  Rng rng(seed_);
  for (auto t : prefix) rng = rng.split(static_cast<std::uint64_t>(t));
  std::vector<float> out(vocab_);
  for (auto& v : out) {
    double x = rng.uniform_double() * 6.0 - 3.0;
    if (grid_ > 0) x = std::round(x / grid_) * grid_;
    v = static_cast<float>(x);
  }
  return out;
}

TableScorer trap_scorer() {
  const float lo = -30.0f;
  TableScorer s(4, {lo, 0.0f, 0.0f, 0.0f});
  s.set({}, {lo, std::log(0.6f), std::log(0.4f), lo});
  s.set({1}, {lo, 0.0f, 0.0f, 0.0f});
  s.set({2}, {lo, std::log(0.05f), std::log(0.05f), std::log(0.9f)});
  return s;
}

namespace {

void enumerate(infer::StepScorer& scorer, const infer::DecodeOptions& opts, infer::Hypothesis& h,
               infer::Hypothesis& best) {
  const auto lp = infer::log_softmax(scorer.next_logits(h.ids));
  for (std::size_t t = 0; t < lp.size(); ++t) {
    h.ids.push_back(static_cast<std::int32_t>(t));
    h.score += lp[t];
    if (static_cast<std::int32_t>(t) == opts.eoc_id || h.generated() >= opts.max_tokens) {
      if (!best.finished || h.score > best.score) {
        best = h;
        best.finished = true;
      }
    } else {
      enumerate(scorer, opts, h, best);
    }
    h.score -= lp[t];
    h.ids.pop_back();
  }
}

}  // namespace

infer::Hypothesis exhaustive_best(infer::StepScorer& scorer, const infer::DecodeOptions& opts) {
  infer::Hypothesis h{{opts.soc_id}, 0.0, false}, best;
  enumerate(scorer, opts, h, best);
  return best;
}

BeamGreedyCase beam_greedy_case(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t vocab = 6 + rng.below(30);
  ModelConfig cfg = small_config(vocab, 16, 2, 1 + rng.below(2));
  CaptionModel model(cfg);
  fill_uniform(model.params(), seed, -0.6, 0.6);
  const Tensor features = random_tensor({1 + rng.below(6), cfg.hidden}, rng);
  infer::DecodeOptions opts{static_cast<std::int32_t>(vocab - 2), static_cast<std::int32_t>(vocab - 1),
                            5 + rng.below(20)};
  BeamGreedyCase out;
  infer::ModelScorer a(model, features);
  out.greedy = infer::greedy_decode(a, opts);
  infer::ModelScorer b(model, features);
  out.beam = infer::beam_search(b, 1, opts).front();
  return out;
}

checkpoint::Checkpoint toy_pretrained_source(const ModelConfig& full, std::uint64_t seed) {
  ModelConfig lm_cfg = full;
  lm_cfg.vocab_size = full.vocab_size - 2;
  lm_cfg.language_model_only = true;
  CaptionModel lm(lm_cfg);
  fill_uniform(lm.params(), seed, -0.3, 0.3);
  CaptionModel enc(full);
  fill_uniform(enc.params(), seed + 1, 0.1, 0.9);
  checkpoint::Checkpoint encoder_part;
  for (const auto& t : checkpoint::from_params(enc.params()).tensors)
    if (t.name.starts_with("encoder.")) encoder_part.tensors.push_back(t);
  return checkpoint::merge(checkpoint::from_params(lm.params()), encoder_part);
}

GradCheckResult check_op(const OpCase& c) {
  Rng rng(fnv1a64(c.name));
  std::vector<TensorD> inputs;
  for (const auto& s : c.shapes) inputs.push_back(random_tensor_d(s, rng));
  const TensorD probe = c.op(inputs);
  const TensorD w = random_tensor_d(probe.shape(), rng);
  return grad_check([&](const std::vector<TensorD>& in) { return weighted_sum(c.op(in), w); }, inputs);
}

std::vector<OpCase> op_gradient_cases() {
  using V = const std::vector<TensorD>&;
  return {
      {"matmul", {{3, 4}, {4, 2}}, [](V x) { return matmul(x[0], x[1]); }},
      {"matmul_transposed", {{3, 4}, {5, 4}}, [](V x) { return matmul_transposed(x[0], x[1]); }},
      {"transpose", {{3, 4}}, [](V x) { return transpose(x[0]); }},
      {"add", {{2, 3}, {2, 3}}, [](V x) { return add(x[0], x[1]); }},
      {"sub", {{2, 3}, {2, 3}}, [](V x) { return sub(x[0], x[1]); }},
      {"mul", {{2, 3}, {2, 3}}, [](V x) { return mul(x[0], x[1]); }},
      {"scale", {{2, 3}}, [](V x) { return scale(x[0], 0.37); }},
      {"add_bias", {{2, 3, 4}, {4}}, [](V x) { return add_bias(x[0], x[1]); }},
      {"linear", {{3, 4}, {4, 5}, {5}}, [](V x) { return linear(x[0], x[1], x[2]); }},
      {"relu", {{4, 5}}, [](V x) { return relu(x[0]); }},
      {"gelu", {{4, 5}}, [](V x) { return gelu(x[0]); }},
      {"softmax_last", {{3, 5}}, [](V x) { return softmax(scale(x[0], 3.0), -1); }},
      {"softmax_first", {{3, 5}}, [](V x) { return softmax(x[0], 0); }},
      {"log_softmax", {{3, 5}}, [](V x) { return log_softmax(x[0]); }},
      {"layer_norm", {{3, 6}, {6}, {6}}, [](V x) { return layer_norm(x[0], x[1], x[2]); }},
      {"conv2d", {{2, 5, 4}, {3, 2, 3, 3}}, [](V x) { return conv2d(x[0], x[1]); }},
      {"avg_pool2d", {{2, 5, 4}}, [](V x) { return avg_pool2d(x[0]); }},
      {"batch_norm_train", {{2, 3, 4}, {2}, {2}},
       [](V x) {
         BatchNormStats<double> s{TensorD::zeros({2}), TensorD::full({2}, 1.0)};
         return batch_norm(x[0], x[1], x[2], s, true);
       }},
      {"batch_norm_eval", {{2, 3, 4}, {2}, {2}},
       [](V x) {
         BatchNormStats<double> s{TensorD({2}, {0.3, -0.2}), TensorD({2}, {1.5, 0.7})};
         return batch_norm(x[0], x[1], x[2], s, false);
       }},
      {"dropout", {{4, 6}},
       [](V x) {
         Rng r(99);
         return dropout(x[0], 0.3, true, r);
       }},
      {"sum", {{3, 4}}, [](V x) { return sum(x[0]); }},
      {"mean", {{3, 4}}, [](V x) { return mean(x[0]); }},
      {"mean_axis", {{3, 4, 2}}, [](V x) { return mean_axis(x[0], 1); }},
      {"reshape", {{3, 4}}, [](V x) { return reshape(x[0], {2, 6}); }},
      {"slice_cols", {{3, 6}}, [](V x) { return slice_cols(x[0], 1, 4); }},
      {"concat_cols", {{3, 2}, {3, 4}}, [](V x) { return concat_cols<double>({x[0], x[1]}); }},
      {"slice_rows", {{5, 3}}, [](V x) { return slice_rows(x[0], 1, 3); }},
      {"embedding", {{5, 3}},
       [](V x) {
         static const std::vector<std::int32_t> ids{4, 1, 4, 0};
         return embedding(x[0], ids);
       }},
      {"cross_entropy", {{4, 6}},
       [](V x) {
         static const std::vector<std::int32_t> t{5, -1, 0, 2};
         return cross_entropy(x[0], t, -1);
       }},
  };
}

GradCheckResult check_encoder_block(std::uint64_t seed) {
  Rng rng(seed);
  auto w = random_conv_block_d(2, 3, rng);
  const TensorD x = random_tensor_d({2, 8, 6}, rng);
  const TensorD out_w = random_tensor_d(encoder::conv_block(x, w, true).shape(), rng);
  auto inputs = conv_block_tensors(w);
  inputs.insert(inputs.begin(), x);
  return grad_check(
      [&](const std::vector<TensorD>& in) { return weighted_sum(encoder::conv_block(in[0], w, true), out_w); },
      inputs);
}

GradCheckResult check_decoder_block(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t d = 8;
  const auto w = random_block_d(d, 16, rng);
  const TensorD h = random_tensor_d({4, d}, rng);
  const TensorD feat = random_tensor_d({3, d}, rng);
  const TensorD mask = decoder::causal_mask<double>(4);
  const TensorD out_w = random_tensor_d({4, d}, rng);
  auto inputs = block_tensors(w);
  inputs.insert(inputs.begin(), {h, feat});
  return grad_check(
      [&](const std::vector<TensorD>& in) {
        return weighted_sum(decoder::block_forward(in[0], in[1], w, 2, mask, {}), out_w);
      },
      inputs);
}

ModelConfig small_config(std::size_t vocab_size, std::size_t hidden, std::size_t heads, std::size_t blocks) {
  ModelConfig c;
  c.preset = "custom";
  c.num_blocks = blocks;
  c.num_heads = heads;
  c.hidden = hidden;
  c.ffn_dim = 4 * hidden;
  c.vocab_size = vocab_size;
  c.max_positions = 64;
  c.encoder_channels = {4, 8, 16, 32};
  c.validate();
  return c;
}

ScratchDir::ScratchDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("capforge_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

ScratchDir::~ScratchDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

}  // namespace capforge::testing
