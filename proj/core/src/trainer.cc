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


#include "capforge/trainer.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "capforge/error.h"
#include "capforge/infer.h"
#include "capforge/metrics.h"
#include "json.hpp"

namespace capforge::trainer {

void TrainConfig::validate() const {
  if (!(base_lr > 0.0)) throw InputError("base_lr must be positive");
  if (epochs == 0) throw InputError("epochs must be at least 1");
  if (warmup_epochs >= epochs) {
    throw InputError("warmup_epochs (" + std::to_string(warmup_epochs) + ") must be below epochs (" +
                     std::to_string(epochs) + ")");
  }
  if (batch_size == 0) throw InputError("batch_size must be at least 1");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw InputError("decay_factor must be in (0, 1]");
  if (grad_clip < 0.0) throw InputError("grad_clip must be non-negative");
  if (select_on != "val_loss" && select_on != "cider") {
    throw InputError("select_on must be val_loss or cider, got " + select_on);
  }
}

double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch < 1) throw InputError("lr_schedule: epochs are 1-based");
  // Both branches are written so that decimal settings give decimal
  // results: 5e-4 * (3 / 5) rounds to 3e-4 where 5e-4 * 3 / 5 does not.
  if (epoch <= cfg.warmup_epochs) {
    return cfg.base_lr * (static_cast<double>(epoch) / static_cast<double>(cfg.warmup_epochs));
  }
  if (cfg.decay_period == 0) return cfg.base_lr;
  const auto decays = static_cast<double>((epoch - cfg.warmup_epochs - 1) / cfg.decay_period);
  // A factor like 0.1 is applied as division by the exact integer 10^k.
  const double divisor = std::round(1.0 / cfg.decay_factor);
  if (divisor * cfg.decay_factor == 1.0) return cfg.base_lr / std::pow(divisor, decays);
  return cfg.base_lr * std::pow(cfg.decay_factor, decays);
}

// ---- Adam ------------------------------------------------------------------

Adam::Adam(std::vector<NamedTensor*> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto* p : params_) {
    m_.emplace_back(p->tensor.numel(), 0.0);
    v_.emplace_back(p->tensor.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  for (const auto* p : params_)
    if (!p->tensor.has_grad()) throw InvariantError("adam: no gradient for " + p->name);
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto w = params_[k]->tensor.mutable_data();
    const auto g = params_[k]->tensor.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      const double m_hat = m[i] / c1, v_hat = v[i] / c2;
      w[i] = static_cast<float>(w[i] - lr * m_hat / (std::sqrt(v_hat) + eps_));
    }
  }
}

double clip_grad_norm(std::span<NamedTensor* const> params, double max_norm) {
  double sq = 0.0;
  for (const auto* p : params)
    if (p->tensor.has_grad())
      for (float g : p->tensor.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto* p : params)
      if (p->tensor.has_grad())
        for (float& g : p->tensor.mutable_grad()) g = static_cast<float>(g * s);
  }
  return norm;
}

std::size_t select_best(std::span<const double> values, bool higher_is_better) {
  if (values.empty()) throw InvariantError("select_best: no values");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    const bool better = higher_is_better ? values[i] > values[best] : values[i] < values[best];
    if (better) best = i;
  }
  return best;
}

std::string EpochRecord::to_json() const {
  nlohmann::ordered_json j{{"epoch", epoch}, {"lr", lr}, {"train_loss", train_loss}, {"val_loss", val_loss}};
  if (val_cider) j["val_cider"] = *val_cider;
  return j.dump();
}

// ---- Trainer ---------------------------------------------------------------

namespace {

std::vector<NamedTensor*> prepare_params(CaptionModel& model, const TrainConfig& cfg) {
  cfg.validate();
  if (model.has_encoder()) model.set_encoder_frozen(cfg.freeze_encoder);
  return model.params().trainable();
}

struct Pair {
  std::size_t clip, caption;
};

std::vector<Pair> all_pairs(const std::vector<Clip>& data) {
  std::vector<Pair> pairs;
  for (std::size_t c = 0; c < data.size(); ++c)
    for (std::size_t k = 0; k < data[c].tokens.size(); ++k) pairs.push_back({c, k});
  return pairs;
}

}  // namespace

Trainer::Trainer(CaptionModel& model, const Vocabulary& vocab, TrainConfig cfg)
    : model_(model), vocab_(vocab), cfg_(std::move(cfg)), adam_(prepare_params(model, cfg_)) {
  if (vocab.size() != model.config().vocab_size) {
    throw InputError("vocabulary has " + std::to_string(vocab.size()) + " tokens but the model expects " +
                     std::to_string(model.config().vocab_size));
  }
}

void Trainer::cache_features(std::vector<Clip>& data) {
  if (!model_.has_encoder() || !cfg_.freeze_encoder) return;
  for (auto& c : data)
    if (!c.features.defined()) c.features = model_.encode_eval(c.mel);
}

Tensor Trainer::features_for(const Clip& clip, bool training, Rng* aug_rng, Rng* drop_rng) {
  if (!model_.has_encoder()) return Tensor();
  if (cfg_.freeze_encoder || !training) {
    if (clip.features.defined()) return clip.features;
    return model_.encode_eval(clip.mel);
  }
  if (cfg_.spec_augment && aug_rng != nullptr) {
    return model_.encode(dsp::spec_augment(clip.mel, cfg_.augment, *aug_rng), true, drop_rng);
  }
  return model_.encode(clip.mel, true, drop_rng);
}

double Trainer::train_epoch(const std::vector<Clip>& data, std::size_t epoch) {
  auto pairs = all_pairs(data);
  if (pairs.empty()) throw InputError("training set has no captions");
  const Rng epoch_rng = Rng(cfg_.seed).split("epoch").split(epoch);
  Rng shuffle_rng = epoch_rng.split("shuffle");
  Rng aug_rng = epoch_rng.split("specaug");
  Rng drop_rng = epoch_rng.split("dropout");
  shuffle_rng.shuffle(std::span<Pair>(pairs));
  const double lr = lr_schedule(epoch, cfg_);
  auto params = model_.params().trainable();

  double loss_sum = 0.0, token_sum = 0.0;
  for (std::size_t start = 0; start < pairs.size(); start += cfg_.batch_size) {
    const std::size_t end = std::min(pairs.size(), start + cfg_.batch_size);
    double batch_tokens = 0.0;
    for (std::size_t i = start; i < end; ++i) {
      batch_tokens += static_cast<double>(data[pairs[i].clip].tokens[pairs[i].caption].size() - 1);
    }
    if (batch_tokens == 0.0) throw InputError("batch has no target tokens");
    model_.params().zero_grad();
    for (std::size_t i = start; i < end; ++i) {
      const Clip& clip = data[pairs[i].clip];
      const TokenIds& ids = clip.tokens[pairs[i].caption];
      if (ids.size() < 2) throw InputError(clip.key + ": caption has no target tokens");
      const std::span<const std::int32_t> inputs(ids.data(), ids.size() - 1);
      const std::span<const std::int32_t> targets(ids.data() + 1, ids.size() - 1);
      const Tensor features = features_for(clip, true, &aug_rng, &drop_rng);
      const Tensor logits = model_.decode(inputs, features, true, &drop_rng, vocab_.pad_id());
      const Tensor loss = cross_entropy(logits, targets, vocab_.pad_id());
      const double n = static_cast<double>(targets.size());
      scale(loss, static_cast<float>(n / batch_tokens)).backward();
      loss_sum += static_cast<double>(loss.item()) * n;
    }
    token_sum += batch_tokens;
    if (cfg_.grad_clip > 0.0) clip_grad_norm(params, cfg_.grad_clip);
    adam_.step(lr);
  }
  return loss_sum / token_sum;
}

double Trainer::evaluate_loss(const std::vector<Clip>& data) {
  NoGradGuard no_grad;
  double loss_sum = 0.0, token_sum = 0.0;
  for (const auto& clip : data) {
    if (clip.tokens.empty()) continue;
    const Tensor features = features_for(clip, false, nullptr, nullptr);
    for (const auto& ids : clip.tokens) {
      const std::span<const std::int32_t> inputs(ids.data(), ids.size() - 1);
      const std::span<const std::int32_t> targets(ids.data() + 1, ids.size() - 1);
      const Tensor logits = model_.decode(inputs, features, false, nullptr, vocab_.pad_id());
      const double n = static_cast<double>(targets.size());
      loss_sum += static_cast<double>(cross_entropy(logits, targets, vocab_.pad_id()).item()) * n;
      token_sum += n;
    }
  }
  if (token_sum == 0.0) throw InputError("evaluation set has no captions");
  return loss_sum / token_sum;
}

double Trainer::evaluate_cider(const std::vector<Clip>& data) {
  metrics::Corpus corpus;
  for (const auto& clip : data) {
    const Tensor features = features_for(clip, false, nullptr, nullptr);
    const auto cap = infer::caption_features(model_, vocab_, features, 1);
    metrics::EvalItem item{clip.key, metric_tokens(cap.text), {}};
    for (const auto& ref : clip.captions) item.references.push_back(metric_tokens(ref));
    if (!item.references.empty()) corpus.push_back(std::move(item));
  }
  return metrics::cider_d(corpus);
}

TrainResult Trainer::fit(std::vector<Clip>& train, std::vector<Clip>& val,
                         const std::function<void(const EpochRecord&)>& on_epoch) {
  if (train.empty()) throw InputError("training set is empty");
  if (val.empty()) throw InputError("validation set is empty");
  cache_features(train);
  cache_features(val);
  const bool by_cider = cfg_.select_on == "cider";
  TrainResult result;
  std::vector<double> criterion;
  for (std::size_t epoch = 1; epoch <= cfg_.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_schedule(epoch, cfg_);
    rec.train_loss = train_epoch(train, epoch);
    rec.val_loss = evaluate_loss(val);
    if (by_cider) rec.val_cider = evaluate_cider(val);
    criterion.push_back(by_cider ? *rec.val_cider : rec.val_loss);
    if (select_best(criterion, by_cider) == criterion.size() - 1) {
      result.best_epoch = epoch;
      result.best = checkpoint::from_params(model_.params());
    }
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  checkpoint::load_into(model_.params(), result.best);
  return result;
}

}  // namespace capforge::trainer
