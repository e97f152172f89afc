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
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capforge/checkpoint.h"
#include "capforge/dataset.h"
#include "capforge/dsp.h"
#include "capforge/model.h"
#include "capforge/params.h"

namespace capforge::trainer {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 5;
  std::size_t decay_period = 10;  // 0 disables decay
  double decay_factor = 0.1;
  double base_lr = 5e-4;
  std::uint64_t seed = 0;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
  bool spec_augment = true;
  bool freeze_encoder = false;
  std::string select_on = "val_loss";  // or "cider"
  dsp::SpecAugmentPolicy augment;

  // Throws InputError when inconsistent.
  void validate() const;
};

// Linear warmup to base_lr over the warmup epochs, then decay by
// decay_factor every decay_period epochs counted from the first epoch after
// warmup: with the defaults, lr(e) = base * e / 5 for e <= 5 and
// base * 0.1^floor((e - 6) / 10) afterwards. Epochs are 1-based.
double lr_schedule(std::size_t epoch, const TrainConfig& cfg);

// Bias-corrected Adam without weight decay; moments kept in double.
class Adam {
 public:
  explicit Adam(std::vector<NamedTensor*> params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

  // InvariantError if a parameter has no gradient.
  void step(double lr);
  std::size_t steps() const { return t_; }

 private:
  std::vector<NamedTensor*> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(std::span<NamedTensor* const> params, double max_norm);

// Index of the best value; ties go to the earliest.
std::size_t select_best(std::span<const double> values, bool higher_is_better = false);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::optional<double> val_cider;

  std::string to_json() const;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;  // 1-based
  checkpoint::Checkpoint best;
};

// Teacher-forced training: inputs ids[0..N-2], targets ids[1..N-1], loss
// averaged over all target tokens of a batch.
class Trainer {
 public:
  Trainer(CaptionModel& model, const Vocabulary& vocab, TrainConfig cfg);

  // Fills clip.features with eval-mode encoder output when the encoder is
  // frozen; no-op otherwise.
  void cache_features(std::vector<Clip>& data);

  // One pass over every (clip, caption) pair; returns the token-mean loss.
  double train_epoch(const std::vector<Clip>& data, std::size_t epoch);
  // Eval-mode token-mean loss.
  double evaluate_loss(const std::vector<Clip>& data);
  // Greedy captions scored with CIDEr-D against each clip's captions.
  double evaluate_cider(const std::vector<Clip>& data);

  // Trains for cfg.epochs, keeps the best epoch by the selection criterion
  // and leaves the model holding those weights.
  TrainResult fit(std::vector<Clip>& train, std::vector<Clip>& val,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

  const TrainConfig& config() const { return cfg_; }
  std::size_t optimizer_steps() const { return adam_.steps(); }

 private:
  Tensor features_for(const Clip& clip, bool training, Rng* aug_rng, Rng* drop_rng);

  CaptionModel& model_;
  const Vocabulary& vocab_;
  TrainConfig cfg_;
  Adam adam_;
};

}  // namespace capforge::trainer
