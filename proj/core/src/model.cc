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


#include "capforge/model.h"

#include "capforge/error.h"

namespace capforge {

CaptionModel::CaptionModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  if (!config_.language_model_only) encoder_ = encoder::register_weights(params_, config_);
  decoder_ = decoder::register_weights(params_, config_);
}

void CaptionModel::set_encoder_frozen(bool frozen) {
  encoder_frozen_ = frozen;
  for (auto& e : params_.entries()) {
    if (e.trainable && e.name.starts_with("encoder.")) e.tensor.set_requires_grad(!frozen);
  }
}

Tensor CaptionModel::encode(const dsp::LogMelSpectrogram& spec, bool training, Rng* rng) {
  if (!has_encoder()) throw InvariantError("encode: language-model-only config has no encoder");
  return encoder::forward(encoder::spectrogram_tensor(spec), encoder_, training,
                          config_.encoder_dropout, rng);
}

Tensor CaptionModel::encode_eval(const dsp::LogMelSpectrogram& spec) {
  NoGradGuard no_grad;
  return encode(spec, false, nullptr).detach();
}

Tensor CaptionModel::decode(std::span<const std::int32_t> ids, const Tensor& features,
                            bool training, Rng* rng, std::int32_t pad_id) const {
  decoder::Context ctx{training, config_.dropout, rng};
  return decoder::forward(ids, features, decoder_, config_, ctx, pad_id);
}

decoder::DecodeSession CaptionModel::start_session(const Tensor& features) const {
  return decoder::DecodeSession(decoder_, config_, features);
}

}  // namespace capforge
