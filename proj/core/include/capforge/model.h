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

#include "capforge/decoder.h"
#include "capforge/dsp.h"
#include "capforge/encoder.h"
#include "capforge/model_config.h"
#include "capforge/params.h"

namespace capforge {

// Encoder + decoder pair with a single parameter store. Not copyable: the
// weight structs hold handles into the store.
class CaptionModel {
 public:
  explicit CaptionModel(ModelConfig config);
  CaptionModel(const CaptionModel&) = delete;
  CaptionModel& operator=(const CaptionModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  encoder::EncoderWeights<float>& encoder_weights() { return encoder_; }
  const decoder::DecoderWeights<float>& decoder_weights() const { return decoder_; }
  decoder::DecoderWeights<float>& decoder_weights() { return decoder_; }
  bool has_encoder() const { return !config_.language_model_only; }

  // Frozen encoder parameters receive no gradient and are skipped by the
  // optimizer.
  void set_encoder_frozen(bool frozen);
  bool encoder_frozen() const { return encoder_frozen_; }

  // [T x 64] log-mel -> [T/16 x D].
  Tensor encode(const dsp::LogMelSpectrogram& spec, bool training, Rng* rng);
  // Eval-mode encoder output with no graph attached.
  Tensor encode_eval(const dsp::LogMelSpectrogram& spec);

  // [N x V] logits for ids; features may be undefined for a language model.
  Tensor decode(std::span<const std::int32_t> ids, const Tensor& features, bool training,
                Rng* rng, std::int32_t pad_id = -1) const;

  decoder::DecodeSession start_session(const Tensor& features) const;

 private:
  ModelConfig config_;
  ParamStore params_;
  encoder::EncoderWeights<float> encoder_;
  decoder::DecoderWeights<float> decoder_;
  bool encoder_frozen_ = false;
};

}  // namespace capforge
