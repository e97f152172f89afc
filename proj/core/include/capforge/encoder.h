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

#include <array>
#include <cstddef>

#include "capforge/dsp.h"
#include "capforge/model_config.h"
#include "capforge/params.h"
#include "capforge/tensor.h"

namespace capforge::encoder {

// Two 3x3 conv -> batch norm -> ReLU layers followed by a 2x2 average pool.
template <typename S>
struct ConvBlockWeights {
  BasicTensor<S> conv1;  // [C_out x C_in x 3 x 3], no bias
  BasicTensor<S> bn1_gamma, bn1_beta;
  BatchNormStats<S> bn1_stats;
  BasicTensor<S> conv2;  // [C_out x C_out x 3 x 3]
  BasicTensor<S> bn2_gamma, bn2_beta;
  BatchNormStats<S> bn2_stats;
};

template <typename S>
struct EncoderWeights {
  std::array<ConvBlockWeights<S>, 4> blocks;
  BasicTensor<S> fc1_w, fc1_b;  // [C_last x D], [D]
  BasicTensor<S> fc2_w, fc2_b;  // [D x D], [D]
};

// Number of encoder frames for T input frames: four floor halvings.
inline std::size_t output_frames(std::size_t input_frames) {
  std::size_t t = input_frames;
  for (int i = 0; i < 4; ++i) t /= 2;
  return t;
}
inline constexpr std::size_t kMinInputFrames = 16;

// Registers every encoder tensor under "encoder." and returns handles.
EncoderWeights<float> register_weights(ParamStore& store, const ModelConfig& config);

// Input [C_in x T x F] -> [C_out x T/2 x F/2].
template <typename S>
BasicTensor<S> conv_block(const BasicTensor<S>& x, ConvBlockWeights<S>& w, bool training);

// Log-mel [T x 64] -> features [T/16 x D]. In training mode batch norm uses
// per-clip statistics and dropout(rate) runs between the two FC layers.
template <typename S>
BasicTensor<S> forward(const BasicTensor<S>& log_mel, EncoderWeights<S>& w, bool training,
                       double dropout_rate, Rng* rng);

Tensor spectrogram_tensor(const dsp::LogMelSpectrogram& spec);

}  // namespace capforge::encoder
