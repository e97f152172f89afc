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

#include "capforge/encoder.h"

#include <string>

#include "capforge/error.h"

namespace capforge::encoder {

EncoderWeights<float> register_weights(ParamStore& store, const ModelConfig& config) {
  EncoderWeights<float> w;
  std::size_t in_ch = 1;
  for (std::size_t b = 0; b < 4; ++b) {
    const std::size_t out_ch = config.encoder_channels[b];
    const std::string p = "encoder.block" + std::to_string(b) + ".";
    auto& blk = w.blocks[b];
    blk.conv1 = store.add(p + "conv1.weight", {out_ch, in_ch, 3, 3}, InitKind::kKaimingUniform, true, in_ch * 9);
    blk.bn1_gamma = store.add(p + "bn1.gamma", {out_ch}, InitKind::kOnes);
    blk.bn1_beta = store.add(p + "bn1.beta", {out_ch}, InitKind::kZeros);
    blk.bn1_stats.running_mean = store.add(p + "bn1.running_mean", {out_ch}, InitKind::kZeros, false);
    blk.bn1_stats.running_var = store.add(p + "bn1.running_var", {out_ch}, InitKind::kOnes, false);
    blk.conv2 = store.add(p + "conv2.weight", {out_ch, out_ch, 3, 3}, InitKind::kKaimingUniform, true, out_ch * 9);
    blk.bn2_gamma = store.add(p + "bn2.gamma", {out_ch}, InitKind::kOnes);
    blk.bn2_beta = store.add(p + "bn2.beta", {out_ch}, InitKind::kZeros);
    blk.bn2_stats.running_mean = store.add(p + "bn2.running_mean", {out_ch}, InitKind::kZeros, false);
    blk.bn2_stats.running_var = store.add(p + "bn2.running_var", {out_ch}, InitKind::kOnes, false);
    in_ch = out_ch;
  }
  const std::size_t d = config.hidden;
  w.fc1_w = store.add("encoder.fc1.weight", {in_ch, d}, InitKind::kKaimingUniform, true, in_ch);
  w.fc1_b = store.add("encoder.fc1.bias", {d}, InitKind::kZeros);
  w.fc2_w = store.add("encoder.fc2.weight", {d, d}, InitKind::kKaimingUniform, true, d);
  w.fc2_b = store.add("encoder.fc2.bias", {d}, InitKind::kZeros);
  return w;
}

template <typename S>
BasicTensor<S> conv_block(const BasicTensor<S>& x, ConvBlockWeights<S>& w, bool training) {
  auto h = conv2d(x, w.conv1, 1);
  h = relu(batch_norm(h, w.bn1_gamma, w.bn1_beta, w.bn1_stats, training));
  h = conv2d(h, w.conv2, 1);
  h = relu(batch_norm(h, w.bn2_gamma, w.bn2_beta, w.bn2_stats, training));
  return avg_pool2d(h);
}

template <typename S>
BasicTensor<S> forward(const BasicTensor<S>& log_mel, EncoderWeights<S>& w, bool training,
                       double dropout_rate, Rng* rng) {
  if (log_mel.rank() != 2 || log_mel.dim(1) != dsp::kMelBins) {
    throw ShapeError("encoder: expected [T x 64] log-mel input, got " + shape_str(log_mel.shape()));
  }
  const std::size_t frames = log_mel.dim(0);
  if (frames < kMinInputFrames) {
    throw ShapeError("encoder: need at least 16 frames, got " + std::to_string(frames));
  }
  if (training && dropout_rate > 0.0 && rng == nullptr) {
    throw InvariantError("encoder: training-mode dropout needs an rng");
  }
  auto x = reshape(log_mel, {1, frames, dsp::kMelBins});
  for (auto& blk : w.blocks) x = conv_block(x, blk, training);
  // [C x T' x 4] -> mean over frequency -> [C x T'] -> [T' x C]
  auto pooled = transpose(mean_axis(x, 2));
  auto h = relu(linear(pooled, w.fc1_w, w.fc1_b));
  if (training && dropout_rate > 0.0) h = dropout(h, dropout_rate, true, *rng);
  return linear(h, w.fc2_w, w.fc2_b);
}

Tensor spectrogram_tensor(const dsp::LogMelSpectrogram& spec) {
  return Tensor({spec.frames, dsp::kMelBins}, spec.values);
}

template BasicTensor<float> conv_block(const BasicTensor<float>&, ConvBlockWeights<float>&, bool);
template BasicTensor<double> conv_block(const BasicTensor<double>&, ConvBlockWeights<double>&, bool);
template BasicTensor<float> forward(const BasicTensor<float>&, EncoderWeights<float>&, bool, double, Rng*);
template BasicTensor<double> forward(const BasicTensor<double>&, EncoderWeights<double>&, bool, double, Rng*);

}  // namespace capforge::encoder
