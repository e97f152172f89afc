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
#include <string>
#include <string_view>

namespace capforge {

// Decoder layout presets plus the encoder channel plan.
struct ModelConfig {
  std::string preset = "custom";
  std::size_t num_blocks = 2;
  std::size_t num_heads = 2;
  std::size_t hidden = 128;
  std::size_t ffn_dim = 512;  // 4 * hidden unless overridden
  std::size_t vocab_size = 0;
  std::size_t max_positions = 512;
  std::size_t max_len = 50;  // generated tokens at inference
  double dropout = 0.2;

  std::array<std::size_t, 4> encoder_channels{64, 128, 256, 512};
  std::size_t input_mels = 64;
  double encoder_dropout = 0.2;

  // Causal LM without audio: no encoder and no cross-attention sub-layers.
  // Used to produce toy "pretrained" decoder weights.
  bool language_model_only = false;

  std::size_t head_dim() const { return hidden / num_heads; }

  // Throws InvariantError when the configuration is inconsistent.
  void validate() const;

  // tiny(2,2,128) mini(4,4,256) medium(6,8,512) base(12,12,768)
  // roberta_base(12,12,768). Throws InputError for unknown names.
  static ModelConfig from_preset(std::string_view name, std::size_t vocab_size);
};

// Initial learning rate used for a preset: 5e-5 for the 768-wide models,
// 5e-4 otherwise.
double default_base_lr(std::string_view preset);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(std::string_view json_text);

}  // namespace capforge
