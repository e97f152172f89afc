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

#include "capforge/model_config.h"

#include <json.hpp>

#include "capforge/error.h"

namespace capforge {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw InvariantError("model config: " + m); };
  if (num_blocks == 0) fail("num_blocks must be positive");
  if (num_heads == 0 || hidden == 0 || hidden % num_heads != 0)
    fail("hidden (" + std::to_string(hidden) + ") must be divisible by num_heads (" +
         std::to_string(num_heads) + ")");
  if (ffn_dim == 0) fail("ffn_dim must be positive");
  if (vocab_size == 0) fail("vocab_size must be positive");
  if (max_len + 2 > max_positions) fail("max_len + 2 exceeds max_positions");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (!(encoder_dropout >= 0.0 && encoder_dropout < 1.0)) fail("encoder_dropout must be in [0, 1)");
  for (std::size_t i = 0; i < encoder_channels.size(); ++i) {
    if (encoder_channels[i] == 0 || (i > 0 && encoder_channels[i] <= encoder_channels[i - 1]))
      fail("encoder channels must be strictly increasing");
  }
  if (input_mels != 64) fail("encoder expects 64 mel bins");
}

ModelConfig ModelConfig::from_preset(std::string_view name, std::size_t vocab_size) {
  ModelConfig c;
  c.preset = std::string(name);
  c.vocab_size = vocab_size;
  if (name == "tiny") {
    c.num_blocks = 2, c.num_heads = 2, c.hidden = 128;
  } else if (name == "mini") {
    c.num_blocks = 4, c.num_heads = 4, c.hidden = 256;
  } else if (name == "medium") {
    c.num_blocks = 6, c.num_heads = 8, c.hidden = 512;
  } else if (name == "base" || name == "roberta_base") {
    c.num_blocks = 12, c.num_heads = 12, c.hidden = 768;
  } else {
    throw InputError("unknown model preset '" + std::string(name) +
                     "' (expected tiny, mini, medium, base or roberta_base)");
  }
  c.ffn_dim = 4 * c.hidden;
  return c;
}

double default_base_lr(std::string_view preset) {
  return (preset == "base" || preset == "roberta_base") ? 5e-5 : 5e-4;
}

std::string model_config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["preset"] = c.preset;
  j["num_blocks"] = c.num_blocks;
  j["num_heads"] = c.num_heads;
  j["hidden"] = c.hidden;
  j["ffn_dim"] = c.ffn_dim;
  j["vocab_size"] = c.vocab_size;
  j["max_positions"] = c.max_positions;
  j["max_len"] = c.max_len;
  j["dropout"] = c.dropout;
  j["encoder_channels"] = c.encoder_channels;
  j["input_mels"] = c.input_mels;
  j["encoder_dropout"] = c.encoder_dropout;
  j["language_model_only"] = c.language_model_only;
  return j.dump();
}

ModelConfig model_config_from_json(std::string_view json_text) {
  try {
    const auto j = nlohmann::json::parse(json_text);
    ModelConfig c;
    c.preset = j.at("preset").get<std::string>();
    c.num_blocks = j.at("num_blocks").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_positions = j.at("max_positions").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.encoder_channels = j.at("encoder_channels").get<std::array<std::size_t, 4>>();
    c.input_mels = j.at("input_mels").get<std::size_t>();
    c.encoder_dropout = j.at("encoder_dropout").get<double>();
    c.language_model_only = j.value("language_model_only", false);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config JSON: ") + e.what());
  }
}

}  // namespace capforge
