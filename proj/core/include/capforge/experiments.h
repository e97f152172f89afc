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
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "capforge/checkpoint.h"
#include "capforge/dataset.h"
#include "capforge/dsp.h"
#include "capforge/metrics.h"
#include "capforge/rng.h"
#include "capforge/trainer.h"

namespace capforge::experiments {

// ---- synthetic sound scenes ----

enum class Sound { kHighTone, kLowTone, kNoise, kBeeping, kSilence };
enum class Level { kNormal, kLoud, kQuiet };

struct Segment {
  Sound sound = Sound::kSilence;
  Level level = Level::kNormal;
  double seconds = 1.0;
};

struct Recipe {
  std::vector<Segment> segments;
};

struct GeneratorOptions {
  double min_seconds = 2.0;
  double max_seconds = 10.0;
  std::size_t max_segments = 3;
};

// "a loud high tone then noise then silence"
std::string describe(const Recipe& recipe);
Recipe random_recipe(Rng& rng, const GeneratorOptions& opts);
// High tone 2 kHz, low tone 250 Hz, white noise, 1 kHz beeps gated at 4 Hz.
dsp::AudioClip render(const Recipe& recipe, Rng& rng);

struct SyntheticItem {
  std::string name;  // clip_0000
  Recipe recipe;
  std::string caption;
  dsp::AudioClip audio;
};

// Pure function of (n, seed, opts).
std::vector<SyntheticItem> generate(std::size_t n, std::uint64_t seed, const GeneratorOptions& opts = {});
// Writes <dir>/<name>.wav and <dir>/manifest.jsonl; returns the manifest path.
std::filesystem::path write_dataset(const std::vector<SyntheticItem>& items, const std::filesystem::path& dir);

// BERT-style special tokens, the grammar words and one "##ing" piece. No
// <soc>/<eoc>: Vocabulary appends them, so a language model trained on the
// first size-2 rows lines up with the captioning vocabulary.
std::vector<std::string> toy_vocab_tokens();

// ---- toy decoder pretraining ----

struct PretrainConfig {
  std::string preset = "tiny";
  std::size_t sentences = 512;
  std::size_t epochs = 8;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

// Causal language model over grammar captions framed as [CLS] ... [SEP],
// exported under the decoder's parameter names with size-2 vocabulary rows.
checkpoint::Checkpoint pretrain_language_model(const Vocabulary& vocab, const PretrainConfig& cfg,
                                               const std::function<void(std::size_t, double)>& on_epoch = {});

// ---- seed sweeps and the init ablation ----

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for one run
};

// Metric name -> mean/std over runs, in table column order.
std::vector<std::pair<std::string, MeanStd>> summarize(const std::vector<metrics::MetricReport>& runs);
// Text table, values x100, one row per label.
std::string render_table(const std::vector<std::pair<std::string, std::vector<metrics::MetricReport>>>& rows);

struct AblationConfig {
  std::string preset = "tiny";
  std::size_t train_items = 32;
  std::size_t val_items = 8;
  std::size_t test_items = 8;
  std::uint64_t data_seed = 7;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t beam = 3;
  GeneratorOptions audio{2.0, 4.0, 3};
  trainer::TrainConfig train;  // seed is overwritten per run
  PretrainConfig pretrain;
};

struct ArmRun {
  std::uint64_t seed = 0;
  metrics::MetricReport report;
  checkpoint::AuditReport audit;
  std::size_t best_epoch = 0;
};

struct AblationReport {
  std::map<std::string, std::vector<ArmRun>> arms;  // "pretrained", "random"
  // Parameters whose init provenance differs between arms for the same
  // seed. Only decoder tensors outside cross-attention may appear.
  std::vector<std::string> init_differences;
  bool controlled = false;

  std::string to_json() const;
  std::string table() const;
};

AblationReport run_ablation(const AblationConfig& cfg, const std::filesystem::path& work_dir,
                            const std::function<void(const std::string&)>& log = {});

}  // namespace capforge::experiments
