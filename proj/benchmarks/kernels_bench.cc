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


#include <benchmark/benchmark.h>

#include <cmath>

#include "capforge/dsp.h"
#include "capforge/model.h"
#include "capforge/params.h"
#include "capforge/rng.h"
#include "capforge/tensor.h"

namespace {

using namespace capforge;

Tensor random(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.uniform_double() * 2 - 1);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random({n, n}, rng), b = random({n, n}, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256)->Arg(512);

// One 3x3 convolution at the width of the first encoder blocks.
void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const Tensor x = random({c, 128, 64}, rng), k = random({c, c, 3, 3}, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k));
  state.SetItemsProcessed(state.iterations() * 2 * c * c * 9 * 128 * 64);
}
BENCHMARK(BM_Conv2d)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

// Log-mel features for ten seconds of noise.
void BM_LogMel(benchmark::State& state) {
  Rng rng(3);
  dsp::AudioClip clip;
  clip.samples.resize(10 * dsp::kSampleRate);
  for (auto& s : clip.samples) s = static_cast<float>(rng.uniform_double() * 2 - 1);
  for (auto _ : state) benchmark::DoNotOptimize(dsp::log_mel(clip));
  state.SetItemsProcessed(state.iterations() * clip.samples.size());
}
BENCHMARK(BM_LogMel)->Unit(benchmark::kMillisecond);

// Incremental decoding of a 20-token caption over 39 feature frames.
void BM_DecodeStep(benchmark::State& state) {
  CaptionModel model(ModelConfig::from_preset("tiny", 1000));
  initialize_randomly(model.params(), 4);
  Rng rng(5);
  const Tensor features = random({39, model.config().hidden}, rng);
  for (auto _ : state) {
    auto session = model.start_session(features);
    for (std::int32_t t = 0; t < 20; ++t) benchmark::DoNotOptimize(session.step(t));
  }
  state.SetItemsProcessed(state.iterations() * 20);
}
BENCHMARK(BM_DecodeStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
