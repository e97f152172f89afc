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

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "capforge/rng.h"

namespace capforge::dsp {

inline constexpr std::uint32_t kSampleRate = 32000;
inline constexpr std::size_t kWindowSize = 1024;
inline constexpr std::size_t kHopSize = 512;
inline constexpr std::size_t kFftBins = kWindowSize / 2 + 1;
inline constexpr std::size_t kMelBins = 64;
inline constexpr float kLogFloorEps = 1e-10f;

struct AudioClip {
  std::vector<float> samples;
  std::uint32_t sample_rate = kSampleRate;

  double duration_seconds() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

// Row-major [frames x bins] real matrix.
struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<float> values;

  float at(std::size_t t, std::size_t b) const { return values[t * bins + b]; }
  std::span<const float> row(std::size_t t) const {
    return std::span<const float>(values).subspan(t * bins, bins);
  }
};

// Natural-log mel energies, T x 64, time-major.
struct LogMelSpectrogram {
  std::size_t frames = 0;
  std::vector<float> values;
  float floor_value = 0.0f;  // log(floor_eps) used for compression

  static constexpr std::size_t bins = kMelBins;
  double frame_rate() const { return static_cast<double>(kSampleRate) / kHopSize; }
  float at(std::size_t t, std::size_t m) const { return values[t * kMelBins + m]; }
};

// ---- WAV ----

// Decodes a RIFF/WAVE PCM16 little-endian mono file. Samples are scaled by
// 1/32768. Throws FormatError for anything else, and InputError when the
// rate differs from `expected_rate` (no resampling).
AudioClip load_wav(std::span<const std::uint8_t> bytes,
                   std::uint32_t expected_rate = kSampleRate);
AudioClip read_wav_file(const std::filesystem::path& path,
                        std::uint32_t expected_rate = kSampleRate);
// PCM16 mono writer; samples are clamped to [-1, 1) and rounded.
std::vector<std::uint8_t> encode_wav(const AudioClip& clip);
void write_wav_file(const std::filesystem::path& path, const AudioClip& clip);

// ---- features ----

// w[n] = 0.5 (1 - cos(2 pi n / (N - 1))).
std::vector<float> hann_window(std::size_t size);

// Number of STFT frames for a clip of `length` samples: 1 + floor(len / 512).
inline std::size_t frame_count(std::size_t length) { return 1 + length / kHopSize; }

// Magnitude STFT with a 1024-point Hann window, hop 512, and 512 samples of
// reflect padding on each side. Result is T x 513.
Spectrogram stft_magnitude(const AudioClip& clip);

// 64 triangular filters equally spaced on the mel scale
// m = 2595 log10(1 + f / 700) between 0 Hz and 16 kHz, each peaking at 1.
class MelFilterbank {
 public:
  MelFilterbank();

  // Filter weights for filter m over the 513 FFT bins.
  std::span<const float> filter(std::size_t m) const {
    return std::span<const float>(weights_).subspan(m * kFftBins, kFftBins);
  }
  double center_hz(std::size_t m) const { return centers_hz_[m]; }

  static double hz_to_mel(double hz);
  static double mel_to_hz(double mel);

 private:
  std::vector<float> weights_;  // kMelBins x kFftBins
  std::vector<double> centers_hz_;
};

const MelFilterbank& default_filterbank();

// Projects the power (|X|^2) of a T x 513 magnitude spectrogram onto the
// mel filters, giving T x 64 non-negative energies.
Spectrogram mel_project(const Spectrogram& magnitude);

// ln(max(x, floor_eps)); rejects negative input.
LogMelSpectrogram log_compress(const Spectrogram& mel,
                               float floor_eps = kLogFloorEps);

// Full front end: stft -> mel -> log.
LogMelSpectrogram log_mel(const AudioClip& clip);

// ---- augmentation ----

struct SpecAugmentPolicy {
  std::size_t num_time_masks = 2;
  std::size_t max_time_width = 64;
  std::size_t num_freq_masks = 2;
  std::size_t max_freq_width = 8;
};

// Time and frequency masking (no time warping). Each mask draws a width
// uniformly from [0, max_width] (clamped to the extent) and a start
// position uniformly among the valid offsets; masked cells take the
// spectrogram's floor value. Returns a modified copy.
LogMelSpectrogram spec_augment(const LogMelSpectrogram& spec,
                               const SpecAugmentPolicy& policy, Rng& rng);

// ---- MELS1 feature cache ----
//
// Layout: ASCII "MELS1" (5 bytes), u32 T, u32 n_mels (= 64), then T * 64
// little-endian f32 values in time-major order. The log floor is not stored;
// readers assume log(1e-10).

std::vector<std::uint8_t> encode_mels(const LogMelSpectrogram& spec);
LogMelSpectrogram decode_mels(std::span<const std::uint8_t> bytes);
void write_mels_file(const std::filesystem::path& path,
                     const LogMelSpectrogram& spec);
LogMelSpectrogram read_mels_file(const std::filesystem::path& path);

// Loads either a MELS1 cache or a WAV file (by content sniffing).
LogMelSpectrogram load_features(const std::filesystem::path& path);

}  // namespace capforge::dsp
