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

#include "capforge/dsp.h"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <numbers>
#include <string>

#include "capforge/bytes.h"
#include "capforge/error.h"

namespace capforge::dsp {

// ---- WAV -------------------------------------------------------------------

namespace {

bool tag_is(std::span<const std::uint8_t> in, std::size_t at, const char* tag) {
  return in.size() >= at + 4 && std::memcmp(in.data() + at, tag, 4) == 0;
}

}  // namespace

AudioClip load_wav(std::span<const std::uint8_t> in, std::uint32_t expected_rate) {
  if (in.size() < 12 || !tag_is(in, 0, "RIFF") || !tag_is(in, 8, "WAVE")) {
    throw FormatError("not a RIFF/WAVE file");
  }
  bool have_fmt = false;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= in.size()) {
    const std::uint32_t chunk_size = bytes::get_u32(in, pos + 4);
    const std::size_t body = pos + 8;
    if (body + chunk_size > in.size()) {
      throw FormatError("truncated WAV chunk '" +
                        std::string(reinterpret_cast<const char*>(in.data() + pos), 4) + "'");
    }
    if (tag_is(in, pos, "fmt ")) {
      if (chunk_size < 16) throw FormatError("truncated WAV fmt chunk");
      const std::uint16_t codec = bytes::get_u16(in, body);
      const std::uint16_t channels = bytes::get_u16(in, body + 2);
      rate = bytes::get_u32(in, body + 4);
      const std::uint16_t bits = bytes::get_u16(in, body + 14);
      if (codec != 1) throw FormatError("unsupported WAV codec " + std::to_string(codec) + " (PCM only)");
      if (channels != 1) throw FormatError("expected mono WAV, got " + std::to_string(channels) + " channels");
      if (bits != 16) throw FormatError("expected 16-bit PCM, got " + std::to_string(bits) + " bits");
      have_fmt = true;
    } else if (tag_is(in, pos, "data")) {
      if (!have_fmt) throw FormatError("WAV data chunk before fmt chunk");
      if (rate != expected_rate) {
        throw InputError("sample rate " + std::to_string(rate) + " Hz != expected " +
                         std::to_string(expected_rate) + " Hz; resampling unsupported");
      }
      if (chunk_size % 2 != 0) throw FormatError("truncated WAV data chunk (odd byte count)");
      AudioClip clip;
      clip.sample_rate = rate;
      clip.samples.resize(chunk_size / 2);
      for (std::size_t i = 0; i < clip.samples.size(); ++i) {
        const auto v = static_cast<std::int16_t>(bytes::get_u16(in, body + 2 * i));
        clip.samples[i] = static_cast<float>(v) / 32768.0f;
      }
      return clip;
    }
    pos = body + chunk_size + (chunk_size & 1);
  }
  throw FormatError(have_fmt ? "WAV has no data chunk" : "WAV has no fmt chunk");
}

AudioClip read_wav_file(const std::filesystem::path& path, std::uint32_t expected_rate) {
  const auto data = bytes::read_file(path);
  try {
    return load_wav(data, expected_rate);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_wav(const AudioClip& clip) {
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  auto tag = [&](const char* t) { out.insert(out.end(), t, t + 4); };
  auto u16 = [&](std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
  };
  tag("RIFF");
  bytes::put_u32(out, 36 + data_bytes);
  tag("WAVE");
  tag("fmt ");
  bytes::put_u32(out, 16);
  u16(1);
  u16(1);
  bytes::put_u32(out, clip.sample_rate);
  bytes::put_u32(out, clip.sample_rate * 2);
  u16(2);
  u16(16);
  tag("data");
  bytes::put_u32(out, data_bytes);
  for (float s : clip.samples) {
    const long q = std::lround(std::clamp(s, -1.0f, 1.0f) * 32768.0f);
    u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(std::clamp(q, -32768L, 32767L))));
  }
  return out;
}

void write_wav_file(const std::filesystem::path& path, const AudioClip& clip) {
  bytes::write_file(path, encode_wav(clip));
}

// ---- STFT ------------------------------------------------------------------

std::vector<float> hann_window(std::size_t size) {
  std::vector<float> w(size);
  if (size == 1) {
    w[0] = 1.0f;
    return w;
  }
  for (std::size_t n = 0; n < size; ++n) {
    w[n] = static_cast<float>(
        0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                              static_cast<double>(size - 1))));
  }
  return w;
}

namespace {

// In-place iterative radix-2 FFT over kWindowSize points.
class Fft1024 {
 public:
  Fft1024() : twiddle_(kWindowSize / 2), reversed_(kWindowSize) {
    for (std::size_t k = 0; k < kWindowSize / 2; ++k) {
      const double a = -2.0 * std::numbers::pi * static_cast<double>(k) / kWindowSize;
      twiddle_[k] = {std::cos(a), std::sin(a)};
    }
    std::size_t bits = 0;
    while ((std::size_t{1} << bits) < kWindowSize) ++bits;
    for (std::size_t i = 0; i < kWindowSize; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < bits; ++b)
        if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
      reversed_[i] = r;
    }
  }

  void transform(std::vector<std::complex<double>>& x) const {
    for (std::size_t i = 0; i < kWindowSize; ++i)
      if (i < reversed_[i]) std::swap(x[i], x[reversed_[i]]);
    for (std::size_t len = 2; len <= kWindowSize; len <<= 1) {
      const std::size_t half = len / 2, step = kWindowSize / len;
      for (std::size_t start = 0; start < kWindowSize; start += len) {
        for (std::size_t k = 0; k < half; ++k) {
          const auto t = twiddle_[k * step] * x[start + k + half];
          x[start + k + half] = x[start + k] - t;
          x[start + k] += t;
        }
      }
    }
  }

 private:
  std::vector<std::complex<double>> twiddle_;
  std::vector<std::size_t> reversed_;
};

// numpy-style "reflect" index (edge sample not repeated), folded as often as
// needed so clips shorter than the pad still work.
std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * static_cast<long>(n - 1);
  long m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<long>(n)) m = period - m;
  return static_cast<std::size_t>(m);
}

}  // namespace

Spectrogram stft_magnitude(const AudioClip& clip) {
  if (clip.samples.empty()) throw InputError("stft: empty clip");
  static const Fft1024 fft;
  static const std::vector<float> window = hann_window(kWindowSize);
  const std::size_t n = clip.samples.size();
  const long pad = static_cast<long>(kWindowSize / 2);

  Spectrogram out;
  out.frames = frame_count(n);
  out.bins = kFftBins;
  out.values.resize(out.frames * kFftBins);
  std::vector<std::complex<double>> buf(kWindowSize);
  for (std::size_t t = 0; t < out.frames; ++t) {
    const long start = static_cast<long>(t * kHopSize) - pad;
    for (std::size_t k = 0; k < kWindowSize; ++k) {
      const float s = clip.samples[reflect_index(start + static_cast<long>(k), n)];
      buf[k] = {static_cast<double>(s) * window[k], 0.0};
    }
    fft.transform(buf);
    for (std::size_t b = 0; b < kFftBins; ++b) {
      out.values[t * kFftBins + b] = static_cast<float>(std::abs(buf[b]));
    }
  }
  return out;
}

// ---- mel -------------------------------------------------------------------

double MelFilterbank::hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double MelFilterbank::mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank::MelFilterbank() : weights_(kMelBins * kFftBins, 0.0f), centers_hz_(kMelBins) {
  const double top = hz_to_mel(kSampleRate / 2.0);
  std::vector<double> edges(kMelBins + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(kMelBins + 1));
  }
  for (std::size_t m = 0; m < kMelBins; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    centers_hz_[m] = mid;
    for (std::size_t b = 0; b < kFftBins; ++b) {
      const double f = static_cast<double>(b) * kSampleRate / kWindowSize;
      double w = 0.0;
      if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
      else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
      weights_[m * kFftBins + b] = static_cast<float>(w);
    }
  }
}

const MelFilterbank& default_filterbank() {
  static const MelFilterbank bank;
  return bank;
}

Spectrogram mel_project(const Spectrogram& magnitude) {
  if (magnitude.bins != kFftBins) {
    throw ShapeError("mel_project: expected " + std::to_string(kFftBins) + " bins, got " +
                     std::to_string(magnitude.bins));
  }
  const auto& bank = default_filterbank();
  Spectrogram out;
  out.frames = magnitude.frames;
  out.bins = kMelBins;
  out.values.assign(out.frames * kMelBins, 0.0f);
  std::vector<double> power(kFftBins);
  for (std::size_t t = 0; t < magnitude.frames; ++t) {
    const auto row = magnitude.row(t);
    for (std::size_t b = 0; b < kFftBins; ++b) power[b] = static_cast<double>(row[b]) * row[b];
    for (std::size_t m = 0; m < kMelBins; ++m) {
      const auto w = bank.filter(m);
      double acc = 0.0;
      for (std::size_t b = 0; b < kFftBins; ++b) acc += w[b] * power[b];
      out.values[t * kMelBins + m] = static_cast<float>(acc);
    }
  }
  return out;
}

LogMelSpectrogram log_compress(const Spectrogram& mel, float floor_eps) {
  if (mel.bins != kMelBins) {
    throw ShapeError("log_compress: expected " + std::to_string(kMelBins) + " mel bins");
  }
  LogMelSpectrogram out;
  out.frames = mel.frames;
  out.floor_value = std::log(floor_eps);
  out.values.resize(mel.values.size());
  for (std::size_t i = 0; i < mel.values.size(); ++i) {
    const float v = mel.values[i];
    if (v < 0.0f) throw InvariantError("log_compress: negative mel energy");
    out.values[i] = std::log(std::max(v, floor_eps));
  }
  return out;
}

LogMelSpectrogram log_mel(const AudioClip& clip) {
  return log_compress(mel_project(stft_magnitude(clip)));
}

// ---- SpecAugment -----------------------------------------------------------

LogMelSpectrogram spec_augment(const LogMelSpectrogram& spec, const SpecAugmentPolicy& policy,
                               Rng& rng) {
  LogMelSpectrogram out = spec;
  const std::size_t frames = spec.frames;
  for (std::size_t i = 0; i < policy.num_time_masks; ++i) {
    const std::size_t width = std::min<std::size_t>(rng.below(policy.max_time_width + 1), frames);
    const std::size_t start = rng.below(frames - width + 1);
    for (std::size_t t = start; t < start + width; ++t)
      std::fill_n(out.values.begin() + static_cast<long>(t * kMelBins), kMelBins, spec.floor_value);
  }
  for (std::size_t i = 0; i < policy.num_freq_masks; ++i) {
    const std::size_t width = std::min<std::size_t>(rng.below(policy.max_freq_width + 1), kMelBins);
    const std::size_t start = rng.below(kMelBins - width + 1);
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t m = start; m < start + width; ++m) out.values[t * kMelBins + m] = spec.floor_value;
  }
  return out;
}

// ---- MELS1 -----------------------------------------------------------------

namespace {
constexpr char kMelsMagic[5] = {'M', 'E', 'L', 'S', '1'};
constexpr std::size_t kMelsHeader = 5 + 4 + 4;
}  // namespace

std::vector<std::uint8_t> encode_mels(const LogMelSpectrogram& spec) {
  std::vector<std::uint8_t> out(kMelsMagic, kMelsMagic + 5);
  out.reserve(kMelsHeader + spec.values.size() * 4);
  bytes::put_u32(out, static_cast<std::uint32_t>(spec.frames));
  bytes::put_u32(out, static_cast<std::uint32_t>(kMelBins));
  for (float v : spec.values) bytes::put_f32(out, v);
  return out;
}

LogMelSpectrogram decode_mels(std::span<const std::uint8_t> in) {
  if (in.size() < 5 || std::memcmp(in.data(), kMelsMagic, 5) != 0) {
    throw FormatError("MELS1: bad magic");
  }
  if (in.size() < kMelsHeader) throw FormatError("MELS1: truncated header");
  const std::uint32_t frames = bytes::get_u32(in, 5);
  const std::uint32_t mels = bytes::get_u32(in, 9);
  if (mels != kMelBins) throw FormatError("MELS1: n_mels must be 64, got " + std::to_string(mels));
  const std::size_t expected = kMelsHeader + static_cast<std::size_t>(frames) * mels * 4;
  if (in.size() != expected) {
    throw FormatError("MELS1: payload length " + std::to_string(in.size()) + " != expected " +
                      std::to_string(expected));
  }
  LogMelSpectrogram spec;
  spec.frames = frames;
  spec.floor_value = std::log(kLogFloorEps);
  spec.values.resize(static_cast<std::size_t>(frames) * mels);
  for (std::size_t i = 0; i < spec.values.size(); ++i) spec.values[i] = bytes::get_f32(in, kMelsHeader + 4 * i);
  return spec;
}

void write_mels_file(const std::filesystem::path& path, const LogMelSpectrogram& spec) {
  bytes::write_file(path, encode_mels(spec));
}

LogMelSpectrogram read_mels_file(const std::filesystem::path& path) {
  try {
    return decode_mels(bytes::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

LogMelSpectrogram load_features(const std::filesystem::path& path) {
  const auto data = bytes::read_file(path);
  if (data.size() >= 5 && std::memcmp(data.data(), kMelsMagic, 5) == 0) {
    try {
      return decode_mels(data);
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  try {
    return log_mel(load_wav(data));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

}  // namespace capforge::dsp
