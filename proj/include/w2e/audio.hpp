#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace w2e {

// Mono audio. Samples are in [-1, 1] after parsing; standardize() output is
// a model-input signal and is exempt from that range.
struct Waveform {
  int sample_rate = 0;
  std::vector<float> samples;
};

// Parses a RIFF/WAVE container: PCM format 1, 16-bit little-endian, 1 or 2
// channels. Stereo frames are averaged. Unknown chunks are skipped.
// Errors: MalformedHeader, UnsupportedFormat.
Waveform parse_wav(std::span<const std::uint8_t> bytes);

// Encodes 16-bit PCM mono, little-endian. Out-of-range floats are clamped.
std::vector<std::uint8_t> write_wav(const Waveform& w);

// Linear interpolation at source positions i * (src_rate / target_rate).
// Output length = floor(len * target_rate / src_rate).
// Errors: EmptyInput when len < 2 and the rates differ.
Waveform resample_linear(const Waveform& w, int target_rate);

// Zero mean, unit variance: (x - mean) / sqrt(var + 1e-5).
// Errors: EmptyInput.
Waveform standardize(const Waveform& w);

}  // namespace w2e
