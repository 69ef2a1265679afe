// WAV/PCM ingestion, writing, resampling, per-utterance normalization.

#include "w2e/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "w2e/error.hpp"

namespace w2e {

namespace {

std::uint32_t read_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint16_t read_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

bool tag_is(const std::uint8_t* p, const char* tag) {
  return std::memcmp(p, tag, 4) == 0;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
}

void put_tag(std::vector<std::uint8_t>& out, const char* tag) {
  out.insert(out.end(), tag, tag + 4);
}

}  // namespace

Waveform parse_wav(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12) fail(Errc::malformed_header, "file shorter than RIFF header");
  if (!tag_is(bytes.data(), "RIFF")) fail(Errc::malformed_header, "missing RIFF magic");
  if (!tag_is(bytes.data() + 8, "WAVE")) fail(Errc::malformed_header, "missing WAVE magic");

  bool have_fmt = false;
  bool have_data = false;
  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint32_t rate = 0;
  std::uint16_t bits = 0;
  const std::uint8_t* data_ptr = nullptr;
  std::size_t data_len = 0;

  std::size_t off = 12;
  while (off + 8 <= bytes.size()) {
    const std::uint8_t* hdr = bytes.data() + off;
    std::uint32_t chunk_size = read_u32(hdr + 4);
    off += 8;
    if (chunk_size > bytes.size() - off) {
      fail(Errc::malformed_header, "truncated chunk");
    }
    if (tag_is(hdr, "fmt ")) {
      if (chunk_size < 16) fail(Errc::malformed_header, "fmt chunk too small");
      const std::uint8_t* f = bytes.data() + off;
      format = read_u16(f);
      channels = read_u16(f + 2);
      rate = read_u32(f + 4);
      bits = read_u16(f + 14);
      have_fmt = true;
    } else if (tag_is(hdr, "data")) {
      data_ptr = bytes.data() + off;
      data_len = chunk_size;
      have_data = true;
    }
    // unknown chunks skipped; RIFF chunks are word-aligned
    off += chunk_size + (chunk_size & 1);
  }
  // a dangling partial chunk header (< 8 bytes) at the end is ignored

  if (!have_fmt) fail(Errc::malformed_header, "missing fmt chunk");
  if (!have_data) fail(Errc::malformed_header, "missing data chunk");
  if (format != 1) fail(Errc::unsupported_format, "not PCM (format " + std::to_string(format) + ")");
  if (bits != 16) fail(Errc::unsupported_format, "bit depth " + std::to_string(bits) + " != 16");
  if (channels < 1 || channels > 2) {
    fail(Errc::unsupported_format, std::to_string(channels) + " channels");
  }
  if (rate == 0 || rate > 0x7fffffffu) fail(Errc::malformed_header, "bad sample rate");

  const std::size_t frame_bytes = 2u * channels;
  const std::size_t frames = data_len / frame_bytes;  // partial trailing frame dropped

  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  w.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    const std::uint8_t* p = data_ptr + i * frame_bytes;
    auto s0 = static_cast<std::int16_t>(read_u16(p));
    if (channels == 1) {
      w.samples[i] = static_cast<float>(s0 / 32768.0);
    } else {
      auto s1 = static_cast<std::int16_t>(read_u16(p + 2));
      w.samples[i] = static_cast<float>((static_cast<double>(s0) + s1) / 2.0 / 32768.0);
    }
  }
  return w;
}

std::vector<std::uint8_t> write_wav(const Waveform& w) {
  const std::uint32_t n = static_cast<std::uint32_t>(w.samples.size());
  const std::uint32_t data_bytes = n * 2;
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);

  put_tag(out, "RIFF");
  put_u32(out, 36 + data_bytes);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate) * 2);  // byte rate
  put_u16(out, 2);   // block align
  put_u16(out, 16);  // bits
  put_tag(out, "data");
  put_u32(out, data_bytes);

  for (float f : w.samples) {
    double v = std::clamp(static_cast<double>(f), -1.0, 1.0);
    // scale by 32768 and clamp the top: exact inverse of parse on the
    // int16 grid, so the round trip is bit-exact
    long q = std::lround(v * 32768.0);
    q = std::clamp(q, -32768L, 32767L);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

Waveform resample_linear(const Waveform& w, int target_rate) {
  if (target_rate <= 0) fail(Errc::unsupported_format, "target rate must be positive");
  if (w.sample_rate == target_rate) return w;
  if (w.samples.size() < 2) fail(Errc::empty_input, "resampling needs at least 2 samples");

  const std::size_t len = w.samples.size();
  const std::size_t out_len = static_cast<std::size_t>(
      static_cast<std::uint64_t>(len) * static_cast<std::uint64_t>(target_rate) /
      static_cast<std::uint64_t>(w.sample_rate));
  const double step = static_cast<double>(w.sample_rate) / target_rate;

  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    double pos = i * step;
    auto i0 = static_cast<std::size_t>(pos);
    if (i0 >= len - 1) i0 = len - 1;
    std::size_t i1 = std::min(i0 + 1, len - 1);
    double frac = pos - static_cast<double>(i0);
    out.samples[i] = static_cast<float>(w.samples[i0] * (1.0 - frac) + w.samples[i1] * frac);
  }
  return out;
}

Waveform standardize(const Waveform& w) {
  if (w.samples.empty()) fail(Errc::empty_input, "cannot standardize an empty waveform");
  double mean = 0.0;
  for (float s : w.samples) mean += s;
  mean /= static_cast<double>(w.samples.size());
  double var = 0.0;
  for (float s : w.samples) {
    double d = s - mean;
    var += d * d;
  }
  var /= static_cast<double>(w.samples.size());
  const double inv = 1.0 / std::sqrt(var + 1e-5);

  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples.resize(w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i) {
    out.samples[i] = static_cast<float>((w.samples[i] - mean) * inv);
  }
  return out;
}

}  // namespace w2e
