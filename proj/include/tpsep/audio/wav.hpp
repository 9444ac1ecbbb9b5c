#pragma once

// RIFF/WAVE reader and writer. Writes 32-bit float mono; reads float32 and
// 16-bit PCM mono.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "tpsep/audio/waveform.hpp"

namespace tpsep::audio {

static_assert(std::endian::native == std::endian::little,
              "wav I/O assumes a little-endian host");

namespace wav_detail {

inline void put_u16(std::vector<char>& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xFF));
  b.push_back(static_cast<char>(v >> 8));
}

inline void put_u32(std::vector<char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_tag(std::vector<char>& b, const char* tag) { b.insert(b.end(), tag, tag + 4); }

inline std::uint16_t get_u16(const std::vector<char>& b, std::size_t at) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(b[at]) |
                                    (static_cast<unsigned char>(b[at + 1]) << 8));
}

inline std::uint32_t get_u32(const std::vector<char>& b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[at + i]);
  return v;
}

}  // namespace wav_detail

inline constexpr std::uint16_t kFormatPcm = 1;
inline constexpr std::uint16_t kFormatFloat = 3;

inline std::vector<char> encode_wav(const Waveform& w) {
  using namespace wav_detail;
  if (!all_finite(w)) throw AudioError("write_wav: non-finite sample");
  const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 4);
  std::vector<char> b;
  b.reserve(58 + data_bytes);
  put_tag(b, "RIFF");
  put_u32(b, 4 + (8 + 18) + (8 + 4) + (8 + data_bytes));
  put_tag(b, "WAVE");
  put_tag(b, "fmt ");
  put_u32(b, 18);
  put_u16(b, kFormatFloat);
  put_u16(b, 1);
  put_u32(b, w.sample_rate);
  put_u32(b, w.sample_rate * 4);
  put_u16(b, 4);
  put_u16(b, 32);
  put_u16(b, 0);
  put_tag(b, "fact");
  put_u32(b, 4);
  put_u32(b, static_cast<std::uint32_t>(w.samples.size()));
  put_tag(b, "data");
  put_u32(b, data_bytes);
  const auto* raw = reinterpret_cast<const char*>(w.samples.data());
  b.insert(b.end(), raw, raw + data_bytes);
  return b;
}

inline Waveform decode_wav(const std::vector<char>& b) {
  using namespace wav_detail;
  if (b.size() < 12 || std::memcmp(b.data(), "RIFF", 4) != 0) {
    throw AudioError("read_wav: not RIFF");
  }
  if (std::memcmp(b.data() + 8, "WAVE", 4) != 0) throw AudioError("read_wav: not WAVE");
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  while (pos + 8 <= b.size()) {
    const std::string tag(b.data() + pos, 4);
    const std::uint32_t len = get_u32(b, pos + 4);
    const std::size_t body = pos + 8;
    if (body + len > b.size()) throw AudioError("read_wav: chunk '" + tag + "' truncated");
    if (tag == "fmt ") {
      if (len < 16) throw AudioError("read_wav: fmt chunk too short");
      format = get_u16(b, body);
      channels = get_u16(b, body + 2);
      rate = get_u32(b, body + 4);
      bits = get_u16(b, body + 14);
      have_fmt = true;
    } else if (tag == "data") {
      if (!have_fmt) throw AudioError("read_wav: data chunk before fmt chunk");
      if (channels != 1) {
        throw AudioError("read_wav: unsupported num_channels " + std::to_string(channels));
      }
      if (rate == 0) throw AudioError("read_wav: sample_rate is zero");
      Waveform w;
      w.sample_rate = rate;
      if (format == kFormatFloat && bits == 32) {
        w.samples.resize(len / 4);
        std::memcpy(w.samples.data(), b.data() + body, w.samples.size() * 4);
      } else if (format == kFormatPcm && bits == 16) {
        w.samples.resize(len / 2);
        for (std::size_t i = 0; i < w.samples.size(); ++i) {
          const auto v = static_cast<std::int16_t>(get_u16(b, body + 2 * i));
          w.samples[i] = static_cast<float>(v) / 32768.0F;
        }
      } else {
        throw AudioError("read_wav: unsupported audio_format " + std::to_string(format) +
                         " with bits_per_sample " + std::to_string(bits));
      }
      if (!all_finite(w)) throw AudioError("read_wav: non-finite sample");
      return w;
    }
    pos = body + len + (len & 1U);
  }
  throw AudioError(have_fmt ? "read_wav: missing data chunk" : "read_wav: missing fmt chunk");
}

inline void write_wav(const Waveform& w, const std::filesystem::path& path) {
  const auto bytes = encode_wav(w);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw AudioError("write_wav: cannot open " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw AudioError("write_wav: write failed for " + path.string());
}

inline Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw AudioError("read_wav: cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_wav(bytes);
}

}  // namespace tpsep::audio
