#pragma once

// Display-only magnitude spectrogram and 8-bit PGM rendering.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "tpsep/audio/waveform.hpp"

namespace tpsep::audio {

inline constexpr std::size_t kSpecWindow = 256;
inline constexpr std::size_t kSpecHop = 128;
inline constexpr std::size_t kSpecBins = kSpecWindow / 2 + 1;

/// Log-magnitude spectrogram, bins x frames, stored bin-major. The signal is
/// zero-padded at the end so the last frame reaches past the final sample.
struct Spectrogram {
  std::size_t bins = kSpecBins;
  std::size_t frames = 0;
  std::vector<double> values;  // values[bin * frames + frame]

  double at(std::size_t bin, std::size_t frame) const { return values[bin * frames + frame]; }
};

inline Spectrogram spectrogram(const std::vector<float>& x) {
  Spectrogram s;
  s.frames = x.size() <= kSpecWindow ? 1 : 1 + (x.size() - kSpecWindow + kSpecHop - 1) / kSpecHop;
  s.values.assign(s.bins * s.frames, 0.0);
  std::vector<double> win(kSpecWindow), cs(kSpecWindow), sn(kSpecWindow), buf(kSpecWindow);
  for (std::size_t n = 0; n < kSpecWindow; ++n) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(n) / kSpecWindow;
    win[n] = 0.5 - 0.5 * std::cos(a);
    cs[n] = std::cos(a);
    sn[n] = std::sin(a);
  }
  for (std::size_t f = 0; f < s.frames; ++f) {
    for (std::size_t n = 0; n < kSpecWindow; ++n) {
      const std::size_t t = f * kSpecHop + n;
      buf[n] = t < x.size() ? win[n] * x[t] : 0.0;
    }
    for (std::size_t k = 0; k < s.bins; ++k) {
      double re = 0.0, im = 0.0;
      for (std::size_t n = 0; n < kSpecWindow; ++n) {
        const std::size_t idx = (k * n) % kSpecWindow;
        re += buf[n] * cs[idx];
        im -= buf[n] * sn[idx];
      }
      s.values[k * s.frames + f] = std::log(std::sqrt(re * re + im * im) + 1e-8);
    }
  }
  return s;
}

/// Binary PGM, one row per bin and one column per frame, min-max scaled to
/// 0..255. A constant spectrogram renders as all zeros.
inline std::string encode_pgm(const Spectrogram& s) {
  std::string out = "P5\n" + std::to_string(s.frames) + " " + std::to_string(s.bins) + "\n255\n";
  const auto [lo, hi] = std::minmax_element(s.values.begin(), s.values.end());
  const double range = *hi - *lo;
  for (double v : s.values) {
    const double u = range > 0.0 ? (v - *lo) / range : 0.0;
    out.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(u * 255.0))));
  }
  return out;
}

inline void write_pgm(const Spectrogram& s, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw AudioError("pgm: cannot open " + path.string() + " for writing");
  const auto bytes = encode_pgm(s);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace tpsep::audio
