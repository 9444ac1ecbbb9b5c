#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tpsep::audio {

class AudioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mono sampled signal.
struct Waveform {
  std::vector<float> samples;
  std::uint32_t sample_rate = 8000;

  std::size_t size() const noexcept { return samples.size(); }

  friend bool operator==(const Waveform&, const Waveform&) = default;
};

inline constexpr float kHeadroom = 4.0F;

inline bool all_finite(const Waveform& w) {
  for (float v : w.samples) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

inline float peak(const std::vector<float>& x) {
  float p = 0.0F;
  for (float v : x) p = std::max(p, std::abs(v));
  return p;
}

inline double power(const std::vector<float>& x) {
  if (x.empty()) return 0.0;
  double e = 0.0;
  for (float v : x) e += static_cast<double>(v) * v;
  return e / static_cast<double>(x.size());
}

inline double rms(const std::vector<float>& x) { return std::sqrt(power(x)); }

}  // namespace tpsep::audio
