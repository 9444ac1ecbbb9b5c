#pragma once

// Deterministic synthetic scenes: harmonic pseudo-speech sources, sparse-echo
// exponential room responses, pink noise, and every per-stage target.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "tpsep/audio/waveform.hpp"

namespace tpsep::audio {

/// splitmix64 finalizer; derives independent sub-seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  auto step = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  };
  return step(step(step(seed) ^ a) ^ (b * 0xD6E8FEB86659FD93ULL));
}

struct SceneSpec {
  int num_speakers = 2;
  double duration = 1.0;
  std::uint32_t sample_rate = 8000;
  double snr_db = 0.0;
  double t60_min = 0.1;
  double t60_max = 0.4;
  std::uint64_t seed = 0;
  bool reverb_enabled = true;

  std::size_t num_samples() const {
    return static_cast<std::size_t>(std::llround(duration * sample_rate));
  }
};

struct ImpulseResponse {
  std::vector<float> taps;
  std::size_t direct_delay = 0;
  double t60 = 0.0;
};

struct MixtureScene {
  Waveform y;               // mixture
  Waveform z;               // denoised mixture, sum of m
  std::vector<Waveform> m;  // reverberant per-speaker images
  std::vector<Waveform> s;  // direct-path aligned anechoic sources
  Waveform noise;           // scaled noise, y = z + noise
  std::vector<double> t60;  // per speaker; empty without reverb
  SceneSpec spec;
};

namespace synth_detail {

constexpr std::uint64_t kSaltSource = 1;
constexpr std::uint64_t kSaltRir = 2;
constexpr std::uint64_t kSaltNoise = 3;
constexpr std::uint64_t kSaltAttempt = 4;
constexpr std::uint64_t kSaltPhase = 5;
constexpr std::uint64_t kSaltScene = 6;
constexpr std::uint64_t kSaltSnr = 7;

/// Syllable-like gate: alternating voiced segments with tapered edges and
/// silent gaps.
inline std::vector<double> syllable_envelope(std::size_t n, double sr, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> seg_len(0.08, 0.25);
  std::uniform_real_distribution<double> gain(0.5, 1.0);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<double> env(n, 0.0);
  const auto taper = static_cast<std::size_t>(0.02 * sr);
  std::size_t pos = 0;
  bool any_active = false;
  while (pos < n) {
    const auto len = std::max<std::size_t>(1, static_cast<std::size_t>(seg_len(rng) * sr));
    const bool active = coin(rng) < 0.7;
    const double g = gain(rng);
    if (active) {
      any_active = true;
      for (std::size_t i = 0; i < len && pos + i < n; ++i) {
        double w = 1.0;
        const std::size_t from_end = len - 1 - i;
        if (i < taper) w = 0.5 - 0.5 * std::cos(std::numbers::pi * i / taper);
        if (from_end < taper) w = std::min(w, 0.5 - 0.5 * std::cos(std::numbers::pi * from_end / taper));
        env[pos + i] = g * w;
      }
    }
    pos += len;
  }
  if (!any_active) {
    for (std::size_t i = 0; i < n; ++i) env[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  }
  return env;
}

inline void pink_filter(std::vector<double>& w) {
  double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
  for (auto& v : w) {
    const double white = v;
    b0 = 0.99886 * b0 + white * 0.0555179;
    b1 = 0.99332 * b1 + white * 0.0750759;
    b2 = 0.96900 * b2 + white * 0.1538520;
    b3 = 0.86650 * b3 + white * 0.3104856;
    b4 = 0.55000 * b4 + white * 0.5329522;
    b5 = -0.7616 * b5 - white * 0.0168980;
    v = b0 + b1 + b2 + b3 + b4 + b5 + b6 + white * 0.5362;
    b6 = white * 0.115926;
  }
}

}  // namespace synth_detail

/// Harmonic tone complex with a speaker-specific f0 band
/// [80 + 60k, 120 + 60k] Hz, slow vibrato, and a gated syllable envelope.
/// Unit RMS.
inline Waveform generate_source(int speaker_index, const SceneSpec& spec) {
  using namespace synth_detail;
  if (speaker_index < 0 || speaker_index >= spec.num_speakers) {
    throw AudioError("generate_source: speaker_index " + std::to_string(speaker_index) +
                     " out of range for " + std::to_string(spec.num_speakers) + " speakers");
  }
  if (spec.duration < 0.25) {
    throw AudioError("generate_source: duration " + std::to_string(spec.duration) +
                     " s is shorter than 0.25 s");
  }
  const std::size_t n = spec.num_samples();
  const double sr = spec.sample_rate;
  std::mt19937_64 rng(mix_seed(spec.seed, kSaltSource, static_cast<std::uint64_t>(speaker_index)));
  const double lo = 80.0 + 60.0 * speaker_index;
  std::uniform_real_distribution<double> f0_dist(lo, lo + 40.0);
  std::uniform_real_distribution<double> vib_rate(2.0, 5.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double f0 = f0_dist(rng);
  const double rate = vib_rate(rng);
  const double vib_phase = 2.0 * std::numbers::pi * unit(rng);
  const int harmonics = std::max(1, static_cast<int>(0.45 * sr / (f0 * 1.05)));
  std::vector<double> amp(harmonics);
  for (int h = 0; h < harmonics; ++h) amp[h] = (0.5 + 0.5 * unit(rng)) / (h + 1);
  const auto env = syllable_envelope(n, sr, rng);

  std::vector<float> out;
  // Redraw starting phases if the crest factor breaks the headroom guard.
  for (std::uint64_t attempt = 0;; ++attempt) {
    std::mt19937_64 prng(mix_seed(spec.seed, kSaltPhase,
                                  static_cast<std::uint64_t>(speaker_index) * 64 + attempt));
    std::vector<double> phase(harmonics);
    for (auto& p : phase) p = 2.0 * std::numbers::pi * unit(prng);
    std::vector<double> x(n, 0.0);
    double theta = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = i / sr;
      const double f = f0 * (1.0 + 0.04 * std::sin(2.0 * std::numbers::pi * rate * t + vib_phase));
      double v = 0.0;
      for (int h = 0; h < harmonics; ++h) v += amp[h] * std::sin((h + 1) * theta + phase[h]);
      x[i] = v * env[i];
      theta += 2.0 * std::numbers::pi * f / sr;
    }
    double e = 0.0;
    for (double v : x) e += v * v;
    const double scale = 1.0 / std::sqrt(e / static_cast<double>(n));
    out.assign(n, 0.0F);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(x[i] * scale);
    if (peak(out) <= kHeadroom || attempt >= 31) break;
  }
  return Waveform{std::move(out), spec.sample_rate};
}

/// Unit direct tap at a random delay of at most 10 ms, followed by
/// random-sign reflections whose density grows with time under an
/// exp(-6.9 t / t60) envelope.
inline ImpulseResponse generate_rir(const SceneSpec& spec, int speaker_index) {
  using namespace synth_detail;
  if (!spec.reverb_enabled) throw AudioError("generate_rir: reverb is disabled");
  if (spec.t60_min <= 0.0 || spec.t60_max < spec.t60_min) {
    throw AudioError("generate_rir: invalid t60 range");
  }
  const double sr = spec.sample_rate;
  std::mt19937_64 rng(mix_seed(spec.seed, kSaltRir, static_cast<std::uint64_t>(speaker_index)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ImpulseResponse h;
  h.t60 = spec.t60_min + (spec.t60_max - spec.t60_min) * unit(rng);
  const auto max_delay = static_cast<std::size_t>(0.01 * sr);
  h.direct_delay = std::min(max_delay, static_cast<std::size_t>(unit(rng) * (max_delay + 1)));
  const auto tail = static_cast<std::size_t>(std::ceil(1.2 * h.t60 * sr));
  h.taps.assign(h.direct_delay + tail + 1, 0.0F);
  h.taps[h.direct_delay] = 1.0F;
  const double base = 0.15 * std::sqrt(8000.0 / sr);
  const double dense_after = 0.05;  // seconds until every sample carries a reflection
  for (std::size_t k = 1; k <= tail; ++k) {
    const double t = k / sr;
    const double density = std::min(1.0, (t / dense_after) * (t / dense_after));
    const double u = unit(rng);
    const double mag = 0.3 + 0.7 * unit(rng);
    const double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
    if (u >= density) continue;
    h.taps[h.direct_delay + k] =
        static_cast<float>(sign * base * mag * std::exp(-6.9 * t / h.t60));
  }
  return h;
}

inline ImpulseResponse unit_impulse() { return ImpulseResponse{{1.0F}, 0, 0.0}; }

/// Full linear convolution truncated to len(x).
inline std::vector<float> convolve_same(const std::vector<float>& x, const std::vector<float>& h) {
  if (x.empty() || h.empty()) throw AudioError("convolve_same: empty input");
  std::vector<double> acc(x.size(), 0.0);
  for (std::size_t k = 0; k < h.size() && k < x.size(); ++k) {
    const double hk = h[k];
    if (hk == 0.0) continue;
    for (std::size_t n = k; n < x.size(); ++n) acc[n] += hk * x[n - k];
  }
  return std::vector<float>(acc.begin(), acc.end());
}

inline Waveform convolve_same(const Waveform& x, const ImpulseResponse& h) {
  return Waveform{convolve_same(x.samples, h.taps), x.sample_rate};
}

/// y = sum_i s_i * h_i + n with n scaled to the requested speech-to-noise
/// ratio against z = sum_i s_i * h_i.
inline MixtureScene build_scene(const SceneSpec& spec) {
  using namespace synth_detail;
  if (spec.num_speakers < 2) throw AudioError("build_scene: num_speakers must be >= 2");
  if (spec.sample_rate == 0) throw AudioError("build_scene: sample_rate must be positive");
  const std::size_t n = spec.num_samples();
  for (std::uint64_t attempt = 0; attempt < 8; ++attempt) {
    SceneSpec sub = spec;
    if (attempt > 0) sub.seed = mix_seed(spec.seed, kSaltAttempt, attempt);
    MixtureScene sc;
    sc.spec = spec;
    sc.z = Waveform{std::vector<float>(n, 0.0F), spec.sample_rate};
    for (int i = 0; i < spec.num_speakers; ++i) {
      const Waveform raw = generate_source(i, sub);
      const ImpulseResponse h = spec.reverb_enabled ? generate_rir(sub, i) : unit_impulse();
      Waveform m = convolve_same(raw, h);
      Waveform s{std::vector<float>(n, 0.0F), spec.sample_rate};
      const float direct = h.taps[h.direct_delay];
      for (std::size_t t = h.direct_delay; t < n; ++t) s.samples[t] = direct * raw.samples[t - h.direct_delay];
      if (spec.reverb_enabled) sc.t60.push_back(h.t60);
      sc.m.push_back(std::move(m));
      sc.s.push_back(std::move(s));
    }
    for (const auto& m : sc.m) {
      for (std::size_t t = 0; t < n; ++t) sc.z.samples[t] += m.samples[t];
    }
    const double pz = power(sc.z.samples);
    if (!(pz > 1e-10)) continue;

    std::mt19937_64 nrng(mix_seed(sub.seed, kSaltNoise));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> w(n);
    for (auto& v : w) v = gauss(nrng);
    pink_filter(w);
    double pw = 0.0;
    for (double v : w) pw += v * v;
    pw /= static_cast<double>(n);
    const double target = pz / std::pow(10.0, spec.snr_db / 10.0);
    const double g = std::sqrt(target / pw);
    sc.noise = Waveform{std::vector<float>(n), spec.sample_rate};
    for (std::size_t t = 0; t < n; ++t) sc.noise.samples[t] = static_cast<float>(w[t] * g);

    auto rebuild = [&] {
      sc.y = Waveform{std::vector<float>(n), spec.sample_rate};
      for (std::size_t t = 0; t < n; ++t) sc.y.samples[t] = sc.z.samples[t] + sc.noise.samples[t];
    };
    rebuild();

    float p = std::max({peak(sc.y.samples), peak(sc.z.samples), peak(sc.noise.samples)});
    for (const auto& v : sc.m) p = std::max(p, peak(v.samples));
    for (const auto& v : sc.s) p = std::max(p, peak(v.samples));
    if (p > kHeadroom) {
      const float c = 0.99F * kHeadroom / p;
      auto scale_all = [c](std::vector<float>& v) {
        for (auto& x : v) x *= c;
      };
      for (auto& v : sc.m) scale_all(v.samples);
      for (auto& v : sc.s) scale_all(v.samples);
      scale_all(sc.noise.samples);
      std::fill(sc.z.samples.begin(), sc.z.samples.end(), 0.0F);
      for (const auto& m : sc.m) {
        for (std::size_t t = 0; t < n; ++t) sc.z.samples[t] += m.samples[t];
      }
      rebuild();
    }
    return sc;
  }
  throw AudioError("build_scene: all sources silent after 8 attempts (seed " +
                   std::to_string(spec.seed) + ")");
}

/// A batch of independent scenes with per-scene SNR drawn uniformly from
/// [snr_min, snr_max].
struct CorpusSpec {
  std::size_t num_scenes = 0;
  std::uint64_t seed = 0;
  std::uint32_t sample_rate = 8000;
  double duration = 1.0;
  int num_speakers = 2;
  double snr_min = -6.0;
  double snr_max = 3.0;
  double t60_min = 0.1;
  double t60_max = 0.4;
  bool reverb_enabled = true;
};

inline SceneSpec scene_spec(const CorpusSpec& c, std::size_t index) {
  using namespace synth_detail;
  SceneSpec s;
  s.num_speakers = c.num_speakers;
  s.duration = c.duration;
  s.sample_rate = c.sample_rate;
  s.t60_min = c.t60_min;
  s.t60_max = c.t60_max;
  s.reverb_enabled = c.reverb_enabled;
  s.seed = mix_seed(c.seed, kSaltScene, index);
  std::mt19937_64 rng(mix_seed(c.seed, kSaltSnr, index));
  s.snr_db = c.snr_min + (c.snr_max - c.snr_min) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return s;
}

inline std::vector<MixtureScene> synthesize(const CorpusSpec& c) {
  if (c.snr_min > c.snr_max) throw AudioError("synthesize: snr_min exceeds snr_max");
  if (c.reverb_enabled && (c.t60_min <= 0.0 || c.t60_min > c.t60_max)) {
    throw AudioError("synthesize: t60 range must satisfy 0 < t60_min <= t60_max");
  }
  std::vector<MixtureScene> out;
  out.reserve(c.num_scenes);
  for (std::size_t i = 0; i < c.num_scenes; ++i) out.push_back(build_scene(scene_spec(c, i)));
  return out;
}

}  // namespace tpsep::audio
