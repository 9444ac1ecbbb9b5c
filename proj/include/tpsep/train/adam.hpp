#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "tpsep/diff/tensor.hpp"
#include "tpsep/net/params.hpp"

namespace tpsep::train {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moment estimates keyed like the parameters.
struct AdamState {
  std::int64_t step = 0;
  net::ParamStore<float> m;
  net::ParamStore<float> v;
};

/// Bias-corrected adaptive moment update, applied in place.
/// Parameters without a gradient entry are left untouched.
inline void optimizer_step(net::ParamStore<float>& params, const net::ParamStore<float>& grads,
                           AdamState& state, double lr, const AdamOptions& opt = {}) {
  ++state.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const auto& g = git->second;
    if (g.shape() != p.shape()) {
      throw diff::ShapeError("optimizer_step: gradient for '" + name + "' has shape " +
                             diff::to_string(g.shape()) + ", parameter " +
                             diff::to_string(p.shape()));
    }
    auto& m = state.m.try_emplace(name, p.shape()).first->second;
    auto& v = state.v.try_emplace(name, p.shape()).first->second;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double gi = g[i];
      const double mi = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
      const double vi = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + opt.eps);
      p[i] = static_cast<float>(p[i] - update);
    }
  }
}

inline double global_norm(const net::ParamStore<float>& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads) {
    for (float v : g.data()) s += static_cast<double>(v) * v;
  }
  return std::sqrt(s);
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_global_norm(net::ParamStore<float>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    for (auto& [name, g] : grads) g *= s;
  }
  return norm;
}

}  // namespace tpsep::train
