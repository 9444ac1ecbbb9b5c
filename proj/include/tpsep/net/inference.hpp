#pragma once

#include <span>
#include <vector>

#include "tpsep/net/sepnet.hpp"

namespace tpsep::net {

/// Decoded stage outputs as plain sample vectors.
struct DecodedStages {
  std::vector<float> z_hat;               // empty unless stages >= 2 and requested
  std::vector<std::vector<float>> m_hat;  // empty unless stages == 3 and requested
  std::vector<std::vector<float>> s_hat;
};

namespace inference_detail {

inline std::vector<float> samples(const diff::Var<float>& v) {
  const auto d = v.value().data();
  return {d.begin(), d.end()};
}

}  // namespace inference_detail

/// Gradient-free forward pass.
inline DecodedStages run_model(std::span<const float> y, const ParamStore<float>& params,
                               const ModelConfig& cfg, bool emit_intermediate) {
  diff::Graph<float> g;
  BoundParams<float> p(g, params, false);
  auto out = multistage_forward(g, y, p, cfg, emit_intermediate);
  DecodedStages d;
  if (out.z_hat) d.z_hat = inference_detail::samples(*out.z_hat);
  for (const auto& v : out.m_hat) d.m_hat.push_back(inference_detail::samples(v));
  for (const auto& v : out.s_hat) d.s_hat.push_back(inference_detail::samples(v));
  return d;
}

}  // namespace tpsep::net
