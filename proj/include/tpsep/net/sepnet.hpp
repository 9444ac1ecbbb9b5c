#pragma once

// Multi-stage triple-path separation network.
//
//   y -> encoder -> segment -> stage 1 (denoise) -> stage 2 (separate, C-way)
//     -> stage 3 (de-reverberate, per speaker) -> overlap-add -> decoder
//
// Each stage is a stack of P triple-path repeats followed by a PReLU +
// pointwise-conv head. Stages predict feature representations directly; the
// single decoder turns any stage output into a waveform.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tpsep/diff/gru.hpp"
#include "tpsep/diff/ops.hpp"
#include "tpsep/net/chunking.hpp"
#include "tpsep/net/config.hpp"
#include "tpsep/net/params.hpp"

namespace tpsep::net {

struct FrameLayout {
  std::size_t samples = 0;  // T
  std::size_t padded = 0;   // T_padded
  std::size_t frames = 0;   // L
};

/// Right-pads T so the strided encoder tiles it exactly.
inline FrameLayout frame_layout(std::size_t samples, const ModelConfig& cfg) {
  const auto kw = static_cast<std::size_t>(cfg.enc_kernel);
  const auto st = static_cast<std::size_t>(cfg.enc_stride);
  if (samples < kw) {
    throw diff::ShapeError("encode: input of " + std::to_string(samples) +
                           " samples is shorter than enc_kernel " + std::to_string(kw));
  }
  FrameLayout f;
  f.samples = samples;
  f.padded = kw + ((samples - kw + st - 1) / st) * st;
  f.frames = (f.padded - kw) / st + 1;
  return f;
}

/// Waveform [T] -> FeatureMap [N, L]; bias-free strided conv then ReLU.
template <typename T>
Var<T> encode(diff::Graph<T>& g, std::span<const float> wave, const Var<T>& enc_weight,
              const ModelConfig& cfg) {
  const auto lay = frame_layout(wave.size(), cfg);
  Tensor<T> x(Shape{1, lay.padded});
  for (std::size_t i = 0; i < wave.size(); ++i) x[i] = static_cast<T>(wave[i]);
  return diff::relu(diff::conv1d(g.constant(std::move(x)), enc_weight,
                                 static_cast<std::size_t>(cfg.enc_stride)));
}

/// ChunkTensor [N, K, S] -> waveform [T] through the shared decoder.
template <typename T>
Var<T> decode(const Var<T>& rep, const FrameLayout& lay, const Var<T>& dec_weight,
              const ModelConfig& cfg) {
  auto fm = overlap_add(rep, lay.frames);
  auto wave = diff::conv_transpose1d(fm, dec_weight, static_cast<std::size_t>(cfg.enc_stride));
  wave = diff::slice(wave, 1, 0, lay.samples);
  return diff::reshape(wave, Shape{lay.samples});
}

/// Channel weights phi in (0,1)^N from average- and max-pooled statistics
/// passed through the shared two-layer bottleneck.
template <typename T>
Var<T> channel_weights(const Var<T>& x, const BoundParams<T>& p, const std::string& prefix) {
  const std::size_t n = x.shape()[0];
  auto avg = diff::reshape(diff::mean_pool(x, {1, 2}), Shape{n, 1});
  auto mx = diff::reshape(diff::max_pool(x, {1, 2}), Shape{n, 1});
  auto pooled = diff::concat<T>({avg, mx}, 1);  // [N, 2]
  auto hid = diff::relu(diff::add_channel(diff::matmul(p(prefix + ".w0"), pooled), p(prefix + ".b0"), 0));
  auto out = diff::add_channel(diff::matmul(p(prefix + ".w1"), hid), p(prefix + ".b1"), 0);
  auto logits = diff::add(diff::slice(out, 1, 0, 1), diff::slice(out, 1, 1, 1));
  return diff::sigmoid(diff::reshape(logits, Shape{n}));
}

template <typename T>
Var<T> channel_attention(const Var<T>& x, const BoundParams<T>& p, const std::string& prefix) {
  return diff::mul_channel(x, channel_weights(x, p, prefix), 0);
}

namespace sepnet_detail {

template <typename T>
diff::GruWeights<T> gru_weights(const BoundParams<T>& p, const std::string& prefix) {
  return {p(prefix + ".wx"), p(prefix + ".wh"), p(prefix + ".bx"), p(prefix + ".bh")};
}

/// Residual recurrent block over a [B, steps, N] view.
template <typename T>
Var<T> recurrent_path(const Var<T>& seq, const BoundParams<T>& p, const std::string& prefix) {
  const auto shp = seq.shape();
  const std::size_t b = shp[0], steps = shp[1], n = shp[2];
  auto normed = diff::layer_norm(seq, {1, 2}, p(prefix + ".norm.gain"), p(prefix + ".norm.bias"), 2);
  auto rec = diff::bigru(normed, gru_weights(p, prefix + ".gru.fwd"), gru_weights(p, prefix + ".gru.bwd"));
  const std::size_t h2 = rec.shape()[2];
  auto flat = diff::reshape(rec, Shape{b * steps, h2});
  auto proj = diff::add_channel(diff::matmul(flat, p(prefix + ".proj.weight")), p(prefix + ".proj.bias"), 1);
  return diff::reshape(proj, Shape{b, steps, n});
}

}  // namespace sepnet_detail

/// Within-chunk modelling: recurrence along K, chunks independent.
template <typename T>
Var<T> intra_block(const Var<T>& x, const BoundParams<T>& p, const std::string& prefix) {
  auto seq = diff::permute(x, {2, 1, 0});  // [S, K, N]
  auto y = sepnet_detail::recurrent_path(seq, p, prefix);
  return diff::add(x, diff::permute(y, {2, 1, 0}));
}

/// Across-chunk modelling: recurrence along S, intra-chunk positions
/// independent.
template <typename T>
Var<T> inter_block(const Var<T>& x, const BoundParams<T>& p, const std::string& prefix) {
  auto seq = diff::permute(x, {1, 2, 0});  // [K, S, N]
  auto y = sepnet_detail::recurrent_path(seq, p, prefix);
  return diff::add(x, diff::permute(y, {2, 0, 1}));
}

/// One repeat: A = CA(X), B = Intra(A), C = Inter(B), output A + B + C.
template <typename T>
Var<T> triple_path(const Var<T>& x, const BoundParams<T>& p, const std::string& prefix,
                   bool parallel) {
  auto a = channel_attention(x, p, prefix + ".ca");
  auto b = intra_block(parallel ? x : a, p, prefix + ".intra");
  auto c = inter_block(parallel ? x : b, p, prefix + ".inter");
  return diff::add(diff::add(a, b), c);
}

/// P repeats then the output head. Returns one ChunkTensor per output
/// stream: C for the separating stage, one otherwise.
template <typename T>
std::vector<Var<T>> triple_path_subnet(const Var<T>& x, const BoundParams<T>& p, int stage,
                                       const ModelConfig& cfg) {
  const std::string sp = stage_prefix(stage);
  const auto n = static_cast<std::size_t>(cfg.n_channels);
  const auto& xs = x.shape();
  if (xs.size() != 3 || xs[0] != n) {
    throw diff::ShapeError(sp + ": expected [" + std::to_string(n) + ",K,S] input, got " +
                           diff::to_string(xs));
  }
  Var<T> cur = x;
  for (int r = 0; r < cfg.repeats_p; ++r) {
    cur = triple_path(cur, p, sp + ".rep" + std::to_string(r), cfg.parallel_paths);
  }
  const std::size_t k = xs[1], s = xs[2];
  const std::size_t out_ch = head_channels(cfg, stage_role(stage, cfg.stages));
  if (p(sp + ".head.weight").shape() != Shape{out_ch, n}) {
    throw diff::ShapeError(sp + ": head weight " + diff::to_string(p(sp + ".head.weight").shape()) +
                           " does not match stage role (" + std::to_string(out_ch) + " outputs)");
  }
  auto act = diff::reshape(diff::prelu(cur, p(sp + ".head.prelu")), Shape{n, k * s});
  auto head = diff::add_channel(diff::matmul(p(sp + ".head.weight"), act), p(sp + ".head.bias"), 0);
  head = diff::reshape(head, Shape{out_ch, k, s});
  if (out_ch == n) return {head};
  return diff::split(head, 0, std::vector<std::size_t>(out_ch / n, n));
}

template <typename T>
struct StageOutputs {
  std::optional<Var<T>> z_hat;  // stage-1 decoding (stages >= 2, on request)
  std::vector<Var<T>> m_hat;    // stage-2 decodings (stages == 3, on request)
  std::vector<Var<T>> s_hat;    // final-stage decodings, always present
};

/// Runs the stage cascade in its fixed order (denoise, separate,
/// de-reverberate). Intermediate decodings are only produced when
/// `emit_intermediate` is set.
template <typename T>
StageOutputs<T> multistage_forward(diff::Graph<T>& g, std::span<const float> y,
                                   const BoundParams<T>& p, const ModelConfig& cfg,
                                   bool emit_intermediate) {
  cfg.validate();
  const auto lay = frame_layout(y.size(), cfg);
  const auto& dec = p("decoder.weight");
  auto feat = encode(g, y, p("encoder.weight"), cfg);
  auto chunks = segment(feat, static_cast<std::size_t>(cfg.chunk_k));

  StageOutputs<T> out;
  if (cfg.stages == 1) {
    for (auto& rep : triple_path_subnet(chunks, p, 1, cfg)) {
      out.s_hat.push_back(decode(rep, lay, dec, cfg));
    }
    return out;
  }
  auto denoised = triple_path_subnet(chunks, p, 1, cfg).front();
  if (emit_intermediate) out.z_hat = decode(denoised, lay, dec, cfg);
  auto separated = triple_path_subnet(denoised, p, 2, cfg);
  if (cfg.stages == 2) {
    for (auto& rep : separated) out.s_hat.push_back(decode(rep, lay, dec, cfg));
    return out;
  }
  for (auto& rep : separated) {
    if (emit_intermediate) out.m_hat.push_back(decode(rep, lay, dec, cfg));
    auto dry = triple_path_subnet(rep, p, 3, cfg).front();
    out.s_hat.push_back(decode(dry, lay, dec, cfg));
  }
  return out;
}

}  // namespace tpsep::net
