#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <string>

#include "tpsep/diff/graph.hpp"
#include "tpsep/diff/tensor.hpp"
#include "tpsep/net/config.hpp"

namespace tpsep::net {

/// Named parameter tensors, iterated in lexicographic name order.
template <typename T>
using ParamStore = std::map<std::string, diff::Tensor<T>>;

/// Graph handles for a ParamStore bound into one Graph.
template <typename T>
class BoundParams {
 public:
  BoundParams(diff::Graph<T>& g, const ParamStore<T>& store, bool requires_grad) {
    for (const auto& [name, t] : store) vars_.emplace(name, g.leaf(t, requires_grad));
  }
  explicit BoundParams(std::map<std::string, diff::Var<T>> vars) : vars_(std::move(vars)) {}

  const diff::Var<T>& operator()(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
  }

  const std::map<std::string, diff::Var<T>>& all() const { return vars_; }

 private:
  std::map<std::string, diff::Var<T>> vars_;
};

enum class StageRole { kDenoise, kSeparate, kDereverb };

inline std::string stage_prefix(int stage) { return "stage" + std::to_string(stage); }

/// Role of sub-network `stage` (1-based) for a model with `stages` stages.
inline StageRole stage_role(int stage, int stages) {
  if (stages == 1) return StageRole::kSeparate;
  if (stage == 1) return StageRole::kDenoise;
  if (stage == 2) return StageRole::kSeparate;
  return StageRole::kDereverb;
}

inline std::size_t head_channels(const ModelConfig& cfg, StageRole role) {
  const auto n = static_cast<std::size_t>(cfg.n_channels);
  return role == StageRole::kSeparate ? n * cfg.num_speakers : n;
}

namespace params_detail {

template <typename T>
diff::Tensor<T> uniform(diff::Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  diff::Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

template <typename T>
void add_gru(ParamStore<T>& ps, const std::string& p, std::size_t feat, std::size_t hidden,
             std::mt19937_64& rng) {
  const double b = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (const char* dir : {"fwd", "bwd"}) {
    const std::string q = p + "." + dir;
    ps[q + ".wx"] = uniform<T>({feat, 3 * hidden}, b, rng);
    ps[q + ".wh"] = uniform<T>({hidden, 3 * hidden}, b, rng);
    ps[q + ".bx"] = uniform<T>({3 * hidden}, b, rng);
    ps[q + ".bh"] = uniform<T>({3 * hidden}, b, rng);
  }
}

}  // namespace params_detail

/// Seeded initialization of every model parameter. The encoder and decoder
/// exist once regardless of the number of stages.
///
/// The untrained network starts close to a pass-through: the decoder starts
/// as a copy of the encoder filters, recurrent residual projections and the
/// attention output layer start at zero (uniform 0.5 channel weights), and
/// each head starts at identity (one copy per separated stream)
/// plus a small random perturbation.
inline constexpr double kHeadJitter = 0.1;

template <typename T = float>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  using params_detail::uniform;
  cfg.validate();
  std::mt19937_64 rng(seed);
  const auto n = static_cast<std::size_t>(cfg.n_channels);
  const auto kw = static_cast<std::size_t>(cfg.enc_kernel);
  const auto h = static_cast<std::size_t>(cfg.hidden_h);
  const auto nr = n / static_cast<std::size_t>(cfg.ca_reduction);
  ParamStore<T> ps;
  ps["encoder.weight"] = uniform<T>({n, 1, kw}, 1.0 / std::sqrt(static_cast<double>(kw)), rng);
  ps["decoder.weight"] = ps["encoder.weight"];
  for (int st = 1; st <= cfg.stages; ++st) {
    const std::string sp = stage_prefix(st);
    for (int r = 0; r < cfg.repeats_p; ++r) {
      const std::string rp = sp + ".rep" + std::to_string(r);
      ps[rp + ".ca.w0"] = uniform<T>({nr, n}, 1.0 / std::sqrt(static_cast<double>(n)), rng);
      ps[rp + ".ca.b0"] = uniform<T>({nr}, 1.0 / std::sqrt(static_cast<double>(n)), rng);
      ps[rp + ".ca.w1"] = diff::Tensor<T>({n, nr});
      ps[rp + ".ca.b1"] = diff::Tensor<T>({n});
      for (const char* blk : {"intra", "inter"}) {
        const std::string bp = rp + "." + blk;
        ps[bp + ".norm.gain"] = diff::Tensor<T>({n}, T{1});
        ps[bp + ".norm.bias"] = diff::Tensor<T>({n}, T{0});
        params_detail::add_gru(ps, bp + ".gru", n, h, rng);
        ps[bp + ".proj.weight"] = diff::Tensor<T>({2 * h, n});
        ps[bp + ".proj.bias"] = diff::Tensor<T>({n});
      }
    }
    const std::size_t out = head_channels(cfg, stage_role(st, cfg.stages));
    ps[sp + ".head.prelu"] = diff::Tensor<T>({1}, T(0.25));
    auto head = uniform<T>({out, n}, kHeadJitter / std::sqrt(static_cast<double>(n)), rng);
    for (std::size_t o = 0; o < out; ++o) head.at(o, o % n) += T{1};
    ps[sp + ".head.weight"] = std::move(head);
    ps[sp + ".head.bias"] = diff::Tensor<T>({out});
  }
  return ps;
}

template <typename T>
std::size_t count_params(const ParamStore<T>& ps) {
  std::size_t total = 0;
  for (const auto& [name, t] : ps) total += t.numel();
  return total;
}

template <typename U, typename T>
ParamStore<U> cast_params(const ParamStore<T>& ps) {
  ParamStore<U> out;
  for (const auto& [name, t] : ps) out.emplace(name, t.template cast<U>());
  return out;
}

}  // namespace tpsep::net
