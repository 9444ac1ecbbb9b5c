#pragma once

// SI-SNR, permutation-invariant assignment, the weighted three-stage loss,
// and SI-SNRi / SDRi evaluation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpsep/audio/synth.hpp"
#include "tpsep/diff/graph.hpp"
#include "tpsep/diff/ops.hpp"
#include "tpsep/net/sepnet.hpp"

namespace tpsep::objective {

using diff::Tensor;
using diff::Var;

inline constexpr double kEps = 1e-8;

class ObjectiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Scale-invariant SNR in dB. Both signals are mean-removed first.
template <typename A, typename B>
double si_snr(std::span<const A> est, std::span<const B> ref, double eps = kEps) {
  if (est.size() != ref.size()) {
    throw ObjectiveError("si_snr: length mismatch " + std::to_string(est.size()) + " vs " +
                         std::to_string(ref.size()));
  }
  const std::size_t n = est.size();
  if (n == 0) throw ObjectiveError("si_snr: empty signals");
  double me = 0.0, mr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    me += static_cast<double>(est[i]);
    mr += static_cast<double>(ref[i]);
  }
  me /= static_cast<double>(n);
  mr /= static_cast<double>(n);
  double dot = 0.0, rr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = static_cast<double>(est[i]) - me;
    const double r = static_cast<double>(ref[i]) - mr;
    dot += e * r;
    rr += r * r;
  }
  // s_t = a * ref, e = est - s_t
  const double a = dot / (rr + eps);
  double err = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = (static_cast<double>(est[i]) - me) - a * (static_cast<double>(ref[i]) - mr);
    err += d * d;
  }
  return 10.0 * std::log10((a * a * rr + eps) / (err + eps));
}

inline double si_snr(const std::vector<float>& est, const std::vector<float>& ref,
                     double eps = kEps) {
  return si_snr(std::span<const float>(est), std::span<const float>(ref), eps);
}

/// SNR after optimally rescaling the estimate; a plain stand-in for BSSEval SDR.
inline double sdr_plain(std::span<const float> est, std::span<const float> ref,
                        double eps = kEps) {
  if (est.size() != ref.size()) {
    throw ObjectiveError("sdr_plain: length mismatch " + std::to_string(est.size()) + " vs " +
                         std::to_string(ref.size()));
  }
  double dot = 0.0, ee = 0.0, rr = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    dot += static_cast<double>(est[i]) * ref[i];
    ee += static_cast<double>(est[i]) * est[i];
    rr += static_cast<double>(ref[i]) * ref[i];
  }
  const double a = dot / (ee + eps);
  double err = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double d = static_cast<double>(ref[i]) - a * est[i];
    err += d * d;
  }
  return 10.0 * std::log10((rr + eps) / (err + eps));
}

/// Differentiable negated SI-SNR of `est` [T] against a constant reference.
template <typename T>
Var<T> neg_si_snr(const Var<T>& est, std::span<const float> ref, double eps = kEps) {
  const auto& ev = est.value();
  if (ev.numel() != ref.size()) {
    throw diff::ShapeError("neg_si_snr: estimate has " + std::to_string(ev.numel()) +
                           " samples, reference " + std::to_string(ref.size()));
  }
  const std::size_t n = ref.size();
  std::vector<double> e(n), r(n);
  double me = 0.0, mr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    me += static_cast<double>(ev[i]);
    mr += ref[i];
  }
  me /= static_cast<double>(n);
  mr /= static_cast<double>(n);
  double dot = 0.0, rr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    e[i] = static_cast<double>(ev[i]) - me;
    r[i] = static_cast<double>(ref[i]) - mr;
    dot += e[i] * r[i];
    rr += r[i] * r[i];
  }
  const double d = rr + eps;
  const double a = dot / d;
  double pn = 0.0, nr = 0.0;
  std::vector<double> noise(n);
  for (std::size_t i = 0; i < n; ++i) {
    noise[i] = e[i] - a * r[i];
    pn += noise[i] * noise[i];
    nr += noise[i] * r[i];
  }
  pn += eps;
  const double ps = a * a * rr + eps;
  const double value = -10.0 * std::log10(ps / pn);
  return est.graph().record(
      diff::OpKind::kNegSiSnr, {est}, Tensor<T>::scalar(static_cast<T>(value)), [&] {
        return diff::BackwardFn<T>([r = std::move(r), noise = std::move(noise), a, rr, d, ps, pn,
                                    nr, n](const Tensor<T>& g,
                                           const std::vector<Tensor<T>*>& gi) {
          const double c = -10.0 / std::numbers::ln10 * static_cast<double>(g[0]);
          std::vector<double> grad(n);
          double mean_g = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            const double dps = 2.0 * a * rr * r[i] / d;
            const double dpn = 2.0 * (noise[i] - r[i] * nr / d);
            grad[i] = c * (dps / ps - dpn / pn);
            mean_g += grad[i];
          }
          mean_g /= static_cast<double>(n);
          auto& de = *gi[0];
          for (std::size_t i = 0; i < n; ++i) de[i] += static_cast<T>(grad[i] - mean_g);
        });
      });
}

/// Speaker assignment: `perm[i]` is the estimate matched to reference i.
struct Assignment {
  std::vector<std::size_t> perm;
  double loss = 0.0;
};

inline constexpr std::size_t kMaxPitSpeakers = 6;

/// Exhaustive search over all C! assignments minimizing the mean of
/// `cost[est][ref]`. Ties keep the lexicographically first permutation.
inline Assignment pit_assign(const std::vector<std::vector<double>>& cost) {
  const std::size_t c = cost.size();
  if (c == 0) throw ObjectiveError("pit_assign: no speakers");
  if (c > kMaxPitSpeakers) {
    throw ObjectiveError("pit_assign: " + std::to_string(c) + " speakers exceeds enumeration bound " +
                         std::to_string(kMaxPitSpeakers));
  }
  for (const auto& row : cost) {
    if (row.size() != c) throw ObjectiveError("pit_assign: cost matrix is not square");
  }
  std::vector<std::size_t> perm(c);
  std::iota(perm.begin(), perm.end(), 0);
  Assignment best{perm, std::numeric_limits<double>::infinity()};
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < c; ++i) total += cost[perm[i]][i];
    total /= static_cast<double>(c);
    if (total < best.loss) best = {perm, total};
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

struct StageWeights {
  double alpha = 1.0;
  double beta = 1.0;
  int epoch = 0;
};

/// alpha = beta = 2^-floor(epoch / 20).
inline StageWeights stage_weights(int epoch) {
  if (epoch < 0) throw ObjectiveError("stage_weights: negative epoch");
  const double w = std::ldexp(1.0, -(epoch / 20));
  return {w, w, epoch};
}

struct StageLossReport {
  double l1 = 0.0;
  double l2 = 0.0;
  double l3 = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double total = 0.0;
  std::vector<std::size_t> permutation;
};

template <typename T>
struct StagedLoss {
  Var<T> loss;
  StageLossReport report;
};

namespace detail {

template <typename T>
std::vector<std::vector<double>> neg_si_snr_matrix(const std::vector<Var<T>>& est,
                                                   const std::vector<audio::Waveform>& ref) {
  std::vector<std::vector<double>> m(est.size(), std::vector<double>(ref.size()));
  for (std::size_t e = 0; e < est.size(); ++e) {
    const auto& v = est[e].value();
    for (std::size_t r = 0; r < ref.size(); ++r) {
      m[e][r] = -si_snr(std::span<const T>(v.data()), std::span<const float>(ref[r].samples));
    }
  }
  return m;
}

template <typename T>
Var<T> mean_pair_loss(const std::vector<Var<T>>& est, const std::vector<audio::Waveform>& ref,
                      const std::vector<std::size_t>& perm) {
  Var<T> acc = neg_si_snr(est[perm[0]], std::span<const float>(ref[0].samples));
  for (std::size_t i = 1; i < ref.size(); ++i) {
    acc = diff::add(acc, neg_si_snr(est[perm[i]], std::span<const float>(ref[i].samples)));
  }
  return diff::scale(acc, static_cast<T>(1.0 / static_cast<double>(ref.size())));
}

}  // namespace detail

/// alpha * L1 + beta * L2 + L3 with each L the negated SI-SNR. One speaker
/// permutation, chosen on beta * L2 + L3, aligns both the reverberant and the
/// anechoic targets.
template <typename T>
StagedLoss<T> total_loss(const net::StageOutputs<T>& out, const audio::MixtureScene& scene,
                         int stages, const StageWeights& w) {
  const std::size_t c = scene.s.size();
  if (out.s_hat.size() != c) {
    throw ObjectiveError("total_loss: " + std::to_string(out.s_hat.size()) + " outputs for " +
                         std::to_string(c) + " speakers");
  }
  StageLossReport rep;
  rep.alpha = w.alpha;
  rep.beta = w.beta;
  const bool use_l1 = stages >= 2;
  const bool use_l2 = stages == 3;
  if (use_l1 && w.alpha != 0.0 && !out.z_hat) {
    throw ObjectiveError("total_loss: stage-1 output missing with alpha != 0");
  }
  if (use_l2 && w.beta != 0.0 && out.m_hat.size() != c) {
    throw ObjectiveError("total_loss: stage-2 outputs missing with beta != 0");
  }

  auto cost = detail::neg_si_snr_matrix(out.s_hat, scene.s);
  const bool have_m = use_l2 && out.m_hat.size() == c;
  if (have_m) {
    auto cm = detail::neg_si_snr_matrix(out.m_hat, scene.m);
    for (std::size_t e = 0; e < c; ++e) {
      for (std::size_t r = 0; r < c; ++r) cost[e][r] += w.beta * cm[e][r];
    }
  }
  rep.permutation = pit_assign(cost).perm;

  Var<T> l3 = detail::mean_pair_loss(out.s_hat, scene.s, rep.permutation);
  rep.l3 = static_cast<double>(l3.value()[0]);
  Var<T> total = l3;
  if (have_m) {
    Var<T> l2 = detail::mean_pair_loss(out.m_hat, scene.m, rep.permutation);
    rep.l2 = static_cast<double>(l2.value()[0]);
    total = diff::add(total, diff::scale(l2, static_cast<T>(w.beta)));
  }
  if (use_l1 && out.z_hat) {
    Var<T> l1 = neg_si_snr(*out.z_hat, std::span<const float>(scene.z.samples));
    rep.l1 = static_cast<double>(l1.value()[0]);
    total = diff::add(total, diff::scale(l1, static_cast<T>(w.alpha)));
  }
  rep.total = (use_l1 ? w.alpha * rep.l1 : 0.0) + (use_l2 ? w.beta * rep.l2 : 0.0) + rep.l3;
  return {total, rep};
}

struct ItemMetrics {
  std::string id;
  double si_snr = 0.0;  // mean over speakers, assigned estimate vs anechoic reference
  double si_snri = 0.0;
  double sdri_plain = 0.0;
  std::vector<std::size_t> permutation;
};

/// Best-permutation SI-SNRi and plain SDRi of final-stage estimates against
/// the anechoic references, relative to the unprocessed mixture.
inline ItemMetrics eval_metrics(const std::vector<std::vector<float>>& est,
                                const audio::MixtureScene& scene) {
  const std::size_t c = scene.s.size();
  if (est.size() != c) {
    throw ObjectiveError("eval_metrics: " + std::to_string(est.size()) + " estimates for " +
                         std::to_string(c) + " speakers");
  }
  std::vector<std::vector<double>> cost(c, std::vector<double>(c));
  for (std::size_t e = 0; e < c; ++e) {
    for (std::size_t r = 0; r < c; ++r) cost[e][r] = -si_snr(est[e], scene.s[r].samples);
  }
  ItemMetrics m;
  m.permutation = pit_assign(cost).perm;
  for (std::size_t i = 0; i < c; ++i) {
    const auto& e = est[m.permutation[i]];
    const auto& s = scene.s[i].samples;
    const double est_si = si_snr(e, s);
    m.si_snr += est_si;
    m.si_snri += est_si - si_snr(scene.y.samples, s);
    m.sdri_plain += sdr_plain(e, s) - sdr_plain(scene.y.samples, s);
  }
  m.si_snr /= static_cast<double>(c);
  m.si_snri /= static_cast<double>(c);
  m.sdri_plain /= static_cast<double>(c);
  return m;
}

struct MetricsReport {
  std::vector<ItemMetrics> items;
  double si_snri_mean = 0.0;
  double si_snri_std = 0.0;
  double sdri_plain_mean = 0.0;
};

inline MetricsReport aggregate(std::vector<ItemMetrics> items) {
  MetricsReport r;
  r.items = std::move(items);
  if (r.items.empty()) return r;
  const double n = static_cast<double>(r.items.size());
  for (const auto& it : r.items) {
    r.si_snri_mean += it.si_snri;
    r.sdri_plain_mean += it.sdri_plain;
  }
  r.si_snri_mean /= n;
  r.sdri_plain_mean /= n;
  double var = 0.0;
  for (const auto& it : r.items) var += (it.si_snri - r.si_snri_mean) * (it.si_snri - r.si_snri_mean);
  r.si_snri_std = std::sqrt(var / n);
  return r;
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["num_items"] = r.items.size();
  j["si_snri_mean"] = r.si_snri_mean;
  j["si_snri_std"] = r.si_snri_std;
  j["sdri_plain_mean"] = r.sdri_plain_mean;
  j["per_item"] = nlohmann::ordered_json::array();
  for (const auto& it : r.items) {
    nlohmann::ordered_json e;
    e["id"] = it.id;
    e["si_snr"] = it.si_snr;
    e["si_snri"] = it.si_snri;
    e["sdri_plain"] = it.sdri_plain;
    e["permutation"] = it.permutation;
    j["per_item"].push_back(e);
  }
  return j;
}

}  // namespace tpsep::objective
