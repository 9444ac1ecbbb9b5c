#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "test_util.hpp"
#include "tpsep/objective.hpp"

namespace {

namespace d = tpsep::diff;
using namespace tpsep::objective;
using tpsep::audio::MixtureScene;
using tpsep::audio::Waveform;
using tpsep::testing::random_signal;

/// Zero-mean, unit-norm copy of a random signal.
std::vector<float> unit(std::size_t n, std::uint64_t seed) {
  auto x = random_signal(n, seed);
  const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double e = 0.0;
  for (auto& v : x) {
    v = static_cast<float>(v - m);
    e += double(v) * v;
  }
  for (auto& v : x) v = static_cast<float>(v / std::sqrt(e));
  return x;
}

/// Unit-norm, zero-mean, and orthogonal to `ref` (to double rounding).
std::vector<double> orthogonal_unit(const std::vector<float>& ref, std::uint64_t seed) {
  const auto r = random_signal(ref.size(), seed);
  std::vector<double> u(r.begin(), r.end());
  const double m = std::accumulate(u.begin(), u.end(), 0.0) / static_cast<double>(u.size());
  for (auto& v : u) v -= m;
  double dot = 0.0, rr = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * ref[i];
    rr += double(ref[i]) * ref[i];
  }
  double e = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    u[i] -= dot / rr * ref[i];
    e += u[i] * u[i];
  }
  for (auto& v : u) v /= std::sqrt(e);
  return u;
}

/// Straight evaluation of the definition with mean removal.
double oracle_si_snr(const std::vector<float>& est, const std::vector<float>& ref, double eps = 1e-8) {
  const std::size_t n = est.size();
  const double me = std::accumulate(est.begin(), est.end(), 0.0) / n;
  const double mr = std::accumulate(ref.begin(), ref.end(), 0.0) / n;
  double dot = 0.0, rr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += (est[i] - me) * (ref[i] - mr);
    rr += (ref[i] - mr) * (ref[i] - mr);
  }
  double st = 0.0, en = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = dot / (rr + eps) * (ref[i] - mr);
    st += s * s;
    en += (est[i] - me - s) * (est[i] - me - s);
  }
  return 10.0 * std::log10((st + eps) / (en + eps));
}

TEST(SiSnr, PerfectEstimateHitsEpsCeiling) {
  const auto r = unit(500, 1);
  EXPECT_NEAR(si_snr(r, r), 80.0, 1e-3);
}

TEST(SiSnr, OrthogonalEstimateHitsEpsFloor) {
  const auto r = unit(500, 2);
  const auto u = orthogonal_unit(r, 3);
  EXPECT_NEAR(si_snr(std::span<const double>(u), std::span<const float>(r)), -80.0, 0.1);
}

TEST(SiSnr, TenPercentOrthogonalNoiseIsTwentyDb) {
  const auto r = unit(500, 4);
  const auto u = orthogonal_unit(r, 5);
  std::vector<double> est(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) est[i] = r[i] + 0.1 * u[i];
  EXPECT_NEAR(si_snr(std::span<const double>(est), std::span<const float>(r)), 20.0, 1e-3);
}

TEST(SiSnr, ScaleAndOffsetInvariant) {
  const auto r = random_signal(300, 6);
  auto e = random_signal(300, 7);
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = r[i] + 0.7F * e[i];
  const double base = si_snr(e, r);
  for (double a : {3.0, 0.5, 250.0}) {
    std::vector<double> s(e.begin(), e.end());
    for (auto& v : s) v *= a;
    EXPECT_NEAR(si_snr(std::span<const double>(s), std::span<const float>(r)), base, 1e-6) << a;
  }
  std::vector<double> shifted(e.begin(), e.end());
  for (auto& v : shifted) v += 2.0;
  EXPECT_NEAR(si_snr(std::span<const double>(shifted), std::span<const float>(r)), base, 1e-6);
}

TEST(SiSnr, MatchesDefinition) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = random_signal(257, 10 + seed);
    const auto e = random_signal(257, 40 + seed);
    EXPECT_NEAR(si_snr(e, r), oracle_si_snr(e, r), 1e-9);
  }
}

TEST(SiSnr, ErrorsAndDegenerateReference) {
  EXPECT_THROW(si_snr(std::vector<float>(4), std::vector<float>(5)), ObjectiveError);
  const double v = si_snr(random_signal(10, 8), std::vector<float>(10, 0.0F));
  EXPECT_TRUE(std::isfinite(v));
}

TEST(SiSnr, DifferentiableValueAgrees) {
  const auto r = random_signal(200, 9);
  const auto e = random_signal(200, 11);
  d::Graph<double> g;
  d::Tensor<double> t(d::Shape{200});
  for (std::size_t i = 0; i < 200; ++i) t[i] = e[i];
  const auto v = neg_si_snr(g.constant(t), std::span<const float>(r)).value()[0];
  EXPECT_NEAR(v, -si_snr(e, r), 1e-9);
}

TEST(Pit, TwoSpeakerExamples) {
  auto a = pit_assign({{0, 10}, {10, 0}});
  EXPECT_EQ(a.perm, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(a.loss, 0.0);
  auto b = pit_assign({{10, 0}, {0, 10}});
  EXPECT_EQ(b.perm, (std::vector<std::size_t>{1, 0}));
  EXPECT_EQ(b.loss, 0.0);
}

double brute_force_min(const std::vector<std::vector<double>>& cost) {
  const std::size_t c = cost.size();
  std::vector<std::size_t> p(c);
  std::iota(p.begin(), p.end(), 0);
  double best = 1e300;
  do {
    double t = 0.0;
    for (std::size_t i = 0; i < c; ++i) t += cost[p[i]][i];
    best = std::min(best, t / c);
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

TEST(Pit, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> gauss(0.0, 5.0);
  for (std::size_t c : {2U, 3U, 4U}) {
    for (int trial = 0; trial < 25; ++trial) {
      std::vector<std::vector<double>> cost(c, std::vector<double>(c));
      for (auto& row : cost) {
        for (auto& v : row) v = gauss(rng);
      }
      const auto a = pit_assign(cost);
      double check = 0.0;
      for (std::size_t i = 0; i < c; ++i) check += cost[a.perm[i]][i];
      EXPECT_DOUBLE_EQ(a.loss, check / c);
      EXPECT_DOUBLE_EQ(a.loss, brute_force_min(cost));
    }
  }
}

TEST(Pit, EnumerationBound) {
  EXPECT_NO_THROW(pit_assign(std::vector<std::vector<double>>(6, std::vector<double>(6, 1.0))));
  EXPECT_THROW(pit_assign(std::vector<std::vector<double>>(7, std::vector<double>(7, 1.0))), ObjectiveError);
  EXPECT_THROW(pit_assign({{1, 2}, {3}}), ObjectiveError);
}

TEST(StageWeights, Schedule) {
  EXPECT_EQ(stage_weights(0).alpha, 1.0);
  EXPECT_EQ(stage_weights(19).beta, 1.0);
  EXPECT_EQ(stage_weights(20).alpha, 0.5);
  EXPECT_EQ(stage_weights(20).beta, 0.5);
  EXPECT_EQ(stage_weights(45).alpha, 0.25);
  for (int e = 1; e <= 200; ++e) {
    const auto w = stage_weights(e), prev = stage_weights(e - 1);
    EXPECT_EQ(w.alpha, w.beta);
    EXPECT_LE(w.alpha, prev.alpha);
    EXPECT_EQ(w.alpha, e % 20 == 0 ? prev.alpha / 2 : prev.alpha);
  }
  EXPECT_THROW(stage_weights(-1), ObjectiveError);
}

/// Scene with zero-mean unit-norm targets and estimates built from them.
struct Fixture {
  MixtureScene scene;
  d::Graph<double> g;

  explicit Fixture(std::size_t n = 400) {
    scene.z = Waveform{unit(n, 20), 8000};
    scene.m = {Waveform{unit(n, 21), 8000}, Waveform{unit(n, 22), 8000}};
    scene.s = {Waveform{unit(n, 23), 8000}, Waveform{unit(n, 24), 8000}};
    scene.y = Waveform{random_signal(n, 25), 8000};
  }

  /// `x` plus random noise of norm about `noise`.
  d::Var<double> var(const std::vector<float>& x, std::uint64_t noise_seed = 0, double noise = 0.0) {
    d::Tensor<double> t(d::Shape{x.size()});
    const auto e = random_signal(x.size(), noise_seed);
    const double k = noise / std::sqrt(static_cast<double>(x.size()));
    for (std::size_t i = 0; i < x.size(); ++i) t[i] = x[i] + k * e[i];
    return g.constant(std::move(t));
  }

  tpsep::net::StageOutputs<double> perfect() {
    tpsep::net::StageOutputs<double> o;
    o.z_hat = var(scene.z.samples);
    for (const auto& w : scene.m) o.m_hat.push_back(var(w.samples));
    for (const auto& w : scene.s) o.s_hat.push_back(var(w.samples));
    return o;
  }

  tpsep::net::StageOutputs<double> noisy(std::uint64_t seed) {
    tpsep::net::StageOutputs<double> o;
    o.z_hat = var(scene.z.samples, seed, 0.3);
    for (std::size_t i = 0; i < 2; ++i) o.m_hat.push_back(var(scene.m[i].samples, seed + 1 + i, 0.2 * (i + 1)));
    for (std::size_t i = 0; i < 2; ++i) o.s_hat.push_back(var(scene.s[i].samples, seed + 3 + i, 0.25 * (i + 1)));
    return o;
  }
};

TEST(TotalLoss, PerfectOutputsHitThreeCeilings) {
  Fixture f;
  const auto r = total_loss(f.perfect(), f.scene, 3, stage_weights(0));
  EXPECT_NEAR(r.report.total, -240.0, 0.01);
  EXPECT_NEAR(r.loss.value()[0], -240.0, 0.01);
  EXPECT_EQ(r.report.permutation, (std::vector<std::size_t>{0, 1}));
}

TEST(TotalLoss, ReportIsWeightedSum) {
  Fixture f;
  for (int epoch : {0, 25, 61}) {
    const auto r = total_loss(f.noisy(30), f.scene, 3, stage_weights(epoch)).report;
    EXPECT_EQ(r.total, r.alpha * r.l1 + r.beta * r.l2 + r.l3);
    EXPECT_EQ(r.alpha, std::ldexp(1.0, -(epoch / 20)));
  }
}

TEST(TotalLoss, ZeroWeightsLeaveOnlyFinalStage) {
  Fixture f;
  auto out = f.noisy(40);
  const auto r = total_loss(out, f.scene, 3, StageWeights{0.0, 0.0, 0});
  EXPECT_EQ(r.report.total, r.report.l3);
  EXPECT_NEAR(r.loss.value()[0], r.report.l3, 1e-12);
  // Degrading the intermediate estimates changes nothing.
  out.z_hat = f.var(random_signal(400, 41));
  out.m_hat = {f.var(random_signal(400, 42)), f.var(random_signal(400, 43))};
  EXPECT_EQ(total_loss(out, f.scene, 3, StageWeights{0.0, 0.0, 0}).report.total, r.report.total);
}

TEST(TotalLoss, SpeakerOrderSymmetric) {
  Fixture f;
  auto out = f.noisy(50);
  const auto a = total_loss(out, f.scene, 3, stage_weights(0));
  std::swap(out.m_hat[0], out.m_hat[1]);
  std::swap(out.s_hat[0], out.s_hat[1]);
  const auto b = total_loss(out, f.scene, 3, stage_weights(0));
  EXPECT_DOUBLE_EQ(a.report.total, b.report.total);
  EXPECT_EQ(b.report.permutation, (std::vector<std::size_t>{1, 0}));
}

TEST(TotalLoss, PermutationChosenOnCombinedLoss) {
  Fixture f;
  tpsep::net::StageOutputs<double> out;
  out.z_hat = f.var(f.scene.z.samples);
  // Final stage weakly prefers identity, the reverberant stage strongly
  // prefers the swap.
  out.s_hat = {f.var(f.scene.s[0].samples, 60, 0.5), f.var(f.scene.s[1].samples, 61, 0.5)};
  out.m_hat = {f.var(f.scene.m[1].samples, 62, 0.01), f.var(f.scene.m[0].samples, 63, 0.01)};
  const auto r = total_loss(out, f.scene, 3, StageWeights{1.0, 1.0, 0}).report;
  EXPECT_EQ(r.permutation, (std::vector<std::size_t>{1, 0}));
  const auto r0 = total_loss(out, f.scene, 3, StageWeights{1.0, 0.0, 0}).report;
  EXPECT_EQ(r0.permutation, (std::vector<std::size_t>{0, 1}));
}

TEST(TotalLoss, FewerStages) {
  Fixture f;
  auto out = f.noisy(70);
  out.m_hat.clear();
  const auto two = total_loss(out, f.scene, 2, stage_weights(0)).report;
  EXPECT_EQ(two.l2, 0.0);
  EXPECT_EQ(two.total, two.l1 + two.l3);
  out.z_hat.reset();
  const auto one = total_loss(out, f.scene, 1, stage_weights(0)).report;
  EXPECT_EQ(one.total, one.l3);
}

TEST(TotalLoss, MissingIntermediatesAreErrors) {
  Fixture f;
  auto out = f.noisy(80);
  out.z_hat.reset();
  EXPECT_THROW(total_loss(out, f.scene, 3, stage_weights(0)), ObjectiveError);
  auto out2 = f.noisy(81);
  out2.m_hat.pop_back();
  EXPECT_THROW(total_loss(out2, f.scene, 3, stage_weights(0)), ObjectiveError);
  auto out3 = f.noisy(82);
  out3.s_hat.pop_back();
  EXPECT_THROW(total_loss(out3, f.scene, 3, stage_weights(0)), ObjectiveError);
}

TEST(EvalMetrics, MixtureEstimateHasZeroImprovement) {
  Fixture f;
  const auto m = eval_metrics({f.scene.y.samples, f.scene.y.samples}, f.scene);
  EXPECT_EQ(m.si_snri, 0.0);
  EXPECT_EQ(m.sdri_plain, 0.0);
}

TEST(EvalMetrics, PerfectEstimate) {
  Fixture f;
  const auto m = eval_metrics({f.scene.s[1].samples, f.scene.s[0].samples}, f.scene);
  EXPECT_EQ(m.permutation, (std::vector<std::size_t>{1, 0}));
  double want = 0.0;
  for (const auto& s : f.scene.s) want += si_snr(s.samples, s.samples) - si_snr(f.scene.y.samples, s.samples);
  EXPECT_NEAR(m.si_snri, want / 2, 1e-9);
  EXPECT_GT(m.si_snri, 60.0);
}

double oracle_sdr(const std::vector<float>& est, const std::vector<float>& ref) {
  double dot = 0.0, ee = 0.0, rr = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    dot += double(est[i]) * ref[i];
    ee += double(est[i]) * est[i];
    rr += double(ref[i]) * ref[i];
  }
  double err = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double d = ref[i] - dot / (ee + 1e-8) * est[i];
    err += d * d;
  }
  return 10.0 * std::log10((rr + 1e-8) / (err + 1e-8));
}

TEST(EvalMetrics, MatchesRawFormulas) {
  Fixture f;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<std::vector<float>> est{random_signal(400, 90 + seed), random_signal(400, 190 + seed)};
    for (std::size_t i = 0; i < 400; ++i) est[0][i] += 2.0F * f.scene.s[seed % 2].samples[i];
    const auto m = eval_metrics(est, f.scene);
    double best = -1e300, si = 0.0, sd = 0.0;
    for (std::vector<std::size_t> p : {std::vector<std::size_t>{0, 1}, std::vector<std::size_t>{1, 0}}) {
      double v = 0.0, w = 0.0;
      for (std::size_t i = 0; i < 2; ++i) {
        v += oracle_si_snr(est[p[i]], f.scene.s[i].samples) - oracle_si_snr(f.scene.y.samples, f.scene.s[i].samples);
        w += oracle_sdr(est[p[i]], f.scene.s[i].samples) - oracle_sdr(f.scene.y.samples, f.scene.s[i].samples);
      }
      if (v > best) {
        best = v;
        si = v / 2;
        sd = w / 2;
      }
    }
    EXPECT_NEAR(m.si_snri, si, 1e-6);
    EXPECT_NEAR(m.sdri_plain, sd, 1e-6);
  }
}

TEST(EvalMetrics, ReportJson) {
  ItemMetrics a{"a", 1.0, 2.0, 3.0, {0, 1}}, b{"b", 1.0, 4.0, 5.0, {1, 0}};
  const auto r = aggregate({a, b});
  EXPECT_EQ(r.si_snri_mean, 3.0);
  EXPECT_EQ(r.si_snri_std, 1.0);
  EXPECT_EQ(r.sdri_plain_mean, 4.0);
  const auto j = to_json(r);
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  EXPECT_EQ(keys, (std::vector<std::string>{"num_items", "si_snri_mean", "si_snri_std", "sdri_plain_mean",
                                            "per_item"}));
  EXPECT_EQ(j["per_item"].size(), 2U);
  EXPECT_EQ(j["per_item"][1]["id"], "b");
}

}  // namespace
