#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "test_util.hpp"
#include "tpsep/diff/graph.hpp"
#include "tpsep/diff/gru.hpp"
#include "tpsep/diff/ops.hpp"

namespace {

using tpsep::diff::Graph;
using tpsep::diff::NumericError;
using tpsep::diff::Shape;
using tpsep::diff::ShapeError;
using tpsep::diff::Tensor;
using tpsep::diff::Var;
namespace d = tpsep::diff;
using tpsep::testing::random_tensor;

Tensor<double> t1(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>(Shape{n}, std::move(v));
}

Tensor<double> t2(std::size_t r, std::size_t c, std::vector<double> v) {
  return Tensor<double>(Shape{r, c}, std::move(v));
}

void expect_values(const Tensor<double>& t, const std::vector<double>& want, double tol = 1e-12) {
  ASSERT_EQ(t.numel(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t[i], want[i], tol) << "index " << i;
}

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
}

TEST(Tensor, ReshapeKeepsData) {
  auto t = t2(2, 3, {1, 2, 3, 4, 5, 6});
  auto r = t.reshaped(Shape{3, 2});
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_EQ(r.at(2, 1), 6.0);
  EXPECT_THROW(t.reshaped(Shape{4}), ShapeError);
}

TEST(Ops, MatmulIdentity) {
  Graph<double> g;
  auto a = g.constant(t2(2, 2, {1, 2, 3, 4}));
  auto i = g.constant(t2(2, 2, {1, 0, 0, 1}));
  expect_values(d::matmul(a, i).value(), {1, 2, 3, 4});
}

TEST(Ops, MatmulShapeErrorNamesOpAndDims) {
  Graph<double> g;
  auto a = g.constant(Tensor<double>(Shape{2, 3}));
  auto b = g.constant(Tensor<double>(Shape{2, 3}));
  try {
    d::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  }
}

TEST(Ops, Conv1dUnitKernelSubsamples) {
  Graph<double> g;
  auto x = g.constant(t2(1, 4, {1, 2, 3, 4}));
  auto w = g.constant(Tensor<double>(Shape{1, 1, 1}, std::vector<double>{1.0}));
  expect_values(d::conv1d(x, w, 2).value(), {1, 3});
}

TEST(Ops, Conv1dMatchesDirectSum) {
  Graph<double> g;
  const auto xv = random_tensor(Shape{3, 11}, 1);
  const auto wv = random_tensor(Shape{2, 3, 4}, 2);
  auto y = d::conv1d(g.constant(xv), g.constant(wv), 2).value();
  ASSERT_EQ(y.shape(), (Shape{2, 4}));
  for (std::size_t o = 0; o < 2; ++o) {
    for (std::size_t l = 0; l < 4; ++l) {
      double acc = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t k = 0; k < 4; ++k) acc += wv.at(o, c, k) * xv.at(c, l * 2 + k);
      }
      EXPECT_NEAR(y.at(o, l), acc, 1e-12);
    }
  }
}

TEST(Ops, ConvTransposeIsAdjointOfConv) {
  // <conv(x), y> == <x, conv_transpose(y)> with the same weights.
  Graph<double> g;
  const auto xv = random_tensor(Shape{2, 14}, 3);
  const auto wv = random_tensor(Shape{3, 2, 4}, 4);
  const auto yv = random_tensor(Shape{3, 6}, 5);
  auto cx = d::conv1d(g.constant(xv), g.constant(wv), 2).value();
  ASSERT_EQ(cx.shape(), yv.shape());
  // conv_transpose weights are [Cin, Cout, Kw] with Cin = conv's Cout.
  auto ty = d::conv_transpose1d(g.constant(yv), g.constant(wv), 2).value();
  ASSERT_EQ(ty.shape(), xv.shape());
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < cx.numel(); ++i) lhs += cx[i] * yv[i];
  for (std::size_t i = 0; i < xv.numel(); ++i) rhs += xv[i] * ty[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Ops, ElementwiseDefinitions) {
  Graph<double> g;
  EXPECT_DOUBLE_EQ(d::sigmoid(g.constant(t1({0.0}))).value()[0], 0.5);
  EXPECT_DOUBLE_EQ(d::relu(g.constant(t1({-3.0}))).value()[0], 0.0);
  auto slope = g.constant(t1({0.25}));
  expect_values(d::prelu(g.constant(t1({-2.0, 3.0})), slope).value(), {-0.5, 3.0});
  expect_values(d::tanh(g.constant(t1({0.0, 1.0}))).value(), {0.0, std::tanh(1.0)});
}

TEST(Ops, Pools) {
  Graph<double> g;
  auto x = g.constant(t2(2, 3, {1, 5, 2, 7, 0, 3}));
  expect_values(d::max_pool(x, {1}).value(), {5, 7});
  expect_values(d::mean_pool(x, {1}).value(), {8.0 / 3.0, 10.0 / 3.0});
  expect_values(d::mean_pool(x, {0}).value(), {4, 2.5, 2.5});
}

TEST(Ops, LayerNormNormalizesEachGroup) {
  Graph<double> g;
  const auto xv = random_tensor(Shape{3, 4, 5}, 6, -2.0, 5.0);
  auto gain = g.constant(Tensor<double>(Shape{5}, 1.0));
  auto bias = g.constant(Tensor<double>(Shape{5}, 0.0));
  auto y = d::layer_norm(g.constant(xv), {1, 2}, gain, bias, 2).value();
  for (std::size_t b = 0; b < 3; ++b) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < 20; ++i) m += y[b * 20 + i];
    m /= 20.0;
    for (std::size_t i = 0; i < 20; ++i) v += (y[b * 20 + i] - m) * (y[b * 20 + i] - m);
    v /= 20.0;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-3);  // eps in the denominator
  }
}

TEST(Ops, PermuteAndInverse) {
  Graph<double> g;
  const auto xv = random_tensor(Shape{2, 3, 4}, 7);
  auto x = g.constant(xv);
  auto p = d::permute(x, {1, 2, 0});
  EXPECT_EQ(p.shape(), (Shape{3, 4, 2}));
  EXPECT_EQ(p.value().at(2, 1, 0), xv.at(0, 2, 1));
  auto back = d::permute(p, {2, 0, 1});
  EXPECT_EQ(back.value(), xv);
}

TEST(Ops, SplitConcatRoundTrip) {
  Graph<double> g;
  const auto xv = random_tensor(Shape{6, 2}, 8);
  auto parts = d::split(g.constant(xv), 0, {2, 4});
  ASSERT_EQ(parts.size(), 2U);
  EXPECT_EQ(parts[1].shape(), (Shape{4, 2}));
  EXPECT_EQ(d::concat(parts, 0).value(), xv);
  EXPECT_THROW(d::split(g.constant(xv), 0, {2, 3}), ShapeError);
}

TEST(Ops, BroadcastRequiresMatchingChannelCount) {
  Graph<double> g;
  auto x = g.constant(Tensor<double>(Shape{3, 4}));
  auto v = g.constant(Tensor<double>(Shape{4}));
  EXPECT_THROW(d::mul_channel(x, v, 0), ShapeError);
  EXPECT_NO_THROW(d::mul_channel(x, v, 1));
}

TEST(Ops, NonFiniteOutputIsNumericError) {
  Graph<double> g;
  auto x = g.constant(t1({1e300}));
  try {
    d::mul(x, x);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("mul"), std::string::npos);
  }
}

TEST(Backward, SigmoidAtZero) {
  Graph<double> g;
  auto x = g.leaf(t1({0.0}), true);
  auto gm = g.backward(d::sum(d::sigmoid(x)));
  EXPECT_DOUBLE_EQ(gm.at(x)[0], 0.25);
}

TEST(Backward, ProductRule) {
  Graph<double> g;
  auto x = g.leaf(t1({1, 2}), true);
  auto y = g.leaf(t1({3, 4}), true);
  auto gm = g.backward(d::sum(d::mul(x, y)));
  expect_values(gm.at(x), {3, 4});
  expect_values(gm.at(y), {1, 2});
}

TEST(Backward, ReluSubgradient) {
  Graph<double> g;
  auto x = g.leaf(t1({-1, 2}), true);
  expect_values(g.backward(d::sum(d::relu(x))).at(x), {0, 1});
}

TEST(Backward, NonScalarLossIsError) {
  Graph<double> g;
  auto x = g.leaf(t1({1, 2}), true);
  EXPECT_THROW(g.backward(d::relu(x)), ShapeError);
}

TEST(Backward, DetachedLossGivesZeros) {
  Graph<double> g;
  auto x = g.leaf(t1({1, 2}), false);
  auto w = g.leaf(t1({5, 6}), true);
  auto gm = g.backward(d::sum(x));
  expect_values(gm.at(w), {0, 0});
  expect_values(gm.at(x), {0, 0});
}

TEST(Backward, SharedNodeAccumulatesAllPaths) {
  Graph<double> g;
  auto x = g.leaf(t1({2.0}), true);
  auto y = d::add(d::mul(x, x), d::scale(x, 3.0));  // x^2 + 3x
  EXPECT_DOUBLE_EQ(g.backward(d::sum(y)).at(x)[0], 7.0);
}

TEST(Backward, LinearInLoss) {
  const auto xv = random_tensor(Shape{4, 3}, 9);
  const auto wv = random_tensor(Shape{3, 2}, 10);
  auto grads = [&](int which) {
    Graph<double> g;
    auto x = g.leaf(xv, true);
    auto w = g.leaf(wv, true);
    auto h = d::matmul(x, w);
    auto l1 = d::sum(d::tanh(h));
    auto l2 = d::mean(d::mul(h, h));
    auto loss = which == 0 ? l1 : which == 1 ? l2 : d::add(l1, l2);
    auto gm = g.backward(loss);
    return std::make_pair(gm.at(x), gm.at(w));
  };
  auto [x1, w1] = grads(0);
  auto [x2, w2] = grads(1);
  auto [x12, w12] = grads(2);
  for (std::size_t i = 0; i < x12.numel(); ++i) EXPECT_NEAR(x12[i], x1[i] + x2[i], 1e-12);
  for (std::size_t i = 0; i < w12.numel(); ++i) EXPECT_NEAR(w12[i], w1[i] + w2[i], 1e-12);
}

TEST(Forward, Deterministic) {
  auto run = [] {
    Graph<float> g;
    auto x = g.constant(random_tensor<float>(Shape{2, 5, 4}, 11));
    d::GruWeights<float> f{g.constant(random_tensor<float>(Shape{4, 9}, 12)),
                           g.constant(random_tensor<float>(Shape{3, 9}, 13)),
                           g.constant(random_tensor<float>(Shape{9}, 14)),
                           g.constant(random_tensor<float>(Shape{9}, 15))};
    return d::bigru(x, f, f).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Gru, ForwardMatchesScalarRecurrence) {
  Graph<double> g;
  const std::size_t steps = 5, feat = 3, hid = 2;
  const auto xv = random_tensor(Shape{1, steps, feat}, 20);
  d::GruWeights<double> w[2];
  Tensor<double> raw[2][4];
  for (int dir = 0; dir < 2; ++dir) {
    raw[dir][0] = random_tensor(Shape{feat, 3 * hid}, 21 + dir);
    raw[dir][1] = random_tensor(Shape{hid, 3 * hid}, 23 + dir);
    raw[dir][2] = random_tensor(Shape{3 * hid}, 25 + dir);
    raw[dir][3] = random_tensor(Shape{3 * hid}, 27 + dir);
    w[dir] = {g.constant(raw[dir][0]), g.constant(raw[dir][1]), g.constant(raw[dir][2]),
              g.constant(raw[dir][3])};
  }
  auto out = d::bigru(g.constant(xv), w[0], w[1]).value();
  ASSERT_EQ(out.shape(), (Shape{1, steps, 2 * hid}));
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (int dir = 0; dir < 2; ++dir) {
    std::vector<double> h(hid, 0.0);
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t t = dir == 0 ? s : steps - 1 - s;
      std::vector<double> gx(3 * hid), gh(3 * hid);
      for (std::size_t j = 0; j < 3 * hid; ++j) {
        gx[j] = raw[dir][2][j];
        gh[j] = raw[dir][3][j];
        for (std::size_t f = 0; f < feat; ++f) gx[j] += xv.at(0, t, f) * raw[dir][0].at(f, j);
        for (std::size_t k = 0; k < hid; ++k) gh[j] += h[k] * raw[dir][1].at(k, j);
      }
      std::vector<double> hn(hid);
      for (std::size_t j = 0; j < hid; ++j) {
        const double r = sig(gx[j] + gh[j]);
        const double z = sig(gx[hid + j] + gh[hid + j]);
        const double n = std::tanh(gx[2 * hid + j] + r * gh[2 * hid + j]);
        hn[j] = (1.0 - z) * n + z * h[j];
      }
      h = hn;
      for (std::size_t j = 0; j < hid; ++j) {
        EXPECT_NEAR(out.at(0, t, dir * hid + j), h[j], 1e-12) << "dir " << dir << " t " << t;
      }
    }
  }
}

}  // namespace
