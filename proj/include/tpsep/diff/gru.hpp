#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "tpsep/diff/graph.hpp"
#include "tpsep/diff/ops.hpp"

namespace tpsep::diff {

/// One direction of a gated recurrent layer. Gate order along the 3H axis is
/// reset, update, candidate.
///   r = sigmoid(x Wx_r + bx_r + h Wh_r + bh_r)
///   z = sigmoid(x Wx_z + bx_z + h Wh_z + bh_z)
///   n = tanh(x Wx_n + bx_n + r * (h Wh_n + bh_n))
///   h' = (1 - z) * n + z * h
template <typename T>
struct GruWeights {
  Var<T> wx;  // [F, 3H]
  Var<T> wh;  // [H, 3H]
  Var<T> bx;  // [3H]
  Var<T> bh;  // [3H]
};

namespace detail {

template <typename T>
struct GruTrace {
  Tensor<T> h_prev;  // [steps, B, H], state entering each processed step
  Tensor<T> r, z, n, hn;  // [steps, B, H]; hn = h Wh_n + bh_n
};

inline std::size_t gru_time(std::size_t step, std::size_t steps, bool reverse) {
  return reverse ? steps - 1 - step : step;
}

/// Runs one direction over time-major input xt [steps*B, F]. Writes hidden
/// states into out [B, steps, 2H] at column offset `col`.
template <typename T>
GruTrace<T> gru_forward(const Tensor<T>& xt, std::size_t steps, std::size_t batch,
                        std::size_t feat, std::size_t hidden, const Tensor<T>& wx,
                        const Tensor<T>& wh, const Tensor<T>& bx,
                        const Tensor<T>& bh, bool reverse, Tensor<T>& out,
                        std::size_t col, bool keep_trace) {
  const std::size_t h3 = 3 * hidden;
  Tensor<T> gx(Shape{steps * batch, h3});
  {
    auto gxm = as_mat(gx, steps * batch, h3);
    gxm.noalias() = as_mat(xt, steps * batch, feat) * as_mat(wx, feat, h3);
    for (std::size_t row = 0; row < steps * batch; ++row) {
      T* g = &gx[row * h3];
      for (std::size_t j = 0; j < h3; ++j) g[j] += bx[j];
    }
  }
  GruTrace<T> tr;
  if (keep_trace) {
    const Shape s{steps, batch, hidden};
    tr.h_prev = Tensor<T>(s);
    tr.r = Tensor<T>(s);
    tr.z = Tensor<T>(s);
    tr.n = Tensor<T>(s);
    tr.hn = Tensor<T>(s);
  }
  using Arr = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
  const auto B = static_cast<Eigen::Index>(batch);
  const auto H = static_cast<Eigen::Index>(hidden);
  const auto bhm = as_mat(bh, 1, h3);
  RowMat<T> h = RowMat<T>::Zero(B, H);
  RowMat<T> gh(B, static_cast<Eigen::Index>(h3));
  Arr r(B, H), z(B, H), hn(B, H), n(B, H);
  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t t = gru_time(step, steps, reverse);
    gh.noalias() = h * as_mat(wh, hidden, h3);
    gh.rowwise() += bhm.row(0);
    auto gxt = ConstMatMap<T>(&gx[t * batch * h3], B, static_cast<Eigen::Index>(h3));
    r = T{1} / (T{1} + (-(gxt.leftCols(H).array() + gh.leftCols(H).array())).exp());
    z = T{1} / (T{1} + (-(gxt.middleCols(H, H).array() + gh.middleCols(H, H).array())).exp());
    hn = gh.rightCols(H).array();
    n = (gxt.rightCols(H).array() + r * hn).tanh();
    if (keep_trace) {
      const std::size_t off = step * batch * hidden;
      as_mat(tr.h_prev, steps * batch, hidden).middleRows(static_cast<Eigen::Index>(step * batch), B) = h;
      Eigen::Map<Arr>(&tr.r[off], B, H) = r;
      Eigen::Map<Arr>(&tr.z[off], B, H) = z;
      Eigen::Map<Arr>(&tr.n[off], B, H) = n;
      Eigen::Map<Arr>(&tr.hn[off], B, H) = hn;
    }
    h.array() = (T{1} - z) * n + z * h.array();
    StridedMap(&out[t * 2 * hidden + col], B, H,
               Eigen::OuterStride<>(static_cast<Eigen::Index>(steps * 2 * hidden))) = h;
  }
  return tr;
}

template <typename T>
void gru_backward(const GruTrace<T>& tr, const Tensor<T>& xt, const Tensor<T>& g,
                  std::size_t steps, std::size_t batch, std::size_t feat,
                  std::size_t hidden, const Tensor<T>& wx, const Tensor<T>& wh,
                  bool reverse, std::size_t col, Tensor<T>* dx_tm, Tensor<T>* dwx,
                  Tensor<T>* dwh, Tensor<T>* dbx, Tensor<T>* dbh) {
  const std::size_t h3 = 3 * hidden;
  const std::size_t g_row = steps * 2 * hidden;
  Tensor<T> dgx(Shape{steps * batch, h3});
  Tensor<T> dgh(Shape{batch, h3});
  Tensor<T> dh(Shape{batch, hidden});
  Tensor<T> dh_next(Shape{batch, hidden});
  for (std::size_t step = steps; step-- > 0;) {
    const std::size_t t = gru_time(step, steps, reverse);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* go = &g[b * g_row + t * 2 * hidden + col];
      const std::size_t base = (step * batch + b) * hidden;
      T* dgxr = &dgx[(t * batch + b) * h3];
      T* dghr = &dgh[b * h3];
      T* dhr = &dh[b * hidden];
      T* dnext = &dh_next[b * hidden];
      for (std::size_t j = 0; j < hidden; ++j) {
        const T d = go[j] + dhr[j];
        const T r = tr.r[base + j], z = tr.z[base + j], n = tr.n[base + j];
        const T hp = tr.h_prev[base + j];
        const T dn = d * (T{1} - z);
        const T dz = d * (hp - n);
        const T dn_pre = dn * (T{1} - n * n);
        const T dr_pre = dn_pre * tr.hn[base + j] * r * (T{1} - r);
        const T dz_pre = dz * z * (T{1} - z);
        dgxr[j] = dr_pre;
        dgxr[hidden + j] = dz_pre;
        dgxr[2 * hidden + j] = dn_pre;
        dghr[j] = dr_pre;
        dghr[hidden + j] = dz_pre;
        dghr[2 * hidden + j] = dn_pre * r;
        dnext[j] = d * z;
      }
    }
    auto dghm = as_mat(dgh, batch, h3);
    as_mat(dh_next, batch, hidden).noalias() += dghm * as_mat(wh, hidden, h3).transpose();
    if (dwh) {
      auto hp = ConstMatMap<T>(&tr.h_prev[step * batch * hidden],
                               static_cast<Eigen::Index>(batch),
                               static_cast<Eigen::Index>(hidden));
      as_mat(*dwh, hidden, h3).noalias() += hp.transpose() * dghm;
    }
    if (dbh) {
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < h3; ++j) (*dbh)[j] += dgh[b * h3 + j];
      }
    }
    std::swap(dh, dh_next);
  }
  auto dgxm = as_mat(dgx, steps * batch, h3);
  if (dwx) as_mat(*dwx, feat, h3).noalias() += as_mat(xt, steps * batch, feat).transpose() * dgxm;
  if (dbx) {
    for (std::size_t row = 0; row < steps * batch; ++row) {
      for (std::size_t j = 0; j < h3; ++j) (*dbx)[j] += dgx[row * h3 + j];
    }
  }
  if (dx_tm) as_mat(*dx_tm, steps * batch, feat).noalias() += dgxm * as_mat(wx, feat, h3).transpose();
}

}  // namespace detail

/// Bidirectional gated recurrent layer along axis 1.
/// x: [B, steps, F] -> [B, steps, 2H] (forward states, then backward states).
template <typename T>
Var<T> bigru(const Var<T>& x, const GruWeights<T>& fwd, const GruWeights<T>& bwd) {
  constexpr auto op = OpKind::kBiGru;
  const auto& xv = x.value();
  detail::require_rank(op, xv.shape(), 3, "input");
  const std::size_t batch = xv.dim(0), steps = xv.dim(1), feat = xv.dim(2);
  const std::size_t hidden = fwd.wh.value().dim(0);
  for (const auto* w : {&fwd, &bwd}) {
    const bool ok = w->wx.shape() == Shape{feat, 3 * hidden} &&
                    w->wh.shape() == Shape{hidden, 3 * hidden} &&
                    w->bx.value().numel() == 3 * hidden &&
                    w->bh.value().numel() == 3 * hidden;
    if (!ok) {
      detail::shape_fail(op, "weights wx " + to_string(w->wx.shape()) + " wh " +
                                 to_string(w->wh.shape()) + " incompatible with input " +
                                 to_string(xv.shape()));
    }
  }
  // Time-major copy: rows ordered (t, b).
  Tensor<T> xt(Shape{steps * batch, feat});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      std::copy_n(&xv[(b * steps + t) * feat], feat, &xt[(t * batch + b) * feat]);
    }
  }
  bool need_grad = x.requires_grad();
  for (const auto* w : {&fwd, &bwd}) {
    need_grad = need_grad || w->wx.requires_grad() || w->wh.requires_grad() ||
                w->bx.requires_grad() || w->bh.requires_grad();
  }
  Tensor<T> out(Shape{batch, steps, 2 * hidden});
  auto tf = detail::gru_forward(xt, steps, batch, feat, hidden, fwd.wx.value(),
                                fwd.wh.value(), fwd.bx.value(), fwd.bh.value(),
                                false, out, 0, need_grad);
  auto tb = detail::gru_forward(xt, steps, batch, feat, hidden, bwd.wx.value(),
                                bwd.wh.value(), bwd.bx.value(), bwd.bh.value(),
                                true, out, hidden, need_grad);
  std::vector<Var<T>> inputs{x,      fwd.wx, fwd.wh, fwd.bx, fwd.bh,
                             bwd.wx, bwd.wh, bwd.bx, bwd.bh};
  return x.graph().record(op, inputs, std::move(out), [&] {
    return BackwardFn<T>(
        [tf = std::move(tf), tb = std::move(tb), xt = std::move(xt),
         wxf = fwd.wx.value(), whf = fwd.wh.value(), wxb = bwd.wx.value(),
         whb = bwd.wh.value(), batch, steps, feat,
         hidden](const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
          Tensor<T> dxt;
          Tensor<T>* dxt_ptr = nullptr;
          if (gi[0]) {
            dxt = Tensor<T>(Shape{steps * batch, feat});
            dxt_ptr = &dxt;
          }
          detail::gru_backward(tf, xt, g, steps, batch, feat, hidden, wxf, whf,
                               false, 0, dxt_ptr, gi[1], gi[2], gi[3], gi[4]);
          detail::gru_backward(tb, xt, g, steps, batch, feat, hidden, wxb, whb,
                               true, hidden, dxt_ptr, gi[5], gi[6], gi[7], gi[8]);
          if (gi[0]) {
            auto& dx = *gi[0];
            for (std::size_t b = 0; b < batch; ++b) {
              for (std::size_t t = 0; t < steps; ++t) {
                const T* src = &dxt[(t * batch + b) * feat];
                T* dst = &dx[(b * steps + t) * feat];
                for (std::size_t f = 0; f < feat; ++f) dst[f] += src[f];
              }
            }
          }
        });
  });
}

}  // namespace tpsep::diff
