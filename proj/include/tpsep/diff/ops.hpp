#pragma once

// Differentiable operation catalog. Every op validates shapes eagerly and
// names itself in the error message.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "tpsep/diff/graph.hpp"
#include "tpsep/diff/tensor.hpp"

namespace tpsep::diff {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMatMap<T> as_mat(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(t.data().data(), static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}

template <typename T>
MatMap<T> as_mat(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MatMap<T>(t.data().data(), static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(cols));
}

[[noreturn]] inline void shape_fail(OpKind op, const std::string& what) {
  throw ShapeError(std::string(op_name(op)) + ": " + what);
}

inline void require_rank(OpKind op, const Shape& s, std::size_t rank,
                         const char* operand) {
  if (s.size() != rank) {
    shape_fail(op, std::string(operand) + " must have rank " +
                       std::to_string(rank) + ", got " + to_string(s));
  }
}

inline void require_same(OpKind op, const Shape& a, const Shape& b) {
  if (a != b) shape_fail(op, "shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline void require_axis(OpKind op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    shape_fail(op, "axis " + std::to_string(axis) + " out of range for " +
                       to_string(s));
  }
}

/// Maps every element of `shape` to its flat position after reducing `axes`.
struct Reduction {
  Shape out_shape;
  std::vector<std::size_t> index;  // input flat index -> output flat index
  std::size_t group_size = 1;
};

inline Reduction make_reduction(OpKind op, const Shape& shape,
                                std::vector<std::size_t> axes) {
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  if (axes.empty()) shape_fail(op, "no reduction axes given");
  std::vector<bool> reduced(shape.size(), false);
  for (auto a : axes) {
    require_axis(op, shape, a);
    reduced[a] = true;
  }
  Reduction r;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (reduced[d]) {
      r.group_size *= shape[d];
    } else {
      r.out_shape.push_back(shape[d]);
    }
  }
  if (r.out_shape.empty()) r.out_shape.push_back(1);
  // Output stride contributed by each input axis (0 for reduced axes).
  std::vector<std::size_t> out_stride(shape.size(), 0);
  std::size_t acc = 1;
  for (std::size_t d = shape.size(); d-- > 0;) {
    if (!reduced[d]) {
      out_stride[d] = acc;
      acc *= shape[d];
    }
  }
  const std::size_t n = numel_of(shape);
  r.index.resize(n);
  std::vector<std::size_t> ctr(shape.size(), 0);
  std::size_t o = 0;
  for (std::size_t i = 0; i < n; ++i) {
    r.index[i] = o;
    for (std::size_t d = shape.size(); d-- > 0;) {
      ++ctr[d];
      o += out_stride[d];
      if (ctr[d] < shape[d]) break;
      o -= out_stride[d] * ctr[d];
      ctr[d] = 0;
    }
  }
  return r;
}

/// Index of the coordinate along `axis` for every flat element.
inline std::vector<std::size_t> axis_index(const Shape& shape, std::size_t axis) {
  const auto st = strides_of(shape);
  std::vector<std::size_t> idx(numel_of(shape));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = (i / st[axis]) % shape[axis];
  return idx;
}

template <typename T, typename F, typename DF>
Var<T> unary(OpKind op, const Var<T>& x, F f, DF df_from_out_in) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
  Tensor<T> saved_out = out;
  return x.graph().record(op, {x}, std::move(out), [&] {
    return BackwardFn<T>(
        [xin = xv, yout = std::move(saved_out), df_from_out_in](
            const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
          auto& dx = *gi[0];
          for (std::size_t i = 0; i < g.numel(); ++i) {
            dx[i] += g[i] * df_from_out_in(yout[i], xin[i]);
          }
        });
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(OpKind::kAdd, a.shape(), b.shape());
  Tensor<T> out = a.value();
  out += b.value();
  return a.graph().record(OpKind::kAdd, {a, b}, std::move(out), [] {
    return BackwardFn<T>([](const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
      if (gi[0]) *gi[0] += g;
      if (gi[1]) *gi[1] += g;
    });
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(OpKind::kSub, a.shape(), b.shape());
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return a.graph().record(OpKind::kSub, {a, b}, std::move(out), [] {
    return BackwardFn<T>([](const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
      if (gi[0]) *gi[0] += g;
      if (gi[1]) {
        for (std::size_t i = 0; i < g.numel(); ++i) (*gi[1])[i] -= g[i];
      }
    });
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(OpKind::kMul, a.shape(), b.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  return a.graph().record(OpKind::kMul, {a, b}, std::move(out), [&] {
    return BackwardFn<T>([av, bv](const Tensor<T>& g,
                                  const std::vector<Tensor<T>*>& gi) {
      for (std::size_t i = 0; i < g.numel(); ++i) {
        if (gi[0]) (*gi[0])[i] += g[i] * bv[i];
        if (gi[1]) (*gi[1])[i] += g[i] * av[i];
      }
    });
  });
}

/// Multiplication by a constant.
template <typename T>
Var<T> scale(const Var<T>& x, T c) {
  Tensor<T> out = x.value();
  out *= c;
  return x.graph().record(OpKind::kScale, {x}, std::move(out), [c] {
    return BackwardFn<T>([c](const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += c * g[i];
    });
  });
}

/// Broadcast-multiplies a vector along `axis` of `x`; `v` has x.dim(axis)
/// entries.
template <typename T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& v, std::size_t axis) {
  constexpr auto op = OpKind::kMulChannel;
  const auto& xv = x.value();
  const auto& vv = v.value();
  detail::require_axis(op, xv.shape(), axis);
  if (vv.numel() != xv.dim(axis)) {
    detail::shape_fail(op, "vector of " + std::to_string(vv.numel()) +
                               " entries vs axis " + std::to_string(axis) +
                               " of " + to_string(xv.shape()));
  }
  auto ch = detail::axis_index(xv.shape(), axis);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] * vv[ch[i]];
  return x.graph().record(op, {x, v}, std::move(out), [&] {
    return BackwardFn<T>([xv, vv, ch = std::move(ch)](
                             const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
      for (std::size_t i = 0; i < g.numel(); ++i) {
        if (gi[0]) (*gi[0])[i] += g[i] * vv[ch[i]];
        if (gi[1]) (*gi[1])[ch[i]] += g[i] * xv[i];
      }
    });
  });
}

/// Broadcast-adds a vector along `axis` of `x` (bias add).
template <typename T>
Var<T> add_channel(const Var<T>& x, const Var<T>& v, std::size_t axis) {
  constexpr auto op = OpKind::kAddChannel;
  const auto& xv = x.value();
  const auto& vv = v.value();
  detail::require_axis(op, xv.shape(), axis);
  if (vv.numel() != xv.dim(axis)) {
    detail::shape_fail(op, "vector of " + std::to_string(vv.numel()) +
                               " entries vs axis " + std::to_string(axis) +
                               " of " + to_string(xv.shape()));
  }
  auto ch = detail::axis_index(xv.shape(), axis);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] + vv[ch[i]];
  return x.graph().record(op, {x, v}, std::move(out), [&] {
    return BackwardFn<T>([ch = std::move(ch)](const Tensor<T>& g,
                                              const std::vector<Tensor<T>*>& gi) {
      if (gi[0]) *gi[0] += g;
      if (gi[1]) {
        for (std::size_t i = 0; i < g.numel(); ++i) (*gi[1])[ch[i]] += g[i];
      }
    });
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(
      OpKind::kRelu, x, [](T v) { return v > T{0} ? v : T{0}; },
      [](T, T in) { return in > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(
      OpKind::kSigmoid, x, [](T v) { return T{1} / (T{1} + std::exp(-v)); },
      [](T out, T) { return out * (T{1} - out); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary(
      OpKind::kTanh, x, [](T v) { return std::tanh(v); },
      [](T out, T) { return T{1} - out * out; });
}

/// Parametric ReLU with a single learned negative slope.
template <typename T>
Var<T> prelu(const Var<T>& x, const Var<T>& slope) {
  constexpr auto op = OpKind::kPRelu;
  if (slope.value().numel() != 1) {
    detail::shape_fail(op, "slope must be a single value, got " +
                               to_string(slope.shape()));
  }
  const auto& xv = x.value();
  const T a = slope.value()[0];
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] > T{0} ? xv[i] : a * xv[i];
  return x.graph().record(op, {x, slope}, std::move(out), [&] {
    return BackwardFn<T>([xv, a](const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
      T da{0};
      for (std::size_t i = 0; i < g.numel(); ++i) {
        if (xv[i] > T{0}) {
          if (gi[0]) (*gi[0])[i] += g[i];
        } else {
          if (gi[0]) (*gi[0])[i] += a * g[i];
          da += g[i] * xv[i];
        }
      }
      if (gi[1]) (*gi[1])[0] += da;
    });
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and convolution
// ---------------------------------------------------------------------------

/// [m,k] x [k,n] -> [m,n]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  constexpr auto op = OpKind::kMatMul;
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_rank(op, av.shape(), 2, "lhs");
  detail::require_rank(op, bv.shape(), 2, "rhs");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    detail::shape_fail(op, "inner dims differ: lhs " + to_string(av.shape()) +
                               " rhs " + to_string(bv.shape()));
  }
  Tensor<T> out(Shape{m, n});
  detail::as_mat(out, m, n).noalias() = detail::as_mat(av, m, k) * detail::as_mat(bv, k, n);
  return a.graph().record(op, {a, b}, std::move(out), [&] {
    return BackwardFn<T>([av, bv, m, k, n](const Tensor<T>& g,
                                           const std::vector<Tensor<T>*>& gi) {
      auto gm = detail::as_mat(g, m, n);
      if (gi[0]) {
        detail::as_mat(*gi[0], m, k).noalias() += gm * detail::as_mat(bv, k, n).transpose();
      }
      if (gi[1]) {
        detail::as_mat(*gi[1], k, n).noalias() += detail::as_mat(av, m, k).transpose() * gm;
      }
    });
  });
}

/// Strided 1-D convolution without padding or bias.
/// x: [Cin, T], w: [Cout, Cin, Kw] -> [Cout, (T - Kw)/stride + 1]
template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& w, std::size_t stride) {
  constexpr auto op = OpKind::kConv1d;
  const auto& xv = x.value();
  const auto& wv = w.value();
  detail::require_rank(op, xv.shape(), 2, "input");
  detail::require_rank(op, wv.shape(), 3, "kernel");
  if (stride == 0) detail::shape_fail(op, "stride must be positive");
  const std::size_t cin = xv.dim(0), len = xv.dim(1);
  const std::size_t cout = wv.dim(0), kw = wv.dim(2);
  if (wv.dim(1) != cin) {
    detail::shape_fail(op, "kernel expects " + std::to_string(wv.dim(1)) +
                               " input channels, input has " + std::to_string(cin));
  }
  if (len < kw) {
    detail::shape_fail(op, "input length " + std::to_string(len) +
                               " shorter than kernel " + std::to_string(kw));
  }
  const std::size_t frames = (len - kw) / stride + 1;
  const std::size_t rows = cin * kw;
  Tensor<T> cols(Shape{rows, frames});
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t k = 0; k < kw; ++k) {
      T* dst = &cols.at(c * kw + k, 0);
      const T* src = &xv.at(c, k);
      for (std::size_t l = 0; l < frames; ++l) dst[l] = src[l * stride];
    }
  }
  Tensor<T> out(Shape{cout, frames});
  detail::as_mat(out, cout, frames).noalias() =
      detail::as_mat(wv, cout, rows) * detail::as_mat(cols, rows, frames);
  return x.graph().record(op, {x, w}, std::move(out), [&] {
    return BackwardFn<T>([wv, cols = std::move(cols), cin, len, cout, kw, rows,
                          frames, stride](const Tensor<T>& g,
                                          const std::vector<Tensor<T>*>& gi) {
      auto gm = detail::as_mat(g, cout, frames);
      if (gi[1]) {
        detail::as_mat(*gi[1], cout, rows).noalias() +=
            gm * detail::as_mat(cols, rows, frames).transpose();
      }
      if (gi[0]) {
        Tensor<T> dcols(Shape{rows, frames});
        detail::as_mat(dcols, rows, frames).noalias() =
            detail::as_mat(wv, cout, rows).transpose() * gm;
        auto& dx = *gi[0];
        for (std::size_t c = 0; c < cin; ++c) {
          for (std::size_t k = 0; k < kw; ++k) {
            const T* src = &dcols.at(c * kw + k, 0);
            T* dst = &dx[c * len + k];
            for (std::size_t l = 0; l < frames; ++l) dst[l * stride] += src[l];
          }
        }
      }
    });
  });
}

/// Strided 1-D transposed convolution without bias.
/// x: [Cin, L], w: [Cin, Cout, Kw] -> [Cout, (L - 1)*stride + Kw]
template <typename T>
Var<T> conv_transpose1d(const Var<T>& x, const Var<T>& w, std::size_t stride) {
  constexpr auto op = OpKind::kConvTranspose1d;
  const auto& xv = x.value();
  const auto& wv = w.value();
  detail::require_rank(op, xv.shape(), 2, "input");
  detail::require_rank(op, wv.shape(), 3, "kernel");
  if (stride == 0) detail::shape_fail(op, "stride must be positive");
  const std::size_t cin = xv.dim(0), frames = xv.dim(1);
  const std::size_t cout = wv.dim(1), kw = wv.dim(2);
  if (wv.dim(0) != cin) {
    detail::shape_fail(op, "kernel expects " + std::to_string(wv.dim(0)) +
                               " input channels, input has " + std::to_string(cin));
  }
  const std::size_t rows = cout * kw;
  const std::size_t len = (frames - 1) * stride + kw;
  Tensor<T> cols(Shape{rows, frames});
  detail::as_mat(cols, rows, frames).noalias() =
      detail::as_mat(wv, cin, rows).transpose() * detail::as_mat(xv, cin, frames);
  Tensor<T> out(Shape{cout, len});
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t k = 0; k < kw; ++k) {
      const T* src = &cols.at(o * kw + k, 0);
      T* dst = &out[o * len + k];
      for (std::size_t l = 0; l < frames; ++l) dst[l * stride] += src[l];
    }
  }
  return x.graph().record(op, {x, w}, std::move(out), [&] {
    return BackwardFn<T>([xv, wv, cin, frames, cout, kw, rows, len, stride](
                             const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
      Tensor<T> dcols(Shape{rows, frames});
      for (std::size_t o = 0; o < cout; ++o) {
        for (std::size_t k = 0; k < kw; ++k) {
          T* dst = &dcols.at(o * kw + k, 0);
          const T* src = &g[o * len + k];
          for (std::size_t l = 0; l < frames; ++l) dst[l] = src[l * stride];
        }
      }
      auto dc = detail::as_mat(dcols, rows, frames);
      if (gi[0]) {
        detail::as_mat(*gi[0], cin, frames).noalias() += detail::as_mat(wv, cin, rows) * dc;
      }
      if (gi[1]) {
        detail::as_mat(*gi[1], cin, rows).noalias() +=
            detail::as_mat(xv, cin, frames) * dc.transpose();
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Reductions and pooling
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& x) {
  const auto& xv = x.value();
  T s{0};
  for (auto v : xv.data()) s += v;
  return x.graph().record(OpKind::kSum, {x}, Tensor<T>::scalar(s), [] {
    return BackwardFn<T>([](const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
      for (auto& d : gi[0]->data()) d += g[0];
    });
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const auto& xv = x.value();
  T s{0};
  for (auto v : xv.data()) s += v;
  const T inv = T{1} / static_cast<T>(xv.numel());
  return x.graph().record(OpKind::kMean, {x}, Tensor<T>::scalar(s * inv), [inv] {
    return BackwardFn<T>([inv](const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
      for (auto& d : gi[0]->data()) d += g[0] * inv;
    });
  });
}

/// Mean over `axes`; remaining axes keep their order.
template <typename T>
Var<T> mean_pool(const Var<T>& x, const std::vector<std::size_t>& axes) {
  auto red = detail::make_reduction(OpKind::kMeanPool, x.shape(), axes);
  const auto& xv = x.value();
  Tensor<T> out(red.out_shape);
  for (std::size_t i = 0; i < xv.numel(); ++i) out[red.index[i]] += xv[i];
  const T inv = T{1} / static_cast<T>(red.group_size);
  out *= inv;
  return x.graph().record(OpKind::kMeanPool, {x}, std::move(out), [&] {
    return BackwardFn<T>([index = std::move(red.index), inv](
                             const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
      auto& dx = *gi[0];
      for (std::size_t i = 0; i < index.size(); ++i) dx[i] += g[index[i]] * inv;
    });
  });
}

/// Max over `axes`; the gradient flows to the first maximal element.
template <typename T>
Var<T> max_pool(const Var<T>& x, const std::vector<std::size_t>& axes) {
  auto red = detail::make_reduction(OpKind::kMaxPool, x.shape(), axes);
  const auto& xv = x.value();
  Tensor<T> out(red.out_shape, -std::numeric_limits<T>::infinity());
  std::vector<std::size_t> arg(out.numel(), 0);
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const auto o = red.index[i];
    if (xv[i] > out[o]) {
      out[o] = xv[i];
      arg[o] = i;
    }
  }
  return x.graph().record(OpKind::kMaxPool, {x}, std::move(out), [&] {
    return BackwardFn<T>([arg = std::move(arg)](const Tensor<T>& g,
                                                const std::vector<Tensor<T>*>& gi) {
      for (std::size_t o = 0; o < arg.size(); ++o) (*gi[0])[arg[o]] += g[o];
    });
  });
}

/// Normalizes over `axes` (one group per combination of the other axes), then
/// applies per-channel gain and bias along `channel_axis`.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const std::vector<std::size_t>& axes,
                  const Var<T>& gain, const Var<T>& bias,
                  std::size_t channel_axis, T eps = T(1e-5)) {
  constexpr auto op = OpKind::kLayerNorm;
  const auto& xv = x.value();
  detail::require_axis(op, xv.shape(), channel_axis);
  const std::size_t nch = xv.dim(channel_axis);
  if (gain.value().numel() != nch || bias.value().numel() != nch) {
    detail::shape_fail(op, "gain/bias must have " + std::to_string(nch) +
                               " entries, got " + to_string(gain.shape()) + "/" +
                               to_string(bias.shape()));
  }
  auto red = detail::make_reduction(op, xv.shape(), axes);
  auto ch = detail::axis_index(xv.shape(), channel_axis);
  const std::size_t groups = numel_of(red.out_shape);
  const T inv_m = T{1} / static_cast<T>(red.group_size);
  std::vector<T> mu(groups, T{0}), rstd(groups, T{0});
  for (std::size_t i = 0; i < xv.numel(); ++i) mu[red.index[i]] += xv[i];
  for (auto& m : mu) m *= inv_m;
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const T d = xv[i] - mu[red.index[i]];
    rstd[red.index[i]] += d * d;
  }
  for (auto& r : rstd) r = T{1} / std::sqrt(r * inv_m + eps);
  Tensor<T> xhat(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    xhat[i] = (xv[i] - mu[red.index[i]]) * rstd[red.index[i]];
  }
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = gv[ch[i]] * xhat[i] + bv[ch[i]];
  return x.graph().record(op, {x, gain, bias}, std::move(out), [&] {
    return BackwardFn<T>([xhat = std::move(xhat), rstd = std::move(rstd),
                          index = std::move(red.index), ch = std::move(ch), gv,
                          groups, inv_m](const Tensor<T>& g,
                                         const std::vector<Tensor<T>*>& gi) {
      const std::size_t n = g.numel();
      if (gi[0]) {
        std::vector<T> mean_d(groups, T{0}), mean_dx(groups, T{0});
        for (std::size_t i = 0; i < n; ++i) {
          const T d = g[i] * gv[ch[i]];
          mean_d[index[i]] += d;
          mean_dx[index[i]] += d * xhat[i];
        }
        for (std::size_t k = 0; k < groups; ++k) {
          mean_d[k] *= inv_m;
          mean_dx[k] *= inv_m;
        }
        auto& dx = *gi[0];
        for (std::size_t i = 0; i < n; ++i) {
          const auto k = index[i];
          const T d = g[i] * gv[ch[i]];
          dx[i] += rstd[k] * (d - mean_d[k] - xhat[i] * mean_dx[k]);
        }
      }
      if (gi[1]) {
        for (std::size_t i = 0; i < n; ++i) (*gi[1])[ch[i]] += g[i] * xhat[i];
      }
      if (gi[2]) {
        for (std::size_t i = 0; i < n; ++i) (*gi[2])[ch[i]] += g[i];
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (numel_of(shape) != x.value().numel()) {
    detail::shape_fail(OpKind::kReshape, "cannot view " + to_string(x.shape()) +
                                             " as " + to_string(shape));
  }
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.graph().record(OpKind::kReshape, {x}, std::move(out), [] {
    return BackwardFn<T>([](const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
      auto& dx = *gi[0];
      for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
    });
  });
}

namespace detail {

/// For each output flat index of the permuted tensor, the source flat index.
inline std::vector<std::size_t> permute_index(const Shape& in_shape,
                                              const std::vector<std::size_t>& perm,
                                              Shape& out_shape) {
  const std::size_t r = in_shape.size();
  std::vector<bool> seen(r, false);
  if (perm.size() != r) {
    shape_fail(OpKind::kPermute, "permutation of length " + std::to_string(perm.size()) +
                                     " for rank " + std::to_string(r));
  }
  for (auto p : perm) {
    if (p >= r || seen[p]) shape_fail(OpKind::kPermute, "invalid permutation");
    seen[p] = true;
  }
  out_shape.assign(r, 0);
  for (std::size_t d = 0; d < r; ++d) out_shape[d] = in_shape[perm[d]];
  const auto in_st = strides_of(in_shape);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t d = 0; d < r; ++d) src_stride[d] = in_st[perm[d]];
  const std::size_t n = numel_of(in_shape);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> ctr(r, 0);
  std::size_t s = 0;
  for (std::size_t o = 0; o < n; ++o) {
    idx[o] = s;
    for (std::size_t d = r; d-- > 0;) {
      ++ctr[d];
      s += src_stride[d];
      if (ctr[d] < out_shape[d]) break;
      s -= src_stride[d] * ctr[d];
      ctr[d] = 0;
    }
  }
  return idx;
}

}  // namespace detail

/// out.shape[d] = x.shape[perm[d]]
template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm) {
  Shape out_shape;
  auto idx = detail::permute_index(x.shape(), perm, out_shape);
  const auto& xv = x.value();
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < idx.size(); ++o) out[o] = xv[idx[o]];
  return x.graph().record(OpKind::kPermute, {x}, std::move(out), [&] {
    return BackwardFn<T>([idx = std::move(idx)](const Tensor<T>& g,
                                                const std::vector<Tensor<T>*>& gi) {
      auto& dx = *gi[0];
      for (std::size_t o = 0; o < idx.size(); ++o) dx[idx[o]] += g[o];
    });
  });
}

/// Elements [start, start + length) along `axis`.
template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start,
             std::size_t length) {
  constexpr auto op = OpKind::kSlice;
  const auto& xv = x.value();
  detail::require_axis(op, xv.shape(), axis);
  if (length == 0 || start + length > xv.dim(axis)) {
    detail::shape_fail(op, "range [" + std::to_string(start) + "," +
                               std::to_string(start + length) + ") exceeds axis " +
                               std::to_string(axis) + " of " + to_string(xv.shape()));
  }
  const auto& s = xv.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t full = s[axis];
  Shape os = s;
  os[axis] = length;
  Tensor<T> out(os);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(&xv[(o * full + start) * inner], length * inner,
                &out[o * length * inner]);
  }
  return x.graph().record(op, {x}, std::move(out), [=] {
    return BackwardFn<T>([=](const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
      auto& dx = *gi[0];
      for (std::size_t o = 0; o < outer; ++o) {
        T* dst = &dx[(o * full + start) * inner];
        const T* src = &g[o * length * inner];
        for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
      }
    });
  });
}

/// Splits `x` along `axis` into pieces of the given sizes.
template <typename T>
std::vector<Var<T>> split(const Var<T>& x, std::size_t axis,
                          const std::vector<std::size_t>& sizes) {
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  detail::require_axis(OpKind::kSlice, x.shape(), axis);
  if (total != x.value().dim(axis)) {
    detail::shape_fail(OpKind::kSlice, "split sizes sum to " + std::to_string(total) +
                                           " but axis " + std::to_string(axis) +
                                           " of " + to_string(x.shape()) + " differs");
  }
  std::vector<Var<T>> parts;
  std::size_t start = 0;
  for (auto s : sizes) {
    parts.push_back(slice(x, axis, start, s));
    start += s;
  }
  return parts;
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  constexpr auto op = OpKind::kConcat;
  if (xs.empty()) detail::shape_fail(op, "no inputs");
  const Shape& s0 = xs[0].shape();
  detail::require_axis(op, s0, axis);
  std::size_t full = 0;
  std::vector<std::size_t> widths;
  for (const auto& x : xs) {
    const auto& s = x.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) {
      if (d != axis && s[d] != s0[d]) ok = false;
    }
    if (!ok) detail::shape_fail(op, "incompatible " + to_string(s0) + " and " + to_string(s));
    widths.push_back(s[axis]);
    full += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  Shape os = s0;
  os[axis] = full;
  Tensor<T> out(os);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& xv = xs[k].value();
    const std::size_t w = widths[k];
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(&xv[o * w * inner], w * inner, &out[(o * full + offset) * inner]);
    }
    offset += w;
  }
  return xs[0].graph().record(op, xs, std::move(out), [&] {
    return BackwardFn<T>([widths, outer, inner, full](
                             const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < gi.size(); ++k) {
        const std::size_t w = widths[k];
        if (gi[k]) {
          for (std::size_t o = 0; o < outer; ++o) {
            T* dst = &(*gi[k])[o * w * inner];
            const T* src = &g[(o * full + off) * inner];
            for (std::size_t i = 0; i < w * inner; ++i) dst[i] += src[i];
          }
        }
        off += w;
      }
    });
  });
}

}  // namespace tpsep::diff
