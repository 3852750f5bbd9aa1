#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "alft/diffcore/graph.hpp"

// Differentiable primitives. Every op computes its forward value eagerly and
// records a closure that accumulates exact gradients into its parents.

namespace alft::ad {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

inline std::string mismatch(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str();
}

inline Shape with_cols(const Shape& s, int cols) {
  Shape out = s;
  if (out.dims.empty()) out.dims.push_back(cols);
  else out.dims.back() = cols;
  return out;
}

inline void accumulate(std::vector<double>& dst, const std::vector<double>& src, double scale = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

}  // namespace detail

/// Continuous coordinate along one grid axis. Nodes sit at cell centers:
/// node i is at lo + (i + 0.5) * (hi - lo) / n. Outside the node range the
/// coordinate clamps to the boundary node and its derivative is zero.
struct GridAxis {
  double lo = -1.0;
  double hi = 1.0;
  int n = 1;

  struct Cell {
    int i0;
    int i1;
    double t;      // weight of i1
    double dt_dx;  // d t / d coordinate
  };

  [[nodiscard]] Cell locate(double x) const {
    const double scale = n / (hi - lo);
    double f = (x - lo) * scale - 0.5;
    double d = scale;
    if (f <= 0.0) {
      f = 0.0;
      d = 0.0;
    } else if (f >= n - 1) {
      f = n - 1;
      d = 0.0;
    }
    if (n == 1) return {0, 0, 0.0, 0.0};
    int i0 = static_cast<int>(std::floor(f));
    if (i0 >= n - 1) i0 = n - 2;
    return {i0, i0 + 1, f - i0, d};
  }
  [[nodiscard]] double node(int i) const { return lo + (i + 0.5) * (hi - lo) / n; }
};

// ---------------------------------------------------------------- elementwise

inline Var add(Var a, Var b) {
  detail::require(a.shape() == b.shape(), detail::mismatch("add", a.shape(), b.shape()));
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const int ia = a.id(), ib = b.id();
  return a.graph().record(a.shape(), std::move(out), {a, b}, [ia, ib](Graph& g, int self) {
    const auto& go = g.grad(self);
    if (g.needs(ia)) detail::accumulate(g.grad_mut(ia), go);
    if (g.needs(ib)) detail::accumulate(g.grad_mut(ib), go);
  });
}

inline Var sub(Var a, Var b) {
  detail::require(a.shape() == b.shape(), detail::mismatch("sub", a.shape(), b.shape()));
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const int ia = a.id(), ib = b.id();
  return a.graph().record(a.shape(), std::move(out), {a, b}, [ia, ib](Graph& g, int self) {
    const auto& go = g.grad(self);
    if (g.needs(ia)) detail::accumulate(g.grad_mut(ia), go);
    if (g.needs(ib)) detail::accumulate(g.grad_mut(ib), go, -1.0);
  });
}

inline Var mul(Var a, Var b) {
  detail::require(a.shape() == b.shape(), detail::mismatch("mul", a.shape(), b.shape()));
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const int ia = a.id(), ib = b.id();
  return a.graph().record(a.shape(), std::move(out), {a, b}, [ia, ib](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& av = g.value(ia);
    const auto& bv = g.value(ib);
    if (g.needs(ia)) {
      auto& ga = g.grad_mut(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (g.needs(ib)) {
      auto& gb = g.grad_mut(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * av[i];
  const int ia = a.id();
  return a.graph().record(a.shape(), std::move(out), {a}, [ia, s](Graph& g, int self) {
    detail::accumulate(g.grad_mut(ia), g.grad(self), s);
  });
}

/// x + b with b broadcast over rows; b has x.cols() entries.
inline Var add_bias(Var x, Var b) {
  const int C = x.cols();
  detail::require(static_cast<int>(b.size()) == C, detail::mismatch("add_bias", x.shape(), b.shape()));
  auto xv = x.value();
  auto bv = b.value();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < out.size(); r += static_cast<std::size_t>(C))
    for (int c = 0; c < C; ++c) out[r + c] = xv[r + c] + bv[c];
  const int ix = x.id(), ib = b.id();
  return x.graph().record(x.shape(), std::move(out), {x, b}, [ix, ib, C](Graph& g, int self) {
    const auto& go = g.grad(self);
    if (g.needs(ix)) detail::accumulate(g.grad_mut(ix), go);
    if (g.needs(ib)) {
      auto& gb = g.grad_mut(ib);
      for (std::size_t r = 0; r < go.size(); r += static_cast<std::size_t>(C))
        for (int c = 0; c < C; ++c) gb[c] += go[r + c];
    }
  });
}

/// Tanh-approximated GELU.
inline Var gelu(Var a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
  }
  const int ia = a.id();
  return a.graph().record(a.shape(), std::move(out), {a}, [ia](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& av = g.value(ia);
    auto& ga = g.grad_mut(ia);
    for (std::size_t i = 0; i < go.size(); ++i) {
      const double x = av[i];
      const double u = k * (x + 0.044715 * x * x * x);
      const double th = std::tanh(u);
      const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
      ga[i] += go[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
    }
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Logistic function, output clamped to [1e-12, 1 - 1e-12].
inline Var sigmoid(Var a) {
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(stable_sigmoid(av[i]), 1e-12, 1.0 - 1e-12);
  const int ia = a.id();
  return a.graph().record(a.shape(), std::move(out), {a}, [ia](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& y = g.value(self);
    auto& ga = g.grad_mut(ia);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i] * (1.0 - y[i]);
  });
}

/// Natural log with the argument clamped below at 1e-12.
inline Var log(Var a) {
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(av[i], 1e-12));
  const int ia = a.id();
  return a.graph().record(a.shape(), std::move(out), {a}, [ia](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& av = g.value(ia);
    auto& ga = g.grad_mut(ia);
    for (std::size_t i = 0; i < go.size(); ++i)
      if (av[i] > 1e-12) ga[i] += go[i] / av[i];
  });
}

// ---------------------------------------------------------------- linear algebra

/// a (.. x K) times b (K x N); leading dims of a are kept.
inline Var matmul(Var a, Var b) {
  const int M = a.rows(), K = a.cols(), N = b.cols();
  detail::require(b.rows() == K && b.shape().rank() <= 2, detail::mismatch("matmul", a.shape(), b.shape()));
  std::vector<double> out(static_cast<std::size_t>(M) * N);
  detail::MapMat(out.data(), M, N).noalias() =
      detail::CMapMat(a.value().data(), M, K) * detail::CMapMat(b.value().data(), K, N);
  const int ia = a.id(), ib = b.id();
  return a.graph().record(detail::with_cols(a.shape(), N), std::move(out), {a, b},
                          [ia, ib, M, K, N](Graph& g, int self) {
                            detail::CMapMat go(g.grad(self).data(), M, N);
                            if (g.needs(ia))
                              detail::MapMat(g.grad_mut(ia).data(), M, K).noalias() +=
                                  go * detail::CMapMat(g.value(ib).data(), K, N).transpose();
                            if (g.needs(ib))
                              detail::MapMat(g.grad_mut(ib).data(), K, N).noalias() +=
                                  detail::CMapMat(g.value(ia).data(), M, K).transpose() * go;
                          });
}

/// a (M x K) times transpose(b (N x K)).
inline Var matmul_nt(Var a, Var b) {
  const int M = a.rows(), K = a.cols(), N = b.rows();
  detail::require(b.cols() == K, detail::mismatch("matmul_nt", a.shape(), b.shape()));
  std::vector<double> out(static_cast<std::size_t>(M) * N);
  detail::MapMat(out.data(), M, N).noalias() =
      detail::CMapMat(a.value().data(), M, K) * detail::CMapMat(b.value().data(), N, K).transpose();
  const int ia = a.id(), ib = b.id();
  return a.graph().record(Shape{M, N}, std::move(out), {a, b}, [ia, ib, M, K, N](Graph& g, int self) {
    detail::CMapMat go(g.grad(self).data(), M, N);
    if (g.needs(ia))
      detail::MapMat(g.grad_mut(ia).data(), M, K).noalias() += go * detail::CMapMat(g.value(ib).data(), N, K);
    if (g.needs(ib))
      detail::MapMat(g.grad_mut(ib).data(), N, K).noalias() +=
          go.transpose() * detail::CMapMat(g.value(ia).data(), M, K);
  });
}

inline Var transpose(Var a) {
  const int R = a.rows(), C = a.cols();
  std::vector<double> out(a.size());
  auto av = a.value();
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(c) * R + r] = av[static_cast<std::size_t>(r) * C + c];
  const int ia = a.id();
  return a.graph().record(Shape{C, R}, std::move(out), {a}, [ia, R, C](Graph& g, int self) {
    const auto& go = g.grad(self);
    auto& ga = g.grad_mut(ia);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) ga[static_cast<std::size_t>(r) * C + c] += go[static_cast<std::size_t>(c) * R + r];
  });
}

/// x W + b, with W stored (in x out).
inline Var linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

// ---------------------------------------------------------------- normalization

/// Softmax along the last axis of every row.
inline Var softmax_rows(Var a) {
  const int R = a.rows(), C = a.cols();
  auto av = a.value();
  std::vector<double> out(av.size());
  for (int r = 0; r < R; ++r) {
    const double* x = av.data() + static_cast<std::size_t>(r) * C;
    double* y = out.data() + static_cast<std::size_t>(r) * C;
    const double mx = *std::max_element(x, x + C);
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += (y[c] = std::exp(x[c] - mx));
    for (int c = 0; c < C; ++c) y[c] /= s;
  }
  const int ia = a.id();
  return a.graph().record(a.shape(), std::move(out), {a}, [ia, R, C](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& y = g.value(self);
    auto& ga = g.grad_mut(ia);
    for (int r = 0; r < R; ++r) {
      const std::size_t o = static_cast<std::size_t>(r) * C;
      double dot = 0.0;
      for (int c = 0; c < C; ++c) dot += go[o + c] * y[o + c];
      for (int c = 0; c < C; ++c) ga[o + c] += y[o + c] * (go[o + c] - dot);
    }
  });
}

inline Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5) {
  const int R = x.rows(), C = x.cols();
  detail::require(static_cast<int>(gamma.size()) == C && static_cast<int>(beta.size()) == C,
                  detail::mismatch("layer_norm_rows", x.shape(), gamma.shape()));
  auto xv = x.value();
  auto gv = gamma.value();
  auto bv = beta.value();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(static_cast<std::size_t>(R));
  for (int r = 0; r < R; ++r) {
    const std::size_t o = static_cast<std::size_t>(r) * C;
    double mu = 0.0;
    for (int c = 0; c < C; ++c) mu += xv[o + c];
    mu /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) var += (xv[o + c] - mu) * (xv[o + c] - mu);
    var /= C;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (int c = 0; c < C; ++c) {
      xhat[o + c] = (xv[o + c] - mu) * is;
      out[o + c] = gv[static_cast<std::size_t>(c)] * xhat[o + c] + bv[static_cast<std::size_t>(c)];
    }
  }
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.graph().record(
      x.shape(), std::move(out), {x, gamma, beta},
      [ix, ig, ib, R, C, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, int self) {
        const auto& go = g.grad(self);
        const auto& gv = g.value(ig);
        if (g.needs(ig)) {
          auto& gg = g.grad_mut(ig);
          for (std::size_t i = 0; i < go.size(); ++i) gg[i % C] += go[i] * xhat[i];
        }
        if (g.needs(ib)) {
          auto& gb = g.grad_mut(ib);
          for (std::size_t r = 0; r < go.size(); r += static_cast<std::size_t>(C))
        for (int c = 0; c < C; ++c) gb[c] += go[r + c];
        }
        if (g.needs(ix)) {
          auto& gx = g.grad_mut(ix);
          for (int r = 0; r < R; ++r) {
            const std::size_t o = static_cast<std::size_t>(r) * C;
            double m1 = 0.0, m2 = 0.0;
            for (int c = 0; c < C; ++c) {
              const double d = go[o + c] * gv[static_cast<std::size_t>(c)];
              m1 += d;
              m2 += d * xhat[o + c];
            }
            m1 /= C;
            m2 /= C;
            for (int c = 0; c < C; ++c) {
              const double d = go[o + c] * gv[static_cast<std::size_t>(c)];
              gx[o + c] += inv_std[static_cast<std::size_t>(r)] * (d - m1 - xhat[o + c] * m2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------- convolution

/// 3x3 convolution, stride 1, zero padding = dilation (output keeps H x W).
/// x: {H, W, Cin}; w: {3, 3, Cin, Cout}; b: {Cout}.
inline Var conv2d(Var x, Var w, Var b, int dilation = 1) {
  detail::require(x.shape().rank() == 3, "conv2d: input must be {H,W,C}, got " + x.shape().str());
  const int H = x.shape()[0], W = x.shape()[1], Cin = x.shape()[2];
  detail::require(w.shape() == Shape({3, 3, Cin, w.cols()}), detail::mismatch("conv2d", x.shape(), w.shape()));
  const int Cout = w.cols();
  detail::require(static_cast<int>(b.size()) == Cout, detail::mismatch("conv2d bias", w.shape(), b.shape()));
  const int P = H * W, KC = 9 * Cin;
  std::vector<double> col(static_cast<std::size_t>(P) * KC, 0.0);
  auto xv = x.value();
  for (int yy = 0; yy < H; ++yy)
    for (int xx = 0; xx < W; ++xx)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int sy = yy + (ky - 1) * dilation, sx = xx + (kx - 1) * dilation;
          if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
          const double* src = xv.data() + (static_cast<std::size_t>(sy) * W + sx) * Cin;
          double* dst = col.data() + static_cast<std::size_t>(yy * W + xx) * KC + (ky * 3 + kx) * Cin;
          std::copy(src, src + Cin, dst);
        }
  std::vector<double> out(static_cast<std::size_t>(P) * Cout);
  detail::MapMat om(out.data(), P, Cout);
  om.noalias() = detail::CMapMat(col.data(), P, KC) * detail::CMapMat(w.value().data(), KC, Cout);
  auto bv = b.value();
  for (int p = 0; p < P; ++p)
    for (int c = 0; c < Cout; ++c) om(p, c) += bv[static_cast<std::size_t>(c)];
  const int ix = x.id(), iw = w.id(), ib = b.id();
  return x.graph().record(
      Shape{H, W, Cout}, std::move(out), {x, w, b},
      [ix, iw, ib, H, W, Cin, Cout, P, KC, dilation, col = std::move(col)](Graph& g, int self) {
        detail::CMapMat go(g.grad(self).data(), P, Cout);
        if (g.needs(iw))
          detail::MapMat(g.grad_mut(iw).data(), KC, Cout).noalias() += detail::CMapMat(col.data(), P, KC).transpose() * go;
        if (g.needs(ib)) {
          auto& gb = g.grad_mut(ib);
          for (int p = 0; p < P; ++p)
            for (int c = 0; c < Cout; ++c) gb[static_cast<std::size_t>(c)] += go(p, c);
        }
        if (g.needs(ix)) {
          detail::RowMat gcol = go * detail::CMapMat(g.value(iw).data(), KC, Cout).transpose();
          auto& gx = g.grad_mut(ix);
          for (int yy = 0; yy < H; ++yy)
            for (int xx = 0; xx < W; ++xx)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  const int sy = yy + (ky - 1) * dilation, sx = xx + (kx - 1) * dilation;
                  if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                  double* dst = gx.data() + (static_cast<std::size_t>(sy) * W + sx) * Cin;
                  const double* src = gcol.data() + static_cast<std::size_t>(yy * W + xx) * KC + (ky * 3 + kx) * Cin;
                  for (int c = 0; c < Cin; ++c) dst[c] += src[c];
                }
        }
      });
}

// ---------------------------------------------------------------- layout

inline Var reshape(Var a, Shape shape) {
  detail::require(shape.size() == a.size(), "reshape: " + a.shape().str() + " -> " + shape.str());
  std::vector<double> out(a.value().begin(), a.value().end());
  const int ia = a.id();
  return a.graph().record(std::move(shape), std::move(out), {a}, [ia](Graph& g, int self) {
    detail::accumulate(g.grad_mut(ia), g.grad(self));
  });
}

/// Columns [c0, c1) of every row.
inline Var slice_cols(Var a, int c0, int c1) {
  const int R = a.rows(), C = a.cols(), W = c1 - c0;
  detail::require(0 <= c0 && c0 <= c1 && c1 <= C, "slice_cols: bad range on " + a.shape().str());
  std::vector<double> out(static_cast<std::size_t>(R) * W);
  auto av = a.value();
  for (int r = 0; r < R; ++r)
    std::copy_n(av.data() + static_cast<std::size_t>(r) * C + c0, W, out.data() + static_cast<std::size_t>(r) * W);
  const int ia = a.id();
  return a.graph().record(detail::with_cols(a.shape(), W), std::move(out), {a}, [ia, R, C, W, c0](Graph& g, int self) {
    const auto& go = g.grad(self);
    auto& ga = g.grad_mut(ia);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < W; ++c)
        ga[static_cast<std::size_t>(r) * C + c0 + c] += go[static_cast<std::size_t>(r) * W + c];
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const int R = parts.front().rows();
  int C = 0;
  std::vector<int> ids, widths;
  for (const Var& p : parts) {
    detail::require(p.rows() == R, detail::mismatch("concat_cols", parts.front().shape(), p.shape()));
    ids.push_back(p.id());
    widths.push_back(p.cols());
    C += p.cols();
  }
  std::vector<double> out(static_cast<std::size_t>(R) * C);
  int c0 = 0;
  for (const Var& p : parts) {
    const int w = p.cols();
    auto pv = p.value();
    for (int r = 0; r < R; ++r)
      std::copy_n(pv.data() + static_cast<std::size_t>(r) * w, w, out.data() + static_cast<std::size_t>(r) * C + c0);
    c0 += w;
  }
  return parts.front().graph().record(Shape{R, C}, std::move(out), parts, [ids, widths, R, C](Graph& g, int self) {
    const auto& go = g.grad(self);
    int c0 = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const int w = widths[k];
      if (g.needs(ids[k])) {
        auto& gp = g.grad_mut(ids[k]);
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < w; ++c)
            gp[static_cast<std::size_t>(r) * w + c] += go[static_cast<std::size_t>(r) * C + c0 + c];
      }
      c0 += w;
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const int C = parts.front().cols();
  int R = 0;
  std::vector<int> ids;
  std::vector<std::size_t> offsets;
  std::vector<double> out;
  for (const Var& p : parts) {
    detail::require(p.cols() == C, detail::mismatch("concat_rows", parts.front().shape(), p.shape()));
    ids.push_back(p.id());
    offsets.push_back(out.size());
    out.insert(out.end(), p.value().begin(), p.value().end());
    R += p.rows();
  }
  return parts.front().graph().record(Shape{R, C}, std::move(out), parts, [ids, offsets](Graph& g, int self) {
    const auto& go = g.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!g.needs(ids[k])) continue;
      auto& gp = g.grad_mut(ids[k]);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += go[offsets[k] + i];
    }
  });
}

inline Var gather_rows(Var a, std::vector<int> index) {
  const int C = a.cols(), R = a.rows();
  std::vector<double> out(index.size() * static_cast<std::size_t>(C));
  auto av = a.value();
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(0 <= index[i] && index[i] < R, "gather_rows: index out of range");
    std::copy_n(av.data() + static_cast<std::size_t>(index[i]) * C, C, out.data() + i * C);
  }
  const int ia = a.id();
  const int n = static_cast<int>(index.size());
  return a.graph().record(Shape{n, C}, std::move(out), {a}, [ia, C, index = std::move(index)](Graph& g, int self) {
    const auto& go = g.grad(self);
    auto& ga = g.grad_mut(ia);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (int c = 0; c < C; ++c) ga[static_cast<std::size_t>(index[i]) * C + c] += go[i * C + c];
  });
}

/// out[index[i]] += src[i]; out has `rows` rows.
inline Var scatter_add_rows(Var src, std::vector<int> index, int rows) {
  const int C = src.cols();
  detail::require(static_cast<int>(index.size()) == src.rows(), "scatter_add_rows: index count != rows");
  std::vector<double> out(static_cast<std::size_t>(rows) * C, 0.0);
  auto sv = src.value();
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(0 <= index[i] && index[i] < rows, "scatter_add_rows: index out of range");
    for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(index[i]) * C + c] += sv[i * C + c];
  }
  const int is = src.id();
  return src.graph().record(Shape{rows, C}, std::move(out), {src}, [is, C, index = std::move(index)](Graph& g, int self) {
    const auto& go = g.grad(self);
    auto& gs = g.grad_mut(is);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (int c = 0; c < C; ++c) gs[i * C + c] += go[static_cast<std::size_t>(index[i]) * C + c];
  });
}

struct BlockRef {
  int row;
  int col0;
};

/// Row i of the result is a[blocks[i].row, blocks[i].col0 : col0 + width].
inline Var gather_blocks(Var a, std::vector<BlockRef> blocks, int width) {
  const int C = a.cols();
  std::vector<double> out(blocks.size() * static_cast<std::size_t>(width));
  auto av = a.value();
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    detail::require(blocks[i].row < a.rows() && blocks[i].col0 + width <= C, "gather_blocks: block out of range");
    std::copy_n(av.data() + static_cast<std::size_t>(blocks[i].row) * C + blocks[i].col0, width, out.data() + i * width);
  }
  const int ia = a.id();
  const int n = static_cast<int>(blocks.size());
  return a.graph().record(Shape{n, width}, std::move(out), {a},
                          [ia, C, width, blocks = std::move(blocks)](Graph& g, int self) {
                            const auto& go = g.grad(self);
                            auto& ga = g.grad_mut(ia);
                            for (std::size_t i = 0; i < blocks.size(); ++i)
                              for (int c = 0; c < width; ++c)
                                ga[static_cast<std::size_t>(blocks[i].row) * C + blocks[i].col0 + c] += go[i * width + c];
                          });
}

// ---------------------------------------------------------------- reductions

/// Column means, shape {1, C}.
inline Var mean_rows(Var a) {
  const int R = a.rows(), C = a.cols();
  std::vector<double> out(static_cast<std::size_t>(C), 0.0);
  auto av = a.value();
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(c)] += av[static_cast<std::size_t>(r) * C + c];
  for (double& v : out) v /= R;
  const int ia = a.id();
  return a.graph().record(Shape{1, C}, std::move(out), {a}, [ia, R, C](Graph& g, int self) {
    const auto& go = g.grad(self);
    auto& ga = g.grad_mut(ia);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) ga[static_cast<std::size_t>(r) * C + c] += go[static_cast<std::size_t>(c)] / R;
  });
}

inline Var sum_all(Var a) {
  double s = 0.0;
  for (double v : a.value()) s += v;
  const int ia = a.id();
  return a.graph().record(Shape{1}, {s}, {a}, [ia](Graph& g, int self) {
    const double go = g.grad(self)[0];
    for (double& x : g.grad_mut(ia)) x += go;
  });
}

inline Var mean_all(Var a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

/// Euclidean norm of every row, shape {R, 1}. The gradient at a zero row is zero.
inline Var row_norm(Var a) {
  const int R = a.rows(), C = a.cols();
  std::vector<double> out(static_cast<std::size_t>(R));
  auto av = a.value();
  for (int r = 0; r < R; ++r) {
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += av[static_cast<std::size_t>(r) * C + c] * av[static_cast<std::size_t>(r) * C + c];
    out[static_cast<std::size_t>(r)] = std::sqrt(s);
  }
  const int ia = a.id();
  return a.graph().record(Shape{R, 1}, std::move(out), {a}, [ia, R, C](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& n = g.value(self);
    const auto& av = g.value(ia);
    auto& ga = g.grad_mut(ia);
    for (int r = 0; r < R; ++r) {
      if (n[static_cast<std::size_t>(r)] <= 0.0) continue;
      const double k = go[static_cast<std::size_t>(r)] / n[static_cast<std::size_t>(r)];
      for (int c = 0; c < C; ++c) ga[static_cast<std::size_t>(r) * C + c] += k * av[static_cast<std::size_t>(r) * C + c];
    }
  });
}

/// Sum over all entries of binary cross-entropy between sigmoid(logits) and
/// targets in [0, 1], evaluated in the overflow-free softplus form.
inline Var bce_with_logits_sum(Var logits, std::vector<double> targets) {
  detail::require(targets.size() == logits.size(), "bce_with_logits_sum: target count mismatch");
  auto xv = logits.value();
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double x = xv[i];
    s += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const int ix = logits.id();
  return logits.graph().record(Shape{1}, {s}, {logits}, [ix, targets = std::move(targets)](Graph& g, int self) {
    const double go = g.grad(self)[0];
    const auto& xv = g.value(ix);
    auto& gx = g.grad_mut(ix);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += go * (stable_sigmoid(xv[i]) - targets[i]);
  });
}

// ---------------------------------------------------------------- distributions

/// Per-row distribution over K ordered bins from ordinal logits: bin k gets
/// the positive part of the increment of the cumulative probabilities
/// c_k = sigmoid(x_k) (c_{-1} = 0, c_{K-1} = 1), renormalized to sum to one.
inline Var ordinal_distribution(Var logits) {
  const int R = logits.rows(), K = logits.cols();
  detail::require(K >= 2, "ordinal_distribution: need at least two bins");
  auto xv = logits.value();
  std::vector<double> out(xv.size());
  std::vector<double> norm(static_cast<std::size_t>(R));
  for (int r = 0; r < R; ++r) {
    const std::size_t o = static_cast<std::size_t>(r) * K;
    double prev = 0.0, total = 0.0;
    for (int k = 0; k < K; ++k) {
      const double c = (k == K - 1) ? 1.0 : stable_sigmoid(xv[o + k]);
      out[o + k] = std::max(c - prev, 0.0);
      total += out[o + k];
      prev = c;
    }
    norm[static_cast<std::size_t>(r)] = total;
    for (int k = 0; k < K; ++k) out[o + k] /= total;
  }
  const int ix = logits.id();
  return logits.graph().record(logits.shape(), std::move(out), {logits},
                               [ix, R, K, norm = std::move(norm)](Graph& g, int self) {
                                 const auto& go = g.grad(self);
                                 const auto& p = g.value(self);
                                 const auto& xv = g.value(ix);
                                 auto& gx = g.grad_mut(ix);
                                 std::vector<double> gc(static_cast<std::size_t>(K));
                                 for (int r = 0; r < R; ++r) {
                                   const std::size_t o = static_cast<std::size_t>(r) * K;
                                   double dot = 0.0;
                                   for (int k = 0; k < K; ++k) dot += go[o + k] * p[o + k];
                                   std::fill(gc.begin(), gc.end(), 0.0);
                                   double prev = 0.0;
                                   for (int k = 0; k < K; ++k) {
                                     const double c = (k == K - 1) ? 1.0 : stable_sigmoid(xv[o + k]);
                                     if (c - prev > 0.0) {
                                       const double dd = (go[o + k] - dot) / norm[static_cast<std::size_t>(r)];
                                       gc[static_cast<std::size_t>(k)] += dd;
                                       if (k > 0) gc[static_cast<std::size_t>(k - 1)] -= dd;
                                     }
                                     prev = c;
                                   }
                                   for (int k = 0; k < K - 1; ++k) {
                                     const double s = stable_sigmoid(xv[o + k]);
                                     gx[o + k] += gc[static_cast<std::size_t>(k)] * s * (1.0 - s);
                                   }
                                 }
                               });
}

/// Divides every row by its sum. Rows must have a positive sum.
inline Var normalize_rows(Var a) {
  const int R = a.rows(), C = a.cols();
  auto av = a.value();
  std::vector<double> out(av.size());
  std::vector<double> sums(static_cast<std::size_t>(R));
  for (int r = 0; r < R; ++r) {
    const std::size_t o = static_cast<std::size_t>(r) * C;
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += av[o + c];
    if (!(s > 0.0)) throw NumericError("normalize_rows: row " + std::to_string(r) + " has non-positive sum");
    sums[static_cast<std::size_t>(r)] = s;
    for (int c = 0; c < C; ++c) out[o + c] = av[o + c] / s;
  }
  const int ia = a.id();
  return a.graph().record(a.shape(), std::move(out), {a}, [ia, R, C, sums = std::move(sums)](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& y = g.value(self);
    auto& ga = g.grad_mut(ia);
    for (int r = 0; r < R; ++r) {
      const std::size_t o = static_cast<std::size_t>(r) * C;
      double dot = 0.0;
      for (int c = 0; c < C; ++c) dot += go[o + c] * y[o + c];
      for (int c = 0; c < C; ++c) ga[o + c] += (go[o + c] - dot) / sums[static_cast<std::size_t>(r)];
    }
  });
}

/// Linear "hat" split of a scalar per row onto the two nearest bin nodes of `axis`.
inline Var hat_distribution(Var values, GridAxis axis) {
  detail::require(values.cols() == 1, "hat_distribution: expects a column vector, got " + values.shape().str());
  const int R = values.rows(), K = axis.n;
  std::vector<double> out(static_cast<std::size_t>(R) * K, 0.0);
  auto vv = values.value();
  for (int r = 0; r < R; ++r) {
    const auto cell = axis.locate(vv[static_cast<std::size_t>(r)]);
    out[static_cast<std::size_t>(r) * K + cell.i0] += 1.0 - cell.t;
    out[static_cast<std::size_t>(r) * K + cell.i1] += cell.t;
  }
  const int iv = values.id();
  return values.graph().record(Shape{R, K}, std::move(out), {values}, [iv, R, K, axis](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& vv = g.value(iv);
    auto& gv = g.grad_mut(iv);
    for (int r = 0; r < R; ++r) {
      const auto cell = axis.locate(vv[static_cast<std::size_t>(r)]);
      const std::size_t o = static_cast<std::size_t>(r) * K;
      gv[static_cast<std::size_t>(r)] += (go[o + cell.i1] - go[o + cell.i0]) * cell.dt_dx;
    }
  });
}

// ---------------------------------------------------------------- sampling

struct PlanePoint {
  double x;
  double y;
  int col0;
};

/// Bilinear lookup into map {H, W, C}: row i is the column block
/// [col0, col0 + width) interpolated at normalized (x, y) in [-1, 1]^2.
inline Var bilinear_sample_blocks(Var map, std::vector<PlanePoint> points, int width) {
  detail::require(map.shape().rank() == 3, "bilinear_sample_blocks: map must be {H,W,C}, got " + map.shape().str());
  const int H = map.shape()[0], W = map.shape()[1], C = map.shape()[2];
  const GridAxis ax{-1.0, 1.0, W}, ay{-1.0, 1.0, H};
  const int M = static_cast<int>(points.size());
  std::vector<double> out(static_cast<std::size_t>(M) * width, 0.0);
  auto mv = map.value();
  for (int m = 0; m < M; ++m) {
    const auto& pt = points[static_cast<std::size_t>(m)];
    detail::require(pt.col0 >= 0 && pt.col0 + width <= C, "bilinear_sample_blocks: block out of range");
    const auto cx = ax.locate(pt.x);
    const auto cy = ay.locate(pt.y);
    const int xs[2] = {cx.i0, cx.i1};
    const int ys[2] = {cy.i0, cy.i1};
    const double wx[2] = {1.0 - cx.t, cx.t};
    const double wy[2] = {1.0 - cy.t, cy.t};
    double* o = out.data() + static_cast<std::size_t>(m) * width;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) {
        const double w = wy[a] * wx[b];
        if (w == 0.0) continue;
        const double* src = mv.data() + (static_cast<std::size_t>(ys[a]) * W + xs[b]) * C + pt.col0;
        for (int c = 0; c < width; ++c) o[c] += w * src[c];
      }
  }
  const int im = map.id();
  return map.graph().record(Shape{M, width}, std::move(out), {map},
                            [im, W, C, width, ax, ay, points = std::move(points)](Graph& g, int self) {
                              const auto& go = g.grad(self);
                              auto& gm = g.grad_mut(im);
                              for (std::size_t m = 0; m < points.size(); ++m) {
                                const auto cx = ax.locate(points[m].x);
                                const auto cy = ay.locate(points[m].y);
                                const int xs[2] = {cx.i0, cx.i1};
                                const int ys[2] = {cy.i0, cy.i1};
                                const double wx[2] = {1.0 - cx.t, cx.t};
                                const double wy[2] = {1.0 - cy.t, cy.t};
                                const double* gi = go.data() + m * width;
                                for (int a = 0; a < 2; ++a)
                                  for (int b = 0; b < 2; ++b) {
                                    const double w = wy[a] * wx[b];
                                    if (w == 0.0) continue;
                                    double* dst = gm.data() + (static_cast<std::size_t>(ys[a]) * W + xs[b]) * C + points[m].col0;
                                    for (int c = 0; c < width; ++c) dst[c] += w * gi[c];
                                  }
                              }
                            });
}

/// Trilinear interpolation of a dense volume {H, W, K, C} at points (M x 3).
/// x and y are image-normalized in [-1, 1]; z spans [z_axis.lo, z_axis.hi]
/// across the K depth nodes. Differentiable in the volume and the points.
inline Var trilinear_sample(Var volume, Var points, double z_lo = -1.0, double z_hi = 1.0) {
  detail::require(volume.shape().rank() == 4, "trilinear_sample: volume must be {H,W,K,C}, got " + volume.shape().str());
  detail::require(points.cols() == 3, "trilinear_sample: points must be M x 3, got " + points.shape().str());
  const int H = volume.shape()[0], W = volume.shape()[1], K = volume.shape()[2], C = volume.shape()[3];
  const GridAxis ax{-1.0, 1.0, W}, ay{-1.0, 1.0, H}, az{z_lo, z_hi, K};
  const int M = points.rows();
  auto vv = volume.value();
  auto pv = points.value();
  std::vector<double> out(static_cast<std::size_t>(M) * C, 0.0);
  auto index = [=](int y, int x, int k) { return ((static_cast<std::size_t>(y) * W + x) * K + k) * C; };
  for (int m = 0; m < M; ++m) {
    const auto cx = ax.locate(pv[static_cast<std::size_t>(m) * 3 + 0]);
    const auto cy = ay.locate(pv[static_cast<std::size_t>(m) * 3 + 1]);
    const auto cz = az.locate(pv[static_cast<std::size_t>(m) * 3 + 2]);
    const int xs[2] = {cx.i0, cx.i1}, ys[2] = {cy.i0, cy.i1}, zs[2] = {cz.i0, cz.i1};
    const double wx[2] = {1.0 - cx.t, cx.t}, wy[2] = {1.0 - cy.t, cy.t}, wz[2] = {1.0 - cz.t, cz.t};
    double* o = out.data() + static_cast<std::size_t>(m) * C;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        for (int d = 0; d < 2; ++d) {
          const double w = wy[a] * wx[b] * wz[d];
          if (w == 0.0) continue;
          const double* src = vv.data() + index(ys[a], xs[b], zs[d]);
          for (int c = 0; c < C; ++c) o[c] += w * src[c];
        }
  }
  const int iv = volume.id(), ip = points.id();
  return volume.graph().record(Shape{M, C}, std::move(out), {volume, points}, [=](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& vv = g.value(iv);
    const auto& pv = g.value(ip);
    const bool need_v = g.needs(iv), need_p = g.needs(ip);
    std::vector<double>* gv = need_v ? &g.grad_mut(iv) : nullptr;
    std::vector<double>* gp = need_p ? &g.grad_mut(ip) : nullptr;
    for (int m = 0; m < M; ++m) {
      const auto cx = ax.locate(pv[static_cast<std::size_t>(m) * 3 + 0]);
      const auto cy = ay.locate(pv[static_cast<std::size_t>(m) * 3 + 1]);
      const auto cz = az.locate(pv[static_cast<std::size_t>(m) * 3 + 2]);
      const int xs[2] = {cx.i0, cx.i1}, ys[2] = {cy.i0, cy.i1}, zs[2] = {cz.i0, cz.i1};
      const double wx[2] = {1.0 - cx.t, cx.t}, wy[2] = {1.0 - cy.t, cy.t}, wz[2] = {1.0 - cz.t, cz.t};
      const double dwx[2] = {-cx.dt_dx, cx.dt_dx}, dwy[2] = {-cy.dt_dx, cy.dt_dx}, dwz[2] = {-cz.dt_dx, cz.dt_dx};
      const double* gi = go.data() + static_cast<std::size_t>(m) * C;
      double gx = 0.0, gy = 0.0, gz = 0.0;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
          for (int d = 0; d < 2; ++d) {
            const std::size_t base = index(ys[a], xs[b], zs[d]);
            const double w = wy[a] * wx[b] * wz[d];
            if (need_v && w != 0.0)
              for (int c = 0; c < C; ++c) (*gv)[base + c] += w * gi[c];
            if (need_p) {
              double dot = 0.0;
              for (int c = 0; c < C; ++c) dot += vv[base + c] * gi[c];
              gx += dwx[b] * wy[a] * wz[d] * dot;
              gy += wx[b] * dwy[a] * wz[d] * dot;
              gz += wx[b] * wy[a] * dwz[d] * dot;
            }
          }
      if (need_p) {
        (*gp)[static_cast<std::size_t>(m) * 3 + 0] += gx;
        (*gp)[static_cast<std::size_t>(m) * 3 + 1] += gy;
        (*gp)[static_cast<std::size_t>(m) * 3 + 2] += gz;
      }
    }
  });
}

/// Row-wise outer product: row r of the result is vec(a_r b_r^T), shape R x (Ka * Cb).
inline Var outer_rows(Var a, Var b) {
  detail::require(a.rows() == b.rows(), detail::mismatch("outer_rows", a.shape(), b.shape()));
  const int R = a.rows(), K = a.cols(), C = b.cols();
  std::vector<double> out(static_cast<std::size_t>(R) * K * C);
  auto av = a.value();
  auto bv = b.value();
  for (int r = 0; r < R; ++r)
    for (int k = 0; k < K; ++k) {
      const double s = av[static_cast<std::size_t>(r) * K + k];
      const double* br = bv.data() + static_cast<std::size_t>(r) * C;
      double* o = out.data() + (static_cast<std::size_t>(r) * K + k) * C;
      for (int c = 0; c < C; ++c) o[c] = s * br[c];
    }
  const int ia = a.id(), ib = b.id();
  return a.graph().record(Shape{R, K * C}, std::move(out), {a, b}, [ia, ib, R, K, C](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& av = g.value(ia);
    const auto& bv = g.value(ib);
    const bool na = g.needs(ia), nb = g.needs(ib);
    std::vector<double>* ga = na ? &g.grad_mut(ia) : nullptr;
    std::vector<double>* gb = nb ? &g.grad_mut(ib) : nullptr;
    for (int r = 0; r < R; ++r)
      for (int k = 0; k < K; ++k) {
        const double* gi = go.data() + (static_cast<std::size_t>(r) * K + k) * C;
        const double* br = bv.data() + static_cast<std::size_t>(r) * C;
        if (na) {
          double dot = 0.0;
          for (int c = 0; c < C; ++c) dot += gi[c] * br[c];
          (*ga)[static_cast<std::size_t>(r) * K + k] += dot;
        }
        if (nb) {
          const double s = av[static_cast<std::size_t>(r) * K + k];
          double* gbr = gb->data() + static_cast<std::size_t>(r) * C;
          for (int c = 0; c < C; ++c) gbr[c] += s * gi[c];
        }
      }
  });
}

/// Pixel-indexed lift entries of one pyramid level, in CSR form.
struct LiftLevel {
  int height = 0;
  int width = 0;
  std::vector<int> pixel_start;  // size height * width + 1
  std::vector<int> entry_row;    // row of the per-entry depth distribution
  std::vector<int> entry_token;  // row of the token feature
};

struct LiftLayout {
  std::vector<LiftLevel> levels;
  GridAxis depth;  // depth nodes; depth.n is the bin count
};

/// Trilinear sampling of the lifted volumes without materializing them.
/// The volume of level l holds, at pixel p and bin k, the sum over entries e
/// at p of dist[entry_row[e], k] * values[entry_token[e], :]. Point i reads
/// channel slice h = (i / points_per_head) % heads of width C / heads, and the
/// levels are averaged.
inline Var lifted_sample(Var values, Var dists, std::shared_ptr<const LiftLayout> layout_ptr, Var points, int heads,
                         int points_per_head) {
  const LiftLayout& layout = *layout_ptr;
  const int C = values.cols(), K = dists.cols();
  detail::require(K == layout.depth.n, "lifted_sample: dist columns != depth bins");
  detail::require(points.cols() == 3, "lifted_sample: points must be M x 3");
  detail::require(heads >= 1 && C % heads == 0, "lifted_sample: channels not divisible by heads");
  const int dh = C / heads;
  const int M = points.rows();
  const double inv_levels = 1.0 / static_cast<double>(layout.levels.size());
  std::vector<double> out(static_cast<std::size_t>(M) * dh, 0.0);
  auto vv = values.value();
  auto dv = dists.value();
  auto pv = points.value();
  for (int m = 0; m < M; ++m) {
    const int h = (m / points_per_head) % heads;
    const double px = pv[static_cast<std::size_t>(m) * 3], py = pv[static_cast<std::size_t>(m) * 3 + 1],
                 pz = pv[static_cast<std::size_t>(m) * 3 + 2];
    const auto cz = layout.depth.locate(pz);
    double* o = out.data() + static_cast<std::size_t>(m) * dh;
    for (const LiftLevel& lv : layout.levels) {
      const auto cx = GridAxis{-1.0, 1.0, lv.width}.locate(px);
      const auto cy = GridAxis{-1.0, 1.0, lv.height}.locate(py);
      const int xs[2] = {cx.i0, cx.i1}, ys[2] = {cy.i0, cy.i1};
      const double wx[2] = {1.0 - cx.t, cx.t}, wy[2] = {1.0 - cy.t, cy.t};
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
          const double wxy = wy[a] * wx[b] * inv_levels;
          if (wxy == 0.0) continue;
          const int pix = ys[a] * lv.width + xs[b];
          for (int e = lv.pixel_start[static_cast<std::size_t>(pix)]; e < lv.pixel_start[static_cast<std::size_t>(pix) + 1]; ++e) {
            const double* dist = dv.data() + static_cast<std::size_t>(lv.entry_row[static_cast<std::size_t>(e)]) * K;
            const double coef = wxy * ((1.0 - cz.t) * dist[cz.i0] + cz.t * dist[cz.i1]);
            if (coef == 0.0) continue;
            const double* val = vv.data() + static_cast<std::size_t>(lv.entry_token[static_cast<std::size_t>(e)]) * C + h * dh;
            for (int c = 0; c < dh; ++c) o[c] += coef * val[c];
          }
        }
    }
  }
  const int iv = values.id(), id = dists.id(), ip = points.id();
  return values.graph().record(Shape{M, dh}, std::move(out), {values, dists, points}, [=](Graph& g, int self) {
    const LiftLayout& layout = *layout_ptr;
    const auto& go = g.grad(self);
    const auto& vv = g.value(iv);
    const auto& dv = g.value(id);
    const auto& pv = g.value(ip);
    const bool nv = g.needs(iv), nd = g.needs(id), np = g.needs(ip);
    std::vector<double>* gv = nv ? &g.grad_mut(iv) : nullptr;
    std::vector<double>* gd = nd ? &g.grad_mut(id) : nullptr;
    std::vector<double>* gp = np ? &g.grad_mut(ip) : nullptr;
    for (int m = 0; m < M; ++m) {
      const int h = (m / points_per_head) % heads;
      const double px = pv[static_cast<std::size_t>(m) * 3], py = pv[static_cast<std::size_t>(m) * 3 + 1],
                   pz = pv[static_cast<std::size_t>(m) * 3 + 2];
      const auto cz = layout.depth.locate(pz);
      const double* gi = go.data() + static_cast<std::size_t>(m) * dh;
      double gx = 0.0, gy = 0.0, gz = 0.0;
      for (const LiftLevel& lv : layout.levels) {
        const auto cx = GridAxis{-1.0, 1.0, lv.width}.locate(px);
        const auto cy = GridAxis{-1.0, 1.0, lv.height}.locate(py);
        const int xs[2] = {cx.i0, cx.i1}, ys[2] = {cy.i0, cy.i1};
        const double wx[2] = {1.0 - cx.t, cx.t}, wy[2] = {1.0 - cy.t, cy.t};
        const double dwx[2] = {-cx.dt_dx, cx.dt_dx}, dwy[2] = {-cy.dt_dx, cy.dt_dx};
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b) {
            const int pix = ys[a] * lv.width + xs[b];
            const int e0 = lv.pixel_start[static_cast<std::size_t>(pix)], e1 = lv.pixel_start[static_cast<std::size_t>(pix) + 1];
            if (e0 == e1) continue;
            const double wxy = wy[a] * wx[b] * inv_levels;
            for (int e = e0; e < e1; ++e) {
              const std::size_t row = static_cast<std::size_t>(lv.entry_row[static_cast<std::size_t>(e)]);
              const double* dist = dv.data() + row * K;
              const std::size_t voff = static_cast<std::size_t>(lv.entry_token[static_cast<std::size_t>(e)]) * C + h * dh;
              const double* val = vv.data() + voff;
              double dot = 0.0;
              for (int c = 0; c < dh; ++c) dot += val[c] * gi[c];
              const double dz = (1.0 - cz.t) * dist[cz.i0] + cz.t * dist[cz.i1];
              if (nv && wxy != 0.0) {
                const double coef = wxy * dz;
                double* gval = gv->data() + voff;
                for (int c = 0; c < dh; ++c) gval[c] += coef * gi[c];
              }
              if (nd && wxy != 0.0) {
                (*gd)[row * K + cz.i0] += wxy * (1.0 - cz.t) * dot;
                (*gd)[row * K + cz.i1] += wxy * cz.t * dot;
              }
              if (np) {
                gx += dwx[b] * wy[a] * inv_levels * dz * dot;
                gy += wx[b] * dwy[a] * inv_levels * dz * dot;
                gz += wxy * cz.dt_dx * (dist[cz.i1] - dist[cz.i0]) * dot;
              }
            }
          }
      }
      if (np) {
        (*gp)[static_cast<std::size_t>(m) * 3 + 0] += gx;
        (*gp)[static_cast<std::size_t>(m) * 3 + 1] += gy;
        (*gp)[static_cast<std::size_t>(m) * 3 + 2] += gz;
      }
    }
  });
}

/// Groups of n consecutive rows of s ((G*n) x d) summed with weights w (G x n).
inline Var group_weighted_sum(Var s, Var w) {
  const int G = w.rows(), n = w.cols(), d = s.cols();
  detail::require(s.rows() == G * n, detail::mismatch("group_weighted_sum", s.shape(), w.shape()));
  std::vector<double> out(static_cast<std::size_t>(G) * d, 0.0);
  auto sv = s.value();
  auto wv = w.value();
  for (int gi = 0; gi < G; ++gi)
    for (int k = 0; k < n; ++k) {
      const double wk = wv[static_cast<std::size_t>(gi) * n + k];
      const double* sr = sv.data() + (static_cast<std::size_t>(gi) * n + k) * d;
      double* o = out.data() + static_cast<std::size_t>(gi) * d;
      for (int c = 0; c < d; ++c) o[c] += wk * sr[c];
    }
  const int is = s.id(), iw = w.id();
  return s.graph().record(Shape{G, d}, std::move(out), {s, w}, [is, iw, G, n, d](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& sv = g.value(is);
    const auto& wv = g.value(iw);
    const bool ns = g.needs(is), nw = g.needs(iw);
    std::vector<double>* gs = ns ? &g.grad_mut(is) : nullptr;
    std::vector<double>* gw = nw ? &g.grad_mut(iw) : nullptr;
    for (int gi = 0; gi < G; ++gi)
      for (int k = 0; k < n; ++k) {
        const std::size_t row = static_cast<std::size_t>(gi) * n + k;
        const double* gr = go.data() + static_cast<std::size_t>(gi) * d;
        if (ns) {
          const double wk = wv[row];
          for (int c = 0; c < d; ++c) (*gs)[row * d + c] += wk * gr[c];
        }
        if (nw) {
          double dot = 0.0;
          for (int c = 0; c < d; ++c) dot += sv[row * d + c] * gr[c];
          (*gw)[row] += dot;
        }
      }
  });
}

/// Sinusoidal features of 3D points (M x 3) -> M x (6 * freqs). Column
/// (axis * freqs + f) * 2 holds sin(pi 2^f x_axis), the next column the cosine.
inline Var sinusoid_encode(Var points, int freqs) {
  detail::require(points.cols() == 3, "sinusoid_encode: points must be M x 3");
  const int M = points.rows(), D = 6 * freqs;
  std::vector<double> out(static_cast<std::size_t>(M) * D);
  auto pv = points.value();
  for (int m = 0; m < M; ++m)
    for (int a = 0; a < 3; ++a)
      for (int f = 0; f < freqs; ++f) {
        const double w = std::numbers::pi * std::ldexp(1.0, f);
        const double t = w * pv[static_cast<std::size_t>(m) * 3 + a];
        const std::size_t o = static_cast<std::size_t>(m) * D + static_cast<std::size_t>(a * freqs + f) * 2;
        out[o] = std::sin(t);
        out[o + 1] = std::cos(t);
      }
  const int ip = points.id();
  return points.graph().record(Shape{M, D}, std::move(out), {points}, [ip, M, D, freqs](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& y = g.value(self);
    auto& gp = g.grad_mut(ip);
    for (int m = 0; m < M; ++m)
      for (int a = 0; a < 3; ++a)
        for (int f = 0; f < freqs; ++f) {
          const double w = std::numbers::pi * std::ldexp(1.0, f);
          const std::size_t o = static_cast<std::size_t>(m) * D + static_cast<std::size_t>(a * freqs + f) * 2;
          gp[static_cast<std::size_t>(m) * 3 + a] += w * (go[o] * y[o + 1] - go[o + 1] * y[o]);
        }
  });
}

/// Softmax-weighted anchor proposals: out[j] = sum_a w[a, j] (anchor[a] + offset[a, j]).
/// anchors A x 3, offsets A x (J*3), weights A x J -> J x 3.
inline Var anchor_ensemble(Var anchors, Var offsets, Var weights) {
  const int A = anchors.rows(), J = weights.cols();
  detail::require(anchors.cols() == 3 && offsets.rows() == A && offsets.cols() == 3 * J && weights.rows() == A,
                  "anchor_ensemble: inconsistent shapes " + anchors.shape().str() + " " + offsets.shape().str() + " " +
                      weights.shape().str());
  std::vector<double> out(static_cast<std::size_t>(J) * 3, 0.0);
  auto av = anchors.value();
  auto ov = offsets.value();
  auto wv = weights.value();
  for (int a = 0; a < A; ++a)
    for (int j = 0; j < J; ++j) {
      const double w = wv[static_cast<std::size_t>(a) * J + j];
      for (int c = 0; c < 3; ++c)
        out[static_cast<std::size_t>(j) * 3 + c] +=
            w * (av[static_cast<std::size_t>(a) * 3 + c] + ov[(static_cast<std::size_t>(a) * J + j) * 3 + c]);
    }
  const int ia = anchors.id(), io = offsets.id(), iw = weights.id();
  return anchors.graph().record(Shape{J, 3}, std::move(out), {anchors, offsets, weights},
                                [ia, io, iw, A, J](Graph& g, int self) {
                                  const auto& go = g.grad(self);
                                  const auto& av = g.value(ia);
                                  const auto& ov = g.value(io);
                                  const auto& wv = g.value(iw);
                                  const bool na = g.needs(ia), no = g.needs(io), nw = g.needs(iw);
                                  std::vector<double>* ga = na ? &g.grad_mut(ia) : nullptr;
                                  std::vector<double>* gof = no ? &g.grad_mut(io) : nullptr;
                                  std::vector<double>* gw = nw ? &g.grad_mut(iw) : nullptr;
                                  for (int a = 0; a < A; ++a)
                                    for (int j = 0; j < J; ++j) {
                                      const std::size_t aj = static_cast<std::size_t>(a) * J + j;
                                      const double w = wv[aj];
                                      double dot = 0.0;
                                      for (int c = 0; c < 3; ++c) {
                                        const double gj = go[static_cast<std::size_t>(j) * 3 + c];
                                        if (na) (*ga)[static_cast<std::size_t>(a) * 3 + c] += w * gj;
                                        if (no) (*gof)[aj * 3 + c] += w * gj;
                                        dot += gj * (av[static_cast<std::size_t>(a) * 3 + c] + ov[aj * 3 + c]);
                                      }
                                      if (nw) (*gw)[aj] += dot;
                                    }
                                });
}

/// Subtracts row 0 from every row.
inline Var center_on_first_row(Var x) {
  const int R = x.rows(), C = x.cols();
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      out[static_cast<std::size_t>(r) * C + c] = xv[static_cast<std::size_t>(r) * C + c] - xv[static_cast<std::size_t>(c)];
  const int ix = x.id();
  return x.graph().record(x.shape(), std::move(out), {x}, [ix, R, C](Graph& g, int self) {
    const auto& go = g.grad(self);
    auto& gx = g.grad_mut(ix);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) {
        gx[static_cast<std::size_t>(r) * C + c] += go[static_cast<std::size_t>(r) * C + c];
        gx[static_cast<std::size_t>(c)] -= go[static_cast<std::size_t>(r) * C + c];
      }
  });
}

}  // namespace alft::ad
