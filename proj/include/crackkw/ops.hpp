#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "crackkw/autodiff.hpp"

// Differentiable primitives over Graph nodes. Every op validates shapes up
// front and throws ShapeError naming the offending shapes.

namespace crackkw {

enum class PoolMode { avg, max };

namespace detail {

inline void require_same_graph(const Var& a, const Var& b) {
  if (a.graph != b.graph) throw std::invalid_argument("operands belong to different graphs");
}

inline bool is_scalar_like(const Tensor& t) { return t.size() == 1; }

inline void require_rank(const Var& v, std::size_t r, const char* op) {
  if (v.shape().size() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(v.shape()));
  }
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Elementwise binary op with scalar broadcast on either side.
template <class Fwd, class DA, class DB>
Var binary(const char* kind, Var a, Var b, Fwd fwd, DA da, DB db) {
  require_same_graph(a, b);
  const Tensor& ta = a.value();
  const Tensor& tb = b.value();
  const bool sa = ta.shape() != tb.shape() && is_scalar_like(ta);
  const bool sb = ta.shape() != tb.shape() && is_scalar_like(tb);
  if (ta.shape() != tb.shape() && !sa && !sb) {
    throw ShapeError(std::string(kind) + ": incompatible shapes " + shape_str(ta.shape()) + " and " +
                     shape_str(tb.shape()));
  }
  const Shape& out_shape = sa ? tb.shape() : ta.shape();
  Tensor out(out_shape);
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ta[sa ? 0 : i], tb[sb ? 0 : i]);
  return a.graph->record(kind, std::move(out), {a, b}, [a, b, sa, sb, da, db](Graph& g, const Tensor& go) {
    const Tensor& ta = g.value(a.id);
    const Tensor& tb = g.value(b.id);
    double* ga = g.grad_data(a);
    double* gb = g.grad_data(b);
    for (std::size_t i = 0; i < go.size(); ++i) {
      const double x = ta[sa ? 0 : i];
      const double y = tb[sb ? 0 : i];
      if (ga) ga[sa ? 0 : i] += go[i] * da(x, y);
      if (gb) gb[sb ? 0 : i] += go[i] * db(x, y);
    }
  });
}

// Elementwise unary op; dfn receives (input, output).
template <class Fwd, class D>
Var unary(const char* kind, Var x, Fwd fwd, D dfn) {
  const Tensor& tx = x.value();
  Tensor out(tx.shape());
  for (std::size_t i = 0; i < tx.size(); ++i) out[i] = fwd(tx[i]);
  const std::uint32_t out_id = static_cast<std::uint32_t>(x.graph->size());
  return x.graph->record(kind, std::move(out), {x}, [x, out_id, dfn](Graph& g, const Tensor& go) {
    double* gx = g.grad_data(x);
    if (!gx) return;
    const Tensor& tx = g.value(x.id);
    const Tensor& ty = g.value(out_id);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * dfn(tx[i], ty[i]);
  });
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var scale(Var x, double s) {
  return detail::unary(
      "scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Var sigmoid(Var x) {
  return detail::unary("sigmoid", x, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var x) {
  return detail::unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Var x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var exp(Var x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

/// Clamp with zero gradient outside [lo, hi].
inline Var clamp(Var x, double lo, double hi) {
  return detail::unary(
      "clamp", x, [lo, hi](double v) { return std::min(hi, std::max(lo, v)); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.graph->record("sum", Tensor::scalar(s), {x}, [x](Graph& g, const Tensor& go) {
    double* gx = g.grad_data(x);
    if (!gx) return;
    const std::size_t n = g.value(x.id).size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += go[0];
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.graph->record("reshape", std::move(out), {x}, [x](Graph& g, const Tensor& go) {
    double* gx = g.grad_data(x);
    if (!gx) return;
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
}

/// Concatenation along `axis`; all other extents must agree.
inline Var concat(const std::vector<Var>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat axis out of range for " + shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& v : xs) {
    detail::require_same_graph(xs[0], v);
    const Shape& s = v.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  Tensor out(out_shape);
  const std::size_t out_row = out_shape[axis] * inner;
  std::size_t offset = 0;
  for (const auto& v : xs) {
    const Tensor& t = v.value();
    const std::size_t row = t.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(t.data().data() + o * row, row, out.data().data() + o * out_row + offset);
    }
    offset += row;
  }
  return xs[0].graph->record("concat", std::move(out), xs, [xs, outer, inner, axis, out_row](Graph& g, const Tensor& go) {
    std::size_t offset = 0;
    for (const auto& v : xs) {
      const std::size_t row = g.value(v.id).shape()[axis] * inner;
      if (double* gx = g.grad_data(v)) {
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t k = 0; k < row; ++k) gx[o * row + k] += go[o * out_row + offset + k];
        }
      }
      offset += row;
    }
  });
}

/// Contiguous slice [start, start+len) along `axis`.
inline Var slice(Var x, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& s = x.shape();
  if (axis >= s.size() || len == 0 || start + len > s[axis]) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + len) + ") on axis " +
                     std::to_string(axis) + " out of range for " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  Shape os = s;
  os[axis] = len;
  Tensor out(os);
  const std::size_t in_row = s[axis] * inner;
  const std::size_t out_row = len * inner;
  const Tensor& t = x.value();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(t.data().data() + o * in_row + start * inner, out_row, out.data().data() + o * out_row);
  }
  return x.graph->record("slice", std::move(out), {x}, [=](Graph& g, const Tensor& go) {
    double* gx = g.grad_data(x);
    if (!gx) return;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t k = 0; k < out_row; ++k) gx[o * in_row + start * inner + k] += go[o * out_row + k];
    }
  });
}

/// Affine map over the last axis: y = x W^T + b, W is Dout x Din.
inline Var linear(Var x, Var weight, Var bias) {
  detail::require_same_graph(x, weight);
  detail::require_same_graph(x, bias);
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.empty() || ws.size() != 2 || xs.back() != ws[1] || bias.shape() != Shape{ws[0]}) {
    throw ShapeError("linear: input " + shape_str(xs) + " incompatible with weight " + shape_str(ws) + " and bias " +
                     shape_str(bias.shape()));
  }
  const std::size_t din = ws[1], dout = ws[0], rows = x.value().size() / din;
  Shape os = xs;
  os.back() = dout;
  Tensor out(os);
  const double* px = x.value().data().data();
  const double* pw = weight.value().data().data();
  const double* pb = bias.value().data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < dout; ++o) {
      double acc = pb[o];
      for (std::size_t i = 0; i < din; ++i) acc += pw[o * din + i] * px[r * din + i];
      out[r * dout + o] = acc;
    }
  }
  return x.graph->record("linear", std::move(out), {x, weight, bias}, [=](Graph& g, const Tensor& go) {
    const double* px = g.value(x.id).data().data();
    const double* pw = g.value(weight.id).data().data();
    double* gx = g.grad_data(x);
    double* gw = g.grad_data(weight);
    double* gb = g.grad_data(bias);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t o = 0; o < dout; ++o) {
        const double d = go[r * dout + o];
        if (d == 0.0) continue;
        if (gb) gb[o] += d;
        if (gw) {
          for (std::size_t i = 0; i < din; ++i) gw[o * din + i] += d * px[r * din + i];
        }
        if (gx) {
          for (std::size_t i = 0; i < din; ++i) gx[r * din + i] += d * pw[o * din + i];
        }
      }
    }
  });
}

/// Output extent of a convolution along one axis, or throws.
inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (in + 2 * pad < k) {
    throw ShapeError("conv2d: kernel extent " + std::to_string(k) + " exceeds padded input extent " +
                     std::to_string(in + 2 * pad));
  }
  if ((in + 2 * pad - k) % stride != 0) {
    throw ShapeError("conv2d: (" + std::to_string(in) + " + 2*" + std::to_string(pad) + " - " + std::to_string(k) +
                     ") is not divisible by stride " + std::to_string(stride));
  }
  return (in + 2 * pad - k) / stride + 1;
}

/// Cross-correlation of N x C x H x W input with K x C x kh x kw kernel.
inline Var conv2d(Var input, Var kernel, std::size_t stride = 1, std::size_t padding = 0) {
  detail::require_same_graph(input, kernel);
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  if (is.size() != 4 || ks.size() != 4 || is[1] != ks[1]) {
    throw ShapeError("conv2d: input " + shape_str(is) + " incompatible with kernel " + shape_str(ks));
  }
  const std::size_t N = is[0], C = is[1], H = is[2], W = is[3];
  const std::size_t K = ks[0], kh = ks[2], kw = ks[3];
  const std::size_t Ho = conv_out_extent(H, kh, stride, padding);
  const std::size_t Wo = conv_out_extent(W, kw, stride, padding);
  const long s = static_cast<long>(stride), p = static_cast<long>(padding);

  // Valid output column range for kernel column j: 0 <= ox*s + j - p < W.
  auto col_range = [=](std::size_t j, long& lo, long& hi) {
    const long off = static_cast<long>(j) - p;
    lo = off >= 0 ? 0 : (-off + s - 1) / s;
    const long last = static_cast<long>(W) - 1 - off;
    hi = last < 0 ? -1 : std::min<long>(static_cast<long>(Wo) - 1, last / s);
  };

  Tensor out(Shape{N, K, Ho, Wo});
  const double* px = input.value().data().data();
  const double* pk = kernel.value().data().data();
  double* po = out.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t k = 0; k < K; ++k) {
      double* dst = po + (n * K + k) * Ho * Wo;
      for (std::size_t c = 0; c < C; ++c) {
        const double* src = px + (n * C + c) * H * W;
        for (std::size_t i = 0; i < kh; ++i) {
          for (std::size_t j = 0; j < kw; ++j) {
            const double w = pk[((k * C + c) * kh + i) * kw + j];
            long lo, hi;
            col_range(j, lo, hi);
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const long iy = static_cast<long>(oy) * s + static_cast<long>(i) - p;
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              const double* row = src + iy * static_cast<long>(W) + static_cast<long>(j) - p;
              double* orow = dst + oy * Wo;
              for (long ox = lo; ox <= hi; ++ox) orow[ox] += w * row[ox * s];
            }
          }
        }
      }
    }
  }
  return input.graph->record("conv2d", std::move(out), {input, kernel}, [=](Graph& g, const Tensor& go) {
    const double* px = g.value(input.id).data().data();
    const double* pk = g.value(kernel.id).data().data();
    double* gx = g.grad_data(input);
    double* gk = g.grad_data(kernel);
    const double* pg = go.data().data();
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < K; ++k) {
        const double* gsrc = pg + (n * K + k) * Ho * Wo;
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t base = (n * C + c) * H * W;
          for (std::size_t i = 0; i < kh; ++i) {
            for (std::size_t j = 0; j < kw; ++j) {
              const std::size_t widx = ((k * C + c) * kh + i) * kw + j;
              const double w = pk[widx];
              long lo, hi;
              col_range(j, lo, hi);
              double acc = 0.0;
              for (std::size_t oy = 0; oy < Ho; ++oy) {
                const long iy = static_cast<long>(oy) * s + static_cast<long>(i) - p;
                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                const long rbase = static_cast<long>(base) + iy * static_cast<long>(W) + static_cast<long>(j) - p;
                const double* grow = gsrc + oy * Wo;
                if (gk) {
                  for (long ox = lo; ox <= hi; ++ox) acc += grow[ox] * px[rbase + ox * s];
                }
                if (gx) {
                  for (long ox = lo; ox <= hi; ++ox) gx[rbase + ox * s] += w * grow[ox];
                }
              }
              if (gk) gk[widx] += acc;
            }
          }
        }
      }
    }
  });
}

/// Per-channel reduction over all spatial positions: N x C x H x W -> N x C x 1 x 1.
inline Var pool_spatial(Var x, PoolMode mode) {
  detail::require_rank(x, 4, "pool_spatial");
  const Shape& s = x.shape();
  const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
  Tensor out(Shape{N, C, 1, 1});
  std::vector<std::size_t> argmax(mode == PoolMode::max ? N * C : 0);
  const double* px = x.value().data().data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* src = px + nc * HW;
    if (mode == PoolMode::avg) {
      double acc = 0.0;
      for (std::size_t i = 0; i < HW; ++i) acc += src[i];
      out[nc] = acc / static_cast<double>(HW);
    } else {
      std::size_t best = 0;
      for (std::size_t i = 1; i < HW; ++i) {
        if (src[i] > src[best]) best = i;
      }
      argmax[nc] = best;
      out[nc] = src[best];
    }
  }
  return x.graph->record("pool_spatial", std::move(out), {x}, [=](Graph& g, const Tensor& go) {
    double* gx = g.grad_data(x);
    if (!gx) return;
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      if (mode == PoolMode::avg) {
        const double d = go[nc] / static_cast<double>(HW);
        for (std::size_t i = 0; i < HW; ++i) gx[nc * HW + i] += d;
      } else {
        gx[nc * HW + argmax[nc]] += go[nc];
      }
    }
  });
}

/// Per-pixel reduction across channels: N x C x H x W -> N x 1 x H x W.
inline Var pool_channel(Var x, PoolMode mode) {
  detail::require_rank(x, 4, "pool_channel");
  const Shape& s = x.shape();
  const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
  Tensor out(Shape{N, 1, s[2], s[3]});
  std::vector<std::size_t> argmax(mode == PoolMode::max ? N * HW : 0);
  const double* px = x.value().data().data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t q = 0; q < HW; ++q) {
      const double* src = px + n * C * HW + q;
      if (mode == PoolMode::avg) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) acc += src[c * HW];
        out[n * HW + q] = acc / static_cast<double>(C);
      } else {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c) {
          if (src[c * HW] > src[best * HW]) best = c;
        }
        argmax[n * HW + q] = best;
        out[n * HW + q] = src[best * HW];
      }
    }
  }
  return x.graph->record("pool_channel", std::move(out), {x}, [=](Graph& g, const Tensor& go) {
    double* gx = g.grad_data(x);
    if (!gx) return;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t q = 0; q < HW; ++q) {
        const double d = go[n * HW + q];
        if (mode == PoolMode::avg) {
          for (std::size_t c = 0; c < C; ++c) gx[(n * C + c) * HW + q] += d / static_cast<double>(C);
        } else {
          gx[(n * C + argmax[n * HW + q]) * HW + q] += d;
        }
      }
    }
  });
}

/// F (N x C x H x W) times per-channel weights M (N x C x 1 x 1), broadcast over H, W.
inline Var scale_channels(Var f, Var m) {
  detail::require_same_graph(f, m);
  const Shape& fs = f.shape();
  if (fs.size() != 4 || m.shape() != Shape{fs[0], fs[1], 1, 1}) {
    throw ShapeError("scale_channels: feature " + shape_str(fs) + " incompatible with weights " + shape_str(m.shape()));
  }
  const std::size_t NC = fs[0] * fs[1], HW = fs[2] * fs[3];
  Tensor out(fs);
  const Tensor& tf = f.value();
  const Tensor& tm = m.value();
  for (std::size_t nc = 0; nc < NC; ++nc) {
    for (std::size_t q = 0; q < HW; ++q) out[nc * HW + q] = tf[nc * HW + q] * tm[nc];
  }
  return f.graph->record("scale_channels", std::move(out), {f, m}, [=](Graph& g, const Tensor& go) {
    const Tensor& tf = g.value(f.id);
    const Tensor& tm = g.value(m.id);
    double* gf = g.grad_data(f);
    double* gm = g.grad_data(m);
    for (std::size_t nc = 0; nc < NC; ++nc) {
      double acc = 0.0;
      for (std::size_t q = 0; q < HW; ++q) {
        const double d = go[nc * HW + q];
        if (gf) gf[nc * HW + q] += d * tm[nc];
        acc += d * tf[nc * HW + q];
      }
      if (gm) gm[nc] += acc;
    }
  });
}

/// F (N x C x H x W) times per-pixel weights M (N x 1 x H x W), broadcast over C.
inline Var scale_spatial(Var f, Var m) {
  detail::require_same_graph(f, m);
  const Shape& fs = f.shape();
  if (fs.size() != 4 || m.shape() != Shape{fs[0], 1, fs[2], fs[3]}) {
    throw ShapeError("scale_spatial: feature " + shape_str(fs) + " incompatible with weights " + shape_str(m.shape()));
  }
  const std::size_t N = fs[0], C = fs[1], HW = fs[2] * fs[3];
  Tensor out(fs);
  const Tensor& tf = f.value();
  const Tensor& tm = m.value();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t q = 0; q < HW; ++q) out[(n * C + c) * HW + q] = tf[(n * C + c) * HW + q] * tm[n * HW + q];
    }
  }
  return f.graph->record("scale_spatial", std::move(out), {f, m}, [=](Graph& g, const Tensor& go) {
    const Tensor& tf = g.value(f.id);
    const Tensor& tm = g.value(m.id);
    double* gf = g.grad_data(f);
    double* gm = g.grad_data(m);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t q = 0; q < HW; ++q) {
          const std::size_t i = (n * C + c) * HW + q;
          if (gf) gf[i] += go[i] * tm[n * HW + q];
          if (gm) gm[n * HW + q] += go[i] * tf[i];
        }
      }
    }
  });
}

/// Channel vectors of a list of pixels: N x C x H x W -> N x C for each (y, x).
inline Var take_pixel(Var f, std::size_t y, std::size_t x) {
  detail::require_rank(f, 4, "take_pixel");
  const Shape& s = f.shape();
  if (y >= s[2] || x >= s[3]) throw ShapeError("take_pixel: position out of range for " + shape_str(s));
  const std::size_t N = s[0], C = s[1], HW = s[2] * s[3], q = y * s[3] + x;
  Tensor out(Shape{N, C});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) out[n * C + c] = f.value()[(n * C + c) * HW + q];
  }
  return f.graph->record("take_pixel", std::move(out), {f}, [=](Graph& g, const Tensor& go) {
    double* gf = g.grad_data(f);
    if (!gf) return;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) gf[(n * C + c) * HW + q] += go[n * C + c];
    }
  });
}

/// Inverse of take_pixel over a full grid: `pixels[y * W + x]` is N x C.
inline Var stack_pixels(const std::vector<Var>& pixels, std::size_t H, std::size_t W) {
  if (pixels.size() != H * W || pixels.empty()) {
    throw ShapeError("stack_pixels: expected " + std::to_string(H * W) + " pixels, got " +
                     std::to_string(pixels.size()));
  }
  const Shape& s0 = pixels[0].shape();
  if (s0.size() != 2) throw ShapeError("stack_pixels: pixel vectors must be N x C, got " + shape_str(s0));
  for (const auto& p : pixels) {
    if (p.shape() != s0) throw ShapeError("stack_pixels: mixed shapes " + shape_str(s0) + " and " + shape_str(p.shape()));
  }
  const std::size_t N = s0[0], C = s0[1], HW = H * W;
  Tensor out(Shape{N, C, H, W});
  for (std::size_t q = 0; q < HW; ++q) {
    const Tensor& t = pixels[q].value();
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) out[(n * C + c) * HW + q] = t[n * C + c];
    }
  }
  return pixels[0].graph->record("stack_pixels", std::move(out), pixels, [=](Graph& g, const Tensor& go) {
    for (std::size_t q = 0; q < HW; ++q) {
      double* gp = g.grad_data(pixels[q]);
      if (!gp) continue;
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) gp[n * C + c] += go[(n * C + c) * HW + q];
      }
    }
  });
}

/// Nearest-neighbour upsampling by an integer factor on both spatial axes.
inline Var upsample_nearest(Var x, std::size_t factor) {
  detail::require_rank(x, 4, "upsample_nearest");
  if (factor == 0) throw ShapeError("upsample_nearest: factor must be positive");
  const Shape& s = x.shape();
  const std::size_t NC = s[0] * s[1], H = s[2], W = s[3], Ho = H * factor, Wo = W * factor;
  Tensor out(Shape{s[0], s[1], Ho, Wo});
  const Tensor& t = x.value();
  for (std::size_t nc = 0; nc < NC; ++nc) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        out[(nc * Ho + oy) * Wo + ox] = t[(nc * H + oy / factor) * W + ox / factor];
      }
    }
  }
  return x.graph->record("upsample_nearest", std::move(out), {x}, [=](Graph& g, const Tensor& go) {
    double* gx = g.grad_data(x);
    if (!gx) return;
    for (std::size_t nc = 0; nc < NC; ++nc) {
      for (std::size_t oy = 0; oy < Ho; ++oy) {
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          gx[(nc * H + oy / factor) * W + ox / factor] += go[(nc * Ho + oy) * Wo + ox];
        }
      }
    }
  });
}

/// x + b broadcast over batch and space: N x C x H x W plus a length-C vector.
inline Var add_channel_bias(Var x, Var b) {
  detail::require_same_graph(x, b);
  detail::require_rank(x, 4, "add_channel_bias");
  const Shape& s = x.shape();
  if (b.shape() != Shape{s[1]}) {
    throw ShapeError("add_channel_bias: bias " + shape_str(b.shape()) + " for input " + shape_str(s));
  }
  const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
  Tensor out = x.value();
  const Tensor& tb = b.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t q = 0; q < HW; ++q) out[(n * C + c) * HW + q] += tb[c];
  return x.graph->record("add_channel_bias", std::move(out), {x, b}, [=](Graph& g, const Tensor& go) {
    if (double* gx = g.grad_data(x)) {
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    }
    if (double* gb = g.grad_data(b)) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t q = 0; q < HW; ++q) gb[c] += go[(n * C + c) * HW + q];
    }
  });
}

/// Running statistics of a batch-norm layer; updated in training mode.
struct NormStats {
  Tensor mean, var;
  double momentum = 0.03;

  NormStats() = default;
  explicit NormStats(std::size_t channels) : mean(Shape{channels}, 0.0), var(Shape{channels}, 1.0) {}
};

/// Per-channel normalization over N, H and W followed by gamma * x + beta.
/// Training mode uses batch statistics and folds them into `stats`
/// (unbiased variance); eval mode uses `stats` as constants.
inline Var batch_norm(Var x, Var gamma, Var beta, NormStats& stats, bool training, double eps = 1e-5) {
  detail::require_same_graph(x, gamma);
  detail::require_same_graph(x, beta);
  detail::require_rank(x, 4, "batch_norm");
  const Shape s = x.shape();
  const std::size_t N = s[0], C = s[1], HW = s[2] * s[3], M = N * HW;
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} || stats.mean.shape() != Shape{C}) {
    throw ShapeError("batch_norm: parameters " + shape_str(gamma.shape()) + " for input " + shape_str(s));
  }
  const Tensor& tx = x.value();
  std::vector<double> mu(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    double m = 0.0, v = 0.0;
    if (training) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t q = 0; q < HW; ++q) m += tx[(n * C + c) * HW + q];
      m /= double(M);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t q = 0; q < HW; ++q) {
          const double d = tx[(n * C + c) * HW + q] - m;
          v += d * d;
        }
      v /= double(M);
      const double unbiased = M > 1 ? v * double(M) / double(M - 1) : v;
      stats.mean[c] = (1 - stats.momentum) * stats.mean[c] + stats.momentum * m;
      stats.var[c] = (1 - stats.momentum) * stats.var[c] + stats.momentum * unbiased;
    } else {
      m = stats.mean[c];
      v = stats.var[c];
    }
    mu[c] = m;
    inv_std[c] = 1.0 / std::sqrt(v + eps);
  }
  Tensor xhat(s), out(s);
  const Tensor& tg = gamma.value();
  const Tensor& tb = beta.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t q = 0; q < HW; ++q) {
        const std::size_t i = (n * C + c) * HW + q;
        xhat[i] = (tx[i] - mu[c]) * inv_std[c];
        out[i] = tg[c] * xhat[i] + tb[c];
      }
  return x.graph->record("batch_norm", std::move(out), {x, gamma, beta},
                         [=, xhat = std::move(xhat)](Graph& g, const Tensor& go) {
                           const Tensor& tg = g.value(gamma.id);
                           double* gx = g.grad_data(x);
                           double* gg = g.grad_data(gamma);
                           double* gb = g.grad_data(beta);
                           for (std::size_t c = 0; c < C; ++c) {
                             double sum_dy = 0.0, sum_dy_xhat = 0.0;
                             for (std::size_t n = 0; n < N; ++n)
                               for (std::size_t q = 0; q < HW; ++q) {
                                 const std::size_t i = (n * C + c) * HW + q;
                                 sum_dy += go[i];
                                 sum_dy_xhat += go[i] * xhat[i];
                               }
                             if (gg) gg[c] += sum_dy_xhat;
                             if (gb) gb[c] += sum_dy;
                             if (!gx) continue;
                             const double k = tg[c] * inv_std[c];
                             for (std::size_t n = 0; n < N; ++n)
                               for (std::size_t q = 0; q < HW; ++q) {
                                 const std::size_t i = (n * C + c) * HW + q;
                                 gx[i] += training ? k * (go[i] - (sum_dy + xhat[i] * sum_dy_xhat) / double(M)) : k * go[i];
                               }
                           }
                         });
}

}  // namespace crackkw
