#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "diffdepth/tensor.hpp"

// Structured ops on [C,H,W] tensors (row-major, index (c,y,x)).
// Convolutions lower to im2col + Eigen GEMM; the column matrix is rebuilt in
// the backward pass instead of being cached, trading FLOPs for memory.

namespace diffdepth {

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
void require_chw(const char* op, const Tensor<S>& x) {
  if (x.rank() != 3) throw ShapeError(op, "expected [C,H,W], got " + shape_str(x.shape()));
}

/// Gathers 3x3 (or KxK) receptive fields into rows of a row-major matrix
/// [Cin*K*K, Ho*Wo]. Zero padding of (K-1)/2 is implicit: out-of-range taps
/// stay zero.
template <typename S>
void im2col(const S* x, int cin, int h, int w, int k, int stride, int ho, int wo, MatRM<S>& cols) {
  const int pad = (k - 1) / 2;
  cols.setZero(cin * k * k, ho * wo);
  for (int c = 0; c < cin; ++c) {
    const S* xc = x + static_cast<std::int64_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        S* row = cols.data() + static_cast<std::int64_t>((c * k + ky) * k + kx) * (ho * wo);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          const S* src = xc + static_cast<std::int64_t>(iy) * w;
          S* dst = row + static_cast<std::int64_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[ox] = src[ix];
          }
        }
      }
    }
  }
}

/// Scatter-add transpose of im2col: accumulates column-matrix rows back into
/// the input layout, dropping taps that fell in the padding.
template <typename S>
void col2im_add(const MatRM<S>& cols, int cin, int h, int w, int k, int stride, int ho, int wo, S* dx) {
  const int pad = (k - 1) / 2;
  for (int c = 0; c < cin; ++c) {
    S* xc = dx + static_cast<std::int64_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const S* row = cols.data() + static_cast<std::int64_t>((c * k + ky) * k + kx) * (ho * wo);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          S* dst = xc + static_cast<std::int64_t>(iy) * w;
          const S* src = row + static_cast<std::int64_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution, odd kernel, zero padding fixed at (K-1)/2.
/// x: [Cin,H,W], w: [Cout,Cin,K,K], b: [Cout]. stride 1 keeps the spatial
/// size; stride 2 halves it (even H,W required so shapes stay exact).
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride = 1) {
  detail::require_chw("conv2d", x);
  if (w.rank() != 4) throw ShapeError("conv2d", "weights must be [Cout,Cin,K,K], got " + shape_str(w.shape()));
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin) throw ShapeError("conv2d", "input channels " + std::to_string(cin) + " vs weight " + std::to_string(w.dim(1)));
  if (w.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d", "kernel must be square and odd");
  if (b.rank() != 1 || b.dim(0) != cout) throw ShapeError("conv2d", "bias must be [Cout]");
  if (stride != 1 && stride != 2) throw ShapeError("conv2d", "stride must be 1 or 2");
  if (stride == 2 && (h % 2 != 0 || wd % 2 != 0)) throw ShapeError("conv2d", "stride 2 requires even H,W");
  detail::check_finite("conv2d", x);
  detail::check_finite("conv2d", w);

  const int pad = (k - 1) / 2;
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;

  detail::MatRM<S> cols;
  detail::im2col(x.data(), cin, h, wd, k, stride, ho, wo, cols);

  Tensor<S> out = Tensor<S>::zeros({cout, ho, wo});
  Eigen::Map<const detail::MatRM<S>> wm(w.data(), cout, cin * k * k);
  Eigen::Map<detail::MatRM<S>> om(out.data(), cout, ho * wo);
  om.noalias() = wm * cols;
  for (int c = 0; c < cout; ++c) om.row(c).array() += b.array()[c];

  auto xi = x.impl_ptr(), wi = w.impl_ptr(), bi = b.impl_ptr();
  detail::attach(out, {xi, wi, bi}, [xi, wi, bi, cin, h, wd, k, stride, ho, wo, cout](TensorImpl<S>& self) {
    Eigen::Map<const detail::MatRM<S>> gm(self.grad.data(), cout, ho * wo);
    if (detail::wants_grad(bi)) {
      auto& gb = ensure_grad(*bi);
      for (int c = 0; c < cout; ++c) gb[c] += gm.row(c).sum();
    }
    detail::MatRM<S> cols;
    if (detail::wants_grad(wi)) {
      detail::im2col(xi->value.data(), cin, h, wd, k, stride, ho, wo, cols);
      auto& gw = ensure_grad(*wi);
      Eigen::Map<detail::MatRM<S>> gwm(gw.data(), cout, cin * k * k);
      gwm.noalias() += gm * cols.transpose();
    }
    if (detail::wants_grad(xi)) {
      detail::MatRM<S> gcols(cin * k * k, ho * wo);
      Eigen::Map<const detail::MatRM<S>> wm(wi->value.data(), cout, cin * k * k);
      gcols.noalias() = wm.transpose() * gm;
      detail::col2im_add(gcols, cin, h, wd, k, stride, ho, wo, ensure_grad(*xi).data());
    }
  });
  return out;
}

/// Nearest-neighbour 2x upsampling: out(c,y,x) = in(c,y/2,x/2).
template <typename S>
Tensor<S> upsample2_nearest(const Tensor<S>& x) {
  detail::require_chw("upsample2_nearest", x);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<S> out = Tensor<S>::zeros({c, 2 * h, 2 * w});
  const S* in = x.data();
  S* o = out.data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y) {
      const S* src = in + (static_cast<std::int64_t>(ch) * h + y / 2) * w;
      S* dst = o + (static_cast<std::int64_t>(ch) * 2 * h + y) * 2 * w;
      for (int x2 = 0; x2 < 2 * w; ++x2) dst[x2] = src[x2 / 2];
    }
  auto xi = x.impl_ptr();
  detail::attach(out, {xi}, [xi, c, h, w](TensorImpl<S>& self) {
    auto& gx = ensure_grad(*xi);
    const S* g = self.grad.data();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y) {
        const S* src = g + (static_cast<std::int64_t>(ch) * 2 * h + y) * 2 * w;
        S* dst = gx.data() + (static_cast<std::int64_t>(ch) * h + y / 2) * w;
        for (int x2 = 0; x2 < 2 * w; ++x2) dst[x2 / 2] += src[x2];
      }
  });
  return out;
}

/// 3x3 box filter with zero padding, divided by the count of in-bounds taps,
/// so a constant image stays exactly constant up to the border. Local means
/// for structural similarity are built on this.
template <typename S>
Tensor<S> avg_pool3(const Tensor<S>& x) {
  detail::require_chw("avg_pool3", x);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < 1 || w < 1) throw ShapeError("avg_pool3", "empty spatial dims");
  Tensor<S> out = Tensor<S>::zeros({c, h, w});
  const S* in = x.data();
  S* o = out.data();
  for (int ch = 0; ch < c; ++ch) {
    const S* xc = in + static_cast<std::int64_t>(ch) * h * w;
    S* oc = o + static_cast<std::int64_t>(ch) * h * w;
    for (int y = 0; y < h; ++y) {
      const int y0 = std::max(0, y - 1), y1 = std::min(h - 1, y + 1);
      for (int x2 = 0; x2 < w; ++x2) {
        const int x0 = std::max(0, x2 - 1), x1 = std::min(w - 1, x2 + 1);
        S s = 0;
        for (int yy = y0; yy <= y1; ++yy)
          for (int xx = x0; xx <= x1; ++xx) s += xc[yy * w + xx];
        oc[y * w + x2] = s / static_cast<S>((y1 - y0 + 1) * (x1 - x0 + 1));
      }
    }
  }
  auto xi = x.impl_ptr();
  detail::attach(out, {xi}, [xi, c, h, w](TensorImpl<S>& self) {
    auto& gx = ensure_grad(*xi);
    const S* g = self.grad.data();
    for (int ch = 0; ch < c; ++ch) {
      const S* gc = g + static_cast<std::int64_t>(ch) * h * w;
      S* dc = gx.data() + static_cast<std::int64_t>(ch) * h * w;
      for (int y = 0; y < h; ++y) {
        const int y0 = std::max(0, y - 1), y1 = std::min(h - 1, y + 1);
        for (int x2 = 0; x2 < w; ++x2) {
          const int x0 = std::max(0, x2 - 1), x1 = std::min(w - 1, x2 + 1);
          const S gv = gc[y * w + x2] / static_cast<S>((y1 - y0 + 1) * (x1 - x0 + 1));
          for (int yy = y0; yy <= y1; ++yy)
            for (int xx = x0; xx <= x1; ++xx) dc[yy * w + xx] += gv;
        }
      }
    }
  });
  return out;
}

/// Horizontal forward difference: out[:, :, i] = x[:, :, i+1] - x[:, :, i].
template <typename S>
Tensor<S> grad_x(const Tensor<S>& x) {
  detail::require_chw("grad_x", x);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (w < 2) throw ShapeError("grad_x", "width must be >= 2");
  Tensor<S> out = Tensor<S>::zeros({c, h, w - 1});
  const S* in = x.data();
  S* o = out.data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y) {
      const S* row = in + (static_cast<std::int64_t>(ch) * h + y) * w;
      S* dst = o + (static_cast<std::int64_t>(ch) * h + y) * (w - 1);
      for (int x2 = 0; x2 + 1 < w; ++x2) dst[x2] = row[x2 + 1] - row[x2];
    }
  auto xi = x.impl_ptr();
  detail::attach(out, {xi}, [xi, c, h, w](TensorImpl<S>& self) {
    auto& gx = ensure_grad(*xi);
    const S* g = self.grad.data();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y) {
        const S* src = g + (static_cast<std::int64_t>(ch) * h + y) * (w - 1);
        S* dst = gx.data() + (static_cast<std::int64_t>(ch) * h + y) * w;
        for (int x2 = 0; x2 + 1 < w; ++x2) {
          dst[x2 + 1] += src[x2];
          dst[x2] -= src[x2];
        }
      }
  });
  return out;
}

/// Vertical forward difference: out[:, i, :] = x[:, i+1, :] - x[:, i, :].
template <typename S>
Tensor<S> grad_y(const Tensor<S>& x) {
  detail::require_chw("grad_y", x);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < 2) throw ShapeError("grad_y", "height must be >= 2");
  Tensor<S> out = Tensor<S>::zeros({c, h - 1, w});
  const S* in = x.data();
  S* o = out.data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y + 1 < h; ++y)
      for (int x2 = 0; x2 < w; ++x2) {
        const std::int64_t base = (static_cast<std::int64_t>(ch) * h + y) * w + x2;
        o[(static_cast<std::int64_t>(ch) * (h - 1) + y) * w + x2] = in[base + w] - in[base];
      }
  auto xi = x.impl_ptr();
  detail::attach(out, {xi}, [xi, c, h, w](TensorImpl<S>& self) {
    auto& gx = ensure_grad(*xi);
    const S* g = self.grad.data();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y + 1 < h; ++y)
        for (int x2 = 0; x2 < w; ++x2) {
          const S gv = g[(static_cast<std::int64_t>(ch) * (h - 1) + y) * w + x2];
          const std::int64_t base = (static_cast<std::int64_t>(ch) * h + y) * w + x2;
          gx.data()[base + w] += gv;
          gx.data()[base] -= gv;
        }
  });
  return out;
}

template <typename S>
struct SampleResult {
  Tensor<S> value;  ///< [C,Ho,Wo], zero-filled where taps left the image
  Tensor<S> mask;   ///< [1,Ho,Wo] graph-free; 1 iff the point is inside [0,W-1]x[0,H-1]
};

/// Bilinear lookup of src at continuous pixel coordinates.
/// coords: [2,Ho,Wo] with channel 0 = x, channel 1 = y in source pixel units.
/// Out-of-range corner taps contribute zero; the mask marks fully valid
/// points and is detached, so losses multiply by it without gradient flow.
/// Differentiable in both src values and coordinates.
template <typename S>
SampleResult<S> bilinear_sample(const Tensor<S>& src, const Tensor<S>& coords) {
  detail::require_chw("bilinear_sample", src);
  detail::require_chw("bilinear_sample", coords);
  if (coords.dim(0) != 2) throw ShapeError("bilinear_sample", "coords must be [2,Ho,Wo]");
  detail::check_finite("bilinear_sample", src);
  detail::check_finite("bilinear_sample", coords);
  const int c = src.dim(0), h = src.dim(1), w = src.dim(2);
  const int ho = coords.dim(1), wo = coords.dim(2);
  const std::int64_t n = static_cast<std::int64_t>(ho) * wo;

  Tensor<S> out = Tensor<S>::zeros({c, ho, wo});
  Tensor<S> mask = Tensor<S>::zeros({1, ho, wo});
  const S* cx = coords.data();
  const S* cy = coords.data() + n;
  const S* sv = src.data();
  S* ov = out.data();
  S* mv = mask.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const S x = cx[i], y = cy[i];
    // NaN or absurd magnitudes: leave value 0, mask 0 (also keeps the
    // float->int cast below well-defined).
    if (!(std::abs(x) < S(1e9)) || !(std::abs(y) < S(1e9))) continue;
    mv[i] = (x >= S(0) && x <= S(w - 1) && y >= S(0) && y <= S(h - 1)) ? S(1) : S(0);
    const S fxf = std::floor(x), fyf = std::floor(y);
    const int x0 = static_cast<int>(fxf), y0 = static_cast<int>(fyf);
    const S fx = x - fxf, fy = y - fyf;
    const bool vx0 = x0 >= 0 && x0 < w, vx1 = x0 + 1 >= 0 && x0 + 1 < w;
    const bool vy0 = y0 >= 0 && y0 < h, vy1 = y0 + 1 >= 0 && y0 + 1 < h;
    for (int ch = 0; ch < c; ++ch) {
      const S* sc = sv + static_cast<std::int64_t>(ch) * h * w;
      S v = 0;
      if (vy0 && vx0) v += (1 - fy) * (1 - fx) * sc[y0 * w + x0];
      if (vy0 && vx1) v += (1 - fy) * fx * sc[y0 * w + x0 + 1];
      if (vy1 && vx0) v += fy * (1 - fx) * sc[(y0 + 1) * w + x0];
      if (vy1 && vx1) v += fy * fx * sc[(y0 + 1) * w + x0 + 1];
      ov[static_cast<std::int64_t>(ch) * n + i] = v;
    }
  }

  auto si = src.impl_ptr(), ci = coords.impl_ptr();
  detail::attach(out, {si, ci}, [si, ci, c, h, w, ho, wo, n](TensorImpl<S>& self) {
    const S* cx = ci->value.data();
    const S* cy = ci->value.data() + n;
    const S* sv = si->value.data();
    const S* g = self.grad.data();
    const bool want_src = detail::wants_grad(si);
    const bool want_crd = detail::wants_grad(ci);
    S* gs = want_src ? ensure_grad(*si).data() : nullptr;
    S* gc = want_crd ? ensure_grad(*ci).data() : nullptr;
    for (std::int64_t i = 0; i < n; ++i) {
      const S x = cx[i], y = cy[i];
      if (!(std::abs(x) < S(1e9)) || !(std::abs(y) < S(1e9))) continue;
      const S fxf = std::floor(x), fyf = std::floor(y);
      const int x0 = static_cast<int>(fxf), y0 = static_cast<int>(fyf);
      const S fx = x - fxf, fy = y - fyf;
      const bool vx0 = x0 >= 0 && x0 < w, vx1 = x0 + 1 >= 0 && x0 + 1 < w;
      const bool vy0 = y0 >= 0 && y0 < h, vy1 = y0 + 1 >= 0 && y0 + 1 < h;
      S dx_acc = 0, dy_acc = 0;
      for (int ch = 0; ch < c; ++ch) {
        const S gv = g[static_cast<std::int64_t>(ch) * n + i];
        if (gv == S(0)) continue;
        const S* sc = sv + static_cast<std::int64_t>(ch) * h * w;
        const S v00 = (vy0 && vx0) ? sc[y0 * w + x0] : S(0);
        const S v01 = (vy0 && vx1) ? sc[y0 * w + x0 + 1] : S(0);
        const S v10 = (vy1 && vx0) ? sc[(y0 + 1) * w + x0] : S(0);
        const S v11 = (vy1 && vx1) ? sc[(y0 + 1) * w + x0 + 1] : S(0);
        if (want_src) {
          S* gsc = gs + static_cast<std::int64_t>(ch) * h * w;
          if (vy0 && vx0) gsc[y0 * w + x0] += gv * (1 - fy) * (1 - fx);
          if (vy0 && vx1) gsc[y0 * w + x0 + 1] += gv * (1 - fy) * fx;
          if (vy1 && vx0) gsc[(y0 + 1) * w + x0] += gv * fy * (1 - fx);
          if (vy1 && vx1) gsc[(y0 + 1) * w + x0 + 1] += gv * fy * fx;
        }
        if (want_crd) {
          dx_acc += gv * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
          dy_acc += gv * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
        }
      }
      if (want_crd) {
        gc[i] += dx_acc;
        gc[n + i] += dy_acc;
      }
    }
  });
  return {out, mask};
}

/// Elementwise minimum across tensors of identical shape. Ties go to the
/// earliest input, and the gradient flows only to the winner.
template <typename S>
Tensor<S> min_elems(const std::vector<Tensor<S>>& xs) {
  if (xs.empty()) throw ShapeError("min_elems", "no inputs");
  for (const auto& x : xs) detail::require_same_shape("min_elems", xs[0], x);
  const std::int64_t n = xs[0].size();
  Tensor<S> out = Tensor<S>::zeros(xs[0].shape());
  auto winners = std::make_shared<std::vector<int>>(static_cast<std::size_t>(n), 0);
  S* o = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    S best = xs[0].data()[i];
    int arg = 0;
    for (std::size_t k = 1; k < xs.size(); ++k) {
      const S v = xs[k].data()[i];
      if (v < best) {
        best = v;
        arg = static_cast<int>(k);
      }
    }
    o[i] = best;
    (*winners)[static_cast<std::size_t>(i)] = arg;
  }
  std::vector<std::shared_ptr<TensorImpl<S>>> parents;
  parents.reserve(xs.size());
  for (const auto& x : xs) parents.push_back(x.impl_ptr());
  detail::attach(out, parents, [parents, winners, n](TensorImpl<S>& self) {
    for (std::int64_t i = 0; i < n; ++i) {
      auto& p = parents[static_cast<std::size_t>((*winners)[static_cast<std::size_t>(i)])];
      if (detail::wants_grad(p)) ensure_grad(*p)[i] += self.grad[i];
    }
  });
  return out;
}

/// Stacks [Ci,H,W] tensors along the channel axis.
template <typename S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels", "no inputs");
  const int h = xs[0].dim(1), w = xs[0].dim(2);
  int ctot = 0;
  for (const auto& x : xs) {
    detail::require_chw("concat_channels", x);
    if (x.dim(1) != h || x.dim(2) != w)
      throw ShapeError("concat_channels", "spatial mismatch " + shape_str(x.shape()));
    ctot += x.dim(0);
  }
  Tensor<S> out = Tensor<S>::zeros({ctot, h, w});
  std::int64_t off = 0;
  for (const auto& x : xs) {
    std::copy(x.data(), x.data() + x.size(), out.data() + off);
    off += x.size();
  }
  std::vector<std::shared_ptr<TensorImpl<S>>> parents;
  parents.reserve(xs.size());
  for (const auto& x : xs) parents.push_back(x.impl_ptr());
  detail::attach(out, parents, [parents](TensorImpl<S>& self) {
    std::int64_t off = 0;
    for (const auto& p : parents) {
      const std::int64_t sz = p->value.size();
      if (detail::wants_grad(p)) ensure_grad(*p) += self.grad.segment(off, sz);
      off += sz;
    }
  });
  return out;
}

/// Copies channels [c0, c0+len) out of a [C,H,W] tensor.
template <typename S>
Tensor<S> slice_channels(const Tensor<S>& x, int c0, int len) {
  detail::require_chw("slice_channels", x);
  if (c0 < 0 || len < 1 || c0 + len > x.dim(0))
    throw ShapeError("slice_channels", "range [" + std::to_string(c0) + "," + std::to_string(c0 + len) +
                                           ") out of " + std::to_string(x.dim(0)) + " channels");
  const int h = x.dim(1), w = x.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor<S> out = Tensor<S>::zeros({len, h, w});
  std::copy(x.data() + c0 * plane, x.data() + (c0 + len) * plane, out.data());
  auto xi = x.impl_ptr();
  detail::attach(out, {xi}, [xi, c0, plane, len](TensorImpl<S>& self) {
    ensure_grad(*xi).segment(c0 * plane, len * plane) += self.grad;
  });
  return out;
}

/// Broadcasts a rank-0 tensor to an arbitrary shape (scalar statistics such
/// as mean depth entering elementwise expressions with gradient intact).
template <typename S>
Tensor<S> broadcast_scalar(const Tensor<S>& s, const Shape& shape) {
  if (s.size() != 1) throw ShapeError("broadcast_scalar", "expected a scalar, got " + shape_str(s.shape()));
  Tensor<S> out = Tensor<S>::full(shape, s.data()[0]);
  auto si = s.impl_ptr();
  detail::attach(out, {si}, [si](TensorImpl<S>& self) { ensure_grad(*si)[0] += self.grad.sum(); });
  return out;
}

/// Mean over the channel axis: [C,H,W] -> [1,H,W].
template <typename S>
Tensor<S> channel_mean(const Tensor<S>& x) {
  detail::require_chw("channel_mean", x);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::int64_t n = static_cast<std::int64_t>(h) * w;
  Tensor<S> out = Tensor<S>::zeros({1, h, w});
  Eigen::Map<typename Tensor<S>::Array> om(out.data(), n);
  for (int ch = 0; ch < c; ++ch)
    om += Eigen::Map<const typename Tensor<S>::Array>(x.data() + ch * n, n);
  om /= static_cast<S>(c);
  auto xi = x.impl_ptr();
  detail::attach(out, {xi}, [xi, c, n](TensorImpl<S>& self) {
    auto& gx = ensure_grad(*xi);
    for (int ch = 0; ch < c; ++ch) gx.segment(ch * n, n) += self.grad / static_cast<S>(c);
  });
  return out;
}

/// Adds a per-channel bias vector broadcast over the spatial dims
/// (feature-map conditioning on embedding vectors).
template <typename S>
Tensor<S> add_cbias(const Tensor<S>& x, const Tensor<S>& v) {
  detail::require_chw("add_cbias", x);
  if (v.rank() != 1 || v.dim(0) != x.dim(0))
    throw ShapeError("add_cbias", "bias " + shape_str(v.shape()) + " vs channels " + std::to_string(x.dim(0)));
  const int c = x.dim(0);
  const std::int64_t n = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (int ch = 0; ch < c; ++ch)
    Eigen::Map<typename Tensor<S>::Array>(out.data() + ch * n, n) =
        Eigen::Map<const typename Tensor<S>::Array>(x.data() + ch * n, n) + v.data()[ch];
  auto xi = x.impl_ptr(), vi = v.impl_ptr();
  detail::attach(out, {xi, vi}, [xi, vi, c, n](TensorImpl<S>& self) {
    if (detail::wants_grad(xi)) ensure_grad(*xi) += self.grad;
    if (detail::wants_grad(vi)) {
      auto& gv = ensure_grad(*vi);
      for (int ch = 0; ch < c; ++ch) gv[ch] += self.grad.segment(ch * n, n).sum();
    }
  });
  return out;
}

/// Dense layer on vectors: y = W x + b with W [out,in], x [in], b [out].
template <typename S>
Tensor<S> linear(const Tensor<S>& w, const Tensor<S>& x, const Tensor<S>& b) {
  if (w.rank() != 2) throw ShapeError("linear", "weights must be [out,in]");
  if (x.rank() != 1 || x.dim(0) != w.dim(1)) throw ShapeError("linear", "input " + shape_str(x.shape()) + " vs weights " + shape_str(w.shape()));
  if (b.rank() != 1 || b.dim(0) != w.dim(0)) throw ShapeError("linear", "bias shape mismatch");
  const int out_n = w.dim(0), in_n = w.dim(1);
  Tensor<S> out = Tensor<S>::zeros({out_n});
  Eigen::Map<const detail::MatRM<S>> wm(w.data(), out_n, in_n);
  Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> xv(x.data(), in_n);
  Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> ov(out.data(), out_n);
  ov.noalias() = wm * xv;
  ov += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(b.data(), out_n);
  auto wi = w.impl_ptr(), xi = x.impl_ptr(), bi = b.impl_ptr();
  detail::attach(out, {wi, xi, bi}, [wi, xi, bi, out_n, in_n](TensorImpl<S>& self) {
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> gv(self.grad.data(), out_n);
    if (detail::wants_grad(bi)) ensure_grad(*bi) += self.grad;
    if (detail::wants_grad(wi)) {
      Eigen::Map<detail::MatRM<S>> gwm(ensure_grad(*wi).data(), out_n, in_n);
      Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> xv(xi->value.data(), in_n);
      gwm.noalias() += gv * xv.transpose();
    }
    if (detail::wants_grad(xi)) {
      Eigen::Map<const detail::MatRM<S>> wm(wi->value.data(), out_n, in_n);
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> gxv(ensure_grad(*xi).data(), in_n);
      gxv.noalias() += wm.transpose() * gv;
    }
  });
  return out;
}

/// Graph-free dtype conversion (dataset tensors into the training scalar type).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  Tensor<To> out = Tensor<To>::zeros(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) out.data()[i] = static_cast<To>(x.data()[i]);
  return out;
}

}  // namespace diffdepth
