#pragma once

#include "mseu/tensor.hpp"

namespace mseu {

enum class Conv1dPad { causal, same, valid };

struct Conv1dOpts {
  int64_t stride = 1;
  Conv1dPad pad = Conv1dPad::causal;
  int64_t groups = 1;
};

namespace detail {

struct Conv1dGeom {
  int64_t B, C, L, Co, Cg, K, Lout, pad_l, stride, groups;
  bool batched;
};

template <class S>
Conv1dGeom conv1d_geom(const Tensor<S>& x, const Tensor<S>& w, const Conv1dOpts& o) {
  require(x.rank() == 2 || x.rank() == 3,
          "conv1d: input must be [C x L] or [B x C x L], got " + shape_str(x.shape()));
  require(w.rank() == 3, "conv1d: weight must be [C_out x C_in/g x K], got " + shape_str(w.shape()));
  require(o.stride > 0, "conv1d: stride must be positive");
  Conv1dGeom g;
  g.batched = x.rank() == 3;
  g.B = g.batched ? x.dim(0) : 1;
  g.C = x.dim(g.batched ? 1 : 0);
  g.L = x.dim(g.batched ? 2 : 1);
  g.Co = w.dim(0);
  g.Cg = w.dim(1);
  g.K = w.dim(2);
  g.groups = o.groups;
  g.stride = o.stride;
  require(o.groups > 0 && g.C % o.groups == 0 && g.Co % o.groups == 0,
          "conv1d: groups " + std::to_string(o.groups) + " must divide channels " +
              std::to_string(g.C) + " and " + std::to_string(g.Co));
  require(g.Cg == g.C / o.groups, "conv1d: weight " + shape_str(w.shape()) +
                                      " disagrees with input channels " + std::to_string(g.C));
  switch (o.pad) {
    case Conv1dPad::causal: g.pad_l = g.K - 1; break;
    case Conv1dPad::same: g.pad_l = (g.K - 1) / 2; break;
    case Conv1dPad::valid: g.pad_l = 0; break;
  }
  int64_t padded = g.L + (o.pad == Conv1dPad::causal ? g.K - 1
                          : o.pad == Conv1dPad::same ? g.K - 1
                                                     : 0);
  require(padded >= g.K, "conv1d: kernel " + std::to_string(g.K) +
                             " longer than padded input " + std::to_string(padded));
  g.Lout = (padded - g.K) / o.stride + 1;
  return g;
}

// y[b,co,t] += w[co,cig,k] * x[b, gCg+cig, t*s - pad_l + k], accumulated per tap
template <class S>
void conv1d_accum(const S* xd, const S* wd, S* yd, const Conv1dGeom& g) {
  int64_t Cog = g.Co / g.groups;
  for (int64_t b = 0; b < g.B; ++b)
    for (int64_t gi = 0; gi < g.groups; ++gi)
      for (int64_t cog = 0; cog < Cog; ++cog) {
        int64_t co = gi * Cog + cog;
        S* yrow = yd + (b * g.Co + co) * g.Lout;
        for (int64_t cig = 0; cig < g.Cg; ++cig) {
          const S* xrow = xd + (b * g.C + gi * g.Cg + cig) * g.L;
          for (int64_t k = 0; k < g.K; ++k) {
            S wv = wd[(co * g.Cg + cig) * g.K + k];
            if (wv == S(0)) continue;
            int64_t shift = k - g.pad_l;  // x index = t*s + shift
            int64_t t0 = shift < 0 ? (-shift + g.stride - 1) / g.stride : 0;
            int64_t t1 = g.L - shift;  // exclusive bound on t*s
            t1 = t1 <= 0 ? 0 : (t1 - 1) / g.stride + 1;
            t1 = std::min(t1, g.Lout);
            if (g.stride == 1) {
              if (t1 > t0)
                arr_p(yrow + t0, t1 - t0) += wv * carr_p(xrow + t0 + shift, t1 - t0);
            } else {
              for (int64_t t = t0; t < t1; ++t) yrow[t] += wv * xrow[t * g.stride + shift];
            }
          }
        }
      }
}

}  // namespace detail

template <class S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                 const Conv1dOpts& opts) {
  auto g = detail::conv1d_geom(x, w, opts);
  if (bias.defined())
    require(bias.rank() == 1 && bias.dim(0) == g.Co,
            "conv1d: bias " + shape_str(bias.shape()) + " for " + std::to_string(g.Co) + " outputs");

  detail::AVec<S> v((size_t)(g.B * g.Co * g.Lout), S(0));
  if (bias.defined()) {
    for (int64_t b = 0; b < g.B; ++b)
      for (int64_t co = 0; co < g.Co; ++co)
        detail::arr_p(v.data() + (b * g.Co + co) * g.Lout, g.Lout) = bias.data()[(size_t)co];
  }
  detail::conv1d_accum(x.data().data(), w.data().data(), v.data(), g);
  Shape oshape = g.batched ? Shape{g.B, g.Co, g.Lout} : Shape{g.Co, g.Lout};
  auto out = Tensor<S>::from_buf(std::move(v), oshape);

  if (auto r = detail::begin_op<S>(x, w, bias)) {
    r.tape->record(out, [ix = r.in[0], iw = r.in[1], ib = r.in[2], xs = x.storage(),
                         ws = w.storage(), g](const S* gy, Tape<S>& tp) {
      int64_t Cog = g.Co / g.groups;
      if (S* gx = tp.grad_buf(ix)) {
        // scatter: dx[t*s + shift] += w * dy[t]
        for (int64_t b = 0; b < g.B; ++b)
          for (int64_t gi = 0; gi < g.groups; ++gi)
            for (int64_t cog = 0; cog < Cog; ++cog) {
              int64_t co = gi * Cog + cog;
              const S* grow = gy + (b * g.Co + co) * g.Lout;
              for (int64_t cig = 0; cig < g.Cg; ++cig) {
                S* gxrow = gx + (b * g.C + gi * g.Cg + cig) * g.L;
                for (int64_t k = 0; k < g.K; ++k) {
                  S wv = (*ws)[(size_t)((co * g.Cg + cig) * g.K + k)];
                  if (wv == S(0)) continue;
                  int64_t shift = k - g.pad_l;
                  int64_t t0 = shift < 0 ? (-shift + g.stride - 1) / g.stride : 0;
                  int64_t t1 = g.L - shift;
                  t1 = t1 <= 0 ? 0 : (t1 - 1) / g.stride + 1;
                  t1 = std::min(t1, g.Lout);
                  if (g.stride == 1) {
                    if (t1 > t0)
                      detail::arr_p(gxrow + t0 + shift, t1 - t0) +=
                          wv * detail::carr_p(grow + t0, t1 - t0);
                  } else {
                    for (int64_t t = t0; t < t1; ++t) gxrow[t * g.stride + shift] += wv * grow[t];
                  }
                }
              }
            }
      }
      if (S* gw = tp.grad_buf(iw)) {
        for (int64_t b = 0; b < g.B; ++b)
          for (int64_t gi = 0; gi < g.groups; ++gi)
            for (int64_t cog = 0; cog < Cog; ++cog) {
              int64_t co = gi * Cog + cog;
              const S* grow = gy + (b * g.Co + co) * g.Lout;
              for (int64_t cig = 0; cig < g.Cg; ++cig) {
                const S* xrow = xs->data() + (b * g.C + gi * g.Cg + cig) * g.L;
                for (int64_t k = 0; k < g.K; ++k) {
                  int64_t shift = k - g.pad_l;
                  int64_t t0 = shift < 0 ? (-shift + g.stride - 1) / g.stride : 0;
                  int64_t t1 = g.L - shift;
                  t1 = t1 <= 0 ? 0 : (t1 - 1) / g.stride + 1;
                  t1 = std::min(t1, g.Lout);
                  S acc = 0;
                  if (g.stride == 1) {
                    if (t1 > t0)
                      acc = (detail::carr_p(grow + t0, t1 - t0) *
                             detail::carr_p(xrow + t0 + shift, t1 - t0))
                                .sum();
                  } else {
                    for (int64_t t = t0; t < t1; ++t) acc += grow[t] * xrow[t * g.stride + shift];
                  }
                  gw[(co * g.Cg + cig) * g.K + k] += acc;
                }
              }
            }
      }
      if (S* gb = tp.grad_buf(ib)) {
        for (int64_t b = 0; b < g.B; ++b)
          for (int64_t co = 0; co < g.Co; ++co)
            gb[co] += detail::carr_p(gy + (b * g.Co + co) * g.Lout, g.Lout).sum();
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& w, const Conv1dOpts& opts) {
  return conv1d(x, w, Tensor<S>{}, opts);
}

struct Conv2dOpts {
  int64_t stride_h = 1, stride_w = 1;
  int64_t pad_h = 0, pad_w = 0;
  int64_t dil_h = 1, dil_w = 1;
  int64_t groups = 1;
};

namespace detail {

struct Conv2dGeom {
  int64_t C, H, W, Co, Cg, Kh, Kw, Ho, Wo;
  Conv2dOpts o;
};

template <class S>
Conv2dGeom conv2d_geom(const Tensor<S>& x, const Tensor<S>& w, const Conv2dOpts& o) {
  require(x.rank() == 3, "conv2d: input must be [C x H x W], got " + shape_str(x.shape()));
  require(w.rank() == 4, "conv2d: weight must be [C_out x C_in/g x Kh x Kw], got " +
                             shape_str(w.shape()));
  require(o.stride_h > 0 && o.stride_w > 0, "conv2d: stride must be positive");
  require(o.dil_h > 0 && o.dil_w > 0, "conv2d: dilation must be positive");
  require(o.pad_h >= 0 && o.pad_w >= 0, "conv2d: negative padding");
  Conv2dGeom g;
  g.C = x.dim(0); g.H = x.dim(1); g.W = x.dim(2);
  g.Co = w.dim(0); g.Cg = w.dim(1); g.Kh = w.dim(2); g.Kw = w.dim(3);
  g.o = o;
  require(o.groups > 0 && g.C % o.groups == 0 && g.Co % o.groups == 0,
          "conv2d: groups " + std::to_string(o.groups) + " must divide channels");
  require(g.Cg == g.C / o.groups, "conv2d: weight " + shape_str(w.shape()) +
                                      " disagrees with input channels " + std::to_string(g.C));
  int64_t eff_kh = o.dil_h * (g.Kh - 1) + 1;
  int64_t eff_kw = o.dil_w * (g.Kw - 1) + 1;
  require(g.H + 2 * o.pad_h >= eff_kh && g.W + 2 * o.pad_w >= eff_kw,
          "conv2d: kernel larger than padded input (" + std::to_string(eff_kh) + "x" +
              std::to_string(eff_kw) + " vs " + std::to_string(g.H + 2 * o.pad_h) + "x" +
              std::to_string(g.W + 2 * o.pad_w) + ")");
  g.Ho = (g.H + 2 * o.pad_h - eff_kh) / o.stride_h + 1;
  g.Wo = (g.W + 2 * o.pad_w - eff_kw) / o.stride_w + 1;
  return g;
}

// col is [Cg*Kh*Kw x Ho*Wo] for channel group gi
template <class S>
void im2col(const S* xd, const Conv2dGeom& g, int64_t gi, S* col) {
  const auto& o = g.o;
  for (int64_t cig = 0; cig < g.Cg; ++cig) {
    const S* xc = xd + (gi * g.Cg + cig) * g.H * g.W;
    for (int64_t kh = 0; kh < g.Kh; ++kh)
      for (int64_t kw = 0; kw < g.Kw; ++kw) {
        S* row = col + ((cig * g.Kh + kh) * g.Kw + kw) * (g.Ho * g.Wo);
        for (int64_t oh = 0; oh < g.Ho; ++oh) {
          int64_t ih = oh * o.stride_h - o.pad_h + kh * o.dil_h;
          S* dst = row + oh * g.Wo;
          if (ih < 0 || ih >= g.H) {
            std::fill(dst, dst + g.Wo, S(0));
            continue;
          }
          const S* src = xc + ih * g.W;
          if (o.stride_w == 1) {
            int64_t iw0 = -o.pad_w + kw * o.dil_w;  // iw = iw0 + ow
            int64_t lo = std::max<int64_t>(0, -iw0);
            int64_t hi = std::min(g.Wo, g.W - iw0);
            if (lo > 0) std::fill(dst, dst + std::min(lo, g.Wo), S(0));
            if (hi > lo) std::memcpy(dst + lo, src + iw0 + lo, (size_t)(hi - lo) * sizeof(S));
            if (hi < g.Wo) std::fill(dst + std::max(hi, lo), dst + g.Wo, S(0));
          } else {
            for (int64_t ow = 0; ow < g.Wo; ++ow) {
              int64_t iw = ow * o.stride_w - o.pad_w + kw * o.dil_w;
              dst[ow] = (iw >= 0 && iw < g.W) ? src[iw] : S(0);
            }
          }
        }
      }
  }
}

template <class S>
void col2im_add(const S* col, const Conv2dGeom& g, int64_t gi, S* xd) {
  const auto& o = g.o;
  for (int64_t cig = 0; cig < g.Cg; ++cig) {
    S* xc = xd + (gi * g.Cg + cig) * g.H * g.W;
    for (int64_t kh = 0; kh < g.Kh; ++kh)
      for (int64_t kw = 0; kw < g.Kw; ++kw) {
        const S* row = col + ((cig * g.Kh + kh) * g.Kw + kw) * (g.Ho * g.Wo);
        for (int64_t oh = 0; oh < g.Ho; ++oh) {
          int64_t ih = oh * o.stride_h - o.pad_h + kh * o.dil_h;
          if (ih < 0 || ih >= g.H) continue;
          const S* src = row + oh * g.Wo;
          S* dstrow = xc + ih * g.W;
          for (int64_t ow = 0; ow < g.Wo; ++ow) {
            int64_t iw = ow * o.stride_w - o.pad_w + kw * o.dil_w;
            if (iw >= 0 && iw < g.W) dstrow[iw] += src[ow];
          }
        }
      }
  }
}

}  // namespace detail

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                 const Conv2dOpts& opts) {
  auto g = detail::conv2d_geom(x, w, opts);
  if (bias.defined())
    require(bias.rank() == 1 && bias.dim(0) == g.Co,
            "conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(g.Co) + " outputs");

  int64_t Cog = g.Co / opts.groups;
  int64_t cols = g.Ho * g.Wo;
  int64_t krows = g.Cg * g.Kh * g.Kw;
  detail::AVec<S> col((size_t)(krows * cols));
  detail::AVec<S> v((size_t)(g.Co * cols));
  for (int64_t gi = 0; gi < opts.groups; ++gi) {
    detail::im2col(x.data().data(), g, gi, col.data());
    detail::CMatMap<S> W(w.data().data() + gi * Cog * krows, Cog, krows);
    detail::CMatMap<S> C(col.data(), krows, cols);
    detail::MatMap<S> Y(v.data() + gi * Cog * cols, Cog, cols);
    Y.noalias() = W * C;
  }
  if (bias.defined())
    for (int64_t co = 0; co < g.Co; ++co)
      detail::arr_p(v.data() + co * cols, cols) += bias.data()[(size_t)co];
  auto out = Tensor<S>::from_buf(std::move(v), {g.Co, g.Ho, g.Wo});

  if (auto r = detail::begin_op<S>(x, w, bias)) {
    r.tape->record(out, [ix = r.in[0], iw = r.in[1], ib = r.in[2], xs = x.storage(),
                         ws = w.storage(), g, Cog, cols, krows](const S* gy, Tape<S>& tp) {
      S* gx = tp.grad_buf(ix);
      S* gw = tp.grad_buf(iw);
      detail::AVec<S> col((size_t)(krows * cols));
      for (int64_t gi = 0; gi < g.o.groups; ++gi) {
        detail::CMatMap<S> GY(gy + gi * Cog * cols, Cog, cols);
        if (gw) {
          detail::im2col(xs->data(), g, gi, col.data());
          detail::CMatMap<S> C(col.data(), krows, cols);
          detail::MatMap<S>(gw + gi * Cog * krows, Cog, krows).noalias() += GY * C.transpose();
        }
        if (gx) {
          detail::CMatMap<S> W(ws->data() + gi * Cog * krows, Cog, krows);
          detail::MatMap<S> C(col.data(), krows, cols);
          C.noalias() = W.transpose() * GY;
          detail::col2im_add(col.data(), g, gi, gx);
        }
      }
      if (S* gb = tp.grad_buf(ib)) {
        for (int64_t co = 0; co < g.Co; ++co)
          gb[co] += detail::carr_p(gy + co * cols, cols).sum();
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Conv2dOpts& opts) {
  return conv2d(x, w, Tensor<S>{}, opts);
}

struct ConvT2dOpts {
  int64_t stride_h = 1, stride_w = 1;
  int64_t pad_h = 0, pad_w = 0;
};

// Transposed conv; weight is [C_in x C_out x Kh x Kw] so a weight shared with
// conv2d maps back to that conv's input space (exact adjoint).
template <class S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                           const ConvT2dOpts& o) {
  require(x.rank() == 3, "conv_transpose2d: input must be [C x H x W], got " + shape_str(x.shape()));
  require(w.rank() == 4 && w.dim(0) == x.dim(0),
          "conv_transpose2d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  require(o.stride_h > 0 && o.stride_w > 0, "conv_transpose2d: stride must be positive");
  int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  int64_t Co = w.dim(1), Kh = w.dim(2), Kw = w.dim(3);
  int64_t Ho = (H - 1) * o.stride_h - 2 * o.pad_h + Kh;
  int64_t Wo = (W - 1) * o.stride_w - 2 * o.pad_w + Kw;
  require(Ho > 0 && Wo > 0, "conv_transpose2d: empty output for input " + shape_str(x.shape()));
  if (bias.defined())
    require(bias.rank() == 1 && bias.dim(0) == Co,
            "conv_transpose2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(Co) +
                " outputs");

  detail::AVec<S> v((size_t)(Co * Ho * Wo), S(0));
  if (bias.defined())
    for (int64_t co = 0; co < Co; ++co)
      detail::arr_p(v.data() + co * Ho * Wo, Ho * Wo) = bias.data()[(size_t)co];
  {
    const S* xd = x.data().data();
    const S* wd = w.data().data();
    for (int64_t c = 0; c < C; ++c)
      for (int64_t ih = 0; ih < H; ++ih)
        for (int64_t iw = 0; iw < W; ++iw) {
          S xv = xd[(c * H + ih) * W + iw];
          if (xv == S(0)) continue;
          for (int64_t co = 0; co < Co; ++co)
            for (int64_t kh = 0; kh < Kh; ++kh) {
              int64_t ohh = ih * o.stride_h - o.pad_h + kh;
              if (ohh < 0 || ohh >= Ho) continue;
              for (int64_t kw = 0; kw < Kw; ++kw) {
                int64_t oww = iw * o.stride_w - o.pad_w + kw;
                if (oww < 0 || oww >= Wo) continue;
                v[(size_t)((co * Ho + ohh) * Wo + oww)] +=
                    xv * wd[((c * Co + co) * Kh + kh) * Kw + kw];
              }
            }
        }
  }
  auto out = Tensor<S>::from_buf(std::move(v), {Co, Ho, Wo});

  if (auto r = detail::begin_op<S>(x, w, bias)) {
    r.tape->record(out, [ix = r.in[0], iw2 = r.in[1], ib = r.in[2], xs = x.storage(),
                         ws = w.storage(), C, H, W, Co, Kh, Kw, Ho, Wo, o](const S* gy, Tape<S>& tp) {
      S* gx = tp.grad_buf(ix);
      S* gw = tp.grad_buf(iw2);
      if (gx || gw) {
        for (int64_t c = 0; c < C; ++c)
          for (int64_t ih = 0; ih < H; ++ih)
            for (int64_t iw = 0; iw < W; ++iw) {
              S accx = 0;
              S xv = (*xs)[(size_t)((c * H + ih) * W + iw)];
              for (int64_t co = 0; co < Co; ++co)
                for (int64_t kh = 0; kh < Kh; ++kh) {
                  int64_t ohh = ih * o.stride_h - o.pad_h + kh;
                  if (ohh < 0 || ohh >= Ho) continue;
                  for (int64_t kw = 0; kw < Kw; ++kw) {
                    int64_t oww = iw * o.stride_w - o.pad_w + kw;
                    if (oww < 0 || oww >= Wo) continue;
                    S gv = gy[(co * Ho + ohh) * Wo + oww];
                    if (gx) accx += gv * (*ws)[(size_t)(((c * Co + co) * Kh + kh) * Kw + kw)];
                    if (gw) gw[((c * Co + co) * Kh + kh) * Kw + kw] += gv * xv;
                  }
                }
              if (gx) gx[(c * H + ih) * W + iw] += accx;
            }
      }
      if (S* gb = tp.grad_buf(ib)) {
        for (int64_t co = 0; co < Co; ++co)
          gb[co] += detail::carr_p(gy + co * Ho * Wo, Ho * Wo).sum();
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& w, const ConvT2dOpts& o) {
  return conv_transpose2d(x, w, Tensor<S>{}, o);
}

namespace detail {

// bilinear read with zero outside the image
template <class S>
S bil_sample(const S* img, int64_t H, int64_t W, double r, double c) {
  int64_t h0 = (int64_t)std::floor(r), w0 = (int64_t)std::floor(c);
  double ar = r - (double)h0, ac = c - (double)w0;
  auto px = [&](int64_t h, int64_t ww) -> double {
    return (h >= 0 && h < H && ww >= 0 && ww < W) ? (double)img[h * W + ww] : 0.0;
  };
  double v = (1 - ar) * (1 - ac) * px(h0, w0) + (1 - ar) * ac * px(h0, w0 + 1) +
             ar * (1 - ac) * px(h0 + 1, w0) + ar * ac * px(h0 + 1, w0 + 1);
  return (S)v;
}

}  // namespace detail

// Deformable 3x3-style conv (v1): stride 1, same padding, one offset pair per
// kernel tap per output position. offsets[2*(kh*K+kw)+{0,1}, oh, ow] holds the
// row/column displacement added to that tap's sampling point.
template <class S>
Tensor<S> deformable_conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& offsets,
                            const Tensor<S>& bias) {
  require(x.rank() == 3, "deformable_conv2d: input must be [C x H x W], got " + shape_str(x.shape()));
  require(w.rank() == 4 && w.dim(1) == x.dim(0),
          "deformable_conv2d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  int64_t Co = w.dim(0), Kh = w.dim(2), Kw = w.dim(3);
  require(Kh == Kw && Kh % 2 == 1, "deformable_conv2d: kernel must be square and odd, got " +
                                       shape_str(w.shape()));
  int64_t K = Kh, pad = (K - 1) / 2;
  require(offsets.rank() == 3 && offsets.dim(0) == 2 * K * K && offsets.dim(1) == H &&
              offsets.dim(2) == W,
          "deformable_conv2d: offsets " + shape_str(offsets.shape()) + " for input " +
              shape_str(x.shape()));
  if (bias.defined())
    require(bias.rank() == 1 && bias.dim(0) == Co, "deformable_conv2d: bias " +
                                                       shape_str(bias.shape()) + " for " +
                                                       std::to_string(Co) + " outputs");

  int64_t cols = H * W, krows = C * K * K;
  detail::AVec<S> col((size_t)(krows * cols));
  const S* xd = x.data().data();
  const S* od = offsets.data().data();
  for (int64_t c = 0; c < C; ++c)
    for (int64_t kh = 0; kh < K; ++kh)
      for (int64_t kw = 0; kw < K; ++kw) {
        S* row = col.data() + ((c * K + kh) * K + kw) * cols;
        int64_t tap = kh * K + kw;
        const S* offr = od + (2 * tap) * cols;
        const S* offc = od + (2 * tap + 1) * cols;
        const S* img = xd + c * H * W;
        for (int64_t p = 0; p < cols; ++p) {
          double rr = (double)(p / W) - pad + kh + (double)offr[p];
          double cc = (double)(p % W) - pad + kw + (double)offc[p];
          row[p] = detail::bil_sample(img, H, W, rr, cc);
        }
      }
  detail::AVec<S> v((size_t)(Co * cols));
  {
    detail::CMatMap<S> Wm(w.data().data(), Co, krows);
    detail::CMatMap<S> Cm(col.data(), krows, cols);
    detail::MatMap<S> Y(v.data(), Co, cols);
    Y.noalias() = Wm * Cm;
  }
  if (bias.defined())
    for (int64_t co = 0; co < Co; ++co)
      detail::arr_p(v.data() + co * cols, cols) += bias.data()[(size_t)co];
  auto out = Tensor<S>::from_buf(std::move(v), {Co, H, W});

  if (auto r = detail::begin_op<S>(x, w, offsets, bias)) {
    r.tape->record(out, [ix = r.in[0], iw = r.in[1], io = r.in[2], ib = r.in[3], xs = x.storage(),
                         ws = w.storage(), os = offsets.storage(), C, H, W, Co, K, pad, cols,
                         krows](const S* gy, Tape<S>& tp) {
      S* gx = tp.grad_buf(ix);
      S* gw = tp.grad_buf(iw);
      S* go = tp.grad_buf(io);
      S* gb = tp.grad_buf(ib);
      const S* xd = xs->data();
      const S* od = os->data();
      detail::CMatMap<S> GY(gy, Co, cols);

      if (gw) {
        // rebuild the sampled patch matrix
        detail::AVec<S> col((size_t)(krows * cols));
        for (int64_t c = 0; c < C; ++c)
          for (int64_t kh = 0; kh < K; ++kh)
            for (int64_t kw = 0; kw < K; ++kw) {
              S* row = col.data() + ((c * K + kh) * K + kw) * cols;
              int64_t tap = kh * K + kw;
              const S* offr = od + (2 * tap) * cols;
              const S* offc = od + (2 * tap + 1) * cols;
              const S* img = xd + c * H * W;
              for (int64_t p = 0; p < cols; ++p) {
                double rr = (double)(p / W) - pad + kh + (double)offr[p];
                double cc = (double)(p % W) - pad + kw + (double)offc[p];
                row[p] = detail::bil_sample(img, H, W, rr, cc);
              }
            }
        detail::CMatMap<S> Cm(col.data(), krows, cols);
        detail::MatMap<S>(gw, Co, krows).noalias() += GY * Cm.transpose();
      }
      if (gx || go) {
        detail::AVec<S> dcol((size_t)(krows * cols));
        {
          detail::CMatMap<S> Wm(ws->data(), Co, krows);
          detail::MatMap<S>(dcol.data(), krows, cols).noalias() = Wm.transpose() * GY;
        }
        for (int64_t c = 0; c < C; ++c)
          for (int64_t kh = 0; kh < K; ++kh)
            for (int64_t kw = 0; kw < K; ++kw) {
              const S* drow = dcol.data() + ((c * K + kh) * K + kw) * cols;
              int64_t tap = kh * K + kw;
              const S* offr = od + (2 * tap) * cols;
              const S* offc = od + (2 * tap + 1) * cols;
              const S* img = xd + c * H * W;
              S* gimg = gx ? gx + c * H * W : nullptr;
              for (int64_t p = 0; p < cols; ++p) {
                double gval = (double)drow[p];
                if (gval == 0.0) continue;
                double rr = (double)(p / W) - pad + kh + (double)offr[p];
                double cc = (double)(p % W) - pad + kw + (double)offc[p];
                int64_t h0 = (int64_t)std::floor(rr), w0 = (int64_t)std::floor(cc);
                double ar = rr - (double)h0, ac = cc - (double)w0;
                auto px = [&](int64_t h, int64_t ww) -> double {
                  return (h >= 0 && h < H && ww >= 0 && ww < W) ? (double)img[h * W + ww] : 0.0;
                };
                if (gimg) {
                  auto put = [&](int64_t h, int64_t ww, double wgt) {
                    if (h >= 0 && h < H && ww >= 0 && ww < W) gimg[h * W + ww] += (S)(gval * wgt);
                  };
                  put(h0, w0, (1 - ar) * (1 - ac));
                  put(h0, w0 + 1, (1 - ar) * ac);
                  put(h0 + 1, w0, ar * (1 - ac));
                  put(h0 + 1, w0 + 1, ar * ac);
                }
                if (go) {
                  double v00 = px(h0, w0), v01 = px(h0, w0 + 1);
                  double v10 = px(h0 + 1, w0), v11 = px(h0 + 1, w0 + 1);
                  double dvr = (1 - ac) * (v10 - v00) + ac * (v11 - v01);
                  double dvc = (1 - ar) * (v01 - v00) + ar * (v11 - v10);
                  go[(2 * tap) * cols + p] += (S)(gval * dvr);
                  go[(2 * tap + 1) * cols + p] += (S)(gval * dvc);
                }
              }
            }
      }
      if (gb) {
        for (int64_t co = 0; co < Co; ++co) gb[co] += detail::carr_p(gy + co * cols, cols).sum();
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> deformable_conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& offsets) {
  return deformable_conv2d(x, w, offsets, Tensor<S>{});
}

}  // namespace mseu
