#pragma once

#include <cmath>
#include <vector>

#include "mseu/tensor.hpp"

namespace mseu {

// Zero-order-hold discretization of the scalar state h' = a h + b u over a
// step of length delta:
//   h+ = exp(delta a) h + (exp(delta a) - 1) / a * b u.
// The input coefficient switches to a short series once |delta a| is small
// enough that expm1(z)/a would cancel, which also covers a == 0.

template <class S>
constexpr S zoh_series_cut() {
  return sizeof(S) == 4 ? S(1e-3) : S(1e-6);
}

template <class S>
S zoh_decay(S a, S delta) {
  require(delta > S(0), "zoh_decay: step must be positive, got " + std::to_string((double)delta));
  return std::exp(delta * a);
}

template <class S>
S zoh_input_coef(S a, S delta) {
  require(delta > S(0),
          "zoh_input_coef: step must be positive, got " + std::to_string((double)delta));
  S z = delta * a;
  if (std::abs(z) < zoh_series_cut<S>()) return delta * (S(1) + z * S(0.5));
  return (S)std::expm1(z) / a;
}

// Reference recurrence for one time-invariant channel, used to cross-check
// the selective path when its projections are frozen.
template <class S>
std::vector<S> lti_scan(S a, S b, S c, S delta, const std::vector<S>& u) {
  S abar = zoh_decay(a, delta);
  S bbar = zoh_input_coef(a, delta) * b;
  std::vector<S> y(u.size());
  S h = S(0);
  for (size_t t = 0; t < u.size(); ++t) {
    h = abar * h + bbar * u[t];
    y[t] = c * h;
  }
  return y;
}

// K[j] = c abar^j bbar, so that y = causal conv of u with K.
template <class S>
std::vector<S> lti_kernel(S a, S b, S c, S delta, int64_t len) {
  require(len >= 1, "lti_kernel: length must be positive");
  S abar = zoh_decay(a, delta);
  S bbar = zoh_input_coef(a, delta) * b;
  std::vector<S> k((size_t)len);
  S p = bbar;
  for (int64_t j = 0; j < len; ++j) {
    k[(size_t)j] = c * p;
    p *= abar;
  }
  return k;
}

// Convolution form only exists when the step is shared by every frame.
template <class S>
std::vector<S> lti_kernel(S a, S b, S c, const std::vector<S>& deltas) {
  require(!deltas.empty(), "lti_kernel: length must be positive");
  for (S d : deltas)
    require(d == deltas[0],
            "lti_kernel: kernel form requires a time-invariant step, steps vary");
  return lti_kernel(a, b, c, deltas[0], (int64_t)deltas.size());
}

template <class S>
std::vector<S> apply_kernel(const std::vector<S>& k, const std::vector<S>& u) {
  require(k.size() == u.size(), "apply_kernel: kernel and input lengths differ");
  std::vector<S> y(u.size(), S(0));
  for (size_t t = 0; t < u.size(); ++t)
    for (size_t j = 0; j <= t; ++j) y[t] += k[j] * u[t - j];
  return y;
}

// Selective scan over u [batch x len x channels] with frame-dependent
// projections b_in, c_in [batch x len x state] and per-(channel, state) decay
// parameter log_a [channels x state]; the continuous-time pole is
// a = -exp(log_a) and the step is softplus(delta_raw) [batch x len x channels].
// Each (channel, state) pair carries an independent scalar recurrence; outputs
// contract the state against c_in.
//
// Memory for the backward pass is kept at one state snapshot per chunk plus
// one chunk of recomputed intermediates; chunk_len == len stores every step.
// The arithmetic is identical for every chunk_len, only bookkeeping changes.
template <class S>
Tensor<S> selective_scan_chunked(const Tensor<S>& u, const Tensor<S>& delta_raw,
                                 const Tensor<S>& b_in, const Tensor<S>& c_in,
                                 const Tensor<S>& log_a, int64_t chunk_len) {
  require(u.shape().size() == 3,
          "selective_scan: input must be [batch x len x channels], got " + shape_str(u.shape()));
  int64_t bb = u.shape()[0], len = u.shape()[1], ch = u.shape()[2];
  require(len >= 1, "selective_scan: empty sequence");
  require(delta_raw.shape() == u.shape(),
          "selective_scan: step logits " + shape_str(delta_raw.shape()) + " must match input " +
              shape_str(u.shape()));
  require(b_in.shape().size() == 3 && b_in.shape()[0] == bb && b_in.shape()[1] == len,
          "selective_scan: input projection must be [batch x len x state], got " +
              shape_str(b_in.shape()));
  int64_t ns = b_in.shape()[2];
  require(c_in.shape() == b_in.shape(),
          "selective_scan: output projection " + shape_str(c_in.shape()) +
              " must match input projection " + shape_str(b_in.shape()));
  require(log_a.shape() == Shape{ch, ns},
          "selective_scan: decay table must be [channels x state] = [" + std::to_string(ch) +
              "x" + std::to_string(ns) + "], got " + shape_str(log_a.shape()));
  require(chunk_len >= 1, "selective_scan: chunk length must be positive");

  const S cut = zoh_series_cut<S>();
  const int64_t dn = ch * ns;
  auto a_v = std::make_shared<detail::AVec<S>>((size_t)dn);
  detail::arr(*a_v) = -detail::carr_p(log_a.data().data(), dn).exp();

  auto rec = detail::begin_op<S>(u, delta_raw, b_in, c_in, log_a);
  int64_t nchunks = (len + chunk_len - 1) / chunk_len;
  auto ckpts = std::make_shared<detail::AVec<S>>();
  if (rec) ckpts->resize((size_t)(bb * nchunks * dn));

  const S* ud = u.data().data();
  const S* dd = delta_raw.data().data();
  const S* bd = b_in.data().data();
  const S* cd = c_in.data().data();

  auto softplus1 = [](S x) {
    return x > S(0) ? x + (S)std::log1p(std::exp(-(double)x)) : (S)std::log1p(std::exp((double)x));
  };

  detail::AVec<S> y_v((size_t)(bb * len * ch));
  detail::AVec<S> h((size_t)dn), zrow((size_t)ns), ab((size_t)ns), cf((size_t)ns);
  for (int64_t b = 0; b < bb; ++b) {
    std::fill(h.begin(), h.end(), S(0));
    for (int64_t t = 0; t < len; ++t) {
      if (rec && t % chunk_len == 0)
        std::copy(h.begin(), h.end(),
                  ckpts->begin() + (ptrdiff_t)((b * nchunks + t / chunk_len) * dn));
      const S* urow = ud + (b * len + t) * ch;
      const S* drow = dd + (b * len + t) * ch;
      auto brow = detail::carr_p(bd + (b * len + t) * ns, ns);
      auto crow = detail::carr_p(cd + (b * len + t) * ns, ns);
      S* yrow = y_v.data() + (b * len + t) * ch;
      for (int64_t d = 0; d < ch; ++d) {
        S delta = softplus1(drow[d]);
        auto a_d = detail::carr_p(a_v->data() + d * ns, ns);
        auto h_d = detail::arr_p(h.data() + d * ns, ns);
        auto zz = detail::arr(zrow);
        auto aa = detail::arr(ab);
        auto cc = detail::arr(cf);
        zz = a_d * delta;
        aa = zz.exp();
        cc = (zz.abs() < cut).select(delta * (S(1) + zz * S(0.5)), (aa - S(1)) / a_d);
        h_d = aa * h_d + cc * (brow * urow[d]);
        yrow[d] = (h_d * crow).sum();
      }
      if (!detail::carr(h).isFinite().all() || !detail::carr_p(yrow, ch).isFinite().all())
        throw std::runtime_error("selective_scan: non-finite state at frame " + std::to_string(t));
    }
  }

  auto out = Tensor<S>::from_buf(std::move(y_v), {bb, len, ch});
  if (rec) {
    rec.tape->record(
        out,
        [iu = rec.in[0], id = rec.in[1], ib = rec.in[2], ic = rec.in[3], il = rec.in[4],
         us = u.storage(), ds = delta_raw.storage(), bst = b_in.storage(), cst = c_in.storage(),
         a_v, ckpts, bb, len, ch, ns, dn, nchunks, chunk_len, cut,
         softplus1](const S* g, Tape<S>& tp) {
          S* gu = tp.grad_buf(iu);
          S* gdr = tp.grad_buf(id);
          S* gb = tp.grad_buf(ib);
          S* gc = tp.grad_buf(ic);
          S* gla = tp.grad_buf(il);
          const S* ud = us->data();
          const S* dd = ds->data();
          const S* bd = bst->data();
          const S* cd = cst->data();
          const S phi_cut = S(1e-3);

          detail::AVec<S> hst((size_t)((chunk_len + 1) * dn));
          detail::AVec<S> abst((size_t)(chunk_len * dn)), cfst((size_t)(chunk_len * dn));
          detail::AVec<S> dlt((size_t)(chunk_len * ch));
          detail::AVec<S> gh((size_t)dn), zrow((size_t)ns), tmp((size_t)ns), da((size_t)ns);
          detail::AVec<S> phi((size_t)ns);

          for (int64_t b = 0; b < bb; ++b) {
            std::fill(gh.begin(), gh.end(), S(0));
            for (int64_t ck = nchunks - 1; ck >= 0; --ck) {
              int64_t t0 = ck * chunk_len;
              int64_t t1 = std::min(len, t0 + chunk_len);
              int64_t cl = t1 - t0;
              std::copy(ckpts->begin() + (ptrdiff_t)((b * nchunks + ck) * dn),
                        ckpts->begin() + (ptrdiff_t)((b * nchunks + ck + 1) * dn), hst.begin());
              for (int64_t i = 0; i < cl; ++i) {
                int64_t t = t0 + i;
                const S* urow = ud + (b * len + t) * ch;
                const S* drow = dd + (b * len + t) * ch;
                auto brow = detail::carr_p(bd + (b * len + t) * ns, ns);
                for (int64_t d = 0; d < ch; ++d) {
                  S delta = softplus1(drow[d]);
                  dlt[(size_t)(i * ch + d)] = delta;
                  auto a_d = detail::carr_p(a_v->data() + d * ns, ns);
                  auto hp = detail::carr_p(hst.data() + i * dn + d * ns, ns);
                  auto hn = detail::arr_p(hst.data() + (i + 1) * dn + d * ns, ns);
                  auto zz = detail::arr(zrow);
                  auto aa = detail::arr_p(abst.data() + i * dn + d * ns, ns);
                  auto cc = detail::arr_p(cfst.data() + i * dn + d * ns, ns);
                  zz = a_d * delta;
                  aa = zz.exp();
                  cc = (zz.abs() < cut).select(delta * (S(1) + zz * S(0.5)), (aa - S(1)) / a_d);
                  hn = aa * hp + cc * (brow * urow[d]);
                }
              }
              for (int64_t i = cl - 1; i >= 0; --i) {
                int64_t t = t0 + i;
                const S* urow = ud + (b * len + t) * ch;
                const S* drow = dd + (b * len + t) * ch;
                auto brow = detail::carr_p(bd + (b * len + t) * ns, ns);
                auto crow = detail::carr_p(cd + (b * len + t) * ns, ns);
                const S* grow = g + (b * len + t) * ch;
                for (int64_t d = 0; d < ch; ++d) {
                  S gy = grow[d];
                  S delta = dlt[(size_t)(i * ch + d)];
                  auto a_d = detail::carr_p(a_v->data() + d * ns, ns);
                  auto hp = detail::carr_p(hst.data() + i * dn + d * ns, ns);
                  auto hn = detail::carr_p(hst.data() + (i + 1) * dn + d * ns, ns);
                  auto aa = detail::carr_p(abst.data() + i * dn + d * ns, ns);
                  auto cc = detail::carr_p(cfst.data() + i * dn + d * ns, ns);
                  auto gh_d = detail::arr_p(gh.data() + d * ns, ns);
                  if (gc) detail::arr_p(gc + (b * len + t) * ns, ns) += gy * hn;
                  gh_d += gy * crow;
                  if (gb) detail::arr_p(gb + (b * len + t) * ns, ns) += gh_d * cc * urow[d];
                  if (gu) gu[(b * len + t) * ch + d] += (gh_d * cc * brow).sum();
                  // dabar = gh * h_prev, dcoef = gh * b * u; d(abar)/d(delta) = a abar,
                  // d(coef)/d(delta) = abar, d(abar)/d(a) = delta abar,
                  // d(coef)/d(a) = delta^2 phi'(z) with phi(z) = (e^z - 1)/z.
                  auto dab = detail::arr(tmp);
                  dab = gh_d * hp;
                  S gdelta = ((dab * a_d + gh_d * (brow * urow[d])) * aa).sum();
                  if (gdr) {
                    S x = drow[d];
                    S sg = S(1) / (S(1) + (S)std::exp(-(double)x));
                    gdr[(b * len + t) * ch + d] += gdelta * sg;
                  }
                  if (gla) {
                    auto zz = detail::arr(zrow);
                    zz = a_d * delta;
                    auto ph = detail::arr(phi);
                    ph = (zz.abs() < phi_cut)
                             .select(S(0.5) + zz / S(3) + zz.square() * S(0.125),
                                     (aa * (zz - S(1)) + S(1)) / zz.square());
                    auto dav = detail::arr(da);
                    dav = dab * delta * aa +
                          gh_d * (brow * urow[d]) * (delta * delta) * ph;
                    detail::arr_p(gla + d * ns, ns) += dav * a_d;
                  }
                  gh_d *= aa;
                }
              }
            }
          }
        });
  }
  return out;
}

template <class S>
Tensor<S> selective_scan(const Tensor<S>& u, const Tensor<S>& delta_raw, const Tensor<S>& b_in,
                         const Tensor<S>& c_in, const Tensor<S>& log_a) {
  require(u.shape().size() == 3,
          "selective_scan: input must be [batch x len x channels], got " + shape_str(u.shape()));
  return selective_scan_chunked(u, delta_raw, b_in, c_in, log_a, std::max<int64_t>(1, u.shape()[1]));
}

}  // namespace mseu
