#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mseu/conv.hpp"
#include "mseu/ssm.hpp"
#include "mseu/tensor.hpp"

namespace mseu {

// y = x / sqrt(mean(x^2) + eps) * gamma over the trailing axis.
template <class S>
Tensor<S> rmsnorm(const Tensor<S>& x, const Tensor<S>& gamma, S eps = S(1e-6)) {
  require(x.rank() >= 1 && gamma.rank() == 1 && x.dim(x.rank() - 1) == gamma.dim(0),
          "rmsnorm: " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()));
  int64_t c = gamma.dim(0);
  int64_t rows = x.numel() / c;
  detail::AVec<S> v((size_t)x.numel());
  auto rinv = std::make_shared<detail::AVec<S>>((size_t)rows);
  {
    const S* xd = x.data().data();
    const S* gd = gamma.data().data();
    for (int64_t r = 0; r < rows; ++r) {
      auto xr = detail::carr_p(xd + r * c, c);
      S inv = S(1) / std::sqrt(xr.square().mean() + eps);
      (*rinv)[(size_t)r] = inv;
      detail::arr_p(v.data() + r * c, c) = xr * inv * detail::carr_p(gd, c);
    }
  }
  auto out = Tensor<S>::from_buf(std::move(v), x.shape());
  if (auto r = detail::begin_op<S>(x, gamma)) {
    r.tape->record(out, [ix = r.in[0], ig = r.in[1], xs = x.storage(), gs = gamma.storage(),
                         rinv, rows, c](const S* g, Tape<S>& tp) {
      S* gx = tp.grad_buf(ix);
      S* gg = tp.grad_buf(ig);
      const S* xd = xs->data();
      const S* gd = gs->data();
      for (int64_t r = 0; r < rows; ++r) {
        auto xr = detail::carr_p(xd + r * c, c);
        auto gr = detail::carr_p(g + r * c, c);
        auto gv = detail::carr_p(gd, c);
        S inv = (*rinv)[(size_t)r];
        if (gx) {
          S s = (gr * gv * xr).sum();
          detail::arr_p(gx + r * c, c) += inv * gv * gr - (inv * inv * inv / S(c)) * s * xr;
        }
        if (gg) detail::arr_p(gg, c) += gr * xr * inv;
      }
    });
  }
  return out;
}

// One direction of the selective block: project up, causal depthwise conv,
// SiLU, selective scan with a per-channel skip, gated side branch, project
// down from the concatenated branches. The inner width is twice the model
// width.
template <class S>
struct MambaBlockParams {
  Tensor<S> in_w, in_b;        // [D x 2D], [2D]
  Tensor<S> gate_w, gate_b;    // [D x 2D], [2D]
  Tensor<S> conv_w, conv_b;    // [2D x 1 x 4], [2D]
  Tensor<S> delta_w, delta_b;  // [2D x 2D], [2D]
  Tensor<S> b_w, b_b;          // [2D x N], [N]
  Tensor<S> c_w, c_b;          // [2D x N], [N]
  Tensor<S> log_a;             // [2D x N]
  Tensor<S> skip_d;            // [2D]
  Tensor<S> out_w, out_b;      // [4D x D], [D]

  static MambaBlockParams init(int64_t dim, int64_t state, Rng& rng) {
    require(dim >= 1 && state >= 1, "mamba block: dim and state must be positive");
    MambaBlockParams p;
    int64_t e = 2 * dim;
    auto lin = [&rng](int64_t fi, int64_t fo) {
      double k = 1.0 / std::sqrt((double)fi);
      return Tensor<S>::uniform({fi, fo}, rng, -k, k);
    };
    p.in_w = lin(dim, e);
    p.in_b = Tensor<S>::zeros({e});
    p.gate_w = lin(dim, e);
    p.gate_b = Tensor<S>::zeros({e});
    p.conv_w = Tensor<S>::uniform({e, 1, 4}, rng, -0.5, 0.5);
    p.conv_b = Tensor<S>::zeros({e});
    p.delta_w = lin(e, e);
    p.delta_b = Tensor<S>::zeros({e});
    {
      // softplus(delta_b) starts inside [1e-3, 1e-1]
      std::vector<S> db((size_t)e);
      for (auto& v : db) {
        double d = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
        v = (S)std::log(std::expm1(d));
      }
      p.delta_b = Tensor<S>::from(std::move(db), {e});
    }
    p.b_w = lin(e, state);
    p.b_b = Tensor<S>::zeros({state});
    p.c_w = lin(e, state);
    p.c_b = Tensor<S>::zeros({state});
    {
      // poles start at -1, -2, ..., -state per channel
      std::vector<S> la((size_t)(e * state));
      for (int64_t d = 0; d < e; ++d)
        for (int64_t n = 0; n < state; ++n)
          la[(size_t)(d * state + n)] = (S)std::log((double)(n + 1));
      p.log_a = Tensor<S>::from(std::move(la), {e, state});
    }
    p.skip_d = Tensor<S>::ones({e});
    p.out_w = lin(2 * e, dim);
    p.out_b = Tensor<S>::zeros({dim});
    return p;
  }

  template <class F>
  void visit(const std::string& prefix, F&& fn) {
    fn(prefix + ".in_w", in_w);
    fn(prefix + ".in_b", in_b);
    fn(prefix + ".gate_w", gate_w);
    fn(prefix + ".gate_b", gate_b);
    fn(prefix + ".conv_w", conv_w);
    fn(prefix + ".conv_b", conv_b);
    fn(prefix + ".delta_w", delta_w);
    fn(prefix + ".delta_b", delta_b);
    fn(prefix + ".b_w", b_w);
    fn(prefix + ".b_b", b_b);
    fn(prefix + ".c_w", c_w);
    fn(prefix + ".c_b", c_b);
    fn(prefix + ".log_a", log_a);
    fn(prefix + ".skip_d", skip_d);
    fn(prefix + ".out_w", out_w);
    fn(prefix + ".out_b", out_b);
  }
};

// x: [batch x len x dim] -> [batch x len x dim]
template <class S>
Tensor<S> mamba_block(const Tensor<S>& x, const MambaBlockParams<S>& p, int64_t scan_chunk = 64) {
  require(x.rank() == 3, "mamba_block: input must be [batch x len x dim], got " +
                             shape_str(x.shape()));
  int64_t bb = x.dim(0), len = x.dim(1), dim = x.dim(2);
  require(p.in_w.rank() == 2 && p.in_w.dim(0) == dim,
          "mamba_block: params built for dim " + std::to_string(p.in_w.dim(0)) +
              ", input has dim " + std::to_string(dim));
  int64_t e = 2 * dim;

  auto x2 = reshape(x, {bb * len, dim});
  auto xz = add_bias(matmul(x2, p.in_w), p.in_b);
  auto conv_in = permute(reshape(xz, {bb, len, e}), {0, 2, 1});
  Conv1dOpts copt;
  copt.pad = Conv1dPad::causal;
  copt.groups = e;
  auto u = silu(permute(conv1d(conv_in, p.conv_w, p.conv_b, copt), {0, 2, 1}));

  auto u2 = reshape(u, {bb * len, e});
  auto draw = reshape(add_bias(matmul(u2, p.delta_w), p.delta_b), {bb, len, e});
  auto bp = reshape(add_bias(matmul(u2, p.b_w), p.b_b), {bb, len, p.b_w.dim(1)});
  auto cp = reshape(add_bias(matmul(u2, p.c_w), p.c_b), {bb, len, p.c_w.dim(1)});
  int64_t chunk = scan_chunk > 0 ? std::min(scan_chunk, len) : len;
  auto y = add(selective_scan_chunked(u, draw, bp, cp, p.log_a, chunk), mul_channels(u, p.skip_d));

  auto z = silu(add_bias(matmul(x2, p.gate_w), p.gate_b));
  auto both = concat(std::vector<Tensor<S>>{reshape(y, {bb * len, e}), z}, 1);
  return reshape(add_bias(matmul(both, p.out_w), p.out_b), {bb, len, dim});
}

// Runs the block forward and time-reversed with separate weights, each
// followed by a norm and residual, then fuses the two streams. flip_back
// controls whether the reversed stream is restored to input order before the
// residual; keeping it reversed mirrors a published ablation.
template <class S>
struct BiMambaParams {
  MambaBlockParams<S> fwd, bwd;
  Tensor<S> fwd_gamma, bwd_gamma;  // [D]
  Tensor<S> fuse_w, fuse_b;        // [2D x D], [D]

  static BiMambaParams init(int64_t dim, int64_t state, Rng& rng) {
    BiMambaParams p;
    p.fwd = MambaBlockParams<S>::init(dim, state, rng);
    p.bwd = MambaBlockParams<S>::init(dim, state, rng);
    p.fwd_gamma = Tensor<S>::ones({dim});
    p.bwd_gamma = Tensor<S>::ones({dim});
    double k = 1.0 / std::sqrt((double)(2 * dim));
    p.fuse_w = Tensor<S>::uniform({2 * dim, dim}, rng, -k, k);
    p.fuse_b = Tensor<S>::zeros({dim});
    return p;
  }

  template <class F>
  void visit(const std::string& prefix, F&& fn) {
    fwd.visit(prefix + ".fwd", fn);
    bwd.visit(prefix + ".bwd", fn);
    fn(prefix + ".fwd_gamma", fwd_gamma);
    fn(prefix + ".bwd_gamma", bwd_gamma);
    fn(prefix + ".fuse_w", fuse_w);
    fn(prefix + ".fuse_b", fuse_b);
  }
};

template <class S>
Tensor<S> bimamba(const Tensor<S>& x, const BiMambaParams<S>& p, bool flip_back = true,
                  int64_t scan_chunk = 64) {
  require(x.rank() == 3, "bimamba: input must be [batch x len x dim], got " + shape_str(x.shape()));
  int64_t bb = x.dim(0), len = x.dim(1), dim = x.dim(2);
  auto xf = add(rmsnorm(mamba_block(x, p.fwd, scan_chunk), p.fwd_gamma), x);
  auto rev = rmsnorm(mamba_block(flip(x, 1), p.bwd, scan_chunk), p.bwd_gamma);
  auto xb = add(flip_back ? flip(rev, 1) : rev, x);
  auto both = concat(std::vector<Tensor<S>>{reshape(xf, {bb * len, dim}), reshape(xb, {bb * len, dim})}, 1);
  return reshape(add_bias(matmul(both, p.fuse_w), p.fuse_b), {bb, len, dim});
}

// Two bidirectional stages over a [time x freq x dim] map: first along time
// with frequencies batched, then along frequency with frames batched.
template <class S>
struct TsMambaParams {
  BiMambaParams<S> time, freq;

  static TsMambaParams init(int64_t dim, int64_t state, Rng& rng) {
    TsMambaParams p;
    p.time = BiMambaParams<S>::init(dim, state, rng);
    p.freq = BiMambaParams<S>::init(dim, state, rng);
    return p;
  }

  template <class F>
  void visit(const std::string& prefix, F&& fn) {
    time.visit(prefix + ".time", fn);
    freq.visit(prefix + ".freq", fn);
  }
};

template <class S>
Tensor<S> ts_mamba(const Tensor<S>& x, const TsMambaParams<S>& p, bool flip_back = true,
                   int64_t scan_chunk = 64) {
  require(x.rank() == 3, "ts_mamba: input must be [time x freq x dim], got " + shape_str(x.shape()));
  auto yt = permute(bimamba(permute(x, {1, 0, 2}), p.time, flip_back, scan_chunk), {1, 0, 2});
  return bimamba(yt, p.freq, flip_back, scan_chunk);
}

}  // namespace mseu
