#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mseu/conv.hpp"
#include "mseu/mamba.hpp"
#include "mseu/stft.hpp"
#include "mseu/tensor.hpp"

namespace mseu {

struct ModelConfig {
  int64_t C1 = 32;             // width of the outer level; inner levels use 2*C1 and 3*C1
  int64_t N = 4;               // two-stage blocks per level
  int64_t state_dim = 16;      // recurrent state per channel
  float compress_exp = 0.3f;   // magnitude compression exponent, f32 so checkpoints echo it exactly
  bool deformable = true;      // deformable refinement inside the patch embed
  int64_t levels = 3;
  bool bimamba_flip_back = true;
  int64_t scan_chunk = 64;

  void validate() const {
    require(levels == 3, "config: only a three level pyramid is supported, got " +
                             std::to_string(levels));
    require(C1 >= 1, "config: C1 must be positive");
    require(N >= 1, "config: N must be positive");
    require(state_dim >= 1, "config: state_dim must be positive");
    require(compress_exp > 0.0 && compress_exp <= 1.0,
            "config: compress_exp must lie in (0, 1]");
    require(scan_chunk >= 1, "config: scan_chunk must be positive");
  }

  std::vector<int64_t> widths() const { return {C1, 2 * C1, 3 * C1}; }
};

template <class S>
struct Conv2dParams {
  Tensor<S> w, b;

  template <class F>
  void visit(const std::string& prefix, F&& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
  }
};

template <class S>
Conv2dParams<S> conv2d_params(int64_t cin, int64_t cout, int64_t kh, int64_t kw, Rng& rng,
                              int64_t groups = 1) {
  double k = 1.0 / std::sqrt((double)(cin / groups * kh * kw));
  Conv2dParams<S> p;
  p.w = Tensor<S>::uniform({cout, cin / groups, kh, kw}, rng, -k, k);
  p.b = Tensor<S>::zeros({cout});
  return p;
}

template <class S>
Conv2dParams<S> convt2d_params(int64_t cin, int64_t cout, int64_t kh, int64_t kw, Rng& rng) {
  double k = 1.0 / std::sqrt((double)(cin * kh * kw));
  Conv2dParams<S> p;
  p.w = Tensor<S>::uniform({cin, cout, kh, kw}, rng, -k, k);
  p.b = Tensor<S>::zeros({cout});
  return p;
}

// Depthwise 3x3, pointwise 1x1, and optionally a deformable 3x3 whose offsets
// come from a small conv on the mixed features.
template <class S>
struct PatchEmbedParams {
  Conv2dParams<S> dw, pw, off, def;
  bool deformable = false;

  static PatchEmbedParams init(int64_t c, bool deform, Rng& rng) {
    PatchEmbedParams p;
    p.deformable = deform;
    p.dw = conv2d_params<S>(c, c, 3, 3, rng, c);
    p.pw = conv2d_params<S>(c, c, 1, 1, rng);
    if (deform) {
      p.off = conv2d_params<S>(c, 18, 3, 3, rng);
      p.off.w = scale(p.off.w, S(0.1));  // start near the regular grid
      p.def = conv2d_params<S>(c, c, 3, 3, rng);
    }
    return p;
  }

  template <class F>
  void visit(const std::string& prefix, F&& fn) {
    dw.visit(prefix + ".dw", fn);
    pw.visit(prefix + ".pw", fn);
    if (deformable) {
      off.visit(prefix + ".off", fn);
      def.visit(prefix + ".def", fn);
    }
  }
};

template <class S>
struct LevelParams {
  PatchEmbedParams<S> embed;
  std::vector<TsMambaParams<S>> blocks;

  static LevelParams init(int64_t c, int64_t n, int64_t state, bool deform, Rng& rng) {
    LevelParams p;
    p.embed = PatchEmbedParams<S>::init(c, deform, rng);
    for (int64_t i = 0; i < n; ++i) p.blocks.push_back(TsMambaParams<S>::init(c, state, rng));
    return p;
  }

  template <class F>
  void visit(const std::string& prefix, F&& fn) {
    embed.visit(prefix + ".embed", fn);
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit(prefix + ".block" + std::to_string(i), fn);
  }
};

template <class S>
struct ModelParams {
  ModelConfig cfg;
  Conv2dParams<S> in_conv;
  std::vector<Conv2dParams<S>> dense;  // four dilated layers
  Conv2dParams<S> halver;
  LevelParams<S> enc1, enc2, mid, dec2, dec1;
  Conv2dParams<S> down1, down2, up1, up2, expand;
  Conv2dParams<S> mag_head, phase_p, phase_q;
  Tensor<S> alpha;  // [kBins] per-bin mask sharpness

  static ModelParams init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams p;
    p.cfg = cfg;
    auto w = cfg.widths();
    p.in_conv = conv2d_params<S>(2, w[0], 3, 3, rng);
    for (int i = 0; i < 4; ++i)
      p.dense.push_back(conv2d_params<S>(w[0] * (i + 1), w[0], 3, 3, rng));
    p.halver = conv2d_params<S>(w[0], w[0], 3, 2, rng);
    p.enc1 = LevelParams<S>::init(w[0], cfg.N, cfg.state_dim, cfg.deformable, rng);
    p.down1 = conv2d_params<S>(w[0], w[1], 2, 2, rng);
    p.enc2 = LevelParams<S>::init(w[1], cfg.N, cfg.state_dim, cfg.deformable, rng);
    p.down2 = conv2d_params<S>(w[1], w[2], 2, 2, rng);
    p.mid = LevelParams<S>::init(w[2], cfg.N, cfg.state_dim, cfg.deformable, rng);
    p.up1 = convt2d_params<S>(w[2], w[1], 2, 2, rng);
    p.dec2 = LevelParams<S>::init(w[1], cfg.N, cfg.state_dim, cfg.deformable, rng);
    p.up2 = convt2d_params<S>(w[1], w[0], 2, 2, rng);
    p.dec1 = LevelParams<S>::init(w[0], cfg.N, cfg.state_dim, cfg.deformable, rng);
    p.expand = convt2d_params<S>(w[0], w[0], 1, 2, rng);
    p.mag_head = conv2d_params<S>(w[0], 1, 3, 3, rng);
    p.phase_p = conv2d_params<S>(w[0], 1, 3, 3, rng);
    p.phase_q = conv2d_params<S>(w[0], 1, 3, 3, rng);
    p.alpha = Tensor<S>::ones({kBins});
    return p;
  }

  template <class F>
  void visit(F&& fn) {
    in_conv.visit("encoder.in", fn);
    for (size_t i = 0; i < dense.size(); ++i)
      dense[i].visit("encoder.dense" + std::to_string(i), fn);
    halver.visit("encoder.halver", fn);
    enc1.visit("enc1", fn);
    down1.visit("down1", fn);
    enc2.visit("enc2", fn);
    down2.visit("down2", fn);
    mid.visit("mid", fn);
    up1.visit("up1", fn);
    dec2.visit("dec2", fn);
    up2.visit("up2", fn);
    dec1.visit("dec1", fn);
    expand.visit("decoder.expand", fn);
    mag_head.visit("head.mag", fn);
    phase_p.visit("head.phase_p", fn);
    phase_q.visit("head.phase_q", fn);
    fn("head.alpha", alpha);
  }

  int64_t param_count() {
    int64_t n = 0;
    visit([&](const std::string&, Tensor<S>& t) { n += t.numel(); });
    return n;
  }

  // tensor count grouped by the part of the network the name starts with
  std::map<std::string, int64_t> param_count_by_group() {
    std::map<std::string, int64_t> out;
    visit([&](const std::string& name, Tensor<S>& t) {
      out[name.substr(0, name.find('.'))] += t.numel();
    });
    return out;
  }
};

namespace detail {

template <class S>
Tensor<S> conv_same(const Tensor<S>& x, const Conv2dParams<S>& p, int64_t dil_h = 1,
                    int64_t groups = 1) {
  Conv2dOpts o;
  o.pad_h = dil_h * (p.w.dim(2) - 1) / 2;
  o.pad_w = (p.w.dim(3) - 1) / 2;
  o.dil_h = dil_h;
  o.groups = groups;
  return conv2d(x, p.w, p.b, o);
}

template <class S>
Tensor<S> run_level(const Tensor<S>& x_in, const LevelParams<S>& lvl, const ModelConfig& cfg) {
  auto x = conv_same(x_in, lvl.embed.dw, 1, x_in.dim(0));
  x = silu(conv_same(x, lvl.embed.pw));
  if (lvl.embed.deformable) {
    auto offsets = conv_same(x, lvl.embed.off);
    x = silu(deformable_conv2d(x, lvl.embed.def.w, offsets, lvl.embed.def.b));
  }
  auto seq = permute(x, {1, 2, 0});  // [T x F x C]
  for (const auto& blk : lvl.blocks)
    seq = ts_mamba(seq, blk, cfg.bimamba_flip_back, cfg.scan_chunk);
  return permute(seq, {2, 0, 1});
}

template <class S>
Tensor<S> down_conv(const Tensor<S>& x, const Conv2dParams<S>& p) {
  Conv2dOpts o;
  o.stride_h = 2;
  o.stride_w = 2;
  return silu(conv2d(x, p.w, p.b, o));
}

template <class S>
Tensor<S> up_conv(const Tensor<S>& x, const Conv2dParams<S>& p, int64_t sh, int64_t sw) {
  ConvT2dOpts o;
  o.stride_h = sh;
  o.stride_w = sw;
  return silu(conv_transpose2d(x, p.w, p.b, o));
}

}  // namespace detail

template <class S>
struct SpecWave {
  Tensor<S> mag_c;  // enhanced magnitude, still compressed, [T x kBins]
  Tensor<S> phase;  // enhanced phase, [T x kBins]
  Tensor<S> wave;   // synthesized waveform, [out_len]
};

// Full enhancement pass from a noisy compressed-magnitude/phase pair. The
// inputs are treated as constants; gradients flow to the parameters.
template <class S>
SpecWave<S> model_apply(const Tensor<S>& noisy_mag_c, const Tensor<S>& noisy_phase,
                        const ModelParams<S>& p, int64_t out_len) {
  const auto& cfg = p.cfg;
  cfg.validate();
  require(noisy_mag_c.rank() == 2 && noisy_mag_c.dim(1) == kBins,
          "model_apply: expected [T x " + std::to_string(kBins) + "] spectra, got " +
              shape_str(noisy_mag_c.shape()));
  require(noisy_mag_c.shape() == noisy_phase.shape(),
          "model_apply: magnitude " + shape_str(noisy_mag_c.shape()) + " vs phase " +
              shape_str(noisy_phase.shape()));
  int64_t t_frames = noisy_mag_c.dim(0);
  require(t_frames >= 5, "model_apply: need at least 5 frames, got " + std::to_string(t_frames));

  auto planes = concat(std::vector<Tensor<S>>{reshape(noisy_mag_c, {1, t_frames, kBins}),
                                              reshape(noisy_phase, {1, t_frames, kBins})},
                       0);
  auto x = silu(detail::conv_same(planes, p.in_conv));
  std::vector<Tensor<S>> grown = {x};
  for (int i = 0; i < 4; ++i) {
    auto cin = grown.size() == 1 ? grown[0] : concat(grown, 0);
    x = silu(detail::conv_same(cin, p.dense[(size_t)i], (int64_t)1 << i));
    grown.push_back(x);
  }
  {
    Conv2dOpts o;
    o.stride_w = 2;
    o.pad_h = 1;
    x = silu(conv2d(x, p.halver.w, p.halver.b, o));
  }

  int64_t t_pad = (4 - t_frames % 4) % 4;
  if (t_pad > 0) x = pad(x, {0, 0, 0}, {0, t_pad, 0}, PadKind::reflect);

  auto e1 = detail::run_level(x, p.enc1, cfg);
  auto e2 = detail::run_level(detail::down_conv(e1, p.down1), p.enc2, cfg);
  auto m = detail::run_level(detail::down_conv(e2, p.down2), p.mid, cfg);
  auto d2 = detail::run_level(add(detail::up_conv(m, p.up1, 2, 2), e2), p.dec2, cfg);
  auto d1 = detail::run_level(add(detail::up_conv(d2, p.up2, 2, 2), e1), p.dec1, cfg);
  auto full = detail::up_conv(d1, p.expand, 1, 2);
  if (t_pad > 0) full = slice(full, {0, 0, 0}, {full.dim(0), t_frames, full.dim(2)});

  auto mask_logit = reshape(detail::conv_same(full, p.mag_head), {t_frames, kBins});
  auto mask = scale(sigmoid(mul_channels(mask_logit, p.alpha)), S(2));
  SpecWave<S> out;
  out.mag_c = mul(mask, noisy_mag_c);
  auto pp = reshape(detail::conv_same(full, p.phase_p), {t_frames, kBins});
  auto qq = reshape(detail::conv_same(full, p.phase_q), {t_frames, kBins});
  out.phase = atan2(pp, qq);
  out.wave = istft_wave(pow(out.mag_c, 1.0 / cfg.compress_exp), out.phase, out_len);
  return out;
}

template <class S>
SpecWave<S> model_apply(const AudioBuffer<S>& noisy, const ModelParams<S>& p) {
  auto spec = stft(noisy);
  auto mag_c = pow(spec.mag, p.cfg.compress_exp);
  return model_apply(mag_c, spec.phase, p, (int64_t)noisy.samples.size());
}

template <class S>
AudioBuffer<S> enhance(const AudioBuffer<S>& noisy, const ModelParams<S>& p) {
  auto sw = model_apply(noisy, p);
  AudioBuffer<S> out;
  out.sample_rate = noisy.sample_rate;
  out.samples.assign(sw.wave.data().begin(), sw.wave.data().end());
  return out;
}

// Multiply-accumulate based estimate, two flops per MAC. The scan term
// charges ten flops per (step, channel, state) pair for the exponential,
// blend, and output contraction.
inline int64_t estimate_flops(const ModelConfig& cfg, int64_t t_frames) {
  cfg.validate();
  auto w = cfg.widths();
  int64_t t = t_frames + (4 - t_frames % 4) % 4;
  int64_t f0 = kBins;
  double total = 0;

  auto conv_fl = [](double cin, double cout, double kh, double kw, double h, double ww,
                    double groups = 1) { return 2.0 * cin * cout * kh * kw * h * ww / groups; };

  total += conv_fl(2, (double)w[0], 3, 3, (double)t, (double)f0);
  for (int i = 0; i < 4; ++i)
    total += conv_fl((double)(w[0] * (i + 1)), (double)w[0], 3, 3, (double)t, (double)f0);
  total += conv_fl((double)w[0], (double)w[0], 3, 2, (double)t, (double)f0 / 2);

  struct Lvl {
    double c, h, wd;
  };
  std::vector<Lvl> lv = {{(double)w[0], (double)t, 128.0},
                         {(double)w[1], (double)t / 2, 64.0},
                         {(double)w[2], (double)t / 4, 32.0},
                         {(double)w[1], (double)t / 2, 64.0},
                         {(double)w[0], (double)t, 128.0}};
  for (const auto& l : lv) {
    double hw = l.h * l.wd;
    total += conv_fl(l.c, l.c, 3, 3, l.h, l.wd, l.c);  // depthwise
    total += conv_fl(l.c, l.c, 1, 1, l.h, l.wd);
    if (cfg.deformable) {
      total += conv_fl(l.c, 18, 3, 3, l.h, l.wd);
      total += conv_fl(l.c, l.c, 3, 3, l.h, l.wd) * 2.0;  // sampling + matmul
    }
    // one two-stage unit: two directional blocks per stage, fuse included
    double dim = l.c, e = 2 * dim, ns = (double)cfg.state_dim;
    double steps = hw;  // every (t, f) cell advances one scan step per stage
    double block = 2.0 * dim * e * hw     // in proj
                   + 2.0 * dim * e * hw   // gate
                   + 2.0 * e * 4 * hw     // depthwise conv
                   + 2.0 * e * e * hw     // delta proj
                   + 2.0 * e * ns * hw * 2.0  // b and c proj
                   + 10.0 * e * ns * steps    // scan
                   + 2.0 * 2 * e * dim * hw;  // out proj
    double stage = 2.0 * block + 2.0 * 2 * dim * dim * hw;  // two directions + fuse
    total += (double)cfg.N * 2.0 * stage;                   // time and freq stages
  }

  total += conv_fl((double)w[0], (double)w[1], 2, 2, (double)t / 2, 64);       // down1
  total += conv_fl((double)w[1], (double)w[2], 2, 2, (double)t / 4, 32);       // down2
  total += conv_fl((double)w[2], (double)w[1], 2, 2, (double)t / 2, 64);       // up1
  total += conv_fl((double)w[1], (double)w[0], 2, 2, (double)t, 128);          // up2
  total += conv_fl((double)w[0], (double)w[0], 1, 2, (double)t, 256);          // expand
  total += 3.0 * conv_fl((double)w[0], 1, 3, 3, (double)t, 256);               // heads
  return (int64_t)total;
}

}  // namespace mseu
