#pragma once

#include <cmath>
#include <vector>

#include "mseu/audio.hpp"
#include "mseu/tensor.hpp"

namespace mseu {

inline constexpr int64_t kWinLen = 510;
inline constexpr int64_t kHop = 120;
inline constexpr int64_t kBins = 256;
inline constexpr int64_t kCenterPad = kWinLen / 2;

template <class S>
struct SpectroPair {
  Tensor<S> mag;    // [T x kBins], non-negative
  Tensor<S> phase;  // [T x kBins], in (-pi, pi]
};

namespace detail {

template <class S>
const std::vector<S>& hann_window() {
  static const std::vector<S> w = [] {
    std::vector<S> v((size_t)kWinLen);
    for (int64_t n = 0; n < kWinLen; ++n)
      v[(size_t)n] = (S)(0.5 - 0.5 * std::cos(2.0 * M_PI * (double)n / (double)kWinLen));
    return v;
  }();
  return w;
}

// Analysis maps a windowed frame f[510] to Re[k] = sum_n f_n cos(2pi nk/N),
// Im[k] = -sum_n f_n sin(2pi nk/N). Synthesis folds the bin weights (2 for
// interior bins of the one-sided spectrum), 1/N, and a second window pass into
// the matrices, so overlap-add only needs the squared-window normalizer.
template <class S>
struct DftMats {
  Tensor<S> acos_m, asin_m;  // [kWinLen x kBins]
  Tensor<S> scos_m, ssin_m;  // [kBins x kWinLen]
};

template <class S>
const DftMats<S>& dft_mats() {
  static const DftMats<S> m = [] {
    DftMats<S> d;
    const auto& w = hann_window<S>();
    detail::AVec<S> ac((size_t)(kWinLen * kBins)), as((size_t)(kWinLen * kBins));
    detail::AVec<S> sc((size_t)(kBins * kWinLen)), ss((size_t)(kBins * kWinLen));
    for (int64_t n = 0; n < kWinLen; ++n) {
      for (int64_t k = 0; k < kBins; ++k) {
        double ang = 2.0 * M_PI * (double)(n * k) / (double)kWinLen;
        ac[(size_t)(n * kBins + k)] = (S)std::cos(ang);
        as[(size_t)(n * kBins + k)] = (S)(-std::sin(ang));
        double bw = (k == 0 || k == kBins - 1) ? 1.0 : 2.0;
        double base = bw / (double)kWinLen * (double)w[(size_t)n];
        sc[(size_t)(k * kWinLen + n)] = (S)(base * std::cos(ang));
        ss[(size_t)(k * kWinLen + n)] = (S)(-base * std::sin(ang));
      }
    }
    d.acos_m = Tensor<S>::from_buf(std::move(ac), {kWinLen, kBins});
    d.asin_m = Tensor<S>::from_buf(std::move(as), {kWinLen, kBins});
    d.scos_m = Tensor<S>::from_buf(std::move(sc), {kBins, kWinLen});
    d.ssin_m = Tensor<S>::from_buf(std::move(ss), {kBins, kWinLen});
    return d;
  }();
  return m;
}

inline int64_t frame_count(int64_t len) { return len / kHop + 1; }

// Squared-window overlap profile on the padded axis for T frames.
template <class S>
detail::AVec<S> window_power(int64_t t_frames) {
  const auto& w = hann_window<S>();
  detail::AVec<S> acc((size_t)((t_frames - 1) * kHop + kWinLen), S(0));
  for (int64_t t = 0; t < t_frames; ++t)
    for (int64_t n = 0; n < kWinLen; ++n)
      acc[(size_t)(t * kHop + n)] += w[(size_t)n] * w[(size_t)n];
  return acc;
}

}  // namespace detail

template <class S>
SpectroPair<S> stft(const AudioBuffer<S>& buf) {
  int64_t len = (int64_t)buf.samples.size();
  require(len >= kWinLen,
          "stft: input of " + std::to_string(len) + " samples is shorter than one window");
  int64_t t_frames = detail::frame_count(len);

  detail::AVec<S> padded((size_t)(len + 2 * kCenterPad));
  for (int64_t i = 0; i < kCenterPad; ++i) padded[(size_t)i] = buf.samples[(size_t)(kCenterPad - i)];
  for (int64_t i = 0; i < len; ++i) padded[(size_t)(kCenterPad + i)] = buf.samples[(size_t)i];
  for (int64_t i = 0; i < kCenterPad; ++i)
    padded[(size_t)(kCenterPad + len + i)] = buf.samples[(size_t)(len - 2 - i)];

  const auto& w = detail::hann_window<S>();
  detail::AVec<S> frames((size_t)(t_frames * kWinLen));
  for (int64_t t = 0; t < t_frames; ++t)
    for (int64_t n = 0; n < kWinLen; ++n)
      frames[(size_t)(t * kWinLen + n)] = padded[(size_t)(t * kHop + n)] * w[(size_t)n];

  const auto& dm = detail::dft_mats<S>();
  detail::CMatMap<S> fm(frames.data(), t_frames, kWinLen);
  detail::CMatMap<S> am(dm.acos_m.data().data(), kWinLen, kBins);
  detail::CMatMap<S> bm(dm.asin_m.data().data(), kWinLen, kBins);
  detail::Mat<S> re = fm * am;
  detail::Mat<S> im = fm * bm;

  detail::AVec<S> mag((size_t)(t_frames * kBins)), phase((size_t)(t_frames * kBins));
  for (int64_t t = 0; t < t_frames; ++t) {
    for (int64_t k = 0; k < kBins; ++k) {
      S r = re(t, k), i = im(t, k);
      mag[(size_t)(t * kBins + k)] = std::sqrt(r * r + i * i);
      S ph = std::atan2(i, r);
      if (ph <= (S)(-M_PI)) ph += (S)(2.0 * M_PI);
      phase[(size_t)(t * kBins + k)] = ph;
    }
  }
  SpectroPair<S> out;
  out.mag = Tensor<S>::from_buf(std::move(mag), {t_frames, kBins});
  out.phase = Tensor<S>::from_buf(std::move(phase), {t_frames, kBins});
  return out;
}

// Overlap-add of synthesis frames [T x kWinLen], cropped to the centered
// region and divided by the squared-window profile.
template <class S>
Tensor<S> overlap_add(const Tensor<S>& frames, int64_t out_len) {
  require(frames.shape().size() == 2 && frames.shape()[1] == kWinLen,
          "overlap_add: frames must be [T x " + std::to_string(kWinLen) + "], got " +
              shape_str(frames.shape()));
  require(out_len > 0, "overlap_add: output length must be positive");
  int64_t t_frames = frames.shape()[0];
  int64_t full = (t_frames - 1) * kHop + kWinLen;
  require(full >= kCenterPad + out_len,
          "overlap_add: " + std::to_string(t_frames) + " frames cover " + std::to_string(full) +
              " samples, too short for output length " + std::to_string(out_len));

  auto wp = detail::window_power<S>(t_frames);
  auto inv = std::make_shared<detail::AVec<S>>((size_t)out_len);
  for (int64_t i = 0; i < out_len; ++i) {
    S p = wp[(size_t)(kCenterPad + i)];
    if (!(p > (S)1e-8))
      throw std::runtime_error("overlap_add: window power underflow at sample " + std::to_string(i));
    (*inv)[(size_t)i] = S(1) / p;
  }

  detail::AVec<S> acc((size_t)full, S(0));
  {
    const S* fd = frames.data().data();
    for (int64_t t = 0; t < t_frames; ++t)
      detail::arr_p(acc.data() + t * kHop, kWinLen) += detail::carr_p(fd + t * kWinLen, kWinLen);
  }
  detail::AVec<S> y((size_t)out_len);
  for (int64_t i = 0; i < out_len; ++i) y[(size_t)i] = acc[(size_t)(kCenterPad + i)] * (*inv)[(size_t)i];
  auto out = Tensor<S>::from_buf(std::move(y), {out_len});

  if (auto r = detail::begin_op<S>(frames)) {
    r.tape->record(out, [ifr = r.in[0], t_frames, out_len, inv](const S* g, Tape<S>& tp) {
      S* gf = tp.grad_buf(ifr);
      if (!gf) return;
      for (int64_t t = 0; t < t_frames; ++t) {
        int64_t base = t * kHop - kCenterPad;  // frame tap n lands on output sample base + n
        int64_t n0 = std::max<int64_t>(0, -base);
        int64_t n1 = std::min<int64_t>(kWinLen, out_len - base);
        for (int64_t n = n0; n < n1; ++n)
          gf[t * kWinLen + n] += g[base + n] * (*inv)[(size_t)(base + n)];
      }
    });
  }
  return out;
}

// Differentiable synthesis: magnitude/phase -> waveform tensor.
template <class S>
Tensor<S> istft_wave(const Tensor<S>& mag, const Tensor<S>& phase, int64_t out_len) {
  require(mag.shape() == phase.shape(),
          "istft: magnitude " + shape_str(mag.shape()) + " vs phase " + shape_str(phase.shape()));
  require(mag.shape().size() == 2 && mag.shape()[1] == kBins,
          "istft: expected [T x " + std::to_string(kBins) + "] spectra, got " +
              shape_str(mag.shape()));
  const auto& dm = detail::dft_mats<S>();
  auto re = mul(mag, cos(phase));
  auto im = mul(mag, sin(phase));
  auto frames = add(matmul(re, dm.scos_m), matmul(im, dm.ssin_m));
  return overlap_add(frames, out_len);
}

template <class S>
AudioBuffer<S> istft(const SpectroPair<S>& spec, int64_t out_len) {
  auto y = istft_wave(spec.mag, spec.phase, out_len);
  AudioBuffer<S> out;
  out.sample_rate = 16000;
  out.samples.assign(y.data().begin(), y.data().end());
  return out;
}

}  // namespace mseu
