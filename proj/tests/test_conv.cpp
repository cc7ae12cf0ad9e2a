#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mseu/conv.hpp"
#include "mseu/grad_check.hpp"

using mseu::Conv1dOpts;
using mseu::Conv1dPad;
using mseu::Conv2dOpts;
using mseu::ConvT2dOpts;
using mseu::Tensor;
using T = Tensor<double>;

namespace {

// direct-summation reference, no shared code with the implementation
std::vector<double> conv2d_oracle(const T& x, const T& w, const Conv2dOpts& o, int64_t Ho,
                                  int64_t Wo) {
  int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  int64_t Co = w.dim(0), Cg = w.dim(1), Kh = w.dim(2), Kw = w.dim(3);
  int64_t Cog = Co / o.groups;
  std::vector<double> y((size_t)(Co * Ho * Wo), 0.0);
  for (int64_t co = 0; co < Co; ++co) {
    int64_t gi = co / Cog;
    for (int64_t oh = 0; oh < Ho; ++oh)
      for (int64_t ow = 0; ow < Wo; ++ow) {
        double acc = 0;
        for (int64_t cig = 0; cig < Cg; ++cig)
          for (int64_t kh = 0; kh < Kh; ++kh)
            for (int64_t kw = 0; kw < Kw; ++kw) {
              int64_t ih = oh * o.stride_h - o.pad_h + kh * o.dil_h;
              int64_t iw = ow * o.stride_w - o.pad_w + kw * o.dil_w;
              if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
              acc += x.at({gi * Cg + cig, ih, iw}) * w.at({co, cig, kh, kw});
            }
        y[(size_t)((co * Ho + oh) * Wo + ow)] = acc;
      }
  }
  return y;
}

std::vector<double> conv1d_oracle(const T& x, const T& w, const Conv1dOpts& o, int64_t Lout,
                                  int64_t pad_l) {
  int64_t C = x.dim(0), L = x.dim(1);
  int64_t Co = w.dim(0), Cg = w.dim(1), K = w.dim(2);
  int64_t Cog = Co / o.groups;
  std::vector<double> y((size_t)(Co * Lout), 0.0);
  for (int64_t co = 0; co < Co; ++co) {
    int64_t gi = co / Cog;
    for (int64_t t = 0; t < Lout; ++t) {
      double acc = 0;
      for (int64_t cig = 0; cig < Cg; ++cig)
        for (int64_t k = 0; k < K; ++k) {
          int64_t j = t * o.stride - pad_l + k;
          if (j < 0 || j >= L) continue;
          acc += x.at({gi * Cg + cig, j}) * w.at({co, cig, k});
        }
      y[(size_t)(co * Lout + t)] = acc;
    }
  }
  return y;
}

double dot_all(const T& a, const T& b) {
  double s = 0;
  for (int64_t i = 0; i < a.numel(); ++i) s += a.data()[(size_t)i] * b.data()[(size_t)i];
  return s;
}

}  // namespace

TEST_CASE("causal conv1d pinned values") {
  auto x = T::from({1, 2, 3}, {1, 3});
  auto w2 = T::from({1, 1}, {1, 1, 2});
  auto y = mseu::conv1d(x, w2, Conv1dOpts{});
  CHECK(y.shape() == mseu::Shape{1, 3});
  CHECK(y.data()[0] == 1.0);
  CHECK(y.data()[1] == 3.0);
  CHECK(y.data()[2] == 5.0);

  auto w1 = T::from({1}, {1, 1, 1});
  auto id = mseu::conv1d(x, w1, Conv1dOpts{});
  for (int i = 0; i < 3; ++i) CHECK(id.data()[(size_t)i] == x.data()[(size_t)i]);
}

TEST_CASE("causal conv1d never reads the future") {
  mseu::Rng rng(41);
  auto x = T::randn({2, 12}, rng);
  auto w = T::randn({2, 2, 4}, rng);
  auto y = mseu::conv1d(x, w, Conv1dOpts{});
  int64_t t0 = 5;
  std::vector<double> bumped(x.data().begin(), x.data().end());
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t t = t0 + 1; t < 12; ++t) bumped[(size_t)(c * 12 + t)] += 3.7;
  auto y2 = mseu::conv1d(T::from(std::move(bumped), {2, 12}), w, Conv1dOpts{});
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t t = 0; t <= t0; ++t) CHECK(y.at({c, t}) == y2.at({c, t}));
}

TEST_CASE("conv1d strides, groups and batching match the reference") {
  mseu::Rng rng(43);
  for (auto pad : {Conv1dPad::causal, Conv1dPad::same, Conv1dPad::valid}) {
    for (int64_t stride : {1, 2, 3}) {
      for (int64_t groups : {1, 2}) {
        Conv1dOpts o{stride, pad, groups};
        auto x = T::randn({4, 11}, rng);
        auto w = T::randn({6, 4 / groups, 3}, rng);
        auto y = mseu::conv1d(x, w, o);
        int64_t pad_l = pad == Conv1dPad::causal ? 2 : pad == Conv1dPad::same ? 1 : 0;
        auto ref = conv1d_oracle(x, w, o, y.dim(1), pad_l);
        for (int64_t i = 0; i < y.numel(); ++i)
          CHECK(y.data()[(size_t)i] == doctest::Approx(ref[(size_t)i]).epsilon(1e-12));

        // batched input must equal per-item calls
        auto xb = T::randn({3, 4, 11}, rng);
        auto yb = mseu::conv1d(xb, w, o);
        for (int64_t b = 0; b < 3; ++b) {
          auto xi = mseu::slice(xb, {b, 0, 0}, {1, 4, 11});
          auto yi = mseu::conv1d(mseu::reshape(xi, {4, 11}), w, o);
          for (int64_t c = 0; c < 6; ++c)
            for (int64_t t = 0; t < yi.dim(1); ++t)
              CHECK(yb.at({b, c, t}) == doctest::Approx(yi.at({c, t})).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("conv1d stride-2 output length") {
  auto x = T::zeros({1, 8});
  auto w = T::zeros({1, 1, 3});
  auto y = mseu::conv1d(x, w, Conv1dOpts{2, Conv1dPad::causal, 1});
  CHECK(y.dim(1) == 4);
}

TEST_CASE("conv1d contract errors") {
  auto x = T::zeros({4, 8});
  auto w = T::zeros({6, 2, 3});
  CHECK_THROWS_AS(mseu::conv1d(x, w, Conv1dOpts{0, Conv1dPad::causal, 2}), std::invalid_argument);
  CHECK_THROWS_AS(mseu::conv1d(x, w, Conv1dOpts{1, Conv1dPad::causal, 3}), std::invalid_argument);
  CHECK_THROWS_AS(mseu::conv1d(x, T::zeros({6, 4, 3}), Conv1dOpts{1, Conv1dPad::causal, 2}),
                  std::invalid_argument);
  CHECK_THROWS_AS(mseu::conv1d(T::zeros({1, 2}), T::zeros({1, 1, 4}),
                               Conv1dOpts{1, Conv1dPad::valid, 1}),
                  std::invalid_argument);
}

TEST_CASE("conv2d 1x1 kernel mixes channels only") {
  mseu::Rng rng(47);
  auto x = T::randn({3, 4, 5}, rng);
  std::vector<double> eye(9, 0.0);
  eye[0] = eye[4] = eye[8] = 1.0;
  auto y = mseu::conv2d(x, T::from(std::move(eye), {3, 3, 1, 1}), Conv2dOpts{});
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.data()[(size_t)i] == doctest::Approx(x.data()[(size_t)i]).epsilon(1e-14));
}

TEST_CASE("conv2d shape arithmetic") {
  auto x = T::zeros({2, 8, 8});
  auto w = T::zeros({5, 2, 3, 3});
  Conv2dOpts o;
  o.stride_h = o.stride_w = 2;
  o.pad_h = o.pad_w = 1;
  auto y = mseu::conv2d(x, w, o);
  CHECK(y.shape() == mseu::Shape{5, 4, 4});
}

TEST_CASE("dilated 3x3 kernel has receptive field 5") {
  std::vector<double> img(81, 0.0);
  img[4 * 9 + 4] = 1.0;  // impulse at center
  Conv2dOpts o;
  o.dil_h = o.dil_w = 2;
  o.pad_h = o.pad_w = 2;
  auto y = mseu::conv2d(T::from(std::move(img), {1, 9, 9}), T::ones({1, 1, 3, 3}), o);
  // response only at taps +-2 around the impulse
  for (int64_t r = 0; r < 9; ++r)
    for (int64_t c = 0; c < 9; ++c) {
      bool hit = (std::abs(r - 4) == 2 || r == 4) && (std::abs(c - 4) == 2 || c == 4);
      CHECK(y.at({0, r, c}) == (hit ? 1.0 : 0.0));
    }
}

TEST_CASE("conv2d rejects kernels larger than the padded input") {
  CHECK_THROWS_AS(mseu::conv2d(T::zeros({1, 2, 2}), T::zeros({1, 1, 5, 5}), Conv2dOpts{}),
                  std::invalid_argument);
}

TEST_CASE("conv2d matches the reference across strides, dilation and groups") {
  mseu::Rng rng(53);
  for (int64_t stride : {1, 2}) {
    for (int64_t dil : {1, 2}) {
      for (int64_t groups : {1, 2}) {
        for (int64_t padh : {0, 1, 2}) {
          Conv2dOpts o;
          o.stride_h = stride;
          o.stride_w = groups;  // mix it up a little
          o.dil_h = dil;
          o.pad_h = padh;
          o.pad_w = 1;
          o.groups = groups;
          auto x = T::randn({4, 9, 8}, rng);
          auto w = T::randn({6, 4 / groups, 3, 2}, rng);
          auto b = T::randn({6}, rng);
          auto y = mseu::conv2d(x, w, b, o);
          auto ref = conv2d_oracle(x, w, o, y.dim(1), y.dim(2));
          for (int64_t co = 0; co < 6; ++co)
            for (int64_t i = 0; i < y.dim(1) * y.dim(2); ++i)
              CHECK(y.data()[(size_t)(co * y.dim(1) * y.dim(2) + i)] ==
                    doctest::Approx(ref[(size_t)(co * y.dim(1) * y.dim(2) + i)] +
                                    b.data()[(size_t)co])
                        .epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("conv2d is linear in the input") {
  mseu::Rng rng(59);
  auto x = T::randn({2, 6, 6}, rng);
  auto y = T::randn({2, 6, 6}, rng);
  auto w = T::randn({3, 2, 3, 3}, rng);
  Conv2dOpts o;
  o.pad_h = o.pad_w = 1;
  auto lhs = mseu::conv2d(mseu::add(mseu::scale(x, 2.0), mseu::scale(y, -0.5)), w, o);
  auto rhs = mseu::add(mseu::scale(mseu::conv2d(x, w, o), 2.0),
                       mseu::scale(mseu::conv2d(y, w, o), -0.5));
  for (int64_t i = 0; i < lhs.numel(); ++i)
    CHECK(lhs.data()[(size_t)i] == doctest::Approx(rhs.data()[(size_t)i]).epsilon(1e-12));
}

TEST_CASE("conv_transpose2d doubles a 4x4 map with a 2x2 stride-2 kernel") {
  mseu::Rng rng(61);
  auto x = T::randn({3, 4, 4}, rng);
  auto w = T::randn({3, 2, 2, 2}, rng);
  ConvT2dOpts o;
  o.stride_h = o.stride_w = 2;
  auto y = mseu::conv_transpose2d(x, w, o);
  CHECK(y.shape() == mseu::Shape{2, 8, 8});
  // stride 2 with K=2: each output cell touched by exactly one input cell
  CHECK(y.at({1, 2, 3}) ==
        doctest::Approx(x.at({0, 1, 1}) * w.at({0, 1, 0, 1}) + x.at({1, 1, 1}) * w.at({1, 1, 0, 1}) +
                        x.at({2, 1, 1}) * w.at({2, 1, 0, 1}))
            .epsilon(1e-12));
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  mseu::Rng rng(67);
  for (int64_t stride : {1, 2}) {
    for (int64_t pad : {0, 1}) {
      // pick H so (H + 2p - K) divides the stride evenly
      int64_t K = 3, H = stride == 1 ? 6 : 7;
      Conv2dOpts oc;
      oc.stride_h = oc.stride_w = stride;
      oc.pad_h = oc.pad_w = pad;
      ConvT2dOpts ot;
      ot.stride_h = ot.stride_w = stride;
      ot.pad_h = ot.pad_w = pad;
      auto x = T::randn({2, H, H}, rng);
      auto wc = T::randn({3, 2, K, K}, rng);  // [Co x Ci x K x K] for the forward conv
      auto y = mseu::conv2d(x, wc, oc);
      auto u = T::randn(y.shape(), rng);
      // the same storage acts as [C_in x C_out x K x K] on the transposed side
      auto xt = mseu::conv_transpose2d(u, wc, ot);
      CHECK(xt.shape() == x.shape());
      CHECK(dot_all(y, u) == doctest::Approx(dot_all(x, xt)).epsilon(1e-10));
    }
  }
}

TEST_CASE("deformable conv with zero offsets equals standard conv") {
  mseu::Rng rng(71);
  auto x = T::randn({3, 6, 7}, rng);
  auto w = T::randn({4, 3, 3, 3}, rng);
  auto b = T::randn({4}, rng);
  auto off = T::zeros({18, 6, 7});
  auto yd = mseu::deformable_conv2d(x, w, off, b);
  Conv2dOpts o;
  o.pad_h = o.pad_w = 1;
  auto yc = mseu::conv2d(x, w, b, o);
  CHECK(yd.shape() == yc.shape());
  for (int64_t i = 0; i < yd.numel(); ++i)
    CHECK(yd.data()[(size_t)i] == doctest::Approx(yc.data()[(size_t)i]).epsilon(1e-12));
}

TEST_CASE("deformable conv with an integer column offset samples the shifted image") {
  mseu::Rng rng(73);
  auto x = T::randn({2, 5, 6}, rng);
  auto w = T::randn({3, 2, 3, 3}, rng);
  std::vector<double> off((size_t)(18 * 5 * 6), 0.0);
  for (int64_t tap = 0; tap < 9; ++tap)
    for (int64_t p = 0; p < 30; ++p) off[(size_t)((2 * tap + 1) * 30 + p)] = 1.0;  // +1 column
  auto yd = mseu::deformable_conv2d(x, w, T::from(std::move(off), {18, 5, 6}));

  // shift columns left by one, zero-fill the last
  std::vector<double> sh((size_t)x.numel(), 0.0);
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t r = 0; r < 5; ++r)
      for (int64_t cc = 0; cc < 5; ++cc)
        sh[(size_t)((c * 5 + r) * 6 + cc)] = x.at({c, r, cc + 1});
  Conv2dOpts o;
  o.pad_h = o.pad_w = 1;
  auto yc = mseu::conv2d(T::from(std::move(sh), {2, 5, 6}), w, o);
  // at ow=0 the displaced tap lands back inside the image while the
  // pre-shifted conv sees zero padding, so compare from column 1 on
  for (int64_t co = 0; co < 3; ++co)
    for (int64_t r = 0; r < 5; ++r)
      for (int64_t cc = 1; cc < 6; ++cc)
        CHECK(yd.at({co, r, cc}) == doctest::Approx(yc.at({co, r, cc})).epsilon(1e-12));
}

TEST_CASE("finite differences validate conv gradients") {
  mseu::Rng rng(79);
  {
    auto x = T::randn({2, 9}, rng);
    auto w = T::randn({4, 1, 3}, rng);
    auto b = T::randn({4}, rng);
    auto rep = mseu::grad_check(
        [](const std::vector<T>& in) {
          auto y = mseu::conv1d(in[0], in[1], in[2], Conv1dOpts{1, Conv1dPad::causal, 2});
          return mseu::mean(mseu::mul(y, mseu::silu(y)));
        },
        {x, w, b}, 1e-6, 1e-6);
    INFO(rep.worst);
    CHECK(rep.ok());
  }
  {
    auto x = T::randn({2, 6, 5}, rng);
    auto w = T::randn({3, 2, 3, 2}, rng);
    auto b = T::randn({3}, rng);
    Conv2dOpts o;
    o.stride_h = 2;
    o.pad_h = 1;
    o.dil_w = 1;
    auto rep = mseu::grad_check(
        [o](const std::vector<T>& in) {
          auto y = mseu::conv2d(in[0], in[1], in[2], o);
          return mseu::mean(mseu::mul(y, y));
        },
        {x, w, b}, 1e-6, 1e-6);
    INFO(rep.worst);
    CHECK(rep.ok());
  }
  {
    auto x = T::randn({2, 3, 4}, rng);
    auto w = T::randn({2, 3, 2, 2}, rng);
    auto b = T::randn({3}, rng);
    ConvT2dOpts o;
    o.stride_h = o.stride_w = 2;
    auto rep = mseu::grad_check(
        [o](const std::vector<T>& in) {
          auto y = mseu::conv_transpose2d(in[0], in[1], in[2], o);
          return mseu::mean(mseu::mul(y, y));
        },
        {x, w, b}, 1e-6, 1e-6);
    INFO(rep.worst);
    CHECK(rep.ok());
  }
}

TEST_CASE("finite differences validate deformable conv including offsets") {
  mseu::Rng rng(83);
  auto x = T::randn({2, 5, 5}, rng);
  auto w = T::randn({2, 2, 3, 3}, rng);
  auto b = T::randn({2}, rng);
  // keep offsets clear of integer lattice points where bilinear kinks sit
  auto off = T::uniform({18, 5, 5}, rng, 0.15, 0.35);
  auto rep = mseu::grad_check(
      [](const std::vector<T>& in) {
        auto y = mseu::deformable_conv2d(in[0], in[1], in[3], in[2]);
        return mseu::mean(mseu::mul(y, y));
      },
      {x, w, b, off}, 1e-6, 1e-3);
  INFO(rep.worst);
  CHECK(rep.ok());
  CHECK(rep.max_rel_err < 1e-3);
}
