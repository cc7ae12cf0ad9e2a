#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "mseu/checkpoint.hpp"
#include "mseu/config.hpp"
#include "mseu/grad_check.hpp"
#include "mseu/model.hpp"

using mseu::Tensor;
using T = Tensor<double>;

static mseu::ModelConfig tiny_cfg() {
  mseu::ModelConfig cfg;
  cfg.C1 = 2;
  cfg.N = 1;
  cfg.state_dim = 2;
  cfg.scan_chunk = 4;
  return cfg;
}

template <class S>
static mseu::AudioBuffer<S> noise_buffer(int64_t len, uint64_t seed, double scale = 0.1) {
  mseu::Rng rng(seed);
  mseu::AudioBuffer<S> buf;
  buf.samples.resize((size_t)len);
  for (auto& v : buf.samples) v = (S)(scale * rng.normal());
  return buf;
}

template <class S>
static int64_t count_params(mseu::ModelParams<S>& p) {
  int64_t n = 0;
  p.visit([&](const std::string&, Tensor<S>& t) { n += t.numel(); });
  return n;
}

template <class S>
static Tensor<S> flatten_params(mseu::ModelParams<S>& p) {
  std::vector<S> flat;
  p.visit([&](const std::string&, Tensor<S>& t) {
    auto d = t.data();
    flat.insert(flat.end(), d.begin(), d.end());
  });
  auto n = (int64_t)flat.size();
  return Tensor<S>::from(std::move(flat), {n});
}

template <class S>
static mseu::ModelParams<S> params_from_flat(const mseu::ModelConfig& cfg,
                                             const Tensor<S>& flat) {
  mseu::Rng rng(0);
  auto p = mseu::ModelParams<S>::init(cfg, rng);
  int64_t off = 0;
  p.visit([&](const std::string&, Tensor<S>& t) {
    t = mseu::reshape(mseu::slice(flat, {off}, {t.numel()}), t.shape());
    off += t.numel();
  });
  return p;
}

TEST_CASE("model config validation") {
  mseu::ModelConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.widths() == std::vector<int64_t>{32, 64, 96});

  auto bad = cfg;
  bad.levels = 2;
  CHECK_THROWS_WITH_AS(bad.validate(),
                       "config: only a three level pyramid is supported, got 2",
                       std::invalid_argument);
  bad = cfg;
  bad.C1 = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.N = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.state_dim = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.compress_exp = 0.0f;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.compress_exp = 1.5f;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.scan_chunk = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("forward produces aligned spectra and a waveform of the input length") {
  auto cfg = tiny_cfg();
  mseu::Rng rng(11);
  auto p = mseu::ModelParams<double>::init(cfg, rng);
  for (int64_t len : {(int64_t)510, (int64_t)1000}) {
    auto buf = noise_buffer<double>(len, 100 + (uint64_t)len);
    auto out = mseu::model_apply(buf, p);
    int64_t t_frames = len / mseu::kHop + 1;
    CHECK(out.mag_c.shape() == mseu::Shape{t_frames, mseu::kBins});
    CHECK(out.phase.shape() == mseu::Shape{t_frames, mseu::kBins});
    CHECK(out.wave.shape() == mseu::Shape{len});
    for (double v : out.mag_c.data()) {
      CHECK(std::isfinite(v));
      CHECK(v >= 0.0);
    }
    for (double v : out.phase.data()) {
      CHECK(v > -3.1415926535897932 - 1e-12);
      CHECK(v <= 3.1415926535897932 + 1e-12);
    }
    for (double v : out.wave.data()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("forward is deterministic") {
  auto cfg = tiny_cfg();
  mseu::Rng rng(12);
  auto p = mseu::ModelParams<double>::init(cfg, rng);
  auto buf = noise_buffer<double>(900, 5);
  auto a = mseu::model_apply(buf, p);
  auto b = mseu::model_apply(buf, p);
  auto da = a.wave.data(), db = b.wave.data();
  for (size_t i = 0; i < da.size(); ++i) CHECK(da[i] == db[i]);
  auto ma = a.mag_c.data(), mb = b.mag_c.data();
  for (size_t i = 0; i < ma.size(); ++i) CHECK(ma[i] == mb[i]);
}

TEST_CASE("silence stays silent") {
  auto cfg = tiny_cfg();
  mseu::Rng rng(13);
  auto p = mseu::ModelParams<double>::init(cfg, rng);
  mseu::AudioBuffer<double> buf;
  buf.samples.assign(990, 0.0);
  auto out = mseu::model_apply(buf, p);
  for (double v : out.mag_c.data()) CHECK(v == 0.0);
  for (double v : out.phase.data()) CHECK(v == 0.0);
  for (double v : out.wave.data()) CHECK(v == 0.0);
}

TEST_CASE("model rejects malformed spectra") {
  auto cfg = tiny_cfg();
  mseu::Rng rng(14);
  auto p = mseu::ModelParams<double>::init(cfg, rng);
  mseu::Rng data(15);
  auto ok_mag = T::uniform({6, mseu::kBins}, data, 0.01, 1.0);
  auto ok_phase = T::uniform({6, mseu::kBins}, data, -3.0, 3.0);
  CHECK_THROWS_AS(mseu::model_apply(T::uniform({6, 128}, data, 0.0, 1.0), ok_phase, p, 700),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      mseu::model_apply(ok_mag, T::uniform({5, mseu::kBins}, data, 0.0, 1.0), p, 700),
      std::invalid_argument);
  auto short_mag = T::uniform({4, mseu::kBins}, data, 0.01, 1.0);
  auto short_phase = T::uniform({4, mseu::kBins}, data, -3.0, 3.0);
  CHECK_THROWS_WITH_AS(mseu::model_apply(short_mag, short_phase, p, 500),
                       "model_apply: need at least 5 frames, got 4", std::invalid_argument);
}

TEST_CASE("gradient reaches every model parameter") {
  auto cfg = tiny_cfg();
  mseu::Rng rng(16);
  auto p = mseu::ModelParams<double>::init(cfg, rng);
  auto buf = noise_buffer<double>(900, 6, 0.3);

  mseu::Tape<double> tape;
  mseu::TapeScope<double> scope(tape);
  p.visit([&](const std::string&, T& t) {
    t.set_requires_grad(true);
    tape.watch(t);
  });
  auto out = mseu::model_apply(buf, p);
  mseu::Rng wr(17);
  auto rw = T::randn(out.wave.shape(), wr);
  auto rm = T::randn(out.mag_c.shape(), wr);
  auto rp = T::randn(out.phase.shape(), wr);
  auto loss = mseu::add(mseu::add(mseu::sum(mseu::mul(out.wave, rw)),
                                  mseu::sum(mseu::mul(out.mag_c, rm))),
                        mseu::sum(mseu::mul(mseu::cos(out.phase), rp)));
  tape.backward(loss);

  int64_t tensors = 0;
  p.visit([&](const std::string& name, T& t) {
    auto g = t.grad();
    REQUIRE(g.size() == (size_t)t.numel());
    bool any = false;
    for (double v : g) {
      CHECK(std::isfinite(v));
      any |= v != 0.0;
    }
    CHECK_MESSAGE(any, "no gradient reached " << name);
    ++tensors;
  });
  CHECK(tensors > 400);
}

TEST_CASE("model gradients match finite differences") {
  // C1=4 keeps the per-row rmsnorm denominators away from the eps floor,
  // where curvature would swamp a central difference at this step size.
  auto cfg = tiny_cfg();
  cfg.C1 = 4;
  mseu::Rng rng(18);
  auto p0 = mseu::ModelParams<double>::init(cfg, rng);
  auto flat = flatten_params(p0);

  auto buf = noise_buffer<double>(700, 7, 1.0);
  auto spec = mseu::stft(buf);
  auto mag_c = mseu::pow(spec.mag, cfg.compress_exp);
  mseu::Rng wr(19);
  auto rw = T::randn({700}, wr);
  auto rm = T::randn(mag_c.shape(), wr);
  auto rp = T::randn(mag_c.shape(), wr);

  auto f = [&](const std::vector<T>& in) {
    auto p = params_from_flat(cfg, in[0]);
    auto out = mseu::model_apply(mag_c, spec.phase, p, 700);
    return mseu::add(mseu::add(mseu::sum(mseu::mul(out.wave, rw)),
                               mseu::sum(mseu::mul(out.mag_c, rm))),
                     mseu::sum(mseu::mul(mseu::cos(out.phase), rp)));
  };
  mseu::Rng probe_rng(20);
  auto rep = mseu::grad_check(f, {flat}, 1e-5, 1e-4, 64, &probe_rng);
  CHECK(rep.checked == 64);
  CHECK_MESSAGE(rep.ok(), "max rel err " << rep.max_rel_err << " at " << rep.worst);
}

TEST_CASE("parameter totals track the reference sizes") {
  struct Ref {
    int64_t c1, n;
    double expected;
  };
  const Ref refs[] = {{16, 2, 0.99e6}, {16, 4, 1.88e6}, {24, 4, 3.78e6}, {32, 4, 6.28e6},
                      {24, 1, 1.11e6}, {24, 2, 2.00e6}, {24, 3, 2.89e6}};
  std::vector<int64_t> totals;
  for (const auto& r : refs) {
    mseu::ModelConfig cfg;
    cfg.C1 = r.c1;
    cfg.N = r.n;
    cfg.state_dim = 16;
    mseu::Rng rng(1);
    auto p = mseu::ModelParams<float>::init(cfg, rng);
    int64_t total = p.param_count();
    CHECK(total == count_params(p));
    double rel = std::fabs((double)total / r.expected - 1.0);
    CHECK_MESSAGE(rel <= 0.35, "C1=" << r.c1 << " N=" << r.n << " total " << total
                                     << " vs reference " << r.expected);
    auto groups = p.param_count_by_group();
    int64_t sum = 0;
    for (const auto& kv : groups) sum += kv.second;
    CHECK(sum == total);
    totals.push_back(total);
  }
  CHECK(totals[0] < totals[1]);
  CHECK(totals[1] < totals[2]);
  CHECK(totals[2] < totals[3]);
  CHECK(totals[4] < totals[5]);
  CHECK(totals[5] < totals[6]);
}

TEST_CASE("flop estimate scales linearly with duration") {
  mseu::ModelConfig xs;
  xs.C1 = 16;
  xs.N = 2;
  int64_t t2s = 32000 / mseu::kHop + 1;
  int64_t t4s = 64000 / mseu::kHop + 1;
  auto f2 = (double)mseu::estimate_flops(xs, t2s);
  auto f4 = (double)mseu::estimate_flops(xs, t4s);
  CHECK(f2 > 0);
  double ratio = f4 / f2;
  CHECK(ratio >= 1.9);
  CHECK(ratio <= 2.1);

  mseu::ModelConfig s = xs;
  s.N = 4;
  CHECK(mseu::estimate_flops(s, t2s) > mseu::estimate_flops(xs, t2s));
}

TEST_CASE("checkpoint round trip is bit exact") {
  auto cfg = tiny_cfg();
  cfg.compress_exp = 0.3f;
  mseu::Rng rng(21);
  auto p = mseu::ModelParams<float>::init(cfg, rng);
  const std::string path = "ck_roundtrip.bin";
  mseu::save_checkpoint(path, p, 123, 77);

  mseu::ModelParams<float> q;
  auto meta = mseu::load_checkpoint(path, q);
  CHECK(meta.step == 123);
  CHECK(meta.seed == 77);
  CHECK(meta.cfg.C1 == cfg.C1);
  CHECK(meta.cfg.N == cfg.N);
  CHECK(meta.cfg.state_dim == cfg.state_dim);
  CHECK(meta.cfg.deformable == cfg.deformable);
  CHECK(meta.cfg.compress_exp == cfg.compress_exp);

  const std::string path2 = "ck_roundtrip2.bin";
  mseu::save_checkpoint(path2, q, 123, 77);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);

  auto buf = noise_buffer<float>(700, 8);
  auto a = mseu::model_apply(buf, p);
  auto b = mseu::model_apply(buf, q);
  auto da = a.wave.data(), db = b.wave.data();
  REQUIRE(da.size() == db.size());
  for (size_t i = 0; i < da.size(); ++i) CHECK(da[i] == db[i]);

  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("checkpoint rejects damaged files") {
  auto cfg = tiny_cfg();
  mseu::Rng rng(22);
  auto p = mseu::ModelParams<float>::init(cfg, rng);
  const std::string path = "ck_damage.bin";
  mseu::save_checkpoint(path, p, 1, 2);
  std::ifstream f(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  f.close();

  auto write_bytes = [](const std::string& to, const std::vector<char>& b) {
    std::ofstream o(to, std::ios::binary | std::ios::trunc);
    o.write(b.data(), (std::streamsize)b.size());
  };
  mseu::ModelParams<float> scratch;

  auto bad = bytes;
  bad[0] = 'X';
  write_bytes("ck_bad_magic.bin", bad);
  CHECK_THROWS_WITH_AS(mseu::load_checkpoint("ck_bad_magic.bin", scratch),
                       "checkpoint: ck_bad_magic.bin is not a checkpoint file",
                       std::runtime_error);

  bad = bytes;
  bad[4] = 9;
  write_bytes("ck_bad_version.bin", bad);
  CHECK_THROWS_WITH_AS(mseu::load_checkpoint("ck_bad_version.bin", scratch),
                       "checkpoint: unsupported version 9 in ck_bad_version.bin",
                       std::runtime_error);

  bad = bytes;
  bad.resize(bad.size() - 3);
  write_bytes("ck_truncated.bin", bad);
  CHECK_THROWS_AS(mseu::load_checkpoint("ck_truncated.bin", scratch), std::runtime_error);

  bad = bytes;
  std::string needle = "encoder.in.w";
  auto it = std::search(bad.begin(), bad.end(), needle.begin(), needle.end());
  REQUIRE(it != bad.end());
  *(it + (std::ptrdiff_t)needle.size() - 1) = 'x';
  write_bytes("ck_renamed.bin", bad);
  CHECK_THROWS_AS(mseu::load_checkpoint("ck_renamed.bin", scratch), std::runtime_error);

  CHECK_THROWS_AS(mseu::load_checkpoint("ck_does_not_exist.bin", scratch), std::runtime_error);

  for (const char* n : {"ck_damage.bin", "ck_bad_magic.bin", "ck_bad_version.bin",
                        "ck_truncated.bin", "ck_renamed.bin"})
    std::remove(n);
}

TEST_CASE("config parser handles comments, spacing, and types") {
  auto kv = mseu::KvConfig::parse_string(
      "# model size\n"
      "C1 = 16\n"
      "N=2   # stages per level\n"
      "\n"
      "name = run_a\n"
      "deformable = true\n"
      "lr = 5e-4\n");
  CHECK(kv.has("C1"));
  CHECK(!kv.has("missing"));
  CHECK(kv.get_int("C1", 0) == 16);
  CHECK(kv.get_int("N", 0) == 2);
  CHECK(kv.get_string("name", "") == "run_a");
  CHECK(kv.get_bool("deformable", false));
  CHECK(kv.get_double("lr", 0.0) == doctest::Approx(5e-4));
  CHECK(kv.get_int("absent", 42) == 42);
  CHECK(kv.get_double("absent2", 1.5) == 1.5);
  CHECK(kv.get_bool("absent3", true));
  CHECK(kv.get_string("absent4", "dflt") == "dflt");
  CHECK_NOTHROW(kv.require_all_used());
}

TEST_CASE("config parser rejects malformed input") {
  CHECK_THROWS_WITH_AS(mseu::KvConfig::parse_string("just a line\n"),
                       "<config>:1: expected key=value, got 'just a line'",
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(mseu::KvConfig::parse_string("a = 1\na = 2\n"),
                       "<config>:2: duplicate key 'a'", std::runtime_error);
  CHECK_THROWS_WITH_AS(mseu::KvConfig::parse_string("= 3\n"), "<config>:1: empty key",
                       std::runtime_error);

  auto kv = mseu::KvConfig::parse_string("n = twelve\nflag = maybe\nx = 1.2.3\n");
  CHECK_THROWS_WITH_AS(kv.get_int("n", 0), "config: key 'n' expects an integer, got 'twelve'",
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(kv.get_bool("flag", false),
                       "config: key 'flag' expects a boolean, got 'maybe'", std::runtime_error);
  CHECK_THROWS_WITH_AS(kv.get_double("x", 0.0),
                       "config: key 'x' expects a number, got '1.2.3'", std::runtime_error);

  auto kv2 = mseu::KvConfig::parse_string("used = 1\nstray = 2\n");
  CHECK(kv2.get_int("used", 0) == 1);
  CHECK_THROWS_WITH_AS(kv2.require_all_used(), "config: unknown key(s): stray",
                       std::runtime_error);

  CHECK_THROWS_AS(mseu::KvConfig::parse_file("no_such_config.cfg"), std::runtime_error);
}
