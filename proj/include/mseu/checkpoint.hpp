#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mseu/model.hpp"

namespace mseu {

// Flat binary container: "MSEU", u32 version, u32 tensor count, then per
// tensor a u16 name length, the name, a u8 rank, u32 dims, and f32 payload,
// all little endian; a u64 step and u64 seed close the file. The model config
// rides along as rank-0 tensors named "__cfg.*" so a checkpoint is
// self-describing.

struct CheckpointMeta {
  uint64_t step = 0;
  uint64_t seed = 0;
  ModelConfig cfg;
};

namespace detail {

inline void ck_u16(std::vector<unsigned char>& v, uint16_t x) {
  v.push_back((unsigned char)(x & 0xff));
  v.push_back((unsigned char)(x >> 8));
}
inline void ck_u32(std::vector<unsigned char>& v, uint32_t x) {
  for (int i = 0; i < 4; ++i) v.push_back((unsigned char)((x >> (8 * i)) & 0xff));
}
inline void ck_u64(std::vector<unsigned char>& v, uint64_t x) {
  for (int i = 0; i < 8; ++i) v.push_back((unsigned char)((x >> (8 * i)) & 0xff));
}
inline void ck_f32(std::vector<unsigned char>& v, float x) {
  uint32_t bits;
  std::memcpy(&bits, &x, 4);
  ck_u32(v, bits);
}

struct CkReader {
  const unsigned char* p;
  size_t left;
  std::string path;
  void need(size_t n) const {
    if (left < n) throw std::runtime_error("checkpoint: truncated file " + path);
  }
  uint16_t u16() {
    need(2);
    uint16_t x = (uint16_t)(p[0] | (p[1] << 8));
    p += 2;
    left -= 2;
    return x;
  }
  uint32_t u32() {
    need(4);
    uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= (uint32_t)p[i] << (8 * i);
    p += 4;
    left -= 4;
    return x;
  }
  uint64_t u64() {
    need(8);
    uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= (uint64_t)p[i] << (8 * i);
    p += 8;
    left -= 8;
    return x;
  }
  float f32() {
    uint32_t bits = u32();
    float x;
    std::memcpy(&x, &bits, 4);
    return x;
  }
  std::string str(size_t n) {
    need(n);
    std::string s((const char*)p, n);
    p += n;
    left -= n;
    return s;
  }
};

}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path, ModelParams<S>& params, uint64_t step,
                     uint64_t seed) {
  std::vector<std::pair<std::string, std::vector<float>>> entries;
  std::vector<Shape> shapes;
  auto put_cfg = [&](const std::string& key, double v) {
    entries.push_back({"__cfg." + key, {(float)v}});
    shapes.push_back({});
  };
  const auto& c = params.cfg;
  put_cfg("C1", (double)c.C1);
  put_cfg("N", (double)c.N);
  put_cfg("state_dim", (double)c.state_dim);
  put_cfg("compress_exp", c.compress_exp);
  put_cfg("deformable", c.deformable ? 1.0 : 0.0);
  put_cfg("levels", (double)c.levels);
  put_cfg("bimamba_flip_back", c.bimamba_flip_back ? 1.0 : 0.0);
  put_cfg("scan_chunk", (double)c.scan_chunk);
  params.visit([&](const std::string& name, Tensor<S>& t) {
    std::vector<float> vals((size_t)t.numel());
    auto d = t.data();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = (float)d[i];
    entries.push_back({name, std::move(vals)});
    shapes.push_back(t.shape());
  });

  std::vector<unsigned char> buf;
  buf.insert(buf.end(), {'M', 'S', 'E', 'U'});
  detail::ck_u32(buf, 1);
  detail::ck_u32(buf, (uint32_t)entries.size());
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& name = entries[i].first;
    require(name.size() <= 0xffff, "checkpoint: tensor name too long");
    detail::ck_u16(buf, (uint16_t)name.size());
    buf.insert(buf.end(), name.begin(), name.end());
    buf.push_back((unsigned char)shapes[i].size());
    for (int64_t d : shapes[i]) detail::ck_u32(buf, (uint32_t)d);
    for (float v : entries[i].second) detail::ck_f32(buf, v);
  }
  detail::ck_u64(buf, step);
  detail::ck_u64(buf, seed);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  f.write((const char*)buf.data(), (std::streamsize)buf.size());
  if (!f) throw std::runtime_error("checkpoint: short write to " + path);
}

template <class S>
CheckpointMeta load_checkpoint(const std::string& path, ModelParams<S>& params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  detail::CkReader r{bytes.data(), bytes.size(), path};
  if (r.str(std::min<size_t>(4, bytes.size())) != "MSEU")
    throw std::runtime_error("checkpoint: " + path + " is not a checkpoint file");
  uint32_t version = r.u32();
  if (version != 1)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                             " in " + path);
  uint32_t count = r.u32();

  std::map<std::string, std::pair<Shape, std::vector<float>>> loaded;
  for (uint32_t i = 0; i < count; ++i) {
    auto name = r.str(r.u16());
    r.need(1);
    uint8_t rank = *r.p;
    r.p++;
    r.left--;
    Shape shape;
    int64_t n = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      shape.push_back((int64_t)r.u32());
      n *= shape.back();
    }
    std::vector<float> vals((size_t)n);
    for (auto& v : vals) v = r.f32();
    if (!loaded.emplace(name, std::make_pair(std::move(shape), std::move(vals))).second)
      throw std::runtime_error("checkpoint: duplicate tensor " + name + " in " + path);
  }
  CheckpointMeta meta;
  meta.step = r.u64();
  meta.seed = r.u64();
  if (r.left != 0) throw std::runtime_error("checkpoint: trailing bytes in " + path);

  auto take_cfg = [&](const std::string& key) {
    auto it = loaded.find("__cfg." + key);
    if (it == loaded.end())
      throw std::runtime_error("checkpoint: missing config entry " + key + " in " + path);
    double v = (double)it->second.second.at(0);
    loaded.erase(it);
    return v;
  };
  meta.cfg.C1 = (int64_t)take_cfg("C1");
  meta.cfg.N = (int64_t)take_cfg("N");
  meta.cfg.state_dim = (int64_t)take_cfg("state_dim");
  meta.cfg.compress_exp = (float)take_cfg("compress_exp");
  meta.cfg.deformable = take_cfg("deformable") != 0.0;
  meta.cfg.levels = (int64_t)take_cfg("levels");
  meta.cfg.bimamba_flip_back = take_cfg("bimamba_flip_back") != 0.0;
  meta.cfg.scan_chunk = (int64_t)take_cfg("scan_chunk");
  meta.cfg.validate();

  Rng rng(0);
  params = ModelParams<S>::init(meta.cfg, rng);
  params.visit([&](const std::string& name, Tensor<S>& t) {
    auto it = loaded.find(name);
    if (it == loaded.end())
      throw std::runtime_error("checkpoint: missing tensor " + name + " in " + path);
    if (it->second.first != t.shape())
      throw std::runtime_error("checkpoint: tensor " + name + " has shape " +
                               shape_str(it->second.first) + ", expected " +
                               shape_str(t.shape()));
    std::vector<S> vals(it->second.second.size());
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = (S)it->second.second[i];
    t = Tensor<S>::from(std::move(vals), t.shape());
    loaded.erase(it);
  });
  if (!loaded.empty())
    throw std::runtime_error("checkpoint: unexpected tensor " + loaded.begin()->first + " in " +
                             path);
  return meta;
}

}  // namespace mseu
