#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mseu/common.hpp"

namespace mseu {

template <class S>
struct AudioBuffer {
  std::vector<S> samples;
  int sample_rate = 16000;
};

namespace detail {

inline uint32_t rd_u32(const unsigned char* p) {
  return (uint32_t)p[0] | ((uint32_t)p[1] << 8) | ((uint32_t)p[2] << 16) | ((uint32_t)p[3] << 24);
}
inline uint16_t rd_u16(const unsigned char* p) { return (uint16_t)((uint16_t)p[0] | ((uint16_t)p[1] << 8)); }

inline void wr_u32(std::vector<unsigned char>& v, uint32_t x) {
  v.push_back((unsigned char)(x & 0xff));
  v.push_back((unsigned char)((x >> 8) & 0xff));
  v.push_back((unsigned char)((x >> 16) & 0xff));
  v.push_back((unsigned char)((x >> 24) & 0xff));
}
inline void wr_u16(std::vector<unsigned char>& v, uint16_t x) {
  v.push_back((unsigned char)(x & 0xff));
  v.push_back((unsigned char)((x >> 8) & 0xff));
}

}  // namespace detail

// 16 kHz mono PCM16 only; anything else is rejected with a specific reason.
template <class S>
AudioBuffer<S> read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_wav: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw std::runtime_error("read_wav: " + path + " is not a RIFF/WAVE file");

  bool have_fmt = false;
  uint16_t fmt_tag = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  size_t pos = 12;
  const unsigned char* data = nullptr;
  uint32_t data_len = 0;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    uint32_t sz = detail::rd_u32(hdr + 4);
    if (pos + 8 + sz > bytes.size())
      throw std::runtime_error("read_wav: truncated chunk in " + path);
    const unsigned char* body = hdr + 8;
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (sz < 16) throw std::runtime_error("read_wav: malformed fmt chunk in " + path);
      fmt_tag = detail::rd_u16(body);
      channels = detail::rd_u16(body + 2);
      rate = detail::rd_u32(body + 4);
      bits = detail::rd_u16(body + 14);
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = body;
      data_len = sz;
    }
    pos += 8 + sz + (sz & 1);  // chunks are word aligned
  }
  if (!have_fmt || !data) throw std::runtime_error("read_wav: missing fmt or data chunk in " + path);
  if (fmt_tag != 1 || bits != 16)
    throw std::runtime_error("read_wav: " + path + " uses an unsupported encoding (PCM16 only)");
  if (channels != 1)
    throw std::runtime_error("read_wav: " + path + " has " + std::to_string(channels) +
                             " channels, expected mono");
  if (rate != 16000)
    throw std::runtime_error("read_wav: " + path + " sampled at " + std::to_string(rate) +
                             " Hz, expected 16000");

  AudioBuffer<S> out;
  out.sample_rate = 16000;
  size_t n = data_len / 2;
  out.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    int16_t s = (int16_t)detail::rd_u16(data + 2 * i);
    out.samples[i] = (S)((double)s / 32768.0);
  }
  return out;
}

template <class S>
void write_wav(const std::string& path, const AudioBuffer<S>& buf) {
  require(buf.sample_rate > 0, "write_wav: sample rate must be positive");
  for (S v : buf.samples)
    if (!std::isfinite((double)v)) throw std::runtime_error("write_wav: non-finite sample");

  std::vector<unsigned char> v;
  uint32_t n = (uint32_t)buf.samples.size();
  uint32_t data_bytes = 2 * n;
  v.insert(v.end(), {'R', 'I', 'F', 'F'});
  detail::wr_u32(v, 36 + data_bytes);
  v.insert(v.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  detail::wr_u32(v, 16);
  detail::wr_u16(v, 1);  // PCM
  detail::wr_u16(v, 1);  // mono
  detail::wr_u32(v, (uint32_t)buf.sample_rate);
  detail::wr_u32(v, (uint32_t)buf.sample_rate * 2);
  detail::wr_u16(v, 2);
  detail::wr_u16(v, 16);
  v.insert(v.end(), {'d', 'a', 't', 'a'});
  detail::wr_u32(v, data_bytes);
  for (uint32_t i = 0; i < n; ++i) {
    double x = (double)buf.samples[i];
    double q = std::nearbyint(x * 32768.0);
    q = std::min(32767.0, std::max(-32768.0, q));
    detail::wr_u16(v, (uint16_t)(int16_t)q);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_wav: cannot open " + path);
  f.write((const char*)v.data(), (std::streamsize)v.size());
  if (!f) throw std::runtime_error("write_wav: short write to " + path);
}

}  // namespace mseu
