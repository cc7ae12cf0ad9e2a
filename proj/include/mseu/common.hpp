#pragma once

#include <cstddef>
#include <cstdint>
#include <new>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mseu {

using Shape = std::vector<int64_t>;

namespace detail {

// All numeric buffers live on one alignment so vectorized loops peel
// identically no matter where the allocator placed them; without this,
// reductions and transcendental kernels can change at the last ulp from run
// to run as heap addresses move.
template <class V>
struct AlignedAlloc {
  using value_type = V;
  static constexpr std::size_t kAlign = 64;

  AlignedAlloc() = default;
  template <class U>
  AlignedAlloc(const AlignedAlloc<U>&) noexcept {}

  V* allocate(std::size_t n) {
    return static_cast<V*>(::operator new(n * sizeof(V), std::align_val_t(kAlign)));
  }
  void deallocate(V* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(kAlign));
  }
  template <class U>
  bool operator==(const AlignedAlloc<U>&) const noexcept {
    return true;
  }
};

template <class S>
using AVec = std::vector<S, AlignedAlloc<S>>;

}  // namespace detail

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// Deterministic RNG. fork() derives independent substreams by label so the
// init draws never interleave with data draws.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), eng_(seed) {}

  Rng fork(const std::string& label) const {
    uint64_t h = 1469598103934665603ull;
    for (char c : label) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    return Rng(seed_ ^ h ^ 0x9e3779b97f4a7c15ull);
  }

  double normal() { return std::normal_distribution<double>(0.0, 1.0)(eng_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(eng_);
  }
  int64_t integer(int64_t lo, int64_t hi) {  // inclusive bounds
    return std::uniform_int_distribution<int64_t>(lo, hi)(eng_);
  }
  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  std::mt19937_64 eng_;
};

}  // namespace mseu
