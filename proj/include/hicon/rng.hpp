#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "hicon/common.hpp"

namespace hicon {

// All randomness in the artifact flows from one root seed through named
// substreams, so that e.g. parameter init and negative sampling can be
// reproduced independently of each other.
inline std::uint64_t substream_seed(std::uint64_t root, std::string_view name) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a 64
  for (int i = 0; i < 8; ++i) {
    h ^= (root >> (8 * i)) & 0xff;
    h *= 1099511628211ull;
  }
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  // splitmix64 finalizer
  h += 0x9e3779b97f4a7c15ull;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
  return h ^ (h >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1) with 53 random bits
  double next_double() { return (engine_() >> 11) * 0x1.0p-53; }

  // Unbiased integer in [0, n). Rejection sampling keeps the draw
  // independent of std library distribution internals.
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw ContractError("uniform_index: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % n);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[uniform_index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace hicon
