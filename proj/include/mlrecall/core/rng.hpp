#pragma once

#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace mlrecall {

// SplitMix64. Used instead of <random> engines/distributions because the
// streams must be reproducible bit-for-bit by out-of-process oracles.
class SplitMix64 {
public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 24 bits of precision, exactly representable as float.
  double unit() { return static_cast<double>(next() >> 40) * (1.0 / 16777216.0); }

  // Uniform integer in [0, n), n > 0. Lemire-free modulo; bias is irrelevant
  // at the sizes used here and keeps the stream trivially portable.
  std::uint64_t below(std::uint64_t n) { return next() % n; }

private:
  std::uint64_t state_;
};

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Per-purpose labelled sub-seed: derive_seed(master, "split") etc.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view label) {
  SplitMix64 g(master ^ fnv1a64(label));
  return g.next();
}

// Fisher-Yates driven by SplitMix64.
template <typename T>
void seeded_shuffle(std::vector<T>& items, std::uint64_t seed) {
  SplitMix64 g(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    auto j = static_cast<std::size_t>(g.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

} // namespace mlrecall
