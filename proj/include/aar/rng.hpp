#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string_view>

namespace aar {

// 64-bit FNV-1a. Used both for hashing tokens into embedding rows and for
// folding string labels into seeds, so every stage of a pipeline draws from
// its own deterministic stream.
inline uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Derive a child seed from a root seed and a stable label.
inline uint64_t seed_fold(uint64_t seed, std::string_view label) {
  uint64_t h = fnv1a64(label);
  h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h;
}

// SplitMix64 generator with explicit double mappings. std::mt19937_64 is
// portable but the standard distributions are not, so all draws here are
// spelled out and bit-stable for a given seed on a given platform.
class DetRng {
 public:
  explicit DetRng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Box-Muller; uses two draws per call, no cached spare.
  double normal(double mu = 0.0, double sigma = 1.0) {
    double u1 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mu + sigma * r * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Uniform integer in [0, n). Modulo bias is < 2^-40 for desk-scale n.
  uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

 private:
  uint64_t state_;
};

}  // namespace aar
