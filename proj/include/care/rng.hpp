#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace care {

// Keyed, splittable randomness: every stochastic draw in the codebase is
// derived from (seed, stream name, indices), never from shared stream state,
// so results are independent of evaluation order and thread count.

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t mix_key(uint64_t seed, std::string_view stream, uint64_t a = 0,
                        uint64_t b = 0) {
  uint64_t h = splitmix64(seed ^ fnv1a64(stream));
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return h;
}

inline std::mt19937_64 rng_for(uint64_t seed, std::string_view stream,
                               uint64_t a = 0, uint64_t b = 0) {
  return std::mt19937_64(mix_key(seed, stream, a, b));
}

}  // namespace care
