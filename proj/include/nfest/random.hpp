// Seeded random streams. Every worker derives an independent generator from
// (seed, index, purpose) so results do not depend on scheduling.
#pragma once

#include <cstdint>
#include <random>

namespace nfest {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline Rng make_stream(std::uint64_t seed, std::uint64_t index = 0,
                       std::uint64_t purpose = 0) {
  return Rng(splitmix64(splitmix64(splitmix64(seed) ^ index) ^
                        (purpose * 0xd1b54a32d192ed03ULL)));
}

inline double standard_normal(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace nfest
