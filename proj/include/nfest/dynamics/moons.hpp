#pragma once

#include <cstdint>
#include <vector>

namespace nfest::dynamics {

/// Points of the two interleaving half circles, row-major [n, 2]. The first
/// ceil(n/2) points lie on the upper arc (cos a, sin a), the rest on the
/// lower arc (1 - cos a, 0.5 - sin a), a ~ U[0, pi], plus isotropic
/// N(0, noise_sigma^2) jitter.
std::vector<double> two_moons(std::size_t n, double noise_sigma,
                              std::uint64_t seed);

/// Distance from a point to the nearest of the two arcs, and which arc
/// (0 upper, 1 lower) is nearest.
struct ArcDistance {
  double distance;
  int moon;
};
ArcDistance nearest_arc(double x, double y);

}  // namespace nfest::dynamics
