#include "nfest/dynamics/moons.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "nfest/random.hpp"

namespace nfest::dynamics {
namespace {

// Distance from (x, y) to the arc of the unit circle centred at (cx, cy)
// spanning angles [lo, hi] (radians, lo < hi, measured from +x).
double arc_distance(double x, double y, double cx, double cy, double lo,
                    double hi) {
  const double dx = x - cx, dy = y - cy;
  const double angle = std::atan2(dy, dx);
  if (angle >= lo && angle <= hi) {
    return std::abs(std::hypot(dx, dy) - 1.0);
  }
  const double d1 = std::hypot(x - (cx + std::cos(lo)), y - (cy + std::sin(lo)));
  const double d2 = std::hypot(x - (cx + std::cos(hi)), y - (cy + std::sin(hi)));
  return std::min(d1, d2);
}

}  // namespace

std::vector<double> two_moons(std::size_t n, double noise_sigma,
                              std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("two_moons needs n >= 2");
  auto rng = make_stream(seed);
  const std::size_t upper = (n + 1) / 2;
  std::vector<double> pts;
  pts.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = uniform(rng, 0.0, std::numbers::pi);
    double x = 0.0, y = 0.0;
    if (i < upper) {
      x = std::cos(a);
      y = std::sin(a);
    } else {
      x = 1.0 - std::cos(a);
      y = 0.5 - std::sin(a);
    }
    pts.push_back(x + noise_sigma * standard_normal(rng));
    pts.push_back(y + noise_sigma * standard_normal(rng));
  }
  return pts;
}

ArcDistance nearest_arc(double x, double y) {
  const double du = arc_distance(x, y, 0.0, 0.0, 0.0, std::numbers::pi);
  const double dl = arc_distance(x, y, 1.0, 0.5, -std::numbers::pi, 0.0);
  return du <= dl ? ArcDistance{du, 0} : ArcDistance{dl, 1};
}

}  // namespace nfest::dynamics
