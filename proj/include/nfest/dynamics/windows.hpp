// Windowed (context, target) pairs for forward and backward estimation.
//
// Forward:  context (o_n, ..., o_{n+R-1}) in time order, target
//           x_{n+R-1+horizon}.
// Backward: context (o_n, o_{n-1}, ..., o_{n-R+1}) newest first, target
//           x_{n-R+1-horizon}.
//
// In both directions context row 0 is farthest from the target and row R-1
// nearest, so rollout always drops row 0 and appends the new estimate.
#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nfest/dynamics/trajectory.hpp"

namespace nfest::dynamics {

enum class Direction { kForward, kBackward };

std::string to_string(Direction d);
Direction parse_direction(const std::string& text);

class TrajectoryTooShort : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Per-dimension z-score constants. A dimension with (near) zero spread keeps
/// scale 1.
struct Normalizer {
  std::vector<double> obs_mean, obs_std;
  std::vector<double> target_mean, target_std;

  static Normalizer fit(const TrajectorySet& set, bool include_params);
  static Normalizer identity(std::size_t obs_dim, std::size_t target_dim);

  double obs_to_unit(std::size_t dim, double raw) const {
    return (raw - obs_mean[dim]) / obs_std[dim];
  }
  double target_to_unit(std::size_t dim, double raw) const {
    return (raw - target_mean[dim]) / target_std[dim];
  }
  double target_from_unit(std::size_t dim, double unit) const {
    return unit * target_std[dim] + target_mean[dim];
  }
};

struct WindowSpec {
  std::size_t window = 5;
  Direction direction = Direction::kForward;
  std::size_t horizon = 1;
  bool include_params = false;
  /// Added to normalized contexts (standardized units).
  double context_noise_sigma = 1.0;
  std::uint64_t seed = 0;
};

struct WindowedDataset {
  WindowSpec spec;
  std::size_t obs_dim = 0;
  std::size_t target_dim = 0;
  std::vector<double> contexts;  // [count, window, obs_dim], normalized
  std::vector<double> targets;   // [count, target_dim], normalized
  std::vector<std::size_t> trajectory;   // source trajectory per window
  std::vector<std::size_t> target_step;  // target record index per window
  Normalizer normalizer;

  std::size_t size() const noexcept { return trajectory.size(); }
  std::size_t context_size() const noexcept { return spec.window * obs_dim; }
};

/// Number of windows one trajectory of the given length yields.
std::size_t window_count(std::size_t length, std::size_t window,
                         std::size_t horizon);

/// Builds every window of every trajectory. Windows are ordered by
/// trajectory, then by target step. Normalization constants are fitted on
/// `set` unless supplied.
WindowedDataset make_windows(const TrajectorySet& set, const WindowSpec& spec,
                             std::optional<Normalizer> normalizer = {});

/// Raw context rows for one window location in window order (see above):
/// the R observations whose target is record `target_step`.
std::vector<double> raw_context(const Trajectory& traj,
                                std::size_t target_step,
                                const WindowSpec& spec);

/// Valid target steps for a trajectory length.
std::pair<std::size_t, std::size_t> target_range(std::size_t length,
                                                 const WindowSpec& spec);

}  // namespace nfest::dynamics
