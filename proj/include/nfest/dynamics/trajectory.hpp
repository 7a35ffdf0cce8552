// Time-indexed observation/state sequences shared by both simulators.
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace nfest::dynamics {

struct Trajectory {
  std::vector<std::string> obs_names;
  std::vector<std::string> state_names;
  std::vector<double> times;
  std::vector<double> observations;  // [length, obs_dim], row-major
  std::vector<double> states;        // [length, state_dim], row-major
  /// Generating parameters (beta, gamma) for tagged SIR runs; empty otherwise.
  std::vector<double> params;

  std::size_t length() const noexcept { return times.size(); }
  std::size_t obs_dim() const noexcept { return obs_names.size(); }
  std::size_t state_dim() const noexcept { return state_names.size(); }

  std::span<const double> observation(std::size_t step) const {
    return {observations.data() + step * obs_dim(), obs_dim()};
  }
  std::span<const double> state(std::size_t step) const {
    return {states.data() + step * state_dim(), state_dim()};
  }
};

using TrajectorySet = std::vector<Trajectory>;

}  // namespace nfest::dynamics
