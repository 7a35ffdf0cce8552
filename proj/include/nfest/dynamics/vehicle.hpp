// Planar vehicle with a random steering switch.
//
//   p_x' = p_x + dt v cos(theta)       theta' = theta + dt v phi
//   p_y' = p_y + dt v sin(theta)       phi'   = phi + dt psi c1 cos(c2 t)
//
// psi is zero before switch_time and drawn from U[-1, 1] at the switch.
// Process noise perturbs the velocity and angular acceleration used in each
// position/heading update; it does not feed back into phi's recursion.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>

#include "nfest/dynamics/trajectory.hpp"

namespace nfest::dynamics {

struct VehicleState {
  double px = 0.0;
  double py = 0.0;
  double theta = 0.0;
  double phi = 0.0;
  double v = 1.0;
  double t = 0.0;
};

struct VehicleParams {
  double c1 = 0.1;
  double c2 = 0.5;
  double sigma_v = 0.01;
  double sigma_phi = 0.025;
  double dt = 0.1;
  double switch_time = 5.5;
  double psi = 0.0;

  void validate() const;
};

struct VehicleNoise {
  double v = 0.0;
  double phi = 0.0;
};

/// Velocity as a function of time; empty means constant v = 1.
using VelocitySchedule = std::function<double(double t)>;

/// Advances one step of length p.dt with the given process noise draws.
VehicleState vehicle_step(const VehicleState& s, const VehicleParams& p,
                          VehicleNoise noise);

/// True when the phi update applied at time t carries psi.
bool switch_active(double t, const VehicleParams& p);
/// True once a state at time t depends on psi.
bool psi_revealed(double t, const VehicleParams& p);

struct VehicleRun {
  Trajectory noisy;
  Trajectory nominal;
  std::vector<VehicleState> full_states;  // noisy run, one per record
  double psi = 0.0;
};

struct VehicleSimOptions {
  std::size_t n_steps = 150;
  VehicleParams params;
  VehicleState initial;
  VelocitySchedule velocity;
  /// Replaces the U[-1, 1] draw when set.
  std::optional<double> psi;
};

/// One trajectory of `n_steps` records starting at the initial state. The
/// noise stream and the switch draw come from independent streams of
/// (seed, index), so overriding psi leaves the noise sequence unchanged.
VehicleRun vehicle_simulate(const VehicleSimOptions& options,
                            std::uint64_t seed, std::uint64_t index = 0);

/// Continues a run from `start` for `n_steps` further steps with fresh noise
/// from stream (seed, index). A fresh psi is drawn when `start` does not yet
/// depend on it; otherwise `psi` is kept. Returns the final state.
VehicleState vehicle_continue(const VehicleState& start, double psi,
                              std::size_t n_steps,
                              const VehicleSimOptions& options,
                              std::uint64_t seed, std::uint64_t index);

/// Positions `horizon` steps after record `step` of run (seed, index) for
/// `n` independent continuations drawn from stream `continuation_seed`:
/// [n, 2] row-major.
std::vector<double> vehicle_continuations(const VehicleSimOptions& options,
                                          std::uint64_t seed, std::uint64_t index,
                                          std::size_t step, std::size_t horizon,
                                          std::size_t n,
                                          std::uint64_t continuation_seed);

TrajectorySet vehicle_dataset(const VehicleSimOptions& options,
                              std::size_t n_trajectories, std::uint64_t seed);

}  // namespace nfest::dynamics
