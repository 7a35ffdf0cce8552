// SIR compartment model integrated with classical fourth-order Runge-Kutta.
#pragma once

#include <array>
#include <cstdint>

#include "nfest/dynamics/trajectory.hpp"

namespace nfest::dynamics {

struct SirState {
  double S = 0.99;
  double I = 0.01;
  double R = 0.0;
  double t = 0.0;

  double total() const noexcept { return S + I + R; }
};

struct SirParams {
  double beta = 0.03;
  double gamma = 0.01;
  double noise_sigma = 0.001;
  double dt = 1.0;

  void validate() const;
};

using SirDerivative = std::array<double, 3>;

/// (dS/dt, dI/dt, dR/dt) = (-beta I S, beta I S - gamma I, gamma I).
SirDerivative sir_rhs(const SirState& s, const SirParams& p);

SirState rk4_step(const SirState& s, const SirParams& p, double dt);

/// Nominal RK4 trajectory of `n_steps` records as the state, with an
/// observation copy carrying i.i.d. N(0, noise_sigma^2) noise per component.
/// The trajectory is tagged with (beta, gamma).
Trajectory sir_simulate(const SirParams& p, const SirState& initial,
                        std::size_t n_steps, std::uint64_t seed,
                        std::uint64_t index = 0);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

struct SirEnsembleOptions {
  Interval beta{0.02, 0.04};
  Interval gamma{0.005, 0.025};
  std::size_t n_trajectories = 200;
  std::size_t n_steps = 1000;
  SirState initial;
  double noise_sigma = 0.001;
  double dt = 1.0;
};

/// Independent noisy runs with (beta, gamma) drawn uniformly per trajectory.
TrajectorySet sir_ensemble(const SirEnsembleOptions& options,
                           std::uint64_t seed);

}  // namespace nfest::dynamics
