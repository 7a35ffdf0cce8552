#include "nfest/dynamics/vehicle.hpp"

#include <cmath>
#include <stdexcept>

#include "nfest/random.hpp"

namespace nfest::dynamics {
namespace {

constexpr double kTimeTol = 1e-9;

// Stream purposes.
constexpr std::uint64_t kNoiseStream = 0;
constexpr std::uint64_t kSwitchStream = 1;
constexpr std::uint64_t kContinueStream = 2;

void push_position(Trajectory& traj, const VehicleState& s) {
  traj.times.push_back(s.t);
  traj.observations.push_back(s.px);
  traj.observations.push_back(s.py);
  traj.states.push_back(s.px);
  traj.states.push_back(s.py);
}

Trajectory empty_vehicle_trajectory() {
  Trajectory traj;
  traj.obs_names = {"px_obs", "py_obs"};
  traj.state_names = {"px", "py"};
  return traj;
}

double velocity_at(const VehicleSimOptions& options, double t,
                   double fallback) {
  return options.velocity ? options.velocity(t) : fallback;
}

}  // namespace

void VehicleParams::validate() const {
  if (!(psi >= -1.0 && psi <= 1.0)) {
    throw std::invalid_argument("vehicle psi must lie in [-1, 1]");
  }
  if (!(dt > 0.0)) throw std::invalid_argument("vehicle dt must be positive");
  if (sigma_v < 0.0 || sigma_phi < 0.0) {
    throw std::invalid_argument("vehicle noise levels must be nonnegative");
  }
}

bool switch_active(double t, const VehicleParams& p) {
  return t >= p.switch_time - kTimeTol;
}

bool psi_revealed(double t, const VehicleParams& p) {
  return t > p.switch_time + kTimeTol;
}

VehicleState vehicle_step(const VehicleState& s, const VehicleParams& p,
                          VehicleNoise noise) {
  const double v = s.v + noise.v;
  const double phi = s.phi + noise.phi;
  VehicleState next = s;
  next.px = s.px + p.dt * v * std::cos(s.theta);
  next.py = s.py + p.dt * v * std::sin(s.theta);
  next.theta = s.theta + p.dt * v * phi;
  const double psi = switch_active(s.t, p) ? p.psi : 0.0;
  next.phi = s.phi + p.dt * psi * p.c1 * std::cos(p.c2 * s.t);
  next.t = s.t + p.dt;
  return next;
}

VehicleRun vehicle_simulate(const VehicleSimOptions& options,
                            std::uint64_t seed, std::uint64_t index) {
  if (options.n_steps < 1) throw std::invalid_argument("n_steps must be >= 1");
  VehicleParams params = options.params;
  auto switch_rng = make_stream(seed, index, kSwitchStream);
  params.psi = options.psi ? *options.psi : uniform(switch_rng, -1.0, 1.0);
  params.validate();
  auto noise_rng = make_stream(seed, index, kNoiseStream);

  VehicleRun run;
  run.psi = params.psi;
  run.noisy = empty_vehicle_trajectory();
  run.nominal = empty_vehicle_trajectory();

  VehicleState noisy = options.initial;
  VehicleState nominal = options.initial;
  for (std::size_t k = 0; k < options.n_steps; ++k) {
    const double t = static_cast<double>(k) * params.dt + options.initial.t;
    noisy.t = nominal.t = t;
    noisy.v = nominal.v = velocity_at(options, t, options.initial.v);
    push_position(run.noisy, noisy);
    push_position(run.nominal, nominal);
    run.full_states.push_back(noisy);
    if (k + 1 == options.n_steps) break;
    const VehicleNoise eps{params.sigma_v * standard_normal(noise_rng),
                           params.sigma_phi * standard_normal(noise_rng)};
    noisy = vehicle_step(noisy, params, eps);
    nominal = vehicle_step(nominal, params, {});
  }
  return run;
}

VehicleState vehicle_continue(const VehicleState& start, double psi,
                              std::size_t n_steps,
                              const VehicleSimOptions& options,
                              std::uint64_t seed, std::uint64_t index) {
  VehicleParams params = options.params;
  auto rng = make_stream(seed, index, kContinueStream);
  params.psi = psi_revealed(start.t, params) ? psi : uniform(rng, -1.0, 1.0);
  VehicleState s = start;
  const double t0 = start.t;
  for (std::size_t k = 0; k < n_steps; ++k) {
    s.t = t0 + static_cast<double>(k) * params.dt;
    s.v = velocity_at(options, s.t, s.v);
    const VehicleNoise eps{params.sigma_v * standard_normal(rng),
                           params.sigma_phi * standard_normal(rng)};
    s = vehicle_step(s, params, eps);
  }
  s.t = t0 + static_cast<double>(n_steps) * params.dt;
  s.v = velocity_at(options, s.t, s.v);
  return s;
}

std::vector<double> vehicle_continuations(const VehicleSimOptions& options,
                                          std::uint64_t seed, std::uint64_t index,
                                          std::size_t step, std::size_t horizon,
                                          std::size_t n,
                                          std::uint64_t continuation_seed) {
  VehicleSimOptions upto = options;
  upto.n_steps = step + 1;
  const VehicleRun run = vehicle_simulate(upto, seed, index);
  std::vector<double> out;
  out.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const VehicleState s = vehicle_continue(run.full_states.back(), run.psi, horizon,
                                            options, continuation_seed, i);
    out.push_back(s.px);
    out.push_back(s.py);
  }
  return out;
}

TrajectorySet vehicle_dataset(const VehicleSimOptions& options,
                              std::size_t n_trajectories, std::uint64_t seed) {
  TrajectorySet set;
  set.reserve(n_trajectories);
  for (std::size_t i = 0; i < n_trajectories; ++i) {
    set.push_back(vehicle_simulate(options, seed, i).noisy);
  }
  return set;
}

}  // namespace nfest::dynamics
