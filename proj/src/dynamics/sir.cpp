#include "nfest/dynamics/sir.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "nfest/random.hpp"

namespace nfest::dynamics {
namespace {

constexpr std::uint64_t kObsNoiseStream = 0;
constexpr std::uint64_t kParamStream = 3;

SirState advance(const SirState& s, const SirDerivative& d, double h) {
  return {s.S + h * d[0], s.I + h * d[1], s.R + h * d[2], s.t + h};
}

void check_interval(const Interval& iv, const char* name) {
  if (!(iv.lo > 0.0) || iv.hi < iv.lo) {
    throw std::invalid_argument(std::string(name) +
                                " interval must satisfy 0 < lo <= hi");
  }
}

}  // namespace

void SirParams::validate() const {
  if (!(beta > 0.0) || !(gamma > 0.0)) {
    throw std::invalid_argument("SIR rates beta and gamma must be positive");
  }
  if (!(dt > 0.0)) throw std::invalid_argument("SIR dt must be positive");
  if (noise_sigma < 0.0) {
    throw std::invalid_argument("SIR noise_sigma must be nonnegative");
  }
}

SirDerivative sir_rhs(const SirState& s, const SirParams& p) {
  const double infection = p.beta * s.I * s.S;
  const double recovery = p.gamma * s.I;
  return {-infection, infection - recovery, recovery};
}

SirState rk4_step(const SirState& s, const SirParams& p, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("rk4_step: dt must be positive");
  const auto k1 = sir_rhs(s, p);
  const auto k2 = sir_rhs(advance(s, k1, dt / 2.0), p);
  const auto k3 = sir_rhs(advance(s, k2, dt / 2.0), p);
  const auto k4 = sir_rhs(advance(s, k3, dt), p);
  SirState next = s;
  next.S += dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]);
  next.I += dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]);
  next.R += dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]);
  next.t = s.t + dt;
  return next;
}

Trajectory sir_simulate(const SirParams& p, const SirState& initial,
                        std::size_t n_steps, std::uint64_t seed,
                        std::uint64_t index) {
  p.validate();
  if (std::abs(initial.total() - 1.0) > 1e-9) {
    throw std::invalid_argument("SIR initial fractions sum to " +
                                std::to_string(initial.total()) +
                                ", expected 1");
  }
  if (n_steps < 1) throw std::invalid_argument("n_steps must be >= 1");
  auto rng = make_stream(seed, index, kObsNoiseStream);

  Trajectory traj;
  traj.obs_names = {"S_obs", "I_obs", "R_obs"};
  traj.state_names = {"S", "I", "R"};
  traj.params = {p.beta, p.gamma};
  traj.times.reserve(n_steps);
  traj.states.reserve(3 * n_steps);
  traj.observations.reserve(3 * n_steps);

  SirState s = initial;
  for (std::size_t k = 0; k < n_steps; ++k) {
    traj.times.push_back(initial.t + static_cast<double>(k) * p.dt);
    for (double v : {s.S, s.I, s.R}) {
      traj.states.push_back(v);
      traj.observations.push_back(v + p.noise_sigma * standard_normal(rng));
    }
    s = rk4_step(s, p, p.dt);
  }
  return traj;
}

TrajectorySet sir_ensemble(const SirEnsembleOptions& options,
                           std::uint64_t seed) {
  check_interval(options.beta, "beta");
  check_interval(options.gamma, "gamma");
  if (options.n_trajectories < 1) {
    throw std::invalid_argument("sir_ensemble needs n_trajectories >= 1");
  }
  TrajectorySet set;
  set.reserve(options.n_trajectories);
  for (std::size_t i = 0; i < options.n_trajectories; ++i) {
    auto rng = make_stream(seed, i, kParamStream);
    SirParams p;
    p.beta = uniform(rng, options.beta.lo, options.beta.hi);
    p.gamma = uniform(rng, options.gamma.lo, options.gamma.hi);
    // uniform_real_distribution on a degenerate interval returns lo.
    if (options.beta.hi == options.beta.lo) p.beta = options.beta.lo;
    if (options.gamma.hi == options.gamma.lo) p.gamma = options.gamma.lo;
    p.noise_sigma = options.noise_sigma;
    p.dt = options.dt;
    set.push_back(sir_simulate(p, options.initial, options.n_steps, seed, i));
  }
  return set;
}

}  // namespace nfest::dynamics
