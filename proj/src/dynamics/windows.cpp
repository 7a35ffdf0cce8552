#include "nfest/dynamics/windows.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "nfest/random.hpp"

namespace nfest::dynamics {
namespace {

constexpr double kMinStd = 1e-12;

struct RunningMoments {
  std::vector<double> sum, sum_sq;
  std::size_t count = 0;

  explicit RunningMoments(std::size_t dim) : sum(dim, 0.0), sum_sq(dim, 0.0) {}

  void add(std::span<const double> row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      sum[i] += row[i];
      sum_sq[i] += row[i] * row[i];
    }
    ++count;
  }

  void finish(std::vector<double>& mean, std::vector<double>& std_dev) const {
    const double n = static_cast<double>(count);
    mean.resize(sum.size());
    std_dev.resize(sum.size());
    for (std::size_t i = 0; i < sum.size(); ++i) {
      mean[i] = sum[i] / n;
      const double var = std::max(0.0, sum_sq[i] / n - mean[i] * mean[i]);
      const double sd = std::sqrt(var);
      std_dev[i] = sd > kMinStd * std::max(1.0, std::abs(mean[i])) ? sd : 1.0;
    }
  }
};

std::size_t target_dim_of(const Trajectory& traj, bool include_params) {
  if (include_params && traj.params.size() != 2) {
    throw std::invalid_argument(
        "include_params needs trajectories tagged with (beta, gamma)");
  }
  return traj.state_dim() + (include_params ? 2 : 0);
}

}  // namespace

std::string to_string(Direction d) {
  return d == Direction::kForward ? "forward" : "backward";
}

Direction parse_direction(const std::string& text) {
  if (text == "forward" || text == "fw") return Direction::kForward;
  if (text == "backward" || text == "bw") return Direction::kBackward;
  throw std::invalid_argument("unknown direction '" + text +
                              "' (expected forward or backward)");
}

Normalizer Normalizer::fit(const TrajectorySet& set, bool include_params) {
  if (set.empty()) throw std::invalid_argument("cannot normalize an empty set");
  const std::size_t m = set.front().obs_dim();
  const std::size_t d = target_dim_of(set.front(), include_params);
  RunningMoments obs(m), target(d);
  std::vector<double> row(d);
  for (const auto& traj : set) {
    for (std::size_t k = 0; k < traj.length(); ++k) {
      obs.add(traj.observation(k));
      const auto s = traj.state(k);
      std::copy(s.begin(), s.end(), row.begin());
      if (include_params) {
        row[s.size()] = traj.params[0];
        row[s.size() + 1] = traj.params[1];
      }
      target.add(row);
    }
  }
  Normalizer n;
  obs.finish(n.obs_mean, n.obs_std);
  target.finish(n.target_mean, n.target_std);
  return n;
}

Normalizer Normalizer::identity(std::size_t obs_dim, std::size_t target_dim) {
  return {std::vector<double>(obs_dim, 0.0), std::vector<double>(obs_dim, 1.0),
          std::vector<double>(target_dim, 0.0),
          std::vector<double>(target_dim, 1.0)};
}

std::size_t window_count(std::size_t length, std::size_t window,
                         std::size_t horizon) {
  return length >= window + horizon ? length - window - horizon + 1 : 0;
}

std::pair<std::size_t, std::size_t> target_range(std::size_t length,
                                                 const WindowSpec& spec) {
  const std::size_t span = spec.window + spec.horizon;
  if (length < span) {
    throw TrajectoryTooShort("trajectory of length " + std::to_string(length) +
                             " is shorter than window + horizon = " +
                             std::to_string(span));
  }
  if (spec.direction == Direction::kForward) {
    return {span - 1, length - 1};
  }
  return {0, length - span};
}

std::vector<double> raw_context(const Trajectory& traj, std::size_t target_step,
                                const WindowSpec& spec) {
  const auto [lo, hi] = target_range(traj.length(), spec);
  if (target_step < lo || target_step > hi) {
    throw std::out_of_range("target step " + std::to_string(target_step) +
                            " has no complete context window");
  }
  const std::size_t m = traj.obs_dim();
  std::vector<double> ctx;
  ctx.reserve(spec.window * m);
  for (std::size_t r = 0; r < spec.window; ++r) {
    std::size_t step = 0;
    if (spec.direction == Direction::kForward) {
      step = target_step - spec.horizon - (spec.window - 1) + r;
    } else {
      step = target_step + spec.horizon + (spec.window - 1) - r;
    }
    const auto o = traj.observation(step);
    ctx.insert(ctx.end(), o.begin(), o.end());
  }
  return ctx;
}

WindowedDataset make_windows(const TrajectorySet& set, const WindowSpec& spec,
                             std::optional<Normalizer> normalizer) {
  if (set.empty()) throw std::invalid_argument("make_windows: empty trajectory set");
  if (spec.window < 1 || spec.horizon < 1) {
    throw std::invalid_argument("make_windows: window and horizon must be >= 1");
  }
  WindowedDataset ds;
  ds.spec = spec;
  ds.obs_dim = set.front().obs_dim();
  ds.target_dim = target_dim_of(set.front(), spec.include_params);
  ds.normalizer =
      normalizer ? std::move(*normalizer) : Normalizer::fit(set, spec.include_params);
  if (ds.normalizer.obs_mean.size() != ds.obs_dim ||
      ds.normalizer.target_mean.size() != ds.target_dim) {
    throw std::invalid_argument("normalizer dimensions do not match the data");
  }

  auto rng = make_stream(spec.seed, 0, 7);
  for (std::size_t ti = 0; ti < set.size(); ++ti) {
    const auto& traj = set[ti];
    if (traj.obs_dim() != ds.obs_dim ||
        target_dim_of(traj, spec.include_params) != ds.target_dim) {
      throw std::invalid_argument("make_windows: trajectories differ in dimension");
    }
    const auto [lo, hi] = target_range(traj.length(), spec);
    for (std::size_t target = lo; target <= hi; ++target) {
      const auto ctx = raw_context(traj, target, spec);
      for (std::size_t i = 0; i < ctx.size(); ++i) {
        double v = ds.normalizer.obs_to_unit(i % ds.obs_dim, ctx[i]);
        if (spec.context_noise_sigma > 0.0) {
          v += spec.context_noise_sigma * standard_normal(rng);
        }
        ds.contexts.push_back(v);
      }
      const auto s = traj.state(target);
      for (std::size_t j = 0; j < s.size(); ++j) {
        ds.targets.push_back(ds.normalizer.target_to_unit(j, s[j]));
      }
      if (spec.include_params) {
        ds.targets.push_back(ds.normalizer.target_to_unit(s.size(), traj.params[0]));
        ds.targets.push_back(ds.normalizer.target_to_unit(s.size() + 1, traj.params[1]));
      }
      ds.trajectory.push_back(ti);
      ds.target_step.push_back(target);
    }
  }
  return ds;
}

}  // namespace nfest::dynamics
