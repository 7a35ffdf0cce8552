// Central-difference verification of tape gradients.
#pragma once

#include <functional>
#include <vector>

#include "nfest/diff/tape.hpp"

namespace nfest::diff {

/// Builds a scalar loss on the given tape from the current parameter values.
using LossFn = std::function<Var(Tape&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Compares analytic gradients with central differences of step `h` for
/// every entry of every parameter, or for `max_entries` entries sampled
/// deterministically with `seed` when max_entries > 0. The error of one
/// entry is |analytic - numeric| / max(1, |numeric|). Parameter values are
/// restored and gradients zeroed on return.
GradCheckResult grad_check(const LossFn& f,
                           const std::vector<Parameter*>& params,
                           double h = 1e-4, std::size_t max_entries = 0,
                           unsigned long long seed = 0);

}  // namespace nfest::diff
