#include "nfest/diff/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>

namespace nfest::diff {
namespace {

double evaluate(const LossFn& f) {
  Tape tape(Tape::Mode::kInference);
  return f(tape).value().item();
}

}  // namespace

GradCheckResult grad_check(const LossFn& f,
                           const std::vector<Parameter*>& params, double h,
                           std::size_t max_entries, unsigned long long seed) {
  GradCheckResult result;
  std::vector<std::pair<Parameter*, std::size_t>> entries;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) entries.emplace_back(p, i);
  }
  if (entries.empty()) return result;
  if (max_entries > 0 && entries.size() > max_entries) {
    std::mt19937_64 rng(seed);
    std::shuffle(entries.begin(), entries.end(), rng);
    entries.resize(max_entries);
  }

  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(f(tape));
  }

  for (auto [p, i] : entries) {
    const double original = p->value[i];
    p->value[i] = original + h;
    const double up = evaluate(f);
    p->value[i] = original - h;
    const double down = evaluate(f);
    p->value[i] = original;
    const double numeric = (up - down) / (2.0 * h);
    const double err =
        std::abs(p->grad[i] - numeric) / std::max(1.0, std::abs(numeric));
    result.max_rel_error = std::max(result.max_rel_error, err);
    ++result.checked;
  }
  for (auto* p : params) p->zero_grad();
  return result;
}

}  // namespace nfest::diff
