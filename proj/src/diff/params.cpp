#include "nfest/diff/params.hpp"

#include <cmath>

namespace nfest::diff {

std::size_t ParameterSet::add(std::string name, Tensor value) {
  params_.emplace_back(std::move(name), std::move(value));
  return params_.size() - 1;
}

std::size_t ParameterSet::add_uniform(std::string name, Shape shape,
                                      std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = uniform(rng, -bound, bound);
  return add(std::move(name), std::move(t));
}

std::size_t ParameterSet::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::vector<Parameter*> ParameterSet::pointers() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> ParameterSet::pointers() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

const Parameter* ParameterSet::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace nfest::diff
