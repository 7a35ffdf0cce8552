// Owning, index-addressed parameter collection. Modules keep indices rather
// than pointers so a model can be copied freely.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nfest/diff/tape.hpp"
#include "nfest/random.hpp"

namespace nfest::diff {

class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor value);
  /// Fan-in uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  std::size_t add_uniform(std::string name, Shape shape, std::size_t fan_in,
                          Rng& rng);

  Parameter& operator[](std::size_t i) { return params_.at(i); }
  const Parameter& operator[](std::size_t i) const { return params_.at(i); }
  std::size_t size() const noexcept { return params_.size(); }
  /// Number of scalar entries across all parameters.
  std::size_t scalar_count() const noexcept;

  /// Leaf for parameter i on `tape`.
  Var on(Tape& tape, std::size_t i) { return tape.param(params_.at(i)); }

  std::vector<Parameter*> pointers();
  std::vector<const Parameter*> pointers() const;
  const Parameter* find(const std::string& name) const;
  void zero_grad();

 private:
  std::vector<Parameter> params_;
};

}  // namespace nfest::diff
