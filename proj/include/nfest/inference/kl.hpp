// Nearest-neighbour estimate of KL(p_hat || p) from two sample sets:
//   D ~ (d/n) sum_i log(s_k(i) / r_k(i)) + log(m / (n - 1))
// r_k(i): distance from p_hat sample i to its k-th neighbour among the other
// p_hat samples; s_k(i): distance to its k-th neighbour among the p samples.
#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "nfest/diff/tensor.hpp"

namespace nfest::inference {

using diff::Tensor;

struct KlConfig {
  std::size_t k = 1;
  void validate() const;
};

class InsufficientSamples : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DegenerateDistance : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Distance from each query row to its k-th nearest row of `points`
/// (Euclidean). With `exclude_self`, queries are `points` themselves and row
/// i skips itself.
std::vector<double> kth_neighbor_distance(const Tensor& queries,
                                          const Tensor& points, std::size_t k,
                                          bool exclude_self);

/// p_hat [n, d], p [m, d]. Exact duplicate rows of p_hat are separated by a
/// 1e-12 relative jitter first.
double kl_knn(const Tensor& p_hat, const Tensor& p, const KlConfig& config = {});

}  // namespace nfest::inference
