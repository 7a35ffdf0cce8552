// Conditional masked autoregressive flow.
//
// Each layer maps u -> z in the density direction:
//   p = permute(u);  y = p W  with W = L U (L unit lower, U upper with
//   diagonal exp(log_diag));  z_i = y_i exp(s_i) + t_i where (t_i, s_i)
//   depend only on y_{<i} and the context (MADE masks).
// The base is a diagonal Gaussian whose mean and log-scale come from a small
// MLP on the context. All transforms start at the identity, so an untrained
// flow is its base distribution.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "nfest/diff/ops.hpp"
#include "nfest/diff/params.hpp"
#include "nfest/random.hpp"

namespace nfest::flow {

using diff::Tape;
using diff::Tensor;
using diff::Var;

struct FlowConfig {
  std::size_t n_layers = 10;
  std::size_t dim = 2;
  std::size_t hidden = 4;
  std::size_t context = 4;  // 0 gives an unconditional flow
  std::size_t base_hidden = 16;
  /// Soft bound on per-layer log-scales: s = b tanh(raw / b).
  double log_scale_bound = 3.0;
  /// Report per-layer outputs in the coordinate order of the final latent
  /// (undoing the later permutations) rather than each layer's own order.
  bool latent_frame_layers = true;
  /// Seeds the d > 2 permutations and the initial weights.
  std::uint64_t seed = 0;

  void validate() const;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SingularLayerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BaseParams {
  Var mu;         // [B, d]
  Var log_sigma;  // [B, d], clamped to [-7, 7]
};

struct ForwardResult {
  Var z;                    // [B, d]
  Var log_det;              // [B]
  std::vector<Var> layers;  // f_1(x) ... f_L(x), each [B, d]; f_L = z
};

struct DensityValue {
  Var log_prob;  // [B]
  ForwardResult forward;
  BaseParams base;
};

struct Samples {
  Tensor x;                       // [n, d]
  std::vector<double> log_prob;   // log p(x | context) per sample
};

class Flow {
 public:
  Flow() = default;
  explicit Flow(const FlowConfig& config);

  const FlowConfig& config() const noexcept { return config_; }
  diff::ParameterSet& params() noexcept { return params_; }
  const diff::ParameterSet& params() const noexcept { return params_; }
  const std::vector<std::size_t>& permutation(std::size_t layer) const {
    return layers_.at(layer).perm;
  }

  /// x [B, d] -> z. `context` is [B, context] or invalid when context == 0.
  ForwardResult forward_map(Var x, Var context) const;
  BaseParams base_params(Var context, std::size_t batch, Tape& tape) const;
  /// log N(z; mu, sigma) per row.
  static Var base_log_prob(Var z, const BaseParams& base);
  DensityValue log_prob(Var x, Var context) const;

  /// Values-only inverse of forward_map. `context` is [B, context] (or
  /// [1, context], broadcast); empty when unconditional.
  Tensor inverse_map(const Tensor& z, const Tensor& context) const;
  /// Values-only log density of rows of x.
  std::vector<double> log_prob_values(const Tensor& x,
                                      const Tensor& context) const;
  Samples sample(std::size_t n, const Tensor& context, Rng& rng) const;

  /// Images of circles of radius k in whitened base coordinates, one closed
  /// polyline [points, 2] per level (first row repeated as the last). d = 2.
  std::vector<Tensor> confidence_contours(const Tensor& context,
                                          const std::vector<double>& levels,
                                          std::size_t points = 256) const;

  /// Overwrites every parameter with U(-scale, scale) draws. Test helper.
  void randomize(std::uint64_t seed, double scale = 0.5);

 private:
  struct Layer {
    std::vector<std::size_t> perm;
    std::size_t lower = 0, upper = 0, log_diag = 0;
    std::size_t w1 = 0, b1 = 0, wc = 0, w2 = 0, b2 = 0, w3 = 0, b3 = 0;
    Tensor m1, m2, m3;  // MADE masks
  };

  Var linear_map(Tape& tape, const Layer& layer) const;
  Var conditioner(Tape& tape, const Layer& layer, Var y, Var context) const;
  Tensor tile_context(const Tensor& context, std::size_t batch) const;

  FlowConfig config_;
  std::vector<Layer> layers_;
  std::size_t head_w1_ = 0, head_b1_ = 0, head_w2_ = 0, head_b2_ = 0;
  Tensor lower_mask_, upper_mask_, eye_;
  mutable diff::ParameterSet params_;
};

}  // namespace nfest::flow
