// Kinetic-energy-regularized maximum likelihood:
//   L = l1 E[-log p(x)] + l2 E[(1/(L-1)) sum_l |f_{l+1}(x) - f_l(x)|]
//       + l3 E[(1/(L-1)) sum_{l<L} -log p_Z(f_l(x))]
#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nfest/dynamics/windows.hpp"
#include "nfest/training/model.hpp"

namespace nfest::training {

using diff::Tape;
using diff::Tensor;
using diff::Var;

struct LossWeights {
  double nll = 1.0;
  double kinetic = 0.1;
  double prior = 0.01;

  void validate() const;
};

struct TrainConfig {
  std::size_t iterations = 10000;
  std::size_t batch_size = 2048;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 10.0;  // 0 disables clipping
  std::uint64_t seed = 0;
  LossWeights weights;

  void validate() const;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& what, std::vector<std::size_t> rows)
      : std::runtime_error(what), rows(std::move(rows)) {}
  std::vector<std::size_t> rows;  // offending rows (dataset indices in train)
};

/// Mean of -log p over the batch.
Var nll_term(const flow::DensityValue& density);
/// Batch mean of (1/(L-1)) sum_l |f_{l+1} - f_l|_2; zero when L < 2.
Var kinetic_term(const std::vector<Var>& layers);
/// Batch mean of (1/(L-1)) sum_{l=1}^{L-1} -log p_Z(f_l); zero when L < 2.
Var prior_term(const std::vector<Var>& layers, const flow::BaseParams& base);

struct LossBreakdown {
  Var total, nll, kinetic, prior;
};

/// contexts [B, R, m] (empty for unconditional models), targets [B, d].
LossBreakdown total_loss(const Model& model, Tape& tape,
                         const Tensor& contexts, const Tensor& targets,
                         const LossWeights& weights);

class Adam {
 public:
  explicit Adam(const TrainConfig& config) : config_(config) {}
  /// One update from the gradients stored in the parameters. Gradients are
  /// first rescaled to global norm clip_norm when larger.
  void step(const std::vector<diff::Parameter*>& params);
  std::size_t steps() const noexcept { return t_; }
  double last_grad_norm() const noexcept { return last_norm_; }

 private:
  TrainConfig config_;
  std::size_t t_ = 0;
  double last_norm_ = 0.0;
  std::vector<Tensor> m_, v_;
};

struct TrainingData {
  Tensor contexts;  // [N, R, m] or empty
  Tensor targets;   // [N, d]
  std::size_t size() const noexcept { return targets.rows(); }

  static TrainingData from_windows(const dynamics::WindowedDataset& ds);
  static TrainingData unconditional(const Tensor& points);
  /// Rows `idx` of both tensors.
  TrainingData gather(const std::vector<std::size_t>& idx) const;
  /// At most n rows chosen without replacement (seeded), kept in order.
  TrainingData subsample(std::size_t n, std::uint64_t seed) const;
};

struct TrainRecord {
  std::size_t iter = 0;
  double total = 0, nll = 0, kinetic = 0, prior = 0;
  double wallclock_ms = 0;
  double param_norm = 0;
};

struct TrainLog {
  LossWeights weights;
  std::vector<TrainRecord> records;

  /// Columns iter,total,nll,kinetic,prior,wallclock_ms.
  void write_csv(const std::string& path) const;
  /// Mean of `field` over records [from, to).
  double mean(double TrainRecord::*field, std::size_t from, std::size_t to) const;
};

using ProgressFn = std::function<void(const TrainRecord&)>;

/// Seeded with-replacement mini-batches; each iteration embeds, evaluates
/// the loss, backpropagates and takes one Adam step.
TrainLog train(Model& model, const TrainingData& data,
               const TrainConfig& config, const ProgressFn& progress = {});

double parameter_norm(const std::vector<const diff::Parameter*>& params);

}  // namespace nfest::training
