// Density estimates from a trained model, recursive rollout and scoring.
// Contexts go in and every number comes out in raw data units.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nfest/dynamics/sir.hpp"
#include "nfest/inference/kl.hpp"
#include "nfest/training/model.hpp"

namespace nfest::inference {

using training::Model;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Provenance {
  std::string checkpoint;
  std::string dataset;
  std::uint64_t seed = 0;
};

struct EstimateOptions {
  std::size_t n_samples = 1000;
  std::uint64_t seed = 0;
  /// Radii in whitened base units; contours only for 2-D targets.
  std::vector<double> contour_levels{1.0, 2.0, 3.0};
  std::size_t contour_points = 128;
  KlConfig kl;
};

struct EstimateReport {
  Tensor samples;                 // [n, d]
  std::vector<double> log_prob;   // per sample, raw units
  std::vector<double> mean, stddev;
  std::vector<double> contour_levels;
  std::vector<Tensor> contours;   // [points, 2] per level
  std::optional<double> kl;       // against supplied ground truth
  Provenance provenance;
};

/// Normalized window [1, R, m] from R raw observation rows (R * m values).
Tensor normalize_context(const Model& model, const std::vector<double>& raw);

/// p(x | context). `raw_context` holds R rows of m raw observations in window
/// order (empty for unconditional models). With `truth` [k, d], the report
/// carries kl_knn(samples || truth).
EstimateReport estimate_state(const Model& model,
                              const std::vector<double>& raw_context,
                              const EstimateOptions& options,
                              const std::optional<Tensor>& truth = {});

enum class Aggregation { kMean, kSample };

std::string to_string(Aggregation a);
Aggregation parse_aggregation(const std::string& text);

struct RolloutConfig {
  std::size_t n_steps = 7;
  Aggregation aggregation = Aggregation::kMean;
  EstimateOptions estimate;

  void validate() const;
};

struct RolloutResult {
  std::vector<EstimateReport> steps;
  std::vector<std::vector<double>> fed_back;  // aggregate appended per step
  std::vector<std::vector<double>> windows;   // raw window used per step
};

/// Repeated estimate_state; each step drops window row 0 and appends the
/// step's aggregate (its first m components) as a pseudo-observation. Step s
/// samples with stream (seed, s), so one step equals estimate_state.
RolloutResult rollout(const Model& model, const std::vector<double>& raw_context,
                      const RolloutConfig& config);

struct SirOverlay {
  dynamics::SirState initial;
  std::size_t n_steps = 1000;
  double dt = 1.0;
};

struct JointEstimate {
  EstimateReport report;
  double beta_mean = 0, beta_std = 0, gamma_mean = 0, gamma_std = 0;
  dynamics::Trajectory overlay;  // noiseless run at the mean parameters
};

/// For models trained with (beta, gamma) appended to the target.
JointEstimate joint_state_param_estimate(const Model& model,
                                         const std::vector<double>& raw_context,
                                         const EstimateOptions& options,
                                         const SirOverlay& overlay = {});

struct NllReport {
  double total = 0.0;
  std::vector<double> per_dim;  // 1-D KDE marginals of flow samples
};

struct NllOptions {
  std::size_t kde_samples = 1000;
  std::uint64_t seed = 0;
};

/// Mean -log p(state | context) over pairs, raw units. `contexts` holds one
/// raw window per pair, `states` is [N, d].
NllReport mean_nll(const Model& model,
                   const std::vector<std::vector<double>>& contexts,
                   const Tensor& states, const NllOptions& options = {});

/// Silverman's rule: 0.9 min(sd, IQR / 1.34) n^(-1/5).
double silverman_bandwidth(std::vector<double> x);
/// Gaussian-kernel log density of `x` at `at`.
double kde_log_density(const std::vector<double>& x, double bandwidth, double at);

/// 100 * mean |pred - actual| / |actual|.
double mape(const std::vector<double>& predicted, const std::vector<double>& actual);

void write_report_json(const EstimateReport& report, const std::string& path);
/// sample,x0..x{d-1},log_prob
void write_samples_csv(const EstimateReport& report, const std::string& path);
/// level,point,x,y
void write_contours_csv(const EstimateReport& report, const std::string& path);
/// step,dim,mean,lo2sigma,hi2sigma
void write_bands_csv(const std::vector<EstimateReport>& steps, const std::string& path);

}  // namespace nfest::inference
