#include "nfest/inference/estimate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>

#include "json.hpp"

namespace nfest::inference {
namespace {

std::size_t target_dim(const Model& m) { return m.flow.config().dim; }

double log_scale_sum(const Model& m) {
  double s = 0.0;
  for (double sd : m.normalizer.target_std) s += std::log(sd);
  return s;
}

// Flow context values [1, embed] (empty for unconditional models).
Tensor embedding(const Model& model, const std::vector<double>& raw_context) {
  if (!model.conditional()) {
    if (!raw_context.empty()) {
      throw DimensionError("unconditional model given a context window");
    }
    return {};
  }
  diff::Tape tape(diff::Tape::Mode::kInference);
  return model.embed(tape, normalize_context(model, raw_context)).value();
}

EstimateReport estimate_with(const Model& model, const Tensor& ctx,
                             const EstimateOptions& options, Rng& rng,
                             const std::optional<Tensor>& truth) {
  const std::size_t d = target_dim(model);
  const auto& nz = model.normalizer;
  auto s = model.flow.sample(options.n_samples, ctx, rng);

  EstimateReport r;
  r.samples = std::move(s.x);
  const double shift = log_scale_sum(model);
  r.log_prob = std::move(s.log_prob);
  for (auto& lp : r.log_prob) lp -= shift;
  const std::size_t n = r.samples.rows();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      r.samples.at(i, j) = nz.target_from_unit(j, r.samples.at(i, j));
    }
  }
  r.mean.assign(d, 0.0);
  r.stddev.assign(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += r.samples.at(i, j);
    m /= static_cast<double>(n);
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = r.samples.at(i, j) - m;
      v += e * e;
    }
    r.mean[j] = m;
    r.stddev[j] = n > 1 ? std::sqrt(v / static_cast<double>(n - 1)) : 0.0;
  }
  if (d == 2 && !options.contour_levels.empty()) {
    r.contour_levels = options.contour_levels;
    r.contours = model.flow.confidence_contours(ctx, options.contour_levels,
                                                options.contour_points);
    for (auto& c : r.contours) {
      for (std::size_t i = 0; i < c.rows(); ++i) {
        for (std::size_t j = 0; j < 2; ++j) c.at(i, j) = nz.target_from_unit(j, c.at(i, j));
      }
    }
  }
  if (truth) r.kl = kl_knn(r.samples, *truth, options.kl);
  r.provenance.seed = options.seed;
  return r;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}

}  // namespace

Tensor normalize_context(const Model& model, const std::vector<double>& raw) {
  const std::size_t r = model.window.window;
  const std::size_t m = model.normalizer.obs_mean.size();
  if (raw.size() != r * m) {
    throw DimensionError("context must hold " + std::to_string(r) + " x " +
                         std::to_string(m) + " raw values, got " +
                         std::to_string(raw.size()));
  }
  Tensor out({1, r, m});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      out[i * m + j] = model.normalizer.obs_to_unit(j, raw[i * m + j]);
    }
  }
  return out;
}

EstimateReport estimate_state(const Model& model,
                              const std::vector<double>& raw_context,
                              const EstimateOptions& options,
                              const std::optional<Tensor>& truth) {
  auto rng = make_stream(options.seed, 0, 40);
  return estimate_with(model, embedding(model, raw_context), options, rng, truth);
}

std::string to_string(Aggregation a) {
  return a == Aggregation::kMean ? "mean" : "sample";
}

Aggregation parse_aggregation(const std::string& text) {
  if (text == "mean") return Aggregation::kMean;
  if (text == "sample") return Aggregation::kSample;
  throw std::invalid_argument("unknown aggregation '" + text + "' (mean|sample)");
}

void RolloutConfig::validate() const {
  if (n_steps < 1) throw std::invalid_argument("rollout needs n_steps >= 1");
  if (estimate.n_samples < 2) throw std::invalid_argument("rollout needs >= 2 samples per step");
}

RolloutResult rollout(const Model& model, const std::vector<double>& raw_context,
                      const RolloutConfig& config) {
  config.validate();
  if (!model.conditional()) throw DimensionError("rollout needs a conditional model");
  const std::size_t m = model.normalizer.obs_mean.size();
  if (target_dim(model) < m) {
    throw DimensionError("rollout feeds estimates back as observations; target dim " +
                         std::to_string(target_dim(model)) + " < observation dim " +
                         std::to_string(m));
  }
  RolloutResult out;
  std::vector<double> window = raw_context;
  for (std::size_t step = 0; step < config.n_steps; ++step) {
    auto rng = make_stream(config.estimate.seed, step, 40);
    out.windows.push_back(window);
    auto report = estimate_with(model, embedding(model, window), config.estimate, rng, {});
    std::vector<double> agg(m);
    for (std::size_t j = 0; j < m; ++j) {
      agg[j] = config.aggregation == Aggregation::kMean ? report.mean[j]
                                                        : report.samples.at(0, j);
      if (!std::isfinite(agg[j])) {
        throw std::runtime_error("rollout step " + std::to_string(step) +
                                 " produced a non-finite estimate");
      }
    }
    window.erase(window.begin(), window.begin() + m);
    window.insert(window.end(), agg.begin(), agg.end());
    out.fed_back.push_back(std::move(agg));
    out.steps.push_back(std::move(report));
  }
  return out;
}

JointEstimate joint_state_param_estimate(const Model& model,
                                         const std::vector<double>& raw_context,
                                         const EstimateOptions& options,
                                         const SirOverlay& overlay) {
  const std::size_t d = target_dim(model);
  if (!model.window.include_params || d < 2) {
    throw DimensionError("checkpoint has no (beta, gamma) targets (target dim " +
                         std::to_string(d) + ")");
  }
  JointEstimate out;
  out.report = estimate_state(model, raw_context, options);
  out.beta_mean = out.report.mean[d - 2];
  out.beta_std = out.report.stddev[d - 2];
  out.gamma_mean = out.report.mean[d - 1];
  out.gamma_std = out.report.stddev[d - 1];
  dynamics::SirParams p;
  p.beta = out.beta_mean;
  p.gamma = out.gamma_mean;
  p.noise_sigma = 0.0;
  p.dt = overlay.dt;
  out.overlay = dynamics::sir_simulate(p, overlay.initial, overlay.n_steps, options.seed);
  return out;
}

double silverman_bandwidth(std::vector<double> x) {
  const std::size_t n = x.size();
  if (n < 2) throw std::invalid_argument("bandwidth needs >= 2 samples");
  double m = 0.0;
  for (double v : x) m += v;
  m /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - m) * (v - m);
  const double sd = std::sqrt(var / static_cast<double>(n - 1));
  std::sort(x.begin(), x.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(n - 1);
    const std::size_t i = static_cast<std::size_t>(pos);
    const double f = pos - static_cast<double>(i);
    return i + 1 < n ? x[i] * (1 - f) + x[i + 1] * f : x[i];
  };
  const double iqr = (quantile(0.75) - quantile(0.25)) / 1.34;
  double spread = iqr > 0.0 ? std::min(sd, iqr) : sd;
  if (!(spread > 0.0)) spread = 1e-12;
  return 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
}

double kde_log_density(const std::vector<double>& x, double bandwidth, double at) {
  // log-sum-exp over kernels
  double mx = -std::numeric_limits<double>::infinity();
  std::vector<double> e(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double u = (at - x[i]) / bandwidth;
    e[i] = -0.5 * u * u;
    mx = std::max(mx, e[i]);
  }
  double s = 0.0;
  for (double v : e) s += std::exp(v - mx);
  return mx + std::log(s) - std::log(static_cast<double>(x.size()) * bandwidth) -
         0.5 * std::log(2.0 * std::numbers::pi);
}

NllReport mean_nll(const Model& model, const std::vector<std::vector<double>>& contexts,
                   const Tensor& states, const NllOptions& options) {
  const std::size_t d = target_dim(model);
  if (states.rank() != 2 || states.cols() != d) {
    throw DimensionError("states must be [N, " + std::to_string(d) + "]");
  }
  const std::size_t n = states.rows();
  if (n == 0) throw std::invalid_argument("mean_nll needs at least one pair");
  if (model.conditional() && contexts.size() != n) {
    throw DimensionError("mean_nll got " + std::to_string(contexts.size()) +
                         " contexts for " + std::to_string(n) + " states");
  }
  const double shift = log_scale_sum(model);
  NllReport out;
  out.per_dim.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor ctx = embedding(model, model.conditional() ? contexts[i] : std::vector<double>{});
    Tensor x({1, d});
    for (std::size_t j = 0; j < d; ++j) {
      x.at(0, j) = model.normalizer.target_to_unit(j, states.at(i, j));
    }
    out.total -= model.flow.log_prob_values(x, ctx)[0] - shift;

    auto rng = make_stream(options.seed, i, 42);
    Tensor s = model.flow.sample(options.kde_samples, ctx, rng).x;
    for (std::size_t j = 0; j < d; ++j) {
      std::vector<double> col(s.rows());
      for (std::size_t k = 0; k < s.rows(); ++k) {
        col[k] = model.normalizer.target_from_unit(j, s.at(k, j));
      }
      out.per_dim[j] -= kde_log_density(col, silverman_bandwidth(col), states.at(i, j));
    }
  }
  out.total /= static_cast<double>(n);
  for (auto& v : out.per_dim) v /= static_cast<double>(n);
  return out;
}

double mape(const std::vector<double>& predicted, const std::vector<double>& actual) {
  if (predicted.size() != actual.size() || actual.empty()) {
    throw std::invalid_argument("mape needs equal, non-empty sequences");
  }
  std::string bad;
  double s = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    if (!(std::abs(actual[i]) > 1e-9)) {
      bad += (bad.empty() ? "" : ", ") + std::to_string(i);
      continue;
    }
    s += std::abs(predicted[i] - actual[i]) / std::abs(actual[i]);
  }
  if (!bad.empty()) throw std::domain_error("mape: zero actual value at index " + bad);
  return 100.0 * s / static_cast<double>(actual.size());
}

void write_report_json(const EstimateReport& report, const std::string& path) {
  nlohmann::ordered_json j;
  j["n_samples"] = report.samples.rows();
  j["mean"] = report.mean;
  j["stddev"] = report.stddev;
  double lp = 0.0;
  for (double v : report.log_prob) lp += v;
  j["mean_log_prob"] = report.log_prob.empty() ? 0.0 : lp / static_cast<double>(report.log_prob.size());
  j["kl_knn"] = report.kl ? nlohmann::ordered_json(*report.kl) : nlohmann::ordered_json(nullptr);
  j["contour_levels"] = report.contour_levels;
  j["provenance"] = {{"checkpoint", report.provenance.checkpoint},
                     {"dataset", report.provenance.dataset},
                     {"seed", report.provenance.seed}};
  open_out(path) << j.dump(2) << "\n";
}

void write_samples_csv(const EstimateReport& report, const std::string& path) {
  auto out = open_out(path);
  const std::size_t d = report.samples.cols();
  out << "sample";
  for (std::size_t j = 0; j < d; ++j) out << ",x" << j;
  out << ",log_prob\n";
  for (std::size_t i = 0; i < report.samples.rows(); ++i) {
    out << i;
    for (std::size_t j = 0; j < d; ++j) out << ',' << fmt(report.samples.at(i, j));
    out << ',' << fmt(report.log_prob[i]) << '\n';
  }
}

void write_contours_csv(const EstimateReport& report, const std::string& path) {
  auto out = open_out(path);
  out << "level,point,x,y\n";
  for (std::size_t l = 0; l < report.contours.size(); ++l) {
    const auto& c = report.contours[l];
    for (std::size_t i = 0; i < c.rows(); ++i) {
      out << fmt(report.contour_levels[l]) << ',' << i << ',' << fmt(c.at(i, 0)) << ','
          << fmt(c.at(i, 1)) << '\n';
    }
  }
}

void write_bands_csv(const std::vector<EstimateReport>& steps, const std::string& path) {
  auto out = open_out(path);
  out << "step,dim,mean,lo2sigma,hi2sigma\n";
  for (std::size_t s = 0; s < steps.size(); ++s) {
    const auto& r = steps[s];
    for (std::size_t j = 0; j < r.mean.size(); ++j) {
      out << s + 1 << ',' << j << ',' << fmt(r.mean[j]) << ','
          << fmt(r.mean[j] - 2.0 * r.stddev[j]) << ',' << fmt(r.mean[j] + 2.0 * r.stddev[j])
          << '\n';
    }
  }
}

}  // namespace nfest::inference
