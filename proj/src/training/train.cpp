#include "nfest/training/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <utility>

namespace nfest::training {
namespace {

void check_finite_rows(const Tensor& log_prob) {
  std::vector<std::size_t> bad;
  for (std::size_t i = 0; i < log_prob.size(); ++i) {
    if (!std::isfinite(log_prob[i])) bad.push_back(i);
  }
  if (!bad.empty()) {
    std::string msg = "non-finite log-likelihood in batch rows";
    for (std::size_t i = 0; i < std::min<std::size_t>(bad.size(), 10); ++i) {
      msg += " " + std::to_string(bad[i]);
    }
    throw NonFiniteLoss(msg, std::move(bad));
  }
}

Var zero_on(const std::vector<Var>& layers) {
  if (layers.empty()) throw std::invalid_argument("flow produced no layer outputs");
  return layers[0].tape().constant(Tensor::scalar(0.0));
}

}  // namespace

void LossWeights::validate() const {
  if (!(nll > 0.0)) throw std::invalid_argument("lambda1 (nll weight) must be > 0");
  if (kinetic < 0.0 || prior < 0.0) {
    throw std::invalid_argument("lambda2 and lambda3 must be >= 0");
  }
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (clip_norm < 0.0) throw std::invalid_argument("clip_norm must be >= 0");
  weights.validate();
}

Var nll_term(const flow::DensityValue& density) {
  check_finite_rows(density.log_prob.value());
  return -diff::mean(density.log_prob);
}

Var kinetic_term(const std::vector<Var>& layers) {
  if (layers.size() < 2) {
    static bool warned = false;
    if (!warned) {
      std::cerr << "warning: kinetic term needs at least two flow layers; using 0\n";
      warned = true;
    }
    return zero_on(layers);
  }
  Var acc;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    Var step = diff::row_norm(layers[l + 1] - layers[l]);
    acc = acc.valid() ? acc + step : step;
  }
  return diff::mean(acc) * (1.0 / static_cast<double>(layers.size() - 1));
}

Var prior_term(const std::vector<Var>& layers, const flow::BaseParams& base) {
  if (layers.size() < 2) return zero_on(layers);
  Var acc;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    Var lp = flow::Flow::base_log_prob(layers[l], base);
    acc = acc.valid() ? acc + lp : lp;
  }
  return -diff::mean(acc) * (1.0 / static_cast<double>(layers.size() - 1));
}

LossBreakdown total_loss(const Model& model, Tape& tape, const Tensor& contexts,
                         const Tensor& targets, const LossWeights& weights) {
  Var ctx = model.embed(tape, contexts);
  const auto density = model.flow.log_prob(tape.constant(targets), ctx);
  LossBreakdown out;
  out.nll = nll_term(density);
  const auto& layers = density.forward.layers;
  if (layers.size() >= 2) {
    out.kinetic = kinetic_term(layers);
    out.prior = prior_term(layers, density.base);
  } else {
    out.kinetic = out.prior = tape.constant(Tensor::scalar(0.0));
  }
  out.total = out.nll * weights.nll;
  if (weights.kinetic > 0.0) out.total = out.total + out.kinetic * weights.kinetic;
  if (weights.prior > 0.0) out.total = out.total + out.prior * weights.prior;
  return out;
}

void Adam::step(const std::vector<diff::Parameter*>& params) {
  if (m_.empty()) {
    for (auto* p : params) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }
  if (m_.size() != params.size()) {
    throw std::invalid_argument("Adam state does not match the parameter list");
  }
  double sq = 0.0;
  for (auto* p : params) {
    for (double g : p->grad.values()) sq += g * g;
  }
  last_norm_ = std::sqrt(sq);
  const double clip = config_.clip_norm > 0.0 && last_norm_ > config_.clip_norm
                          ? config_.clip_norm / last_norm_
                          : 1.0;
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto value = params[k]->value.data();
    const auto grad = params[k]->grad.data();
    auto m = m_[k].data();
    auto v = v_[k].data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i] * clip;
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      value[i] -= config_.learning_rate * (m[i] / c1) /
                  (std::sqrt(v[i] / c2) + config_.epsilon);
    }
  }
}

TrainingData TrainingData::from_windows(const dynamics::WindowedDataset& ds) {
  TrainingData d;
  d.contexts = Tensor({ds.size(), ds.spec.window, ds.obs_dim}, ds.contexts);
  d.targets = Tensor({ds.size(), ds.target_dim}, ds.targets);
  return d;
}

TrainingData TrainingData::unconditional(const Tensor& points) {
  TrainingData d;
  d.targets = points;
  return d;
}

TrainingData TrainingData::gather(const std::vector<std::size_t>& idx) const {
  TrainingData out;
  const std::size_t d = targets.cols();
  out.targets = Tensor({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) out.targets.at(i, j) = targets.at(idx[i], j);
  }
  if (!contexts.empty()) {
    const std::size_t row = contexts.size() / contexts.dim(0);
    diff::Shape shape = contexts.shape();
    shape[0] = idx.size();
    out.contexts = Tensor(shape);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(contexts.values().begin() + idx[i] * row, row,
                  out.contexts.data().begin() + i * row);
    }
  }
  return out;
}

TrainingData TrainingData::subsample(std::size_t n, std::uint64_t seed) const {
  if (n == 0 || n >= size()) return *this;
  std::vector<std::size_t> idx(size());
  std::iota(idx.begin(), idx.end(), 0);
  auto rng = make_stream(seed, 0, 31);
  // partial Fisher-Yates
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return gather(idx);
}

void TrainLog::write_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "iter,total,nll,kinetic,prior,wallclock_ms\n";
  char line[256];
  for (const auto& r : records) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g,%.3f\n", r.iter,
                  r.total, r.nll, r.kinetic, r.prior, r.wallclock_ms);
    out << line;
  }
}

double TrainLog::mean(double TrainRecord::*field, std::size_t from,
                      std::size_t to) const {
  to = std::min(to, records.size());
  if (from >= to) return 0.0;
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += records[i].*field;
  return s / static_cast<double>(to - from);
}

double parameter_norm(const std::vector<const diff::Parameter*>& params) {
  double sq = 0.0;
  for (const auto* p : params) {
    for (double v : p->value.values()) sq += v * v;
  }
  return std::sqrt(sq);
}

TrainLog train(Model& model, const TrainingData& data, const TrainConfig& config,
               const ProgressFn& progress) {
  config.validate();
  if (data.size() == 0) throw std::invalid_argument("training data is empty");
  if (model.conditional() == data.contexts.empty()) {
    throw std::invalid_argument(model.conditional()
                                    ? "conditional model needs context windows"
                                    : "unconditional model given context windows");
  }
  TrainLog log;
  log.weights = config.weights;
  auto params = model.parameters();
  Adam adam(config);
  auto rng = make_stream(config.seed, 0, 30);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  const auto start = std::chrono::steady_clock::now();

  std::vector<std::size_t> idx(config.batch_size);
  for (std::size_t it = 1; it <= config.iterations; ++it) {
    for (auto& i : idx) i = pick(rng);
    const TrainingData batch = data.gather(idx);
    for (auto* p : params) p->zero_grad();

    Tape tape;
    LossBreakdown loss;
    try {
      loss = total_loss(model, tape, batch.contexts, batch.targets, config.weights);
    } catch (const NonFiniteLoss& e) {
      std::vector<std::size_t> rows;
      for (std::size_t r : e.rows) rows.push_back(idx[r]);
      throw NonFiniteLoss("iteration " + std::to_string(it) + ": " + e.what() +
                              " (dataset rows listed in the exception)",
                          std::move(rows));
    }
    if (!std::isfinite(loss.total.value().item())) {
      throw NonFiniteLoss("iteration " + std::to_string(it) + ": non-finite loss",
                          idx);
    }
    tape.backward(loss.total);
    adam.step(params);

    TrainRecord rec;
    rec.iter = it;
    rec.total = loss.total.value().item();
    rec.nll = loss.nll.value().item();
    rec.kinetic = loss.kinetic.value().item();
    rec.prior = loss.prior.value().item();
    rec.wallclock_ms = std::chrono::duration<double, std::milli>(
                           std::chrono::steady_clock::now() - start)
                           .count();
    rec.param_norm = parameter_norm(std::as_const(model).parameters());
    log.records.push_back(rec);
    if (progress) progress(rec);
  }
  return log;
}

}  // namespace nfest::training
