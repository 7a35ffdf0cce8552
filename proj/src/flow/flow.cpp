#include "nfest/flow/flow.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace nfest::flow {
namespace {

using diff::ShapeError;

constexpr double kHalfLog2Pi = 0.91893853320467274178;

std::string layer_name(std::size_t k, const char* what) {
  return "flow.layer" + std::to_string(k) + "." + what;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](double v) { return std::isfinite(v); });
}

double soft_bound(double raw, double bound) {
  return bound * std::tanh(raw / bound);
}

}  // namespace

void FlowConfig::validate() const {
  if (dim < 1) throw std::invalid_argument("flow dim must be >= 1");
  if (hidden < 1) throw std::invalid_argument("flow hidden must be >= 1");
  if (base_hidden < 1) {
    throw std::invalid_argument("flow base_hidden must be >= 1");
  }
  if (!(log_scale_bound > 0.0)) {
    throw std::invalid_argument("flow log_scale_bound must be positive");
  }
}

Flow::Flow(const FlowConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.dim, h = config_.hidden, c = config_.context;
  auto rng = make_stream(config_.seed, 0, 10);

  lower_mask_ = Tensor({d, d});
  upper_mask_ = Tensor({d, d});
  eye_ = Tensor({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    eye_.at(i, i) = 1.0;
    for (std::size_t j = 0; j < d; ++j) {
      lower_mask_.at(i, j) = j < i ? 1.0 : 0.0;
      upper_mask_.at(i, j) = j > i ? 1.0 : 0.0;
    }
  }

  // Hidden unit k has degree k mod d; degree-0 units see only the context.
  std::vector<std::size_t> degree(h);
  for (std::size_t k = 0; k < h; ++k) degree[k] = k % d;

  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    Layer layer;
    layer.perm.resize(d);
    std::iota(layer.perm.begin(), layer.perm.end(), 0);
    if (d == 2) {
      std::reverse(layer.perm.begin(), layer.perm.end());
    } else if (d > 2) {
      std::shuffle(layer.perm.begin(), layer.perm.end(), rng);
    }

    layer.lower = params_.add(layer_name(l, "lu.lower"), Tensor({d, d}));
    layer.upper = params_.add(layer_name(l, "lu.upper"), Tensor({d, d}));
    layer.log_diag = params_.add(layer_name(l, "lu.log_diag"), Tensor({d}));

    layer.m1 = Tensor({d, h});
    layer.m2 = Tensor({h, h});
    layer.m3 = Tensor({h, 2 * d});
    for (std::size_t k = 0; k < h; ++k) {
      for (std::size_t j = 0; j < d; ++j) {
        layer.m1.at(j, k) = degree[k] >= j + 1 ? 1.0 : 0.0;
      }
      for (std::size_t k2 = 0; k2 < h; ++k2) {
        layer.m2.at(k, k2) = degree[k2] >= degree[k] ? 1.0 : 0.0;
      }
      for (std::size_t i = 0; i < d; ++i) {
        const double m = degree[k] <= i ? 1.0 : 0.0;
        layer.m3.at(k, i) = m;
        layer.m3.at(k, d + i) = m;
      }
    }
    layer.w1 = params_.add_uniform(layer_name(l, "made.w1"), {d, h}, d + c, rng);
    layer.b1 = params_.add(layer_name(l, "made.b1"), Tensor({h}));
    if (c > 0) {
      layer.wc = params_.add_uniform(layer_name(l, "made.wc"), {c, h}, d + c, rng);
    }
    layer.w2 = params_.add_uniform(layer_name(l, "made.w2"), {h, h}, h, rng);
    layer.b2 = params_.add(layer_name(l, "made.b2"), Tensor({h}));
    layer.w3 = params_.add(layer_name(l, "made.w3"), Tensor({h, 2 * d}));
    layer.b3 = params_.add(layer_name(l, "made.b3"), Tensor({2 * d}));
    layers_.push_back(std::move(layer));
  }

  if (c > 0) {
    head_w1_ = params_.add_uniform("flow.base.w1", {c, config_.base_hidden}, c, rng);
    head_b1_ = params_.add("flow.base.b1", Tensor({config_.base_hidden}));
    head_w2_ = params_.add("flow.base.w2", Tensor({config_.base_hidden, 2 * d}));
  }
  head_b2_ = params_.add("flow.base.b2", Tensor({2 * d}));
}

Var Flow::linear_map(Tape& tape, const Layer& layer) const {
  const std::size_t d = config_.dim;
  Var lower = params_.on(tape, layer.lower) * tape.constant(lower_mask_) +
              tape.constant(eye_);
  Var diag = tape.constant(eye_) *
             diff::reshape(diff::exp(params_.on(tape, layer.log_diag)), {d, 1});
  Var upper = params_.on(tape, layer.upper) * tape.constant(upper_mask_) + diag;
  return diff::matmul(lower, upper);
}

Var Flow::conditioner(Tape& tape, const Layer& layer, Var y,
                      Var context) const {
  Var h = diff::linear(y, params_.on(tape, layer.w1) * tape.constant(layer.m1),
                       params_.on(tape, layer.b1));
  if (config_.context > 0) {
    h = h + diff::linear(context, params_.on(tape, layer.wc));
  }
  h = diff::tanh(h);
  h = diff::tanh(diff::linear(
      h, params_.on(tape, layer.w2) * tape.constant(layer.m2),
      params_.on(tape, layer.b2)));
  return diff::linear(h, params_.on(tape, layer.w3) * tape.constant(layer.m3),
                      params_.on(tape, layer.b3));
}

ForwardResult Flow::forward_map(Var x, Var context) const {
  const std::size_t d = config_.dim;
  if (x.value().rank() != 2 || x.shape()[1] != d) {
    throw ShapeError("flow input must be [batch, " + std::to_string(d) +
                     "], got " + diff::to_string(x.shape()));
  }
  const std::size_t batch = x.shape()[0];
  if (config_.context > 0) {
    if (!context.valid() || context.value().rank() != 2 ||
        context.shape()[0] != batch || context.shape()[1] != config_.context) {
      throw ShapeError("flow context must be [" + std::to_string(batch) + ", " +
                       std::to_string(config_.context) + "]");
    }
  }
  Tape& tape = x.tape();
  const double bound = config_.log_scale_bound;

  ForwardResult out;
  Var u = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    Var p = d > 1 ? diff::gather_last(u, layer.perm) : u;
    Var y = diff::linear(p, linear_map(tape, layer));
    Var params = conditioner(tape, layer, y, context);
    Var shift = diff::slice(params, 1, 0, d);
    Var log_scale = diff::tanh(diff::slice(params, 1, d, d) * (1.0 / bound)) * bound;
    Var z = y * diff::exp(log_scale) + shift;
    Var ld = diff::reduce(diff::Reduction::kSum, log_scale, 1) +
             diff::sum(params_.on(tape, layer.log_diag));
    out.log_det = out.log_det.valid() ? out.log_det + ld : ld;
    if (!all_finite(z.value())) {
      throw NonFiniteError("flow layer " + std::to_string(l) +
                           " produced a non-finite value");
    }
    out.layers.push_back(z);
    u = z;
  }
  out.z = u;
  if (config_.latent_frame_layers && d > 1) {
    // frame[j] = index in layer l's output of latent coordinate j.
    std::vector<std::size_t> frame(d);
    std::iota(frame.begin(), frame.end(), 0);
    for (std::size_t l = layers_.size(); l-- > 1;) {
      for (auto& f : frame) f = layers_[l].perm[f];
      out.layers[l - 1] = diff::gather_last(out.layers[l - 1], frame);
    }
  }
  if (!out.log_det.valid()) out.log_det = tape.constant(Tensor({batch}));
  return out;
}

BaseParams Flow::base_params(Var context, std::size_t batch, Tape& tape) const {
  const std::size_t d = config_.dim;
  Var raw;
  if (config_.context > 0) {
    Var h = diff::tanh(diff::linear(context, params_.on(tape, head_w1_),
                                    params_.on(tape, head_b1_)));
    raw = diff::linear(h, params_.on(tape, head_w2_), params_.on(tape, head_b2_));
  } else {
    raw = diff::linear(tape.constant(Tensor({batch, 1}, 1.0)),
                       diff::reshape(params_.on(tape, head_b2_), {1, 2 * d}));
  }
  return {diff::slice(raw, 1, 0, d),
          diff::clamp(diff::slice(raw, 1, d, d), -7.0, 7.0)};
}

Var Flow::base_log_prob(Var z, const BaseParams& base) {
  Var e = (z - base.mu) * diff::exp(-base.log_sigma);
  Var per = diff::add_scalar(diff::square(e) * -0.5 - base.log_sigma, -kHalfLog2Pi);
  return diff::reduce(diff::Reduction::kSum, per, 1);
}

DensityValue Flow::log_prob(Var x, Var context) const {
  DensityValue out;
  out.forward = forward_map(x, context);
  out.base = base_params(context, x.shape()[0], x.tape());
  out.log_prob = base_log_prob(out.forward.z, out.base) + out.forward.log_det;
  return out;
}

Tensor Flow::tile_context(const Tensor& context, std::size_t batch) const {
  if (config_.context == 0) return {};
  if (context.rank() != 2 || context.cols() != config_.context) {
    throw ShapeError("flow context must have " + std::to_string(config_.context) +
                     " columns, got " + diff::to_string(context.shape()));
  }
  if (context.rows() == batch) return context;
  if (context.rows() != 1) {
    throw ShapeError("flow context has " + std::to_string(context.rows()) +
                     " rows for a batch of " + std::to_string(batch));
  }
  Tensor out({batch, config_.context});
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(context.values().begin(), context.values().end(),
              out.data().begin() + b * config_.context);
  }
  return out;
}

Tensor Flow::inverse_map(const Tensor& z, const Tensor& context) const {
  const std::size_t d = config_.dim;
  if (z.rank() != 2 || z.cols() != d) {
    throw ShapeError("flow latent must be [batch, " + std::to_string(d) + "]");
  }
  const std::size_t batch = z.rows();
  const Tensor ctx = tile_context(context, batch);
  const double bound = config_.log_scale_bound;

  Tensor u = z;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const Layer& layer = layers_[l];
    // Autoregressive inverse: dimension i only needs y_{<i}.
    Tensor y({batch, d});
    for (std::size_t i = 0; i < d; ++i) {
      Tape tape(Tape::Mode::kInference);
      Var cv = config_.context > 0 ? tape.constant(ctx) : Var{};
      const Tensor& out = conditioner(tape, layer, tape.constant(y), cv).value();
      for (std::size_t b = 0; b < batch; ++b) {
        const double s = soft_bound(out.at(b, d + i), bound);
        y.at(b, i) = (u.at(b, i) - out.at(b, i)) * std::exp(-s);
      }
    }

    Tape tape(Tape::Mode::kInference);
    const Tensor& w = linear_map(tape, layer).value();
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>
        wm(w.data().data(), d, d);
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(wm.transpose());
    if (!(std::abs(lu.determinant()) > 1e-12)) {
      throw SingularLayerError("flow layer " + std::to_string(l) +
                               " has a singular linear map");
    }
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                             Eigen::RowMajor>>
        ym(y.data().data(), batch, d);
    // p W = y  <=>  W^T p^T = y^T
    const Eigen::MatrixXd p = lu.solve(ym.transpose()).transpose();

    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < d; ++j) u.at(b, layer.perm[j]) = p(b, j);
    }
    if (!all_finite(u)) {
      throw NonFiniteError("flow inverse of layer " + std::to_string(l) +
                           " produced a non-finite value");
    }
  }
  return u;
}

std::vector<double> Flow::log_prob_values(const Tensor& x,
                                          const Tensor& context) const {
  Tape tape(Tape::Mode::kInference);
  const Tensor ctx = tile_context(context, x.rows());
  Var cv = config_.context > 0 ? tape.constant(ctx) : Var{};
  return log_prob(tape.constant(x), cv).log_prob.value().values();
}

Samples Flow::sample(std::size_t n, const Tensor& context, Rng& rng) const {
  if (n < 1) throw std::invalid_argument("sample needs n >= 1");
  const std::size_t d = config_.dim;
  const Tensor ctx = tile_context(context, n);
  Tensor z({n, d});
  {
    Tape tape(Tape::Mode::kInference);
    Var cv = config_.context > 0 ? tape.constant(ctx) : Var{};
    const BaseParams base = base_params(cv, n, tape);
    const Tensor& mu = base.mu.value();
    const Tensor& ls = base.log_sigma.value();
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] = mu[i] + std::exp(ls[i]) * standard_normal(rng);
    }
  }
  Samples out;
  out.x = inverse_map(z, ctx);
  out.log_prob = log_prob_values(out.x, ctx);
  return out;
}

std::vector<Tensor> Flow::confidence_contours(const Tensor& context,
                                              const std::vector<double>& levels,
                                              std::size_t points) const {
  if (config_.dim != 2) {
    throw ShapeError("confidence contours need a 2-D flow, this one has d = " +
                     std::to_string(config_.dim));
  }
  if (points < 4) throw std::invalid_argument("contours need >= 4 points");
  const Tensor ctx = tile_context(context, 1);
  double mu[2], sigma[2];
  {
    Tape tape(Tape::Mode::kInference);
    Var cv = config_.context > 0 ? tape.constant(ctx) : Var{};
    const BaseParams base = base_params(cv, 1, tape);
    for (int i = 0; i < 2; ++i) {
      mu[i] = base.mu.value()[i];
      sigma[i] = std::exp(base.log_sigma.value()[i]);
    }
  }
  std::vector<Tensor> out;
  const std::size_t open = points - 1;
  for (double k : levels) {
    Tensor z({open, 2});
    for (std::size_t j = 0; j < open; ++j) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(j) /
                       static_cast<double>(open);
      z.at(j, 0) = mu[0] + sigma[0] * k * std::cos(a);
      z.at(j, 1) = mu[1] + sigma[1] * k * std::sin(a);
    }
    const Tensor x = inverse_map(z, ctx);
    Tensor closed({points, 2});
    std::copy(x.values().begin(), x.values().end(), closed.data().begin());
    closed.at(open, 0) = x.at(0, 0);
    closed.at(open, 1) = x.at(0, 1);
    out.push_back(std::move(closed));
  }
  return out;
}

void Flow::randomize(std::uint64_t seed, double scale) {
  auto rng = make_stream(seed, 0, 11);
  for (auto* p : params_.pointers()) {
    for (auto& v : p->value.data()) v = uniform(rng, -scale, scale);
  }
}

}  // namespace nfest::flow
