// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance            run all criteria
//   acceptance --only 6   run one (ctest registers each separately)
#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "nfest/diff/grad_check.hpp"
#include "nfest/diff/ops.hpp"
#include "nfest/dynamics/moons.hpp"
#include "nfest/dynamics/sir.hpp"
#include "nfest/dynamics/vehicle.hpp"
#include "nfest/inference/estimate.hpp"
#include "nfest/io/dataset.hpp"
#include "nfest/training/train.hpp"

using namespace nfest;
using diff::Parameter;
using diff::Tape;
using diff::Tensor;
using diff::Var;
using namespace nfest::diff;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

class Report {
 public:
  void add(bool ok, const std::string& what) {
    pass_ = pass_ && ok;
    if (!detail_.empty()) detail_ += "; ";
    detail_ += what + (ok ? "" : " [x]");
  }
  Outcome done() const { return {pass_, detail_}; }

 private:
  bool pass_ = true;
  std::string detail_;
};

Tensor uniform(diff::Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

Tensor normal_rows(std::size_t n, std::size_t d, std::uint64_t seed, double mean = 0.0) {
  auto rng = make_stream(seed, 0, 71);
  Tensor t({n, d});
  for (auto& v : t.data()) v = mean + standard_normal(rng);
  return t;
}

Var weighted_sum(Var y) {
  Tensor w(y.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.1 * static_cast<double>(i % 7);
  return sum(mul(y, y.tape().constant(std::move(w))));
}

training::TrainingData moons_data(std::size_t n, std::uint64_t seed) {
  const auto pts = dynamics::two_moons(n, 0.05, seed);
  return training::TrainingData::unconditional(Tensor({n, 2}, pts));
}

training::Model moons_model(std::uint64_t seed) {
  flow::FlowConfig fc;
  fc.seed = seed;
  return training::Model::create(fc, std::nullopt);
}

double quadrature_mass(const flow::Flow& f, const Tensor& ctx) {
  const std::size_t n = 400;
  const double lo = -6.0, step = 12.0 / n;
  Tensor grid({n * n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      grid.at(i * n + j, 0) = lo + (static_cast<double>(i) + 0.5) * step;
      grid.at(i * n + j, 1) = lo + (static_cast<double>(j) + 0.5) * step;
    }
  }
  double mass = 0.0;
  for (double lp : f.log_prob_values(grid, ctx)) mass += std::exp(lp);
  return mass * step * step;
}

// Windowed model on a trajectory set.
struct Fitted {
  training::Model model;
  training::TrainLog log;
};

Fitted fit_windows(const dynamics::TrajectorySet& set, const dynamics::WindowSpec& spec,
                   encoders::EncoderKind kind, const training::TrainConfig& tc,
                   std::size_t max_windows) {
  const auto w = dynamics::make_windows(set, spec);
  encoders::EncoderConfig ec;
  ec.kind = kind;
  ec.input_dim = w.obs_dim;
  ec.window = spec.window;
  ec.seed = tc.seed + 1;
  flow::FlowConfig fc;
  fc.dim = w.target_dim;
  fc.seed = tc.seed;
  Fitted out{training::Model::create(fc, ec), {}};
  out.model.window = spec;
  out.model.normalizer = w.normalizer;
  const auto data = training::TrainingData::from_windows(w).subsample(max_windows, tc.seed);
  out.log = training::train(out.model, data, tc);
  return out;
}

// ---------------------------------------------------------------- criteria

Outcome gradients() {
  Report rep;
  Rng rng = make_stream(42, 0, 1);
  const double h = 1e-4;
  double worst = 0.0;
  auto check = [&](const diff::LossFn& f, std::vector<Parameter*> ps) {
    worst = std::max(worst, diff::grad_check(f, ps, h).max_rel_error);
  };
  using diff::Elementwise;
  using diff::Reduction;

  Parameter a("a", uniform({3, 4}, rng)), b("b", uniform({3, 4}, rng, 0.5, 2.0));
  Parameter bt("bt", uniform({3, 1}, rng, 0.5, 2.0)), bs("bs", uniform({1}, rng, 0.5, 2.0));
  for (auto k : {Elementwise::kAdd, Elementwise::kSub, Elementwise::kMul, Elementwise::kDiv}) {
    for (Parameter* rhs : {&b, &bt, &bs}) {
      check([&](Tape& t) { return weighted_sum(elementwise(k, t.param(a), t.param(*rhs))); },
            {&a, rhs});
    }
  }
  Parameter pos("pos", uniform({2, 5}, rng, 0.2, 2.0)), u("u", uniform({2, 5}, rng));
  for (auto k : {Elementwise::kExp, Elementwise::kTanh, Elementwise::kSilu, Elementwise::kNeg,
                 Elementwise::kSigmoid, Elementwise::kSoftplus, Elementwise::kSquare}) {
    check([&](Tape& t) { return weighted_sum(elementwise(k, t.param(u))); }, {&u});
  }
  check([&](Tape& t) { return weighted_sum(log(t.param(pos))); }, {&pos});
  check([&](Tape& t) {
    return weighted_sum(clamp(add_scalar(scale(t.param(u), 2.0), 0.1), -1.0, 1.5));
  }, {&u});

  Parameter m1("m1", uniform({3, 4}, rng)), m2("m2", uniform({4, 5}, rng));
  Parameter x3("x3", uniform({2, 3, 4}, rng)), bias("bias", uniform({5}, rng));
  Parameter p("p", uniform({2, 3, 4}, rng)), q("q", uniform({2, 4, 3}, rng));
  Parameter r("r", uniform({2, 5, 4}, rng));
  check([&](Tape& t) { return weighted_sum(matmul(t.param(m1), t.param(m2))); }, {&m1, &m2});
  check([&](Tape& t) {
    return weighted_sum(linear(t.param(x3), t.param(m2), t.param(bias)));
  }, {&x3, &m2, &bias});
  check([&](Tape& t) { return weighted_sum(bmm(t.param(p), t.param(q))); }, {&p, &q});
  check([&](Tape& t) { return weighted_sum(bmm(t.param(p), t.param(r), true)); }, {&p, &r});

  Parameter c("c", uniform({3, 4, 2}, rng));
  for (auto k : {Reduction::kSum, Reduction::kMean, Reduction::kMax}) {
    check([&](Tape& t) { return reduce(k, t.param(c)); }, {&c});
    for (std::size_t axis = 0; axis < 3; ++axis) {
      check([&](Tape& t) { return weighted_sum(reduce(k, t.param(c), axis)); }, {&c});
    }
  }

  Parameter sa("sa", uniform({2, 3, 3}, rng)), sb("sb", uniform({2, 3, 2}, rng));
  std::vector<bool> causal{true, false, false, true, true, false, true, true, true};
  check([&](Tape& t) { return weighted_sum(softmax_masked(t.param(sa), causal, 3, 3)); }, {&sa});
  check([&](Tape& t) {
    auto joined = concat({t.param(sa), t.param(sb)}, 2);
    return weighted_sum(gather_last(slice(reshape(joined, {6, 5}), 1, 1, 3), {2, 0, 1, 0}));
  }, {&sa, &sb});

  Parameter nx("nx", uniform({4, 5}, rng)), ng("ng", uniform({5}, rng)), nb("nb", uniform({5}, rng));
  check([&](Tape& t) { return weighted_sum(row_norm(t.param(nx))); }, {&nx});
  check([&](Tape& t) {
    return weighted_sum(layer_norm(t.param(nx), t.param(ng), t.param(nb)));
  }, {&nx, &ng, &nb});
  check([&](Tape& t) { return weighted_sum(rms_norm(t.param(nx), t.param(ng))); }, {&nx, &ng});

  Parameter cx("cx", uniform({2, 5, 3}, rng)), ck("ck", uniform({4, 3}, rng));
  Parameter cb("cb", uniform({3}, rng));
  check([&](Tape& t) {
    return weighted_sum(causal_depthwise_conv(t.param(cx), t.param(ck), t.param(cb)));
  }, {&cx, &ck, &cb});
  Parameter delta("delta", uniform({2, 5, 3}, rng, 0.05, 1.5));
  Parameter sA("sA", uniform({3, 4}, rng, -2.0, -0.1));
  Parameter sB("sB", uniform({2, 5, 4}, rng)), sC("sC", uniform({2, 5, 4}, rng));
  check([&](Tape& t) {
    return weighted_sum(selective_scan(t.param(cx), t.param(delta), t.param(sA), t.param(sB),
                                       t.param(sC)));
  }, {&cx, &delta, &sA, &sB, &sC});
  rep.add(worst < 1e-5, "primitives max rel err " + fmt("%.2e", worst));

  double e2e = 0.0;
  for (auto kind : {encoders::EncoderKind::kMlp, encoders::EncoderKind::kTransformer,
                    encoders::EncoderKind::kSsm}) {
    encoders::EncoderConfig ec;
    ec.kind = kind;
    ec.mlp_hidden = 8;
    ec.model_dim = 8;
    ec.n_encoder_layers = ec.n_decoder_layers = 1;
    ec.seed = 6;
    flow::FlowConfig fc;
    fc.n_layers = 3;
    fc.seed = 5;
    auto m = training::Model::create(fc, ec);
    m.flow.randomize(31, 0.3);
    const Tensor ctx = normal_rows(30, 2, 32).reshaped({6, 5, 2});
    const Tensor y = normal_rows(6, 2, 33);
    auto loss = [&](Tape& t) { return training::total_loss(m, t, ctx, y, {1.0, 0.1, 0.01}).total; };
    const auto res = diff::grad_check(loss, m.parameters(), h, 10, 34);
    e2e = std::max(e2e, res.checked == 10 ? res.max_rel_error : 1.0);
  }
  rep.add(e2e < 1e-4, "end-to-end (mlp, transformer, ssm) max rel err " + fmt("%.2e", e2e));
  return rep.done();
}

Outcome flow_invertibility() {
  Report rep;
  flow::FlowConfig fc;
  fc.seed = 3;
  flow::Flow f(fc);
  f.randomize(11, 0.4);
  const Tensor x = normal_rows(1000, 2, 12);
  const Tensor ctx = normal_rows(1000, 4, 13);
  Tape tape(Tape::Mode::kInference);
  const auto z = f.forward_map(tape.constant(x), tape.constant(ctx)).z.value();
  const Tensor back = f.inverse_map(z, ctx);
  double err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) err = std::max(err, std::abs(back[i] - x[i]));
  rep.add(err < 1e-9, "roundtrip max err " + fmt("%.2e", err));

  const Tensor one_ctx = normal_rows(1, 4, 14);
  const double fresh = quadrature_mass(flow::Flow(fc), one_ctx);
  // wider randomizations put visible mass outside the quadrature box
  flow::Flow mild(fc);
  mild.randomize(21, 0.3);
  const double random = quadrature_mass(mild, one_ctx);
  rep.add(std::abs(fresh - 1.0) < 0.02, "untrained mass " + fmt("%.4f", fresh));
  rep.add(std::abs(random - 1.0) < 0.02, "randomized mass " + fmt("%.4f", random));

  auto m = moons_model(21);
  training::TrainConfig tc;
  tc.iterations = 1500;
  tc.batch_size = 512;
  tc.seed = 21;
  training::train(m, moons_data(20000, 21), tc);
  const double trained = quadrature_mass(m.flow, Tensor{});
  rep.add(std::abs(trained - 1.0) < 0.02, "two-moons-trained mass " + fmt("%.4f", trained));
  return rep.done();
}

Outcome kl_oracle() {
  Report rep;
  double shifted = 0.0, same = 0.0;
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    const Tensor p = normal_rows(10000, 1, 100 + trial);
    shifted += inference::kl_knn(normal_rows(10000, 1, 200 + trial, 0.0), normal_rows(10000, 1, 300 + trial, 1.0));
    same += inference::kl_knn(normal_rows(10000, 1, 400 + trial), p);
  }
  shifted /= 10.0;
  same /= 10.0;
  rep.add(std::abs(shifted - 0.5) <= 0.15, "KL(N(0,1)||N(1,1)) mean " + fmt("%.4f", shifted));
  rep.add(std::abs(same) <= 0.1, "same-distribution mean " + fmt("%.4f", same));
  return rep.done();
}

// Mean NLL of the maximum-likelihood Gaussian on the same points.
double gaussian_nll(const Tensor& pts) {
  const std::size_t n = pts.rows(), d = pts.cols();
  Eigen::MatrixXd X(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) X(i, j) = pts.at(i, j);
  }
  const Eigen::RowVectorXd mu = X.colwise().mean();
  const Eigen::MatrixXd C = X.rowwise() - mu;
  const Eigen::MatrixXd cov = C.transpose() * C / static_cast<double>(n);
  return 0.5 * (static_cast<double>(d) * (std::log(2.0 * std::numbers::pi) + 1.0) +
                std::log(cov.determinant()));
}

Outcome two_moons() {
  Report rep;
  const auto data = moons_data(20000, 4);
  auto m = moons_model(4);
  training::TrainConfig tc;
  tc.iterations = 3000;
  tc.batch_size = 512;
  tc.learning_rate = 1e-3;
  tc.seed = 4;
  const auto log = training::train(m, data, tc);
  const double nll = log.mean(&training::TrainRecord::nll, 2900, 3000);
  const double oracle = gaussian_nll(data.targets);
  rep.add(nll < oracle, "final NLL " + fmt("%.4f", nll) + " vs Gaussian " + fmt("%.4f", oracle));

  auto rng = make_stream(4, 0, 5);
  const auto s = m.flow.sample(1000, Tensor{}, rng);
  std::size_t upper = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    upper += dynamics::nearest_arc(s.x.at(i, 0), s.x.at(i, 1)).moon == 0;
  }
  const double frac = static_cast<double>(upper) / 1000.0;
  rep.add(std::min(frac, 1.0 - frac) >= 0.25, "upper-moon share " + fmt("%.3f", frac));
  return rep.done();
}

Outcome kinetic() {
  Report rep;
  const auto data = moons_data(20000, 8);
  double nll[2], kin[2];
  for (int run = 0; run < 2; ++run) {
    auto m = moons_model(8);
    training::TrainConfig tc;
    tc.iterations = 3000;
    tc.batch_size = 512;
    tc.seed = 8;
    tc.weights.kinetic = run == 0 ? 0.0 : 0.1;
    const auto log = training::train(m, data, tc);
    nll[run] = log.mean(&training::TrainRecord::nll, 2900, 3000);
    kin[run] = log.mean(&training::TrainRecord::kinetic, 2900, 3000);
  }
  const double drop = 1.0 - kin[1] / kin[0];
  const double worse = nll[1] > nll[0] ? (nll[1] - nll[0]) / std::abs(nll[0]) : 0.0;
  rep.add(drop >= 0.20, "kinetic " + fmt("%.4f", kin[0]) + " -> " + fmt("%.4f", kin[1]) +
                            " (" + fmt("%.1f", 100 * drop) + "% lower)");
  rep.add(worse <= 0.15, "NLL " + fmt("%.4f", nll[0]) + " -> " + fmt("%.4f", nll[1]) + " (" +
                             fmt("%+.1f", 100 * (nll[1] - nll[0]) / std::abs(nll[0])) + "%)");
  return rep.done();
}

// Samples from the moment-matched Gaussian of `truth`.
Tensor gaussian_baseline(const Tensor& truth, std::size_t n, std::uint64_t seed) {
  const std::size_t k = truth.rows(), d = truth.cols();
  Eigen::MatrixXd X(k, d);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < d; ++j) X(i, j) = truth.at(i, j);
  }
  const Eigen::RowVectorXd mu = X.colwise().mean();
  const Eigen::MatrixXd C = X.rowwise() - mu;
  const Eigen::MatrixXd L = (C.transpose() * C / static_cast<double>(k - 1)).llt().matrixL();
  auto rng = make_stream(seed, 0, 72);
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd z(d);
    for (std::size_t j = 0; j < d; ++j) z(j) = standard_normal(rng);
    const Eigen::VectorXd x = mu.transpose() + L * z;
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = x(j);
  }
  return out;
}

constexpr std::size_t kVehicleHorizon = 40;

Outcome vehicle_bimodality() {
  Report rep;
  dynamics::VehicleSimOptions vo;
  const std::uint64_t data_seed = 61;
  const auto set = dynamics::vehicle_dataset(vo, 600, data_seed);
  dynamics::WindowSpec spec;
  spec.window = 5;
  spec.horizon = kVehicleHorizon;
  spec.context_noise_sigma = 0.0;
  spec.seed = 61;
  training::TrainConfig tc;
  tc.iterations = 8000;
  tc.batch_size = 512;
  tc.seed = 61;
  auto fit = fit_windows(set, spec, encoders::EncoderKind::kMlp, tc, 50000);

  // held-out runs, context ending at the switch (record 55, t = 5.5)
  const std::uint64_t held_seed = 62;
  const std::size_t last = 55;
  double kl_flow = 0.0, kl_gauss = 0.0;
  double min_share = 1.0;
  const std::size_t n_ctx = 5;
  for (std::size_t c = 0; c < n_ctx; ++c) {
    const auto run = dynamics::vehicle_simulate(vo, held_seed, c);
    const auto ctx = dynamics::raw_context(run.noisy, last + kVehicleHorizon, spec);
    const Tensor truth({1000, 2}, dynamics::vehicle_continuations(vo, held_seed, c, last,
                                                                  kVehicleHorizon, 1000, 63 + c));
    inference::EstimateOptions eo;
    eo.seed = 64 + c;
    eo.contour_levels.clear();
    const auto est = inference::estimate_state(fit.model, ctx, eo, truth);
    kl_flow += *est.kl;
    kl_gauss += inference::kl_knn(gaussian_baseline(truth, 1000, 65 + c), truth);

    // branch coordinate: principal axis of the ground truth, split at its median
    Eigen::MatrixXd X(1000, 2);
    for (std::size_t i = 0; i < 1000; ++i) X(i, 0) = truth.at(i, 0), X(i, 1) = truth.at(i, 1);
    const Eigen::RowVector2d mu = X.colwise().mean();
    const Eigen::MatrixXd C = X.rowwise() - mu;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(C.transpose() * C);
    const Eigen::Vector2d axis = es.eigenvectors().col(1);
    std::vector<double> proj(1000);
    for (std::size_t i = 0; i < 1000; ++i) proj[i] = C.row(i).dot(axis);
    std::nth_element(proj.begin(), proj.begin() + 500, proj.end());
    const double median = proj[500];
    std::size_t pos = 0;
    for (std::size_t i = 0; i < 1000; ++i) {
      const Eigen::RowVector2d s(est.samples.at(i, 0), est.samples.at(i, 1));
      pos += (s - mu).dot(axis) > median;
    }
    const double share = static_cast<double>(pos) / 1000.0;
    min_share = std::min(min_share, std::min(share, 1.0 - share));
  }
  kl_flow /= n_ctx;
  kl_gauss /= n_ctx;
  rep.add(min_share >= 0.20, "smallest branch share " + fmt("%.3f", min_share));
  rep.add(kl_flow < kl_gauss, "kl_knn flow " + fmt("%.3f", kl_flow) + " vs Gaussian " +
                                  fmt("%.3f", kl_gauss));
  return rep.done();
}

dynamics::Trajectory sir_truth(double noise, std::uint64_t seed) {
  dynamics::SirParams p;
  p.noise_sigma = noise;
  return dynamics::sir_simulate(p, dynamics::SirState{}, 1000, seed);
}

Outcome sir_estimation() {
  Report rep;
  const auto traj = sir_truth(0.001, 71);
  for (auto dir : {dynamics::Direction::kForward, dynamics::Direction::kBackward}) {
    dynamics::WindowSpec spec;
    spec.direction = dir;
    spec.context_noise_sigma = 0.0;
    spec.seed = 71;
    training::TrainConfig tc;
    tc.iterations = 12000;
    tc.batch_size = 512;
    tc.seed = 71;
    auto fit = fit_windows({traj}, spec, encoders::EncoderKind::kMlp, tc, 0);
    const auto [lo, hi] = dynamics::target_range(traj.length(), spec);
    auto rng = make_stream(72, 0, 73);
    std::uniform_int_distribution<std::size_t> pick(lo, hi);
    double worst[3] = {0, 0, 0};
    std::size_t ok = 0;
    for (std::size_t i = 0; i < 100; ++i) {
      const std::size_t k = pick(rng);
      inference::EstimateOptions eo;
      eo.seed = 74 + i;
      eo.contour_levels.clear();
      const auto est = inference::estimate_state(fit.model, dynamics::raw_context(traj, k, spec), eo);
      bool good = true;
      for (std::size_t j = 0; j < 3; ++j) {
        const double err = std::abs(est.mean[j] - traj.state(k)[j]);
        worst[j] = std::max(worst[j], err);
        good = good && err <= (j == 1 ? 0.02 : 0.01);
      }
      ok += good;
    }
    rep.add(ok == 100, dynamics::to_string(dir) + " " + std::to_string(ok) +
                           "/100 within tolerance, max |err| S " + fmt("%.4f", worst[0]) +
                           " I " + fmt("%.4f", worst[1]) + " R " + fmt("%.4f", worst[2]));
  }
  return rep.done();
}

Outcome simulators() {
  Report rep;
  dynamics::SirParams p;
  dynamics::SirState s;
  double drift = 0.0;
  for (int k = 0; k < 10000; ++k) {
    s = dynamics::rk4_step(s, p, 1.0);
    drift = std::max(drift, std::abs(s.total() - 1.0));
  }
  rep.add(drift < 1e-9, "conservation drift " + fmt("%.1e", drift));

  auto integrate = [&](double dt) {
    dynamics::SirState x;
    const auto n = static_cast<int>(std::lround(100.0 / dt));
    for (int k = 0; k < n; ++k) x = dynamics::rk4_step(x, p, dt);
    return x;
  };
  const auto ref = integrate(1.0 / 64);
  const double e1 = std::abs(integrate(4.0).I - ref.I);
  const double e2 = std::abs(integrate(2.0).I - ref.I);
  const double ratio = e1 / e2;
  rep.add(ratio >= 12 && ratio <= 40, "Richardson ratio " + fmt("%.2f", ratio));

  dynamics::VehicleSimOptions vo;
  vo.psi = 1.0;
  const auto up = dynamics::vehicle_simulate(vo, 5, 0);
  vo.psi = -1.0;
  const auto down = dynamics::vehicle_simulate(vo, 5, 0);
  double before = 0.0, after = 0.0;
  for (std::size_t k = 0; k < up.noisy.length(); ++k) {
    double d = 0.0;
    for (std::size_t j = 0; j < 2; ++j) {
      d = std::max(d, std::abs(up.noisy.state(k)[j] - down.noisy.state(k)[j]));
    }
    if (up.noisy.times[k] < 5.5) before = std::max(before, d);
    else after = std::max(after, d);
  }
  rep.add(before <= 1e-12, "psi = +-1 before t=5.5 max diff " + fmt("%.1e", before));
  rep.add(after > 0.1, "after max diff " + fmt("%.3f", after));
  return rep.done();
}

Outcome rollout_mechanics() {
  Report rep;
  const auto traj = sir_truth(0.0, 91);
  dynamics::WindowSpec spec;
  spec.context_noise_sigma = 0.0;
  spec.seed = 91;
  training::TrainConfig tc;
  tc.iterations = 6000;
  tc.batch_size = 512;
  tc.seed = 91;
  auto fit = fit_windows({traj}, spec, encoders::EncoderKind::kMlp, tc, 0);

  const std::size_t start = 200;
  const auto ctx = dynamics::raw_context(traj, start, spec);
  inference::RolloutConfig one;
  one.n_steps = 1;
  one.estimate.seed = 92;
  const auto r1 = inference::rollout(fit.model, ctx, one);
  const auto e1 = inference::estimate_state(fit.model, ctx, one.estimate);
  const bool same = r1.steps[0].samples.values() == e1.samples.values() &&
                    r1.steps[0].log_prob == e1.log_prob && r1.steps[0].mean == e1.mean;
  rep.add(same, std::string("single step ") + (same ? "bit-identical" : "differs") +
                    " to estimate_state");

  for (std::size_t steps : {7u, 28u}) {
    double worst = 0.0;
    for (std::size_t s0 : {100u, 200u, 400u}) {
      inference::RolloutConfig rc;
      rc.n_steps = steps;
      rc.estimate.seed = 93;
      rc.estimate.contour_levels.clear();
      const auto r = inference::rollout(fit.model, dynamics::raw_context(traj, s0, spec), rc);
      std::vector<double> pred, act;
      for (std::size_t s = 0; s < steps; ++s) {
        for (std::size_t j = 0; j < 3; ++j) {
          pred.push_back(r.steps[s].mean[j]);
          act.push_back(traj.state(s0 + s)[j]);
        }
      }
      worst = std::max(worst, inference::mape(pred, act));
    }
    rep.add(worst < 10.0, std::to_string(steps) + "-step worst MAPE " + fmt("%.2f", worst) + "%");
  }
  return rep.done();
}

Outcome joint_parameters() {
  Report rep;
  dynamics::SirEnsembleOptions eo;
  const auto train_set = dynamics::sir_ensemble(eo, 101);
  dynamics::WindowSpec spec;
  spec.window = 20;
  spec.include_params = true;
  spec.context_noise_sigma = 0.0;
  spec.seed = 101;
  // beta is only visible while the epidemic moves; the flat tail says nothing about it
  const std::size_t active_end = 300;
  const auto w = dynamics::make_windows(train_set, spec);
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < w.size(); ++i)
    if (w.target_step[i] <= active_end) active.push_back(i);
  training::TrainConfig tc;
  tc.iterations = 40000;
  tc.batch_size = 512;
  tc.learning_rate = 3e-3;
  tc.seed = 101;
  encoders::EncoderConfig ec;
  ec.kind = encoders::EncoderKind::kMlp;
  ec.input_dim = w.obs_dim;
  ec.window = spec.window;
  ec.seed = tc.seed + 1;
  flow::FlowConfig fc;
  fc.dim = w.target_dim;
  fc.seed = tc.seed;
  Fitted fit{training::Model::create(fc, ec), {}};
  fit.model.window = spec;
  fit.model.normalizer = w.normalizer;
  const auto data =
      training::TrainingData::from_windows(w).gather(active).subsample(100000, tc.seed);
  fit.log = training::train(fit.model, data, tc);

  eo.n_trajectories = 20;
  const auto held = dynamics::sir_ensemble(eo, 102);
  auto rng = make_stream(103, 0, 74);
  std::size_t inside = 0, total = 0;
  double err = 0.0;
  for (std::size_t i = 0; i < held.size(); ++i) {
    // contexts while the epidemic is active
    std::uniform_int_distribution<std::size_t> pick(spec.window + 10, active_end);
    const std::size_t k = pick(rng);
    inference::EstimateOptions o;
    o.seed = 104 + i;
    const auto j = inference::joint_state_param_estimate(
        fit.model, dynamics::raw_context(held[i], k, spec), o);
    for (std::size_t s = 0; s < j.report.samples.rows(); ++s) {
      const double b = j.report.samples.at(s, 3);
      inside += b >= eo.beta.lo && b <= eo.beta.hi;
      ++total;
    }
    err += std::abs(j.beta_mean - held[i].params[0]);
  }
  err /= static_cast<double>(held.size());
  const double share = static_cast<double>(inside) / static_cast<double>(total);
  rep.add(share >= 0.99, "beta samples in prior support " + fmt("%.4f", share));
  rep.add(err <= 0.005, "mean |posterior mean beta - beta| " + fmt("%.5f", err));
  return rep.done();
}

// ------------------------------------------------------------- determinism

int run(const std::string& cmd) { return std::system(cmd.c_str()); }

std::string drop_last_column(const std::string& text) {
  std::istringstream in(text);
  std::string out, line;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + '\n';
  return out;
}

Outcome determinism(const std::string& cli) {
  Report rep;
  const fs::path root = fs::temp_directory_path() / "nfest_acceptance_determinism";
  fs::remove_all(root);
  const std::vector<std::string> steps = {
      "simulate --system sir --seed 5 --out sir.csv",
      "simulate --system vehicle --trajectories 30 --seed 5 --out vehicle.csv",
      "simulate --system sir-ensemble --trajectories 6 --steps 200 --seed 5 --out ens.csv",
      "simulate --system two-moons --points 2000 --seed 5 --out moons.csv",
      "ingest ext.csv --out ext_ds.csv --export ext_back.csv",
      "train --data sir.csv --iterations 40 --batch-size 64 --seed 5 --out sir.ckpt --log sir_log.csv",
      "train --data sir.csv --direction backward --encoder transformer --model-dim 8 --encoder-layers 1 "
      "--decoder-layers 1 --iterations 10 --batch-size 32 --seed 5 --out sir_bw.ckpt --log bw_log.csv",
      "train --data vehicle.csv --encoder ssm --horizon 3 --iterations 20 --batch-size 64 "
      "--max-windows 500 --seed 5 --out veh.ckpt --log veh_log.csv",
      "train --data ens.csv --include-params --iterations 20 --batch-size 64 --seed 5 "
      "--out ens.ckpt --log ens_log.csv",
      "train --data moons.csv --iterations 20 --batch-size 64 --seed 5 --out moons.ckpt "
      "--log moons_log.csv",
      "estimate --checkpoint sir.ckpt --data sir.csv --step 300 --samples 300 --seed 5 --out est",
      "estimate --checkpoint veh.ckpt --data vehicle.csv --traj 3 --at t=5.5 --truth 200 "
      "--samples 200 --seed 5 --out veh_est",
      "estimate --checkpoint ens.ckpt --data ens.csv --traj 1 --step 50 --samples 200 --seed 5 "
      "--out joint",
      "rollout --checkpoint sir.ckpt --data sir.csv --start 100 --window 7 --samples 200 --seed 5 "
      "--out bands.csv",
      "rollout --checkpoint sir.ckpt --data sir.csv --window 5 --aggregation sample --samples 100 "
      "--seed 5 --out bands_s.csv",
      "evaluate --checkpoint sir.ckpt --checkpoint sir.ckpt --data sir.csv --locations 5 "
      "--samples 100 --seed 5 --out eval.csv",
  };
  bool all_ran = true;
  for (const char* rep_dir : {"a", "b"}) {
    const fs::path dir = root / rep_dir;
    fs::create_directories(dir);
    std::ofstream(dir / "ext.csv") << "date,S,I,R\n2020-03-01,0.99,0.01,0\n"
                                      "2020-03-02,0.985,0.012,0.003\n2020-03-05,0.98,0.014,0.006\n";
    for (const auto& s : steps) {
      const std::string cmd = "cd '" + dir.string() + "' && NFEST_OUTPUT_ROOT= '" + cli + "' " + s +
                              " > /dev/null 2>&1";
      if (run(cmd) != 0) {
        all_ran = false;
        rep.add(false, std::string("failed: ") + s);
      }
    }
    if (run("cd '" + dir.string() + "' && '" + cli + "' show-config > config.ini 2>&1") != 0) {
      all_ran = false;
    }
  }
  rep.add(all_ran, std::to_string(steps.size() + 1) + " commands ran twice");

  std::size_t compared = 0, differing = 0;
  std::string which;
  for (const auto& entry : fs::directory_iterator(root / "a")) {
    const auto name = entry.path().filename().string();
    const auto other = root / "b" / name;
    std::string x = io::slurp(entry.path().string());
    std::string y = fs::exists(other) ? io::slurp(other.string()) : std::string("\x01missing");
    if (name.size() > 8 && name.substr(name.size() - 8) == "_log.csv") {
      x = drop_last_column(x);
      y = drop_last_column(y);
    }
    ++compared;
    if (x != y) {
      ++differing;
      which += " " + name;
    }
  }
  rep.add(differing == 0 && compared > 20,
          std::to_string(compared) + " artifacts compared, " + std::to_string(differing) +
              " differ" + which);
  return rep.done();
}

struct Criterion {
  int id;
  const char* title;
  double limit_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int only = 0;
  std::string cli = NFEST_CLI_PATH;
  app.add_option("--only", only, "Run a single criterion (1-11)");
  app.add_option("--cli", cli, "nfest executable used by the determinism check");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria = {
      {1, "gradients match central differences", 60, gradients},
      {2, "flow invertibility and normalization", 120, flow_invertibility},
      {3, "kNN KL estimator oracle", 60, kl_oracle},
      {4, "two-moons training beats a Gaussian", 600, two_moons},
      {5, "kinetic regularization", 1200, kinetic},
      {6, "vehicle bifurcation bimodality", 1800, vehicle_bimodality},
      {7, "SIR forward/backward estimation", 1800, sir_estimation},
      {8, "simulator correctness", 60, simulators},
      {9, "rollout mechanics", 600, rollout_mechanics},
      {10, "joint parameter estimation", 2700, joint_parameters},
      {11, "determinism", 600, [&] { return determinism(cli); }},
  };
  bool all = true;
  bool ran = false;
  for (const auto& c : criteria) {
    if (only != 0 && c.id != only) continue;
    ran = true;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.limit_s;
    const bool pass = o.pass && in_time;
    all = all && pass;
    std::printf("criterion %2d %s: %s (%s; %.1f s%s)\n", c.id, c.title, pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs, in_time ? "" : ", over time limit");
    std::fflush(stdout);
  }
  if (!ran) {
    std::fprintf(stderr, "no criterion %d\n", only);
    return 2;
  }
  return all ? 0 : 1;
}
