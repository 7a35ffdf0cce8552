// nfest: simulate, ingest, train, estimate, rollout, evaluate, show-config.
//
// Exit status: 0 success, 1 runtime failure, 2 configuration error.
// Options may also come from an INI/TOML file given with --config (sections
// named after the verb); flags on the command line win.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "nfest/dynamics/moons.hpp"
#include "nfest/dynamics/sir.hpp"
#include "nfest/dynamics/vehicle.hpp"
#include "nfest/inference/estimate.hpp"
#include "nfest/io/checkpoint.hpp"
#include "nfest/io/external_sir.hpp"
#include "nfest/training/train.hpp"

using namespace nfest;
using io::Json;

namespace {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Relative output paths are placed under $NFEST_OUTPUT_ROOT when set.
std::string output_path(const std::string& p) {
  const char* root = std::getenv("NFEST_OUTPUT_ROOT");
  std::filesystem::path path(p);
  if (root && *root && path.is_relative()) path = std::filesystem::path(root) / path;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  return path.string();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_json(const Json& j, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------- simulate

struct SimulateOpts {
  std::string system = "sir";
  std::string out;
  std::uint64_t seed = 0;
  std::size_t trajectories = 0;  // 0: system default
  std::size_t steps = 0;         // 0: system default
  // vehicle
  double c1 = 0.1, c2 = 0.5, sigma_v = 0.01, sigma_phi = 0.025, dt = 0.1, switch_time = 5.5;
  std::optional<double> psi;
  // sir
  double beta = 0.03, gamma = 0.01, sir_noise = 0.001, sir_dt = 1.0;
  double s0 = 0.99, i0 = 0.01, r0 = 0.0;
  double beta_min = 0.02, beta_max = 0.04, gamma_min = 0.005, gamma_max = 0.025;
  // two-moons
  std::size_t points = 20000;
  double moons_noise = 0.05;
};

Json vehicle_json(const dynamics::VehicleSimOptions& o) {
  Json j{{"n_steps", o.n_steps},
         {"c1", o.params.c1},
         {"c2", o.params.c2},
         {"sigma_v", o.params.sigma_v},
         {"sigma_phi", o.params.sigma_phi},
         {"dt", o.params.dt},
         {"switch_time", o.params.switch_time}};
  j["psi"] = o.psi ? Json(*o.psi) : Json(nullptr);
  return j;
}

dynamics::VehicleSimOptions vehicle_from_json(const Json& j) {
  dynamics::VehicleSimOptions o;
  o.n_steps = j.at("n_steps").get<std::size_t>();
  o.params.c1 = j.at("c1").get<double>();
  o.params.c2 = j.at("c2").get<double>();
  o.params.sigma_v = j.at("sigma_v").get<double>();
  o.params.sigma_phi = j.at("sigma_phi").get<double>();
  o.params.dt = j.at("dt").get<double>();
  o.params.switch_time = j.at("switch_time").get<double>();
  if (!j.at("psi").is_null()) o.psi = j.at("psi").get<double>();
  return o;
}

int run_simulate(const SimulateOpts& o) {
  io::Dataset ds;
  ds.system = o.system;
  ds.meta["seed"] = o.seed;
  if (o.system == "vehicle") {
    dynamics::VehicleSimOptions v;
    v.n_steps = o.steps ? o.steps : 150;
    v.params = {o.c1, o.c2, o.sigma_v, o.sigma_phi, o.dt, o.switch_time, 0.0};
    v.psi = o.psi;
    v.params.validate();
    ds.trajectories = dynamics::vehicle_dataset(v, o.trajectories ? o.trajectories : 10000, o.seed);
    ds.meta["vehicle"] = vehicle_json(v);
  } else if (o.system == "sir" || o.system == "sir-ensemble") {
    const dynamics::SirState init{o.s0, o.i0, o.r0, 0.0};
    const std::size_t steps = o.steps ? o.steps : 1000;
    if (o.system == "sir") {
      dynamics::SirParams p{o.beta, o.gamma, o.sir_noise, o.sir_dt};
      const std::size_t n = o.trajectories ? o.trajectories : 1;
      for (std::size_t i = 0; i < n; ++i) {
        ds.trajectories.push_back(dynamics::sir_simulate(p, init, steps, o.seed, i));
      }
      ds.meta["sir"] = {{"beta", o.beta}, {"gamma", o.gamma}, {"noise_sigma", o.sir_noise},
                        {"dt", o.sir_dt}, {"n_steps", steps}};
    } else {
      dynamics::SirEnsembleOptions e;
      e.beta = {o.beta_min, o.beta_max};
      e.gamma = {o.gamma_min, o.gamma_max};
      e.n_trajectories = o.trajectories ? o.trajectories : 200;
      e.n_steps = steps;
      e.initial = init;
      e.noise_sigma = o.sir_noise;
      e.dt = o.sir_dt;
      if (!(e.beta.lo > 0 && e.beta.lo <= e.beta.hi && e.gamma.lo > 0 && e.gamma.lo <= e.gamma.hi)) {
        throw ConfigError("ensemble ranges need 0 < min <= max");
      }
      ds.trajectories = dynamics::sir_ensemble(e, o.seed);
      ds.meta["sir_ensemble"] = {{"beta", {o.beta_min, o.beta_max}},
                                 {"gamma", {o.gamma_min, o.gamma_max}},
                                 {"noise_sigma", o.sir_noise}, {"dt", o.sir_dt},
                                 {"n_steps", steps}};
    }
    ds.meta["initial"] = {o.s0, o.i0, o.r0};
  } else if (o.system == "two-moons") {
    const auto pts = dynamics::two_moons(o.points, o.moons_noise, o.seed);
    dynamics::Trajectory t;
    t.state_names = {"x", "y"};
    for (std::size_t i = 0; i < o.points; ++i) t.times.push_back(static_cast<double>(i));
    t.states = pts;
    ds.trajectories.push_back(std::move(t));
    ds.meta["two_moons"] = {{"points", o.points}, {"noise_sigma", o.moons_noise}};
  } else {
    throw ConfigError("unknown system '" + o.system + "' (vehicle|sir|sir-ensemble|two-moons)");
  }
  const std::string path = output_path(o.out.empty() ? o.system + ".csv" : o.out);
  io::write_dataset(ds, path);
  std::size_t rows = 0;
  for (const auto& t : ds.trajectories) rows += t.length();
  std::cout << "wrote " << rows << " rows (" << ds.trajectories.size() << " trajectories) to "
            << path << "\n";
  return 0;
}

// ------------------------------------------------------------------ ingest

struct IngestOpts {
  std::string input, out = "external.csv", export_path;
};

int run_ingest(const IngestOpts& o) {
  const auto series = io::read_external_sir(o.input);
  io::Dataset ds = io::external_to_dataset(series);
  ds.meta["source"] = std::filesystem::path(o.input).filename().string();
  const std::string path = output_path(o.out);
  io::write_dataset(ds, path);
  std::cout << "ingested " << series.dates.size() << " rows into " << path << "\n";
  if (!o.export_path.empty()) {
    io::write_external_sir(io::dataset_to_external(io::read_dataset(path)),
                           output_path(o.export_path));
  }
  return 0;
}

// ------------------------------------------------------------------- train

struct TrainOpts {
  std::string data, out = "model.ckpt", log = "train_log.csv";
  std::string encoder = "mlp", direction = "forward";
  std::size_t window = 5, horizon = 1, max_windows = 0;
  bool include_params = false;
  double context_noise = 1.0;
  flow::FlowConfig flow;
  encoders::EncoderConfig enc;
  training::TrainConfig train;
  std::size_t progress = 0;
};

dynamics::WindowSpec window_spec(const TrainOpts& o) {
  dynamics::WindowSpec w;
  w.window = o.window;
  w.direction = dynamics::parse_direction(o.direction);
  w.horizon = o.horizon;
  w.include_params = o.include_params;
  w.context_noise_sigma = o.context_noise;
  w.seed = o.train.seed;
  return w;
}

int run_train(TrainOpts o) {
  const io::Dataset ds = io::read_dataset(o.data);
  const bool conditional = ds.trajectories.front().obs_dim() > 0;
  training::TrainingData data;
  training::Model model;
  o.flow.seed = o.train.seed;
  o.enc.seed = o.train.seed + 1;

  if (conditional) {
    const auto spec = window_spec(o);
    if (spec.include_params && ds.trajectories.front().params.size() != 2) {
      throw ConfigError("--include-params needs a dataset with beta/gamma columns");
    }
    const auto windows = dynamics::make_windows(ds.trajectories, spec);
    o.enc.kind = encoders::parse_encoder_kind(o.encoder);
    o.enc.input_dim = windows.obs_dim;
    o.enc.window = spec.window;
    o.flow.dim = windows.target_dim;
    model = training::Model::create(o.flow, o.enc);
    model.window = spec;
    model.normalizer = windows.normalizer;
    data = training::TrainingData::from_windows(windows).subsample(o.max_windows, o.train.seed);
  } else {
    if (o.include_params) throw ConfigError("--include-params needs observations");
    const auto& t = ds.trajectories.front();
    const auto norm = dynamics::Normalizer::fit(ds.trajectories, false);
    o.flow.dim = t.state_dim();
    model = training::Model::create(o.flow, std::nullopt);
    model.normalizer = norm;
    model.window.window = 0;
    diff::Tensor pts({t.length(), t.state_dim()});
    for (std::size_t k = 0; k < t.length(); ++k) {
      for (std::size_t j = 0; j < t.state_dim(); ++j) {
        pts.at(k, j) = norm.target_to_unit(j, t.state(k)[j]);
      }
    }
    data = training::TrainingData::unconditional(pts).subsample(o.max_windows, o.train.seed);
  }
  model.system = ds.system;

  const auto log = training::train(model, data, o.train, [&](const training::TrainRecord& r) {
    if (o.progress && r.iter % o.progress == 0) {
      std::fprintf(stderr, "iter %zu total %.6f nll %.6f kinetic %.6f prior %.6f\n", r.iter,
                   r.total, r.nll, r.kinetic, r.prior);
    }
  });
  const std::string ckpt = output_path(o.out);
  io::save_checkpoint(model, ckpt,
                      Json{{"dataset", std::filesystem::path(o.data).filename().string()},
                           {"dataset_digest", io::file_digest(o.data)},
                           {"training",
                            {{"iterations", o.train.iterations},
                             {"batch_size", o.train.batch_size},
                             {"learning_rate", o.train.learning_rate},
                             {"clip_norm", o.train.clip_norm},
                             {"seed", o.train.seed},
                             {"lambda", {o.train.weights.nll, o.train.weights.kinetic,
                                         o.train.weights.prior}},
                             {"n_examples", data.size()}}}});
  log.write_csv(output_path(o.log));
  std::cout << "trained " << o.train.iterations << " iterations on " << data.size()
            << " examples; checkpoint " << ckpt << "\n";
  if (!log.records.empty()) {
    const auto& r = log.records.back();
    std::cout << "final total " << fmt(r.total) << " nll " << fmt(r.nll) << " kinetic "
              << fmt(r.kinetic) << " prior " << fmt(r.prior) << "\n";
  }
  return 0;
}

// ------------------------------------------------- estimate/rollout/evaluate

struct Loaded {
  training::Model model;
  std::string id;
  io::Dataset data;
};

Loaded load_pair(const std::string& ckpt, const std::string& data_path) {
  Loaded l;
  l.model = io::load_checkpoint(ckpt).model;
  l.id = io::file_digest(ckpt);
  l.data = io::read_dataset(data_path);
  const auto& t = l.data.trajectories.front();
  const std::size_t want_obs = l.model.normalizer.obs_mean.size();
  const std::size_t want_target =
      t.state_dim() + (l.model.window.include_params ? 2 : 0);
  if ((l.model.conditional() && t.obs_dim() != want_obs) ||
      l.model.flow.config().dim != want_target) {
    throw ConfigError("checkpoint expects " + std::to_string(want_obs) + " observation and " +
                      std::to_string(l.model.flow.config().dim) +
                      " target dims; dataset has " + std::to_string(t.obs_dim()) +
                      " observation and " + std::to_string(t.state_dim()) + " state dims" +
                      (l.model.window.include_params ? " (+2 parameters)" : ""));
  }
  return l;
}

std::vector<double> true_target(const training::Model& m, const dynamics::Trajectory& t,
                                std::size_t step) {
  std::vector<double> x(t.state(step).begin(), t.state(step).end());
  if (m.window.include_params) x.insert(x.end(), t.params.begin(), t.params.end());
  return x;
}

std::size_t parse_at(const std::string& at, const training::Model& m,
                     const dynamics::Trajectory& t) {
  std::string v = at;
  if (v.rfind("t=", 0) == 0) v = v.substr(2);
  double time = 0.0;
  try {
    time = std::stod(v);
  } catch (const std::exception&) {
    throw ConfigError("--at expects t=<time>, got '" + at + "'");
  }
  std::size_t best = 0;
  for (std::size_t k = 1; k < t.length(); ++k) {
    if (std::abs(t.times[k] - time) < std::abs(t.times[best] - time)) best = k;
  }
  // `time` is the context observation nearest the target
  const std::size_t h = m.window.horizon;
  if (m.window.direction == dynamics::Direction::kForward) return best + h;
  if (best < h) throw ConfigError("--at leaves no room for a backward target");
  return best - h;
}

struct EstimateOpts {
  std::string checkpoint, data, at, out = "estimate";
  std::size_t traj = 0, samples = 1000, truth = 0;
  long step = -1;
  std::uint64_t seed = 0;
};

int run_estimate(const EstimateOpts& o) {
  auto l = load_pair(o.checkpoint, o.data);
  if (o.traj >= l.data.trajectories.size()) throw ConfigError("--traj out of range");
  const auto& t = l.data.trajectories[o.traj];
  if (!l.model.conditional()) throw ConfigError("estimate needs a conditional checkpoint");
  std::size_t target;
  if (!o.at.empty()) {
    target = parse_at(o.at, l.model, t);
  } else if (o.step >= 0) {
    target = static_cast<std::size_t>(o.step);
  } else {
    throw ConfigError("estimate needs --at t=<time> or --step <target record>");
  }
  const auto [lo, hi] = dynamics::target_range(t.length(), l.model.window);
  if (target < lo || target > hi) {
    throw ConfigError("target record " + std::to_string(target) + " outside [" +
                      std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  const auto ctx = dynamics::raw_context(t, target, l.model.window);

  inference::EstimateOptions eo;
  eo.n_samples = o.samples;
  eo.seed = o.seed;
  std::optional<diff::Tensor> truth;
  if (o.truth > 0) {
    if (l.data.system != "vehicle" || l.model.window.direction != dynamics::Direction::kForward) {
      throw ConfigError("--truth continuations exist for forward vehicle models only");
    }
    const auto vo = vehicle_from_json(l.data.meta.at("vehicle"));
    const std::uint64_t data_seed = l.data.meta.at("seed").get<std::uint64_t>();
    truth = diff::Tensor({o.truth, 2},
                         dynamics::vehicle_continuations(vo, data_seed, o.traj,
                                                         target - l.model.window.horizon,
                                                         l.model.window.horizon, o.truth,
                                                         o.seed + 1));
  }
  const std::string prefix = output_path(o.out);
  Json extra;
  inference::EstimateReport report;
  if (l.model.window.include_params) {
    inference::SirOverlay ov;
    ov.n_steps = t.length();
    ov.dt = t.length() > 1 ? t.times[1] - t.times[0] : 1.0;
    ov.initial = {t.state(0)[0], t.state(0)[1], t.state(0)[2], 0.0};
    const double total = ov.initial.total();
    ov.initial.S /= total;
    ov.initial.I /= total;
    ov.initial.R /= total;
    auto joint = inference::joint_state_param_estimate(l.model, ctx, eo, ov);
    report = std::move(joint.report);
    extra["beta"] = {{"mean", joint.beta_mean}, {"std", joint.beta_std}};
    extra["gamma"] = {{"mean", joint.gamma_mean}, {"std", joint.gamma_std}};
    std::ofstream ovf(prefix + "_overlay.csv", std::ios::binary);
    ovf << "step,t,S,I,R\n";
    for (std::size_t k = 0; k < joint.overlay.length(); ++k) {
      const auto s = joint.overlay.state(k);
      ovf << k << ',' << fmt(joint.overlay.times[k]) << ',' << fmt(s[0]) << ',' << fmt(s[1])
          << ',' << fmt(s[2]) << '\n';
    }
    std::cout << "beta " << fmt(joint.beta_mean) << " +- " << fmt(joint.beta_std) << ", gamma "
              << fmt(joint.gamma_mean) << " +- " << fmt(joint.gamma_std) << "\n";
  } else {
    report = inference::estimate_state(l.model, ctx, eo, truth);
  }
  report.provenance.checkpoint = l.id;
  report.provenance.dataset = std::filesystem::path(o.data).filename().string();
  inference::write_report_json(report, prefix + ".json");
  inference::write_samples_csv(report, prefix + "_samples.csv");
  if (!report.contours.empty()) inference::write_contours_csv(report, prefix + "_contours.csv");

  Json j = Json::parse(io::slurp(prefix + ".json"));
  j["trajectory"] = o.traj;
  j["target_record"] = target;
  j["target_time"] = t.times[target];
  j["true_state"] = true_target(l.model, t, target);
  j["context"] = ctx;
  for (const auto& [k, v] : extra.items()) j[k] = v;
  write_json(j, prefix + ".json");
  std::cout << "estimate at t=" << fmt(t.times[target]) << ": mean";
  for (double v : report.mean) std::cout << ' ' << fmt(v);
  if (report.kl) std::cout << "; kl_knn " << fmt(*report.kl);
  std::cout << "\n";
  return 0;
}

struct RolloutOpts {
  std::string checkpoint, data, direction, aggregation = "mean", out = "rollout_bands.csv";
  std::size_t traj = 0, window = 7, samples = 1000;
  long start = -1;
  std::uint64_t seed = 0;
};

int run_rollout(const RolloutOpts& o) {
  auto l = load_pair(o.checkpoint, o.data);
  if (!l.model.conditional()) throw ConfigError("rollout needs a conditional checkpoint");
  if (!o.direction.empty() &&
      dynamics::parse_direction(o.direction) != l.model.window.direction) {
    throw ConfigError("--direction " + o.direction + " but the checkpoint was trained " +
                      dynamics::to_string(l.model.window.direction));
  }
  if (o.traj >= l.data.trajectories.size()) throw ConfigError("--traj out of range");
  const auto& t = l.data.trajectories[o.traj];
  const auto [lo, hi] = dynamics::target_range(t.length(), l.model.window);
  const bool fwd = l.model.window.direction == dynamics::Direction::kForward;
  const std::size_t start = o.start >= 0 ? static_cast<std::size_t>(o.start) : (fwd ? lo : hi);
  if (start < lo || start > hi) {
    throw ConfigError("--start " + std::to_string(start) + " outside [" + std::to_string(lo) +
                      ", " + std::to_string(hi) + "]");
  }
  inference::RolloutConfig rc;
  rc.n_steps = o.window;
  rc.aggregation = inference::parse_aggregation(o.aggregation);
  rc.estimate.n_samples = o.samples;
  rc.estimate.seed = o.seed;
  rc.estimate.contour_levels.clear();
  const auto res = inference::rollout(l.model, dynamics::raw_context(t, start, l.model.window), rc);
  const std::string path = output_path(o.out);
  inference::write_bands_csv(res.steps, path);

  // compare against the recorded states where the horizon stays in range
  const std::size_t h = l.model.window.horizon;
  Json steps = Json::array();
  std::vector<std::vector<double>> pred(t.state_dim()), actual(t.state_dim());
  for (std::size_t s = 0; s < res.steps.size(); ++s) {
    const long k = fwd ? static_cast<long>(start + s * h) : static_cast<long>(start) - static_cast<long>(s * h);
    Json e{{"step", s + 1}, {"mean", res.steps[s].mean}, {"stddev", res.steps[s].stddev}};
    if (k >= 0 && static_cast<std::size_t>(k) < t.length()) {
      e["record"] = k;
      e["time"] = t.times[k];
      e["true_state"] = std::vector<double>(t.state(k).begin(), t.state(k).end());
      for (std::size_t j = 0; j < t.state_dim(); ++j) {
        pred[j].push_back(res.steps[s].mean[j]);
        actual[j].push_back(t.state(k)[j]);
      }
    }
    steps.push_back(std::move(e));
  }
  Json summary{{"checkpoint", l.id},
               {"dataset", std::filesystem::path(o.data).filename().string()},
               {"direction", dynamics::to_string(l.model.window.direction)},
               {"aggregation", o.aggregation},
               {"start_record", start},
               {"seed", o.seed},
               {"steps", steps}};
  Json mapes = Json::array();
  for (std::size_t j = 0; j < t.state_dim(); ++j) {
    try {
      mapes.push_back(pred[j].empty() ? Json(nullptr) : Json(inference::mape(pred[j], actual[j])));
    } catch (const std::domain_error&) {
      mapes.push_back(nullptr);
    }
  }
  summary["mape"] = mapes;
  write_json(summary, path + ".json");
  std::cout << "rollout of " << res.steps.size() << " steps written to " << path << "\n";
  return 0;
}

struct EvaluateOpts {
  std::vector<std::string> checkpoints;
  std::string data, out = "evaluation.csv";
  std::size_t locations = 100, samples = 200, truth = 0;
  std::uint64_t seed = 0;
};

int run_evaluate(const EvaluateOpts& o) {
  struct Row {
    std::string name;
    std::vector<std::pair<std::string, double>> metrics;
  };
  std::vector<Row> rows;
  for (const auto& ck : o.checkpoints) {
    auto l = load_pair(ck, o.data);
    if (!l.model.conditional()) throw ConfigError(ck + " is unconditional; evaluate needs contexts");
    const auto& trajs = l.data.trajectories;
    auto rng = make_stream(o.seed, 0, 60);
    std::vector<std::vector<double>> ctxs;
    std::vector<std::pair<std::size_t, std::size_t>> where;
    const std::size_t d = l.model.flow.config().dim;
    diff::Tensor states({o.locations, d});
    for (std::size_t i = 0; i < o.locations; ++i) {
      std::uniform_int_distribution<std::size_t> pick_traj(0, trajs.size() - 1);
      const std::size_t ti = pick_traj(rng);
      const auto [lo, hi] = dynamics::target_range(trajs[ti].length(), l.model.window);
      std::uniform_int_distribution<std::size_t> pick_step(lo, hi);
      const std::size_t k = pick_step(rng);
      where.emplace_back(ti, k);
      ctxs.push_back(dynamics::raw_context(trajs[ti], k, l.model.window));
      const auto x = true_target(l.model, trajs[ti], k);
      for (std::size_t j = 0; j < d; ++j) states.at(i, j) = x[j];
    }
    Row row{ck, {}};
    const auto nll = inference::mean_nll(l.model, ctxs, states, {o.samples, o.seed});
    row.metrics.emplace_back("nll", nll.total);
    for (std::size_t j = 0; j < d; ++j) {
      row.metrics.emplace_back("nll_dim" + std::to_string(j), nll.per_dim[j]);
    }
    std::vector<std::vector<double>> pred(d), act(d);
    double kl_sum = 0.0;
    for (std::size_t i = 0; i < o.locations; ++i) {
      inference::EstimateOptions eo;
      eo.n_samples = o.samples;
      eo.seed = o.seed + i;
      eo.contour_levels.clear();
      std::optional<diff::Tensor> truth;
      if (o.truth > 0 && l.data.system == "vehicle" &&
          l.model.window.direction == dynamics::Direction::kForward) {
        const auto vo = vehicle_from_json(l.data.meta.at("vehicle"));
        truth = diff::Tensor({o.truth, 2}, dynamics::vehicle_continuations(
                                               vo, l.data.meta.at("seed").get<std::uint64_t>(),
                                               where[i].first,
                                               where[i].second - l.model.window.horizon,
                                               l.model.window.horizon, o.truth, o.seed + i));
      }
      const auto r = inference::estimate_state(l.model, ctxs[i], eo, truth);
      if (r.kl) kl_sum += *r.kl;
      for (std::size_t j = 0; j < d; ++j) {
        pred[j].push_back(r.mean[j]);
        act[j].push_back(states.at(i, j));
      }
    }
    if (o.truth > 0 && l.data.system == "vehicle") {
      row.metrics.emplace_back("kl_knn", kl_sum / static_cast<double>(o.locations));
    }
    for (std::size_t j = 0; j < d; ++j) {
      double mae = 0.0;
      for (std::size_t i = 0; i < pred[j].size(); ++i) mae += std::abs(pred[j][i] - act[j][i]);
      row.metrics.emplace_back("mae_dim" + std::to_string(j), mae / static_cast<double>(pred[j].size()));
      try {
        row.metrics.emplace_back("mape_dim" + std::to_string(j), inference::mape(pred[j], act[j]));
      } catch (const std::domain_error&) {
        // zero-valued truth, MAPE undefined for this dimension
      }
    }
    rows.push_back(std::move(row));
  }
  const std::string path = output_path(o.out);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "checkpoint,metric,value,delta_vs_first\n";
  for (const auto& r : rows) {
    for (std::size_t m = 0; m < r.metrics.size(); ++m) {
      double ref = r.metrics[m].second;
      for (const auto& [name, v] : rows.front().metrics) {
        if (name == r.metrics[m].first) ref = v;
      }
      out << r.name << ',' << r.metrics[m].first << ',' << fmt(r.metrics[m].second) << ','
          << fmt(r.metrics[m].second - ref) << '\n';
    }
  }
  for (const auto& r : rows) {
    std::cout << r.name << "\n";
    for (const auto& [name, v] : r.metrics) std::printf("  %-12s %.6g\n", name.c_str(), v);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional normalizing flows for nonlinear state estimation"};
  app.require_subcommand(1);
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "INI/TOML file with [verb] sections; flags win");
  app.fallthrough();

  SimulateOpts sim;
  auto* s = app.add_subcommand("simulate", "Generate a dataset");
  s->add_option("--system", sim.system, "vehicle|sir|sir-ensemble|two-moons")
      ->check(CLI::IsMember({"vehicle", "sir", "sir-ensemble", "two-moons"}))
      ->capture_default_str();
  s->add_option("--out", sim.out, "Dataset CSV (default <system>.csv)");
  s->add_option("--seed", sim.seed)->capture_default_str();
  s->add_option("--trajectories", sim.trajectories,
                "0 = system default (vehicle 10000, sir 1, sir-ensemble 200)")
      ->capture_default_str();
  s->add_option("--steps", sim.steps, "Records per trajectory; 0 = vehicle 150, sir 1000")
      ->capture_default_str();
  s->add_option("--c1", sim.c1)->capture_default_str();
  s->add_option("--c2", sim.c2)->capture_default_str();
  s->add_option("--sigma-v", sim.sigma_v)->capture_default_str();
  s->add_option("--sigma-phi", sim.sigma_phi)->capture_default_str();
  s->add_option("--dt", sim.dt, "Vehicle step")->capture_default_str();
  s->add_option("--switch-time", sim.switch_time)->capture_default_str();
  s->add_option("--psi", sim.psi, "Fix the switch value instead of drawing it");
  s->add_option("--beta", sim.beta)->capture_default_str();
  s->add_option("--gamma", sim.gamma)->capture_default_str();
  s->add_option("--sir-noise", sim.sir_noise)->capture_default_str();
  s->add_option("--sir-dt", sim.sir_dt)->capture_default_str();
  s->add_option("--s0", sim.s0)->capture_default_str();
  s->add_option("--i0", sim.i0)->capture_default_str();
  s->add_option("--r0", sim.r0)->capture_default_str();
  s->add_option("--beta-min", sim.beta_min)->capture_default_str();
  s->add_option("--beta-max", sim.beta_max)->capture_default_str();
  s->add_option("--gamma-min", sim.gamma_min)->capture_default_str();
  s->add_option("--gamma-max", sim.gamma_max)->capture_default_str();
  s->add_option("--points", sim.points, "Two-moons sample count")->capture_default_str();
  s->add_option("--moons-noise", sim.moons_noise)->capture_default_str();

  IngestOpts ing;
  auto* in = app.add_subcommand("ingest", "Import a date,S,I,R fraction series");
  in->add_option("input", ing.input, "CSV with header date,S,I,R")->required();
  in->add_option("--out", ing.out)->capture_default_str();
  in->add_option("--export", ing.export_path, "Also write the series back out from the dataset");

  TrainOpts tr;
  auto* t = app.add_subcommand("train", "Fit encoder + flow");
  t->add_option("--data", tr.data)->required();
  t->add_option("--out", tr.out, "Checkpoint")->capture_default_str();
  t->add_option("--log", tr.log, "Loss CSV")->capture_default_str();
  t->add_option("--encoder", tr.encoder, "mlp|transformer|ssm")
      ->check(CLI::IsMember({"mlp", "transformer", "ssm", "mamba"}))
      ->capture_default_str();
  t->add_option("--window", tr.window, "Context length R")->capture_default_str();
  t->add_option("--direction", tr.direction, "forward|backward")
      ->check(CLI::IsMember({"forward", "backward"}))
      ->capture_default_str();
  t->add_option("--horizon", tr.horizon)->capture_default_str();
  t->add_flag("--include-params", tr.include_params, "Append beta, gamma to the target");
  t->add_option("--context-noise", tr.context_noise, "Std of noise on normalized contexts")
      ->capture_default_str();
  t->add_option("--max-windows", tr.max_windows, "Subsample windows; 0 = all")
      ->capture_default_str();
  t->add_option("--layers", tr.flow.n_layers)->capture_default_str();
  t->add_option("--hidden", tr.flow.hidden)->capture_default_str();
  t->add_option("--context", tr.enc.embed_dim, "Conditioning vector width")->capture_default_str();
  t->add_option("--base-hidden", tr.flow.base_hidden)->capture_default_str();
  t->add_option("--log-scale-bound", tr.flow.log_scale_bound)->capture_default_str();
  t->add_option("--mlp-hidden", tr.enc.mlp_hidden)->capture_default_str();
  t->add_option("--model-dim", tr.enc.model_dim)->capture_default_str();
  t->add_option("--heads", tr.enc.n_heads)->capture_default_str();
  t->add_option("--encoder-layers", tr.enc.n_encoder_layers)->capture_default_str();
  t->add_option("--decoder-layers", tr.enc.n_decoder_layers)->capture_default_str();
  t->add_option("--ssm-state", tr.enc.ssm_state_dim)->capture_default_str();
  t->add_option("--conv-width", tr.enc.conv_width)->capture_default_str();
  t->add_option("--expand", tr.enc.expand)->capture_default_str();
  t->add_option("--iterations", tr.train.iterations)->capture_default_str();
  t->add_option("--batch-size", tr.train.batch_size)->capture_default_str();
  t->add_option("--lr", tr.train.learning_rate)->capture_default_str();
  t->add_option("--clip-norm", tr.train.clip_norm, "0 disables")->capture_default_str();
  t->add_option("--nll-lambda", tr.train.weights.nll)->capture_default_str();
  t->add_option("--kinetic-lambda", tr.train.weights.kinetic)->capture_default_str();
  t->add_option("--prior-lambda", tr.train.weights.prior)->capture_default_str();
  t->add_option("--seed", tr.train.seed)->capture_default_str();
  t->add_option("--progress", tr.progress, "Print losses every N iterations")->capture_default_str();

  EstimateOpts est;
  auto* e = app.add_subcommand("estimate", "Density estimate at one trajectory location");
  e->add_option("--checkpoint", est.checkpoint)->required();
  e->add_option("--data", est.data)->required();
  e->add_option("--traj", est.traj)->capture_default_str();
  e->add_option("--at", est.at, "t=<time> of the context observation nearest the target");
  e->add_option("--step", est.step, "Target record index");
  e->add_option("--samples", est.samples)->capture_default_str();
  e->add_option("--truth", est.truth, "Simulated continuations for kl_knn (vehicle)")
      ->capture_default_str();
  e->add_option("--seed", est.seed)->capture_default_str();
  e->add_option("--out", est.out, "Output prefix")->capture_default_str();

  RolloutOpts ro;
  auto* r = app.add_subcommand("rollout", "Recursive forecast with 2-sigma bands");
  r->add_option("--checkpoint", ro.checkpoint)->required();
  r->add_option("--data", ro.data)->required();
  r->add_option("--traj", ro.traj)->capture_default_str();
  r->add_option("--start", ro.start, "Target record of the first step (default: first valid)");
  r->add_option("--window", ro.window, "Rollout steps, e.g. 7 or 28")->capture_default_str();
  r->add_option("--direction", ro.direction, "Must match the checkpoint")
      ->check(CLI::IsMember({"forward", "backward"}));
  r->add_option("--aggregation", ro.aggregation, "mean|sample")
      ->check(CLI::IsMember({"mean", "sample"}))
      ->capture_default_str();
  r->add_option("--samples", ro.samples)->capture_default_str();
  r->add_option("--seed", ro.seed)->capture_default_str();
  r->add_option("--out", ro.out)->capture_default_str();

  EvaluateOpts ev;
  auto* v = app.add_subcommand("evaluate", "Score checkpoints on random locations");
  v->add_option("--checkpoint", ev.checkpoints, "Repeat to compare")->required();
  v->add_option("--data", ev.data)->required();
  v->add_option("--locations", ev.locations)->capture_default_str();
  v->add_option("--samples", ev.samples)->capture_default_str();
  v->add_option("--truth", ev.truth, "Vehicle continuations per location for kl_knn")
      ->capture_default_str();
  v->add_option("--seed", ev.seed)->capture_default_str();
  v->add_option("--out", ev.out)->capture_default_str();

  auto* sc = app.add_subcommand("show-config", "Print every option with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*s) return run_simulate(sim);
    if (*in) return run_ingest(ing);
    if (*t) return run_train(tr);
    if (*e) return run_estimate(est);
    if (*r) return run_rollout(ro);
    if (*v) return run_evaluate(ev);
    if (*sc) {
      std::cout << app.config_to_str(true, true);
      return 0;
    }
  } catch (const ConfigError& err) {
    std::cerr << "configuration error: " << err.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& err) {
    std::cerr << "configuration error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
