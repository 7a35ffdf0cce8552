#include "nfest/io/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace nfest::io {
namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, std::size_t row, const std::string& path) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) {
    throw SchemaError(path + ": row " + std::to_string(row) + ": '" + s +
                      "' is not a number");
  }
  return v;
}

bool has_params(const dynamics::TrajectorySet& set) {
  return !set.empty() && set.front().params.size() == 2;
}

}  // namespace

std::string sidecar_path(const std::string& csv_path) { return csv_path + ".json"; }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Json to_json(const dynamics::Normalizer& n) {
  return Json{{"obs_mean", n.obs_mean},
              {"obs_std", n.obs_std},
              {"target_mean", n.target_mean},
              {"target_std", n.target_std}};
}

dynamics::Normalizer normalizer_from_json(const Json& j) {
  dynamics::Normalizer n;
  j.at("obs_mean").get_to(n.obs_mean);
  j.at("obs_std").get_to(n.obs_std);
  j.at("target_mean").get_to(n.target_mean);
  j.at("target_std").get_to(n.target_std);
  return n;
}

Json to_json(const dynamics::WindowSpec& w) {
  return Json{{"window", w.window},
              {"direction", dynamics::to_string(w.direction)},
              {"horizon", w.horizon},
              {"include_params", w.include_params},
              {"context_noise_sigma", w.context_noise_sigma},
              {"seed", w.seed}};
}

dynamics::WindowSpec window_spec_from_json(const Json& j) {
  dynamics::WindowSpec w;
  w.window = j.at("window").get<std::size_t>();
  w.direction = dynamics::parse_direction(j.at("direction").get<std::string>());
  w.horizon = j.at("horizon").get<std::size_t>();
  w.include_params = j.at("include_params").get<bool>();
  w.context_noise_sigma = j.at("context_noise_sigma").get<double>();
  w.seed = j.at("seed").get<std::uint64_t>();
  return w;
}

void write_dataset(const Dataset& ds, const std::string& path) {
  if (ds.trajectories.empty()) throw std::invalid_argument("dataset has no trajectories");
  const auto& first = ds.trajectories.front();
  const bool params = has_params(ds.trajectories);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "traj_id,step,t";
  for (const auto& n : first.obs_names) out << ",obs_" << n;
  for (const auto& n : first.state_names) out << ',' << n;
  if (params) out << ",beta,gamma";
  out << '\n';

  char buf[32];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, ",%.17g", v);
    out << buf;
  };
  for (std::size_t id = 0; id < ds.trajectories.size(); ++id) {
    const auto& tr = ds.trajectories[id];
    if (tr.obs_dim() != first.obs_dim() || tr.state_dim() != first.state_dim()) {
      throw std::invalid_argument("trajectories have different column layouts");
    }
    for (std::size_t k = 0; k < tr.length(); ++k) {
      out << id << ',' << k;
      put(tr.times[k]);
      for (double v : tr.observation(k)) put(v);
      for (double v : tr.state(k)) put(v);
      if (params) {
        put(tr.params[0]);
        put(tr.params[1]);
      }
      out << '\n';
    }
  }
  if (!out) throw std::runtime_error("write failed for " + path);

  Json side;
  side["format"] = "nfest-dataset/1";
  side["system"] = ds.system;
  side["obs_names"] = first.obs_names;
  side["state_names"] = first.state_names;
  side["has_params"] = params;
  side["n_trajectories"] = ds.trajectories.size();
  std::size_t rows = 0;
  for (const auto& t : ds.trajectories) rows += t.length();
  side["n_rows"] = rows;
  if (first.obs_dim() > 0) {
    side["normalizer"] = to_json(dynamics::Normalizer::fit(ds.trajectories, false));
    if (params) {
      side["normalizer_with_params"] =
          to_json(dynamics::Normalizer::fit(ds.trajectories, true));
    }
  }
  for (const auto& [k, v] : ds.meta.items()) {
    if (!side.contains(k)) side[k] = v;
  }
  std::ofstream meta(sidecar_path(path), std::ios::binary);
  if (!meta) throw std::runtime_error("cannot write " + sidecar_path(path));
  meta << side.dump(2) << '\n';
}

Dataset read_dataset(const std::string& path) {
  Json side;
  try {
    side = Json::parse(slurp(sidecar_path(path)));
  } catch (const Json::parse_error& e) {
    throw SchemaError(sidecar_path(path) + ": " + e.what());
  }
  Dataset ds;
  ds.system = side.at("system").get<std::string>();
  const auto obs_names = side.at("obs_names").get<std::vector<std::string>>();
  const auto state_names = side.at("state_names").get<std::vector<std::string>>();
  const bool params = side.value("has_params", false);
  for (const auto& [k, v] : side.items()) ds.meta[k] = v;

  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(in, line);
  const std::size_t m = obs_names.size(), s = state_names.size();
  const std::size_t cols = 3 + m + s + (params ? 2 : 0);
  if (split(line).size() != cols) {
    throw SchemaError(path + ": header has " + std::to_string(split(line).size()) +
                      " columns, sidecar implies " + std::to_string(cols));
  }
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != cols) {
      throw SchemaError(path + ": row " + std::to_string(row) + " has " +
                        std::to_string(cells.size()) + " columns, expected " +
                        std::to_string(cols));
    }
    const auto id = static_cast<std::size_t>(parse_number(cells[0], row, path));
    if (id == ds.trajectories.size()) {
      dynamics::Trajectory t;
      t.obs_names = obs_names;
      t.state_names = state_names;
      ds.trajectories.push_back(std::move(t));
    } else if (id + 1 != ds.trajectories.size()) {
      throw SchemaError(path + ": row " + std::to_string(row) +
                        ": trajectory ids must be contiguous and ascending");
    }
    auto& t = ds.trajectories.back();
    t.times.push_back(parse_number(cells[2], row, path));
    for (std::size_t j = 0; j < m; ++j) {
      t.observations.push_back(parse_number(cells[3 + j], row, path));
    }
    for (std::size_t j = 0; j < s; ++j) {
      t.states.push_back(parse_number(cells[3 + m + j], row, path));
    }
    if (params) {
      const double b = parse_number(cells[3 + m + s], row, path);
      const double g = parse_number(cells[4 + m + s], row, path);
      if (t.params.empty()) t.params = {b, g};
    }
  }
  if (ds.trajectories.empty()) throw SchemaError(path + ": no data rows");
  return ds;
}

}  // namespace nfest::io
