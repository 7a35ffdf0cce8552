// Dataset files: one CSV row per record
//   traj_id,step,t,<obs...>,<state...>[,beta,gamma]
// plus a JSON sidecar (<csv>.json) with names, seeds, simulator settings and
// z-score constants. Values are written with 17 significant digits so a
// read/write cycle is exact.
#pragma once

#include <string>

#include "json.hpp"
#include "nfest/dynamics/trajectory.hpp"
#include "nfest/dynamics/windows.hpp"

namespace nfest::io {

using Json = nlohmann::ordered_json;

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::string system;  // vehicle, sir, sir-ensemble, two-moons, external
  dynamics::TrajectorySet trajectories;
  Json meta = Json::object();  // everything else in the sidecar
};

std::string sidecar_path(const std::string& csv_path);

/// Writes <path> and its sidecar. The sidecar gets "system", column names,
/// "normalizer" (fitted on the data) and the caller's `meta` entries.
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

Json to_json(const dynamics::Normalizer& n);
dynamics::Normalizer normalizer_from_json(const Json& j);
Json to_json(const dynamics::WindowSpec& w);
dynamics::WindowSpec window_spec_from_json(const Json& j);

/// Reads a whole file into a string.
std::string slurp(const std::string& path);

}  // namespace nfest::io
