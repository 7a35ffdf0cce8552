#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "nfest/dynamics/sir.hpp"
#include "nfest/io/checkpoint.hpp"
#include "nfest/io/external_sir.hpp"

using namespace nfest;
using namespace nfest::io;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "nfest_test_io";
  fs::create_directories(dir);
  return (dir / name).string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream(path) << text;
}

}  // namespace

TEST_CASE("dataset roundtrip") {
  dynamics::SirEnsembleOptions opt;
  opt.n_trajectories = 3;
  opt.n_steps = 40;
  Dataset ds{"sir-ensemble", dynamics::sir_ensemble(opt, 4), Json{{"seed", 4}}};
  const auto path = temp_path("ens.csv");
  write_dataset(ds, path);
  const Dataset back = read_dataset(path);
  CHECK(back.system == "sir-ensemble");
  CHECK(back.meta.at("seed") == 4);
  CHECK(back.meta.at("n_rows") == 120);
  REQUIRE(back.trajectories.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.trajectories[i].observations == ds.trajectories[i].observations);
    CHECK(back.trajectories[i].states == ds.trajectories[i].states);
    CHECK(back.trajectories[i].times == ds.trajectories[i].times);
    CHECK(back.trajectories[i].params == ds.trajectories[i].params);
  }
  const auto n = normalizer_from_json(back.meta.at("normalizer_with_params"));
  CHECK(n.target_mean.size() == 5);

  // rewriting gives the same bytes
  const auto again = temp_path("ens2.csv");
  write_dataset(back, again);
  CHECK(slurp(path) == slurp(again));
}

TEST_CASE("checkpoint roundtrip") {
  flow::FlowConfig fc;
  fc.n_layers = 2;
  encoders::EncoderConfig ec;
  ec.kind = encoders::EncoderKind::kSsm;
  ec.model_dim = 8;
  auto m = training::Model::create(fc, ec);
  m.flow.randomize(3);
  m.system = "vehicle";
  m.normalizer.obs_mean = {1.5, -2.0};
  m.window.direction = dynamics::Direction::kBackward;
  const auto path = temp_path("m.ckpt");
  save_checkpoint(m, path, Json{{"dataset", "abc"}});
  const auto loaded = load_checkpoint(path);
  CHECK(loaded.header.at("dataset") == "abc");
  CHECK(loaded.model.system == "vehicle");
  CHECK(loaded.model.window.direction == dynamics::Direction::kBackward);
  CHECK(loaded.model.normalizer.obs_mean == m.normalizer.obs_mean);
  const auto a = m.parameters();
  const auto b = loaded.model.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value.values() == b[i]->value.values());

  const auto again = temp_path("m2.ckpt");
  save_checkpoint(loaded.model, again, Json{{"dataset", "abc"}});
  CHECK(slurp(path) == slurp(again));
  CHECK(file_digest(path) == file_digest(again));

  write_text(temp_path("bad.ckpt"), "NFESTCKX");
  CHECK_THROWS_AS(load_checkpoint(temp_path("bad.ckpt")), CheckpointError);
  const std::string bytes = slurp(path);
  write_text(temp_path("short.ckpt"), bytes.substr(0, bytes.size() - 8));
  CHECK_THROWS_AS(load_checkpoint(temp_path("short.ckpt")), CheckpointError);
}

TEST_CASE("external sir ingestion") {
  const auto good = temp_path("good.csv");
  write_text(good,
             "date,S,I,R\n2020-03-01,0.99,0.01,0.0\n2020-03-02,0.985,0.012,0.003\n"
             "2020-03-04,0.98,0.014,0.0061\n");
  const auto series = read_external_sir(good);
  REQUIRE(series.dates.size() == 3);
  const auto ds = external_to_dataset(series);
  CHECK(ds.trajectories[0].times == std::vector<double>{0.0, 1.0, 3.0});

  const auto path = temp_path("ingested.csv");
  write_dataset(ds, path);
  const auto back = read_dataset(path);
  CHECK(back.meta.contains("normalizer"));
  CHECK(back.trajectories[0].length() == 3);
  const auto out = dataset_to_external(back);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(std::abs(out.S[k] - series.S[k]) < 1e-12);
    CHECK(std::abs(out.I[k] - series.I[k]) < 1e-12);
    CHECK(std::abs(out.R[k] - series.R[k]) < 1e-12);
  }
  CHECK(out.dates == series.dates);

  auto rejects = [&](const std::string& body, const std::string& needle) {
    const auto p = temp_path("bad.csv");
    write_text(p, body);
    try {
      read_external_sir(p);
      return false;
    } catch (const SchemaError& e) {
      return std::string(e.what()).find(needle) != std::string::npos;
    }
  };
  CHECK(rejects("date,S,I,R\n2020-03-01,0.99,0.01,0\n2020-03-02,0.9,0.3,0.3\n", "row 3"));
  CHECK(rejects("date,S,I,R\n2020-03-02,0.99,0.01,0\n2020-03-01,0.99,0.01,0\n",
                "strictly increasing"));
  CHECK(rejects("date,S,I,R\n2020-03-01,0.99,0.01,0\n2020-03-01,0.99,0.01,0\n", "row 3"));
  CHECK(rejects("date,S,I\n2020-03-01,0.99,0.01\n", "header"));
  CHECK(rejects("date,S,I,R\n2020-02-30,0.99,0.01,0\n", "invalid date"));
  CHECK(rejects("date,S,I,R\n2020-03-01,abc,0.01,0\n", "row 2"));
}
