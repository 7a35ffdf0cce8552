// Model checkpoints:
//   "NFESTCKP" | u32 version | u64 header bytes | JSON header | f64 values
// The header holds the flow/encoder configs, window spec, normalizer and the
// name and shape of every parameter in storage order. Values are raw
// little-endian doubles, so identical parameters give identical bytes.
#pragma once

#include <string>

#include "nfest/io/dataset.hpp"
#include "nfest/training/model.hpp"

namespace nfest::io {

constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Json to_json(const flow::FlowConfig& c);
flow::FlowConfig flow_config_from_json(const Json& j);
Json to_json(const encoders::EncoderConfig& c);
encoders::EncoderConfig encoder_config_from_json(const Json& j);

/// Header object without the parameter values.
Json checkpoint_header(const training::Model& model, const Json& extra = Json::object());

void save_checkpoint(const training::Model& model, const std::string& path,
                     const Json& extra = Json::object());

struct LoadedCheckpoint {
  training::Model model;
  Json header;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

/// FNV-1a of the file bytes, hex; used as a checkpoint id in reports.
std::string file_digest(const std::string& path);

}  // namespace nfest::io
