// Encoder + flow pair together with the data conventions it was trained on.
#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nfest/dynamics/windows.hpp"
#include "nfest/encoders/encoders.hpp"
#include "nfest/flow/flow.hpp"

namespace nfest::training {

struct Model {
  std::string system;  // vehicle, sir, sir-ensemble, moons, external
  dynamics::WindowSpec window;
  dynamics::Normalizer normalizer;
  std::unique_ptr<encoders::Encoder> encoder;  // null for unconditional flows
  flow::Flow flow;

  Model() = default;
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  /// Flow context width is taken from the encoder's embed_dim (0 without).
  static Model create(flow::FlowConfig flow_config,
                      std::optional<encoders::EncoderConfig> encoder_config);

  bool conditional() const noexcept { return encoder != nullptr; }
  std::vector<diff::Parameter*> parameters();
  std::vector<const diff::Parameter*> parameters() const;

  /// Context embedding [B, embed_dim] of normalized windows [B, R, m];
  /// invalid Var for unconditional models.
  diff::Var embed(diff::Tape& tape, const diff::Tensor& contexts) const;
};

}  // namespace nfest::training
