#include "nfest/training/model.hpp"

#include <utility>

namespace nfest::training {

Model::Model(const Model& other)
    : system(other.system),
      window(other.window),
      normalizer(other.normalizer),
      encoder(other.encoder ? other.encoder->clone() : nullptr),
      flow(other.flow) {}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    Model copy(other);
    *this = std::move(copy);
  }
  return *this;
}

Model Model::create(flow::FlowConfig flow_config,
                    std::optional<encoders::EncoderConfig> encoder_config) {
  Model m;
  if (encoder_config) {
    flow_config.context = encoder_config->embed_dim;
    m.encoder = encoders::make_encoder(*encoder_config);
  } else {
    flow_config.context = 0;
  }
  m.flow = flow::Flow(flow_config);
  m.normalizer = dynamics::Normalizer::identity(
      encoder_config ? encoder_config->input_dim : 0, flow_config.dim);
  m.window.window = encoder_config ? encoder_config->window : 0;
  return m;
}

std::vector<diff::Parameter*> Model::parameters() {
  std::vector<diff::Parameter*> out;
  if (encoder) out = encoder->params().pointers();
  for (auto* p : flow.params().pointers()) out.push_back(p);
  return out;
}

std::vector<const diff::Parameter*> Model::parameters() const {
  std::vector<const diff::Parameter*> out;
  if (encoder) out = std::as_const(*encoder).params().pointers();
  for (auto* p : flow.params().pointers()) out.push_back(p);
  return out;
}

diff::Var Model::embed(diff::Tape& tape, const diff::Tensor& contexts) const {
  if (!encoder) return {};
  return encoder->embed(tape.constant(contexts));
}

}  // namespace nfest::training
