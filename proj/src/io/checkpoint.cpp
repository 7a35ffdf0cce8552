#include "nfest/io/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace nfest::io {
namespace {

constexpr char kMagic[8] = {'N', 'F', 'E', 'S', 'T', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take(std::istream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw CheckpointError(path + ": truncated checkpoint");
  }
  return v;
}

}  // namespace

Json to_json(const flow::FlowConfig& c) {
  return Json{{"n_layers", c.n_layers},
              {"dim", c.dim},
              {"hidden", c.hidden},
              {"context", c.context},
              {"base_hidden", c.base_hidden},
              {"log_scale_bound", c.log_scale_bound},
              {"latent_frame_layers", c.latent_frame_layers},
              {"seed", c.seed}};
}

flow::FlowConfig flow_config_from_json(const Json& j) {
  flow::FlowConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.dim = j.at("dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.context = j.at("context").get<std::size_t>();
  c.base_hidden = j.at("base_hidden").get<std::size_t>();
  c.log_scale_bound = j.at("log_scale_bound").get<double>();
  c.latent_frame_layers = j.at("latent_frame_layers").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

Json to_json(const encoders::EncoderConfig& c) {
  return Json{{"kind", encoders::to_string(c.kind)},
              {"input_dim", c.input_dim},
              {"window", c.window},
              {"embed_dim", c.embed_dim},
              {"mlp_hidden", c.mlp_hidden},
              {"model_dim", c.model_dim},
              {"n_encoder_layers", c.n_encoder_layers},
              {"n_decoder_layers", c.n_decoder_layers},
              {"n_heads", c.n_heads},
              {"ssm_state_dim", c.ssm_state_dim},
              {"conv_width", c.conv_width},
              {"expand", c.expand},
              {"seed", c.seed}};
}

encoders::EncoderConfig encoder_config_from_json(const Json& j) {
  encoders::EncoderConfig c;
  c.kind = encoders::parse_encoder_kind(j.at("kind").get<std::string>());
  c.input_dim = j.at("input_dim").get<std::size_t>();
  c.window = j.at("window").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
  c.model_dim = j.at("model_dim").get<std::size_t>();
  c.n_encoder_layers = j.at("n_encoder_layers").get<std::size_t>();
  c.n_decoder_layers = j.at("n_decoder_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.ssm_state_dim = j.at("ssm_state_dim").get<std::size_t>();
  c.conv_width = j.at("conv_width").get<std::size_t>();
  c.expand = j.at("expand").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

Json checkpoint_header(const training::Model& model, const Json& extra) {
  Json h;
  h["format"] = "nfest-checkpoint";
  h["version"] = kCheckpointVersion;
  h["system"] = model.system;
  h["flow"] = to_json(model.flow.config());
  h["encoder"] = model.encoder ? to_json(model.encoder->config()) : Json(nullptr);
  h["window"] = to_json(model.window);
  h["normalizer"] = to_json(model.normalizer);
  Json params = Json::array();
  for (const auto* p : model.parameters()) {
    params.push_back(Json{{"name", p->name}, {"shape", p->value.shape()}});
  }
  h["parameters"] = std::move(params);
  for (const auto& [k, v] : extra.items()) {
    if (!h.contains(k)) h[k] = v;
  }
  return h;
}

void save_checkpoint(const training::Model& model, const std::string& path,
                     const Json& extra) {
  const std::string header = checkpoint_header(model, extra).dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto* p : model.parameters()) {
    const auto& v = p->value.values();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw CheckpointError(path + ": not a checkpoint file");
  }
  const auto version = take<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError(path + ": unsupported checkpoint version " +
                          std::to_string(version));
  }
  const auto len = take<std::uint64_t>(in, path);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
    throw CheckpointError(path + ": truncated header");
  }
  LoadedCheckpoint out;
  try {
    out.header = Json::parse(text);
    const auto fc = flow_config_from_json(out.header.at("flow"));
    std::optional<encoders::EncoderConfig> ec;
    if (!out.header.at("encoder").is_null()) {
      ec = encoder_config_from_json(out.header.at("encoder"));
    }
    out.model = training::Model::create(fc, ec);
    out.model.system = out.header.at("system").get<std::string>();
    out.model.window = window_spec_from_json(out.header.at("window"));
    out.model.normalizer = normalizer_from_json(out.header.at("normalizer"));
  } catch (const Json::exception& e) {
    throw CheckpointError(path + ": bad header: " + e.what());
  }

  const auto params = out.model.parameters();
  const auto& listed = out.header.at("parameters");
  if (listed.size() != params.size()) {
    throw CheckpointError(path + ": header lists " + std::to_string(listed.size()) +
                          " parameters, model has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto name = listed[i].at("name").get<std::string>();
    const auto shape = listed[i].at("shape").get<diff::Shape>();
    if (name != params[i]->name || shape != params[i]->value.shape()) {
      throw CheckpointError(path + ": parameter " + std::to_string(i) + " is '" + name +
                            "' " + diff::to_string(shape) + ", model expects '" +
                            params[i]->name + "' " +
                            diff::to_string(params[i]->value.shape()));
    }
    auto v = params[i]->value.data();
    if (!in.read(reinterpret_cast<char*>(v.data()),
                 static_cast<std::streamsize>(v.size() * sizeof(double)))) {
      throw CheckpointError(path + ": truncated parameter data");
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw CheckpointError(path + ": trailing bytes after parameter data");
  }
  return out;
}

std::string file_digest(const std::string& path) {
  const std::string bytes = slurp(path);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace nfest::io
