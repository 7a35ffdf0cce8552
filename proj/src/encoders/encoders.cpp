#include "nfest/encoders/encoders.hpp"

#include <cmath>
#include <stdexcept>

namespace nfest::encoders {
namespace {

using diff::Shape;
using diff::ShapeError;

Var tile_rows(Tape& tape, const Tensor& t, std::size_t batch) {
  Shape shape{batch};
  shape.insert(shape.end(), t.shape().begin(), t.shape().end());
  Tensor out(shape);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(t.values().begin(), t.values().end(),
              out.data().begin() + b * t.size());
  }
  return tape.constant(std::move(out));
}

// Broadcast a [D] parameter to [B, 1, D].
Var broadcast_token(Tape& tape, Var token, std::size_t batch) {
  const std::size_t d = token.size();
  return diff::linear(tape.constant(Tensor({batch, 1, 1}, 1.0)),
                      diff::reshape(token, {1, d}));
}

}  // namespace

std::string to_string(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::kMlp: return "mlp";
    case EncoderKind::kTransformer: return "transformer";
    case EncoderKind::kSsm: return "ssm";
  }
  return "?";
}

EncoderKind parse_encoder_kind(const std::string& text) {
  if (text == "mlp") return EncoderKind::kMlp;
  if (text == "transformer") return EncoderKind::kTransformer;
  if (text == "ssm" || text == "mamba") return EncoderKind::kSsm;
  throw std::invalid_argument("unknown encoder '" + text +
                              "' (expected mlp, transformer or ssm)");
}

void EncoderConfig::validate() const {
  for (auto [v, name] : {std::pair{input_dim, "input_dim"}, {window, "window"},
                         {embed_dim, "embed_dim"}, {mlp_hidden, "mlp_hidden"},
                         {model_dim, "model_dim"}, {n_heads, "n_heads"},
                         {ssm_state_dim, "ssm_state_dim"},
                         {conv_width, "conv_width"}, {expand, "expand"}}) {
    if (v < 1) throw std::invalid_argument(std::string(name) + " must be >= 1");
  }
  if (model_dim % n_heads != 0) {
    throw std::invalid_argument("model_dim must be divisible by n_heads");
  }
}

void Encoder::check_input(Var obs) const {
  const auto& s = obs.shape();
  if (s.size() != 3 || s[1] < 1 || s[2] != config_.input_dim) {
    throw ShapeError("encoder input must be [batch, R, " +
                     std::to_string(config_.input_dim) + "], got " +
                     diff::to_string(s));
  }
}

// ---------------------------------------------------------------- MLP

MlpEncoder::MlpEncoder(const EncoderConfig& config) : Encoder(config) {
  config_.validate();
  auto rng = make_stream(config_.seed, 0, 20);
  const std::size_t in = config_.window * config_.input_dim;
  const std::size_t h = config_.mlp_hidden;
  w1_ = params_.add_uniform("enc.mlp.w1", {in, h}, in, rng);
  b1_ = params_.add_uniform("enc.mlp.b1", {h}, in, rng);
  w2_ = params_.add_uniform("enc.mlp.w2", {h, h}, h, rng);
  b2_ = params_.add_uniform("enc.mlp.b2", {h}, h, rng);
  w3_ = params_.add_uniform("enc.mlp.w3", {h, config_.embed_dim}, h, rng);
  b3_ = params_.add_uniform("enc.mlp.b3", {config_.embed_dim}, h, rng);
}

Var MlpEncoder::embed(Var obs) const {
  check_input(obs);
  if (obs.shape()[1] != config_.window) {
    throw ShapeError("MLP encoder expects R = " + std::to_string(config_.window) +
                     " observations, got " + std::to_string(obs.shape()[1]));
  }
  Tape& tape = obs.tape();
  Var x = diff::reshape(obs, {obs.shape()[0], config_.window * config_.input_dim});
  x = diff::silu(diff::linear(x, params_.on(tape, w1_), params_.on(tape, b1_)));
  x = diff::silu(diff::linear(x, params_.on(tape, w2_), params_.on(tape, b2_)));
  return diff::linear(x, params_.on(tape, w3_), params_.on(tape, b3_));
}

// ---------------------------------------------------------- transformer

Tensor positional_encoding(std::size_t seq_len, std::size_t model_dim) {
  if (seq_len < 1 || model_dim < 1) {
    throw std::invalid_argument("positional_encoding needs positive sizes");
  }
  Tensor pe({seq_len, model_dim});
  for (std::size_t p = 0; p < seq_len; ++p) {
    for (std::size_t c = 0; c < model_dim; ++c) {
      const double i2 = static_cast<double>(c - c % 2);
      const double angle =
          static_cast<double>(p) / std::pow(10000.0, i2 / model_dim);
      pe.at(p, c) = c % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

MultiHeadAttention MultiHeadAttention::create(diff::ParameterSet& params,
                                              const std::string& prefix,
                                              std::size_t model_dim,
                                              std::size_t heads, Rng& rng) {
  MultiHeadAttention m;
  m.heads = heads;
  const std::size_t d = model_dim;
  m.wq = params.add_uniform(prefix + ".wq", {d, d}, d, rng);
  m.wk = params.add_uniform(prefix + ".wk", {d, d}, d, rng);
  m.wv = params.add_uniform(prefix + ".wv", {d, d}, d, rng);
  m.wo = params.add_uniform(prefix + ".wo", {d, d}, d, rng);
  m.bo = params.add(prefix + ".bo", Tensor({d}));
  return m;
}

Var MultiHeadAttention::operator()(diff::ParameterSet& params, Var q, Var k,
                                   Var v, bool causal,
                                   std::vector<Var>* head_outputs) const {
  Tape& tape = q.tape();
  const std::size_t d = q.shape()[2];
  const std::size_t tq = q.shape()[1], tk = k.shape()[1];
  if (k.shape()[2] != d || v.shape()[2] != d || v.shape()[1] != tk) {
    throw ShapeError("attention operands disagree: q " + diff::to_string(q.shape()) +
                     ", k " + diff::to_string(k.shape()) + ", v " +
                     diff::to_string(v.shape()));
  }
  const std::size_t hd = d / heads;
  std::vector<bool> mask(tq * tk, true);
  if (causal) {
    for (std::size_t i = 0; i < tq; ++i) {
      for (std::size_t j = i + 1; j < tk; ++j) mask[i * tk + j] = false;
    }
  }
  Var qp = diff::linear(q, params.on(tape, wq));
  Var kp = diff::linear(k, params.on(tape, wk));
  Var vp = diff::linear(v, params.on(tape, wv));
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Var> parts;
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = diff::slice(qp, 2, h * hd, hd);
    Var kh = diff::slice(kp, 2, h * hd, hd);
    Var vh = diff::slice(vp, 2, h * hd, hd);
    Var w = diff::softmax_masked(diff::bmm(qh, kh, true) * scale, mask, tq, tk);
    parts.push_back(diff::bmm(w, vh));
  }
  if (head_outputs) *head_outputs = parts;
  Var joined = heads == 1 ? parts[0] : diff::concat(parts, 2);
  return diff::linear(joined, params.on(tape, wo), params.on(tape, bo));
}

TransformerEncoder::FeedForward TransformerEncoder::make_ff(
    const std::string& prefix, Rng& rng) {
  const std::size_t d = config_.model_dim, h = 2 * config_.model_dim;
  return {params_.add_uniform(prefix + ".w1", {d, h}, d, rng),
          params_.add(prefix + ".b1", Tensor({h})),
          params_.add_uniform(prefix + ".w2", {h, d}, h, rng),
          params_.add(prefix + ".b2", Tensor({d}))};
}

TransformerEncoder::Norm TransformerEncoder::make_norm(const std::string& prefix) {
  const std::size_t d = config_.model_dim;
  return {params_.add(prefix + ".gain", Tensor({d}, 1.0)),
          params_.add(prefix + ".bias", Tensor({d}))};
}

TransformerEncoder::TransformerEncoder(const EncoderConfig& config)
    : Encoder(config) {
  config_.validate();
  auto rng = make_stream(config_.seed, 0, 21);
  const std::size_t d = config_.model_dim, m = config_.input_dim;
  in_w_ = params_.add_uniform("enc.tf.in.w", {m, d}, m, rng);
  in_b_ = params_.add("enc.tf.in.b", Tensor({d}));
  for (std::size_t l = 0; l < config_.n_encoder_layers; ++l) {
    const std::string p = "enc.tf.enc" + std::to_string(l);
    EncoderLayer layer;
    layer.attn = MultiHeadAttention::create(params_, p + ".attn", d, config_.n_heads, rng);
    layer.n1 = make_norm(p + ".norm1");
    layer.ff = make_ff(p + ".ff", rng);
    layer.n2 = make_norm(p + ".norm2");
    enc_.push_back(layer);
  }
  start_ = params_.add_uniform("enc.tf.start", {d}, d, rng);
  for (std::size_t l = 0; l < config_.n_decoder_layers; ++l) {
    const std::string p = "enc.tf.dec" + std::to_string(l);
    DecoderLayer layer;
    layer.self_attn = MultiHeadAttention::create(params_, p + ".self", d, config_.n_heads, rng);
    layer.n1 = make_norm(p + ".norm1");
    layer.cross_attn = MultiHeadAttention::create(params_, p + ".cross", d, config_.n_heads, rng);
    layer.n2 = make_norm(p + ".norm2");
    layer.ff = make_ff(p + ".ff", rng);
    layer.n3 = make_norm(p + ".norm3");
    dec_.push_back(layer);
  }
  out_w_ = params_.add_uniform("enc.tf.out.w", {d, config_.embed_dim}, d, rng);
  out_b_ = params_.add("enc.tf.out.b", Tensor({config_.embed_dim}));
}

Var TransformerEncoder::feed_forward(const FeedForward& ff, Var x) const {
  Tape& tape = x.tape();
  Var h = diff::silu(diff::linear(x, params_.on(tape, ff.w1), params_.on(tape, ff.b1)));
  return diff::linear(h, params_.on(tape, ff.w2), params_.on(tape, ff.b2));
}

Var TransformerEncoder::norm(const Norm& n, Var x) const {
  Tape& tape = x.tape();
  return diff::layer_norm(x, params_.on(tape, n.gain), params_.on(tape, n.bias));
}

Var TransformerEncoder::encode_tokens(Var obs) const {
  check_input(obs);
  Tape& tape = obs.tape();
  const std::size_t batch = obs.shape()[0], t = obs.shape()[1];
  Var x = diff::linear(obs, params_.on(tape, in_w_), params_.on(tape, in_b_)) +
          tile_rows(tape, positional_encoding(t, config_.model_dim), batch);
  for (const auto& layer : enc_) {
    x = norm(layer.n1, x + layer.attn(params_, x, x, x, true));
    x = norm(layer.n2, x + feed_forward(layer.ff, x));
  }
  return x;
}

Var TransformerEncoder::embed(Var obs) const {
  Var memory = encode_tokens(obs);
  Tape& tape = obs.tape();
  const std::size_t batch = obs.shape()[0], t = obs.shape()[1];
  const std::size_t d = config_.model_dim;

  Var y = broadcast_token(tape, params_.on(tape, start_), batch);
  if (t > 1) y = diff::concat({y, diff::slice(memory, 1, 0, t - 1)}, 1);
  y = y + tile_rows(tape, positional_encoding(t, d), batch);
  for (const auto& layer : dec_) {
    y = norm(layer.n1, y + layer.self_attn(params_, y, y, y, true));
    y = norm(layer.n2, y + layer.cross_attn(params_, y, memory, memory, false));
    y = norm(layer.n3, y + feed_forward(layer.ff, y));
  }
  Var last = diff::reshape(diff::slice(y, 1, t - 1, 1), {batch, d});
  return diff::linear(last, params_.on(tape, out_w_), params_.on(tape, out_b_));
}

// ------------------------------------------------------------------ SSM

std::pair<std::vector<double>, std::vector<double>> zoh_discretize(
    const std::vector<double>& a, const std::vector<double>& b, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("zoh_discretize: delta must be > 0");
  if (a.size() != b.size()) throw ShapeError("zoh_discretize: A and B differ in size");
  std::vector<double> a_bar(a.size()), b_bar(b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    a_bar[i] = std::exp(delta * a[i]);
    b_bar[i] = diff::zoh_input_factor(delta, a[i]) * b[i];
  }
  return {a_bar, b_bar};
}

SsmEncoder::SsmEncoder(const EncoderConfig& config) : Encoder(config) {
  config_.validate();
  auto rng = make_stream(config_.seed, 0, 22);
  const std::size_t m = config_.input_dim, d = config_.model_dim;
  const std::size_t e = d * config_.expand, n = config_.ssm_state_dim;
  const std::size_t k = config_.conv_width;
  in_w_ = params_.add_uniform("enc.ssm.in.w", {m, d}, m, rng);
  in_b_ = params_.add("enc.ssm.in.b", Tensor({d}));
  wx_ = params_.add_uniform("enc.ssm.wx", {d, e}, d, rng);
  wz_ = params_.add_uniform("enc.ssm.wz", {d, e}, d, rng);
  conv_k_ = params_.add_uniform("enc.ssm.conv.k", {k, e}, k, rng);
  conv_b_ = params_.add("enc.ssm.conv.b", Tensor({e}));
  wdelta_ = params_.add_uniform("enc.ssm.delta.w", {e, e}, e, rng);
  // Step sizes start log-uniform in [1e-3, 1e-1] through softplus^-1.
  Tensor bdelta({e});
  for (auto& v : bdelta.data()) {
    const double dt = std::exp(uniform(rng, std::log(1e-3), std::log(1e-1)));
    v = std::log(std::expm1(dt));
  }
  bdelta_ = params_.add("enc.ssm.delta.b", std::move(bdelta));
  // A = -exp(a_log) = -(1, 2, ..., N) per channel.
  Tensor a_log({e, n});
  for (std::size_t c = 0; c < e; ++c) {
    for (std::size_t s = 0; s < n; ++s) a_log.at(c, s) = std::log(double(s + 1));
  }
  a_log_ = params_.add("enc.ssm.a_log", std::move(a_log));
  wb_ = params_.add_uniform("enc.ssm.wb", {e, n}, e, rng);
  wc_ = params_.add_uniform("enc.ssm.wc", {e, n}, e, rng);
  wout_ = params_.add_uniform("enc.ssm.out_proj", {e, d}, e, rng);
  norm_ = params_.add("enc.ssm.norm", Tensor({d}, 1.0));
  out_w_ = params_.add_uniform("enc.ssm.out.w", {d, config_.embed_dim}, d, rng);
  out_b_ = params_.add("enc.ssm.out.b", Tensor({config_.embed_dim}));
}

Var SsmEncoder::block_tokens(Var obs) const {
  check_input(obs);
  Tape& tape = obs.tape();
  auto p = [&](std::size_t i) { return params_.on(tape, i); };

  Var u = diff::linear(obs, p(in_w_), p(in_b_));
  Var x = diff::linear(u, p(wx_));
  Var gate = diff::silu(diff::linear(u, p(wz_)));
  x = diff::silu(diff::causal_depthwise_conv(x, p(conv_k_), p(conv_b_)));
  Var delta = diff::softplus(diff::linear(x, p(wdelta_), p(bdelta_)));
  Var a = -diff::exp(p(a_log_));
  Var y = diff::selective_scan(x, delta, a, diff::linear(x, p(wb_)),
                               diff::linear(x, p(wc_)));
  Var out = diff::linear(y * gate, p(wout_));
  return diff::rms_norm(out + u, p(norm_));
}

Var SsmEncoder::embed(Var obs) const {
  Var h = block_tokens(obs);
  Tape& tape = obs.tape();
  const std::size_t batch = obs.shape()[0], t = obs.shape()[1];
  Var last = diff::reshape(diff::slice(h, 1, t - 1, 1), {batch, config_.model_dim});
  return diff::linear(last, params_.on(tape, out_w_), params_.on(tape, out_b_));
}

std::unique_ptr<Encoder> make_encoder(const EncoderConfig& config) {
  switch (config.kind) {
    case EncoderKind::kMlp: return std::make_unique<MlpEncoder>(config);
    case EncoderKind::kTransformer: return std::make_unique<TransformerEncoder>(config);
    case EncoderKind::kSsm: return std::make_unique<SsmEncoder>(config);
  }
  throw std::invalid_argument("unknown encoder kind");
}

}  // namespace nfest::encoders
