// Context encoders: map a window of R observations [B, R, m] to the flow's
// conditioning vector [B, embed_dim].
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "nfest/diff/ops.hpp"
#include "nfest/diff/params.hpp"

namespace nfest::encoders {

using diff::Tape;
using diff::Tensor;
using diff::Var;

enum class EncoderKind { kMlp, kTransformer, kSsm };

std::string to_string(EncoderKind kind);
EncoderKind parse_encoder_kind(const std::string& text);

struct EncoderConfig {
  EncoderKind kind = EncoderKind::kMlp;
  std::size_t input_dim = 2;
  std::size_t window = 5;  // fixed R, enforced by the MLP only
  std::size_t embed_dim = 4;
  std::size_t mlp_hidden = 64;
  std::size_t model_dim = 32;
  std::size_t n_encoder_layers = 4;
  std::size_t n_decoder_layers = 4;
  std::size_t n_heads = 2;
  std::size_t ssm_state_dim = 8;
  std::size_t conv_width = 4;
  std::size_t expand = 2;
  std::uint64_t seed = 0;

  void validate() const;
};

class Encoder {
 public:
  virtual ~Encoder() = default;

  const EncoderConfig& config() const noexcept { return config_; }
  diff::ParameterSet& params() noexcept { return params_; }
  const diff::ParameterSet& params() const noexcept { return params_; }

  /// obs [B, R, m] -> [B, embed_dim].
  virtual Var embed(Var obs) const = 0;
  virtual std::unique_ptr<Encoder> clone() const = 0;

 protected:
  explicit Encoder(const EncoderConfig& config) : config_(config) {}
  void check_input(Var obs) const;

  EncoderConfig config_;
  mutable diff::ParameterSet params_;
};

/// Flatten -> two SiLU hidden layers -> embed_dim.
class MlpEncoder final : public Encoder {
 public:
  explicit MlpEncoder(const EncoderConfig& config);
  Var embed(Var obs) const override;
  std::unique_ptr<Encoder> clone() const override {
    return std::make_unique<MlpEncoder>(*this);
  }

 private:
  std::size_t w1_, b1_, w2_, b2_, w3_, b3_;
};

/// Sinusoidal encoding [seq_len, model_dim]: channel 2i holds
/// sin(p / 10000^(2i / model_dim)), channel 2i + 1 the matching cosine.
Tensor positional_encoding(std::size_t seq_len, std::size_t model_dim);

/// Multi-head scaled dot-product attention with output projection.
struct MultiHeadAttention {
  std::size_t wq = 0, wk = 0, wv = 0, wo = 0, bo = 0;
  std::size_t heads = 1;

  static MultiHeadAttention create(diff::ParameterSet& params,
                                   const std::string& prefix,
                                   std::size_t model_dim, std::size_t heads,
                                   Rng& rng);
  /// q [B, Tq, D], k and v [B, Tk, D]. With `causal`, query i sees keys
  /// j <= i. `head_outputs`, when given, receives the per-head outputs
  /// before the output projection.
  Var operator()(diff::ParameterSet& params, Var q, Var k, Var v, bool causal,
                 std::vector<Var>* head_outputs = nullptr) const;
};

/// Post-norm encoder stack with a decoder over the one-position-offset
/// encoder outputs (learned start token first); the last decoder token is
/// projected to embed_dim.
class TransformerEncoder final : public Encoder {
 public:
  explicit TransformerEncoder(const EncoderConfig& config);
  Var embed(Var obs) const override;
  /// Encoder-stack token representations [B, R, model_dim].
  Var encode_tokens(Var obs) const;
  std::unique_ptr<Encoder> clone() const override {
    return std::make_unique<TransformerEncoder>(*this);
  }

 private:
  struct FeedForward {
    std::size_t w1, b1, w2, b2;
  };
  struct Norm {
    std::size_t gain, bias;
  };
  struct EncoderLayer {
    MultiHeadAttention attn;
    FeedForward ff;
    Norm n1, n2;
  };
  struct DecoderLayer {
    MultiHeadAttention self_attn, cross_attn;
    FeedForward ff;
    Norm n1, n2, n3;
  };

  FeedForward make_ff(const std::string& prefix, Rng& rng);
  Norm make_norm(const std::string& prefix);
  Var feed_forward(const FeedForward& ff, Var x) const;
  Var norm(const Norm& n, Var x) const;
  Var embed_input(Var x, std::size_t w, std::size_t b) const;

  std::size_t in_w_, in_b_, start_, out_w_, out_b_;
  std::vector<EncoderLayer> enc_;
  std::vector<DecoderLayer> dec_;
};

/// Zero-order-hold discretization of a diagonal system for one step size:
/// a_bar = exp(delta a), b_bar = (exp(delta a) - 1) / a * b (delta * b as
/// a -> 0).
std::pair<std::vector<double>, std::vector<double>> zoh_discretize(
    const std::vector<double>& a, const std::vector<double>& b, double delta);

/// Single Mamba-style block: projection, causal depthwise convolution, SiLU,
/// selective scan, SiLU gate, output projection, residual, RMS norm; the
/// last token is mapped to embed_dim.
class SsmEncoder final : public Encoder {
 public:
  explicit SsmEncoder(const EncoderConfig& config);
  Var embed(Var obs) const override;
  /// Normalized block output per token [B, R, model_dim].
  Var block_tokens(Var obs) const;
  std::unique_ptr<Encoder> clone() const override {
    return std::make_unique<SsmEncoder>(*this);
  }

 private:
  std::size_t in_w_, in_b_, wx_, wz_, conv_k_, conv_b_, wdelta_, bdelta_,
      a_log_, wb_, wc_, wout_, norm_, out_w_, out_b_;
};

std::unique_ptr<Encoder> make_encoder(const EncoderConfig& config);

}  // namespace nfest::encoders
