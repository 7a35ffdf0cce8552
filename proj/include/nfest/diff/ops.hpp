// Differentiable primitives. Every function records one node on the tape of
// its first operand with an exact analytic backward rule.
//
// Binary elementwise operations accept equal shapes, a right operand whose
// last axis is a singleton (shape [..., 1] against [..., n]), or a
// one-element right operand.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "nfest/diff/tape.hpp"

namespace nfest::diff {

enum class Elementwise {
  kAdd, kSub, kMul, kDiv,
  kExp, kLog, kTanh, kSilu, kNeg, kSigmoid, kSoftplus, kSquare,
};

/// Generic entry point: unary kinds ignore `b`.
Var elementwise(Elementwise kind, Var a, Var b = {});

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var silu(Var a);
Var neg(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var square(Var a);

Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
/// Clamps into [lo, hi]; the gradient is zero outside the interval.
Var clamp(Var a, double lo, double hi);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }

/// Rank-2 matrix product.
Var matmul(Var a, Var b);

/// Affine map over the last axis: x[..., in] * w[in, out] + bias[out].
/// `bias` may be invalid (no bias).
Var linear(Var x, Var w, Var bias = {});

/// Batched product of rank-3 tensors: a[B, M, K] * b[B, K, N], or
/// a[B, M, K] * b[B, N, K]^T when `transpose_b`.
Var bmm(Var a, Var b, bool transpose_b = false);

enum class Reduction { kSum, kMean, kMax };

/// Full reduction to a one-element tensor.
Var reduce(Reduction kind, Var a);
/// Reduction along `axis`; the axis is removed from the shape (a rank-1
/// input yields shape [1]). Max routes its gradient to the lowest-index
/// maximum.
Var reduce(Reduction kind, Var a, std::size_t axis);

inline Var sum(Var a) { return reduce(Reduction::kSum, a); }
inline Var mean(Var a) { return reduce(Reduction::kMean, a); }

/// Softmax over the last axis. `mask` has the shape of the trailing two
/// axes of `logits` (and is broadcast over leading axes); false entries get
/// exactly zero weight.
Var softmax_masked(Var logits, const std::vector<bool>& mask,
                   std::size_t mask_rows, std::size_t mask_cols);

Var reshape(Var a, Shape shape);
/// Contiguous slice along `axis`.
Var slice(Var a, std::size_t axis, std::size_t start, std::size_t length);
/// Concatenation along `axis`; all other extents must agree.
Var concat(const std::vector<Var>& parts, std::size_t axis);
/// out[..., j] = a[..., perm[j]].
Var gather_last(Var a, const std::vector<std::size_t>& perm);

/// Euclidean norm over the last axis: [..., n] -> [...]. The gradient at a
/// zero vector is taken as zero.
Var row_norm(Var a);

/// Layer normalization over the last axis with affine gain/bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// RMS normalization over the last axis with a gain.
Var rms_norm(Var x, Var gain, double eps = 1e-5);

/// Depthwise causal convolution along the token axis. x[B, T, C],
/// kernel[K, C] (row k multiplies x[t - k]), bias[C]; zero left padding.
Var causal_depthwise_conv(Var x, Var kernel, Var bias);

/// Zero-order-hold input factor for a diagonal system:
/// (exp(delta * a) - 1) / a, with the limit delta as a -> 0.
double zoh_input_factor(double delta, double a);

/// Selective scan over the token axis for a diagonal state matrix.
///   x, delta : [B, T, C]      a : [C, N]      b, c : [B, T, N]
///   h_t = exp(delta_t a) h_{t-1} + zoh(delta_t, a) b_t x_t,  h_{-1} = 0
///   y_t = sum_n c_t[n] h_t[:, n]
/// Returns y[B, T, C].
Var selective_scan(Var x, Var delta, Var a, Var b, Var c);

}  // namespace nfest::diff
