#include "nfest/diff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace nfest::diff {
namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using Map = Eigen::Map<RowMatrix>;

ConstMap as_matrix(std::span<const double> data, std::size_t rows,
                   std::size_t cols) {
  return ConstMap(data.data(), static_cast<Eigen::Index>(rows),
                  static_cast<Eigen::Index>(cols));
}

Map as_matrix(std::vector<double>& data, std::size_t rows, std::size_t cols) {
  return Map(data.data(), static_cast<Eigen::Index>(rows),
             static_cast<Eigen::Index>(cols));
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::invalid_argument("operation on an empty Var");
  return a.tape();
}

void same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) {
    throw std::invalid_argument("operands recorded on different tapes");
  }
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a,
                                 const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) +
                   " and " + to_string(b));
}

// Right-operand broadcast for binary elementwise operations.
enum class Broadcast { kSame, kTrailing, kScalar };

Broadcast broadcast_kind(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::kSame;
  if (num_elements(b) == 1) return Broadcast::kScalar;
  if (a.size() == b.size() && b.back() == 1 &&
      std::equal(a.begin(), a.end() - 1, b.begin())) {
    return Broadcast::kTrailing;
  }
  shape_mismatch(op, a, b);
}

struct BinaryIndex {
  Broadcast kind;
  std::size_t last;
  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case Broadcast::kSame: return i;
      case Broadcast::kTrailing: return i / last;
      case Broadcast::kScalar: return 0;
    }
    return 0;
  }
};

double sigmoid_of(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_of(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

Var binary(Elementwise kind, Var a, Var b) {
  static constexpr const char* kNames[] = {"add", "sub", "mul", "div"};
  const char* name = kNames[static_cast<int>(kind)];
  Tape& tape = tape_of(a);
  if (!b.valid()) {
    throw std::invalid_argument(std::string(name) + " needs two operands");
  }
  same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const BinaryIndex bi{broadcast_kind(name, av.shape(), bv.shape()),
                       av.cols()};

  if (kind == Elementwise::kDiv) {
    for (std::size_t i = 0; i < bv.size(); ++i) {
      if (bv[i] == 0.0) {
        throw DomainError("div: zero divisor at index " + std::to_string(i));
      }
    }
  }

  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av[i];
    const double y = bv[bi(i)];
    switch (kind) {
      case Elementwise::kAdd: out[i] = x + y; break;
      case Elementwise::kSub: out[i] = x - y; break;
      case Elementwise::kMul: out[i] = x * y; break;
      default: out[i] = x / y; break;
    }
  }

  const NodeId ia = a.id();
  const NodeId ib = b.id();
  return tape.record(
      std::move(out), {ia, ib}, [kind, ia, ib, bi](Tape& t, NodeId self) {
        const auto& g = t.grad(self);
        const auto& x = t.value(ia);
        const auto& y = t.value(ib);
        auto& ga = t.grad(ia);
        auto& gb = t.grad(ib);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t j = bi(i);
          switch (kind) {
            case Elementwise::kAdd:
              ga[i] += g[i];
              gb[j] += g[i];
              break;
            case Elementwise::kSub:
              ga[i] += g[i];
              gb[j] -= g[i];
              break;
            case Elementwise::kMul:
              ga[i] += g[i] * y[j];
              gb[j] += g[i] * x[i];
              break;
            default:
              ga[i] += g[i] / y[j];
              gb[j] -= g[i] * x[i] / (y[j] * y[j]);
              break;
          }
        }
      });
}

Var unary(Elementwise kind, Var a) {
  Tape& tape = tape_of(a);
  const auto& av = a.value();
  if (kind == Elementwise::kLog) {
    for (std::size_t i = 0; i < av.size(); ++i) {
      if (!(av[i] > 0.0)) {
        throw DomainError("log: non-positive entry " + std::to_string(av[i]) +
                          " at index " + std::to_string(i));
      }
    }
  }
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av[i];
    switch (kind) {
      case Elementwise::kExp: out[i] = std::exp(x); break;
      case Elementwise::kLog: out[i] = std::log(x); break;
      case Elementwise::kTanh: out[i] = std::tanh(x); break;
      case Elementwise::kSilu: out[i] = x * sigmoid_of(x); break;
      case Elementwise::kNeg: out[i] = -x; break;
      case Elementwise::kSigmoid: out[i] = sigmoid_of(x); break;
      case Elementwise::kSoftplus: out[i] = softplus_of(x); break;
      case Elementwise::kSquare: out[i] = x * x; break;
      default: throw std::invalid_argument("not a unary elementwise kind");
    }
  }
  const NodeId ia = a.id();
  return tape.record(std::move(out), {ia}, [kind, ia](Tape& t, NodeId self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(ia);
    const auto& y = t.value(self);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = 0.0;
      switch (kind) {
        case Elementwise::kExp: d = y[i]; break;
        case Elementwise::kLog: d = 1.0 / x[i]; break;
        case Elementwise::kTanh: d = 1.0 - y[i] * y[i]; break;
        case Elementwise::kSilu: {
          const double s = sigmoid_of(x[i]);
          d = s + x[i] * s * (1.0 - s);
          break;
        }
        case Elementwise::kNeg: d = -1.0; break;
        case Elementwise::kSigmoid: d = y[i] * (1.0 - y[i]); break;
        case Elementwise::kSoftplus: d = sigmoid_of(x[i]); break;
        case Elementwise::kSquare: d = 2.0 * x[i]; break;
        default: break;
      }
      ga[i] += g[i] * d;
    }
  });
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " is invalid for shape " + to_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

double zoh_factor_derivative(double delta, double a) {
  // d/da of (exp(delta a) - 1) / a = delta^2 g'(z), g(z) = expm1(z) / z.
  const double z = delta * a;
  double gp = 0.0;
  if (std::abs(z) < 1e-3) {
    gp = 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0;
  } else {
    gp = (std::exp(z) * (z - 1.0) + 1.0) / (z * z);
  }
  return delta * delta * gp;
}

}  // namespace

Var elementwise(Elementwise kind, Var a, Var b) {
  switch (kind) {
    case Elementwise::kAdd:
    case Elementwise::kSub:
    case Elementwise::kMul:
    case Elementwise::kDiv:
      return binary(kind, a, b);
    default:
      return unary(kind, a);
  }
}

Var add(Var a, Var b) { return binary(Elementwise::kAdd, a, b); }
Var sub(Var a, Var b) { return binary(Elementwise::kSub, a, b); }
Var mul(Var a, Var b) { return binary(Elementwise::kMul, a, b); }
Var div(Var a, Var b) { return binary(Elementwise::kDiv, a, b); }
Var exp(Var a) { return unary(Elementwise::kExp, a); }
Var log(Var a) { return unary(Elementwise::kLog, a); }
Var tanh(Var a) { return unary(Elementwise::kTanh, a); }
Var silu(Var a) { return unary(Elementwise::kSilu, a); }
Var neg(Var a) { return unary(Elementwise::kNeg, a); }
Var sigmoid(Var a) { return unary(Elementwise::kSigmoid, a); }
Var softplus(Var a) { return unary(Elementwise::kSoftplus, a); }
Var square(Var a) { return unary(Elementwise::kSquare, a); }

Var scale(Var a, double factor) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (auto& v : out.data()) v *= factor;
  const NodeId ia = a.id();
  return tape.record(std::move(out), {ia},
                     [ia, factor](Tape& t, NodeId self) {
                       const auto& g = t.grad(self);
                       auto& ga = t.grad(ia);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         ga[i] += factor * g[i];
                       }
                     });
}

Var add_scalar(Var a, double offset) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (auto& v : out.data()) v += offset;
  const NodeId ia = a.id();
  return tape.record(std::move(out), {ia}, [ia](Tape& t, NodeId self) {
    t.accumulate(ia, t.grad(self));
  });
}

Var clamp(Var a, double lo, double hi) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::clamp(v, lo, hi);
  const NodeId ia = a.id();
  return tape.record(std::move(out), {ia}, [ia, lo, hi](Tape& t, NodeId self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(ia);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] >= lo && x[i] <= hi) ga[i] += g[i];
    }
  });
}

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a);
  same_tape(a, b);
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
    shape_mismatch("matmul", as, bs);
  }
  const std::size_t m = as[0], k = as[1], n = bs[1];
  std::vector<double> buf(m * n);
  as_matrix(buf, m, n).noalias() =
      as_matrix(a.value().data(), m, k) * as_matrix(b.value().data(), k, n);
  const NodeId ia = a.id(), ib = b.id();
  return tape.record(Tensor({m, n}, std::move(buf)), {ia, ib},
                     [ia, ib, m, k, n](Tape& t, NodeId self) {
                       const auto g = as_matrix(t.grad(self), m, n);
                       const auto av = as_matrix(t.value(ia).data(), m, k);
                       const auto bv = as_matrix(t.value(ib).data(), k, n);
                       as_matrix(t.grad(ia), m, k).noalias() +=
                           g * bv.transpose();
                       as_matrix(t.grad(ib), k, n).noalias() +=
                           av.transpose() * g;
                     });
}

Var linear(Var x, Var w, Var bias) {
  Tape& tape = tape_of(x);
  same_tape(x, w);
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws.size() != 2 || xs.back() != ws[0]) shape_mismatch("linear", xs, ws);
  const std::size_t rows = x.value().rows(), in = ws[0], out_dim = ws[1];
  if (bias.valid()) {
    same_tape(x, bias);
    if (bias.size() != out_dim) {
      shape_mismatch("linear (bias)", ws, bias.shape());
    }
  }
  std::vector<double> buf(rows * out_dim);
  auto y = as_matrix(buf, rows, out_dim);
  y.noalias() = as_matrix(x.value().data(), rows, in) *
                as_matrix(w.value().data(), in, out_dim);
  if (bias.valid()) {
    const auto bv = as_matrix(bias.value().data(), 1, out_dim);
    y.rowwise() += bv.row(0);
  }
  Shape shape = xs;
  shape.back() = out_dim;
  const NodeId ix = x.id(), iw = w.id();
  const bool has_bias = bias.valid();
  const NodeId ibias = has_bias ? bias.id() : 0;
  std::vector<NodeId> inputs{ix, iw};
  if (has_bias) inputs.push_back(ibias);
  return tape.record(
      Tensor(std::move(shape), std::move(buf)), std::move(inputs),
      [=](Tape& t, NodeId self) {
        const auto g = as_matrix(t.grad(self), rows, out_dim);
        const auto xv = as_matrix(t.value(ix).data(), rows, in);
        const auto wv = as_matrix(t.value(iw).data(), in, out_dim);
        as_matrix(t.grad(ix), rows, in).noalias() += g * wv.transpose();
        as_matrix(t.grad(iw), in, out_dim).noalias() += xv.transpose() * g;
        if (has_bias) {
          as_matrix(t.grad(ibias), 1, out_dim) += g.colwise().sum();
        }
      });
}

Var bmm(Var a, Var b, bool transpose_b) {
  Tape& tape = tape_of(a);
  same_tape(a, b);
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0]) {
    shape_mismatch("bmm", as, bs);
  }
  const std::size_t batch = as[0], m = as[1], k = as[2];
  const std::size_t n = transpose_b ? bs[1] : bs[2];
  if ((transpose_b ? bs[2] : bs[1]) != k) shape_mismatch("bmm", as, bs);
  const std::size_t b_rows = bs[1], b_cols = bs[2];

  std::vector<double> buf(batch * m * n);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < batch; ++i) {
    auto y = Map(buf.data() + i * m * n, m, n);
    const auto ai = ConstMap(av.data().data() + i * m * k, m, k);
    const auto bi = ConstMap(bv.data().data() + i * b_rows * b_cols, b_rows,
                             b_cols);
    if (transpose_b) {
      y.noalias() = ai * bi.transpose();
    } else {
      y.noalias() = ai * bi;
    }
  }
  const NodeId ia = a.id(), ib = b.id();
  return tape.record(
      Tensor({batch, m, n}, std::move(buf)), {ia, ib},
      [=](Tape& t, NodeId self) {
        const auto& g = t.grad(self);
        const auto& avv = t.value(ia);
        const auto& bvv = t.value(ib);
        auto& ga = t.grad(ia);
        auto& gb = t.grad(ib);
        for (std::size_t i = 0; i < batch; ++i) {
          const auto gi = ConstMap(g.data() + i * m * n, m, n);
          const auto ai = ConstMap(avv.data().data() + i * m * k, m, k);
          const auto bi = ConstMap(bvv.data().data() + i * b_rows * b_cols,
                                   b_rows, b_cols);
          auto gai = Map(ga.data() + i * m * k, m, k);
          auto gbi = Map(gb.data() + i * b_rows * b_cols, b_rows, b_cols);
          if (transpose_b) {
            gai.noalias() += gi * bi;
            gbi.noalias() += gi.transpose() * ai;
          } else {
            gai.noalias() += gi * bi.transpose();
            gbi.noalias() += ai.transpose() * gi;
          }
        }
      });
}

Var reduce(Reduction kind, Var a) {
  Tape& tape = tape_of(a);
  const auto& av = a.value();
  const std::size_t n = av.size();
  double result = 0.0;
  std::size_t argmax = 0;
  switch (kind) {
    case Reduction::kSum:
    case Reduction::kMean:
      for (double v : av.data()) result += v;
      if (kind == Reduction::kMean) result /= static_cast<double>(n);
      break;
    case Reduction::kMax:
      result = av[0];
      for (std::size_t i = 1; i < n; ++i) {
        if (av[i] > result) {
          result = av[i];
          argmax = i;
        }
      }
      break;
  }
  const NodeId ia = a.id();
  return tape.record(Tensor::scalar(result), {ia},
                     [kind, ia, n, argmax](Tape& t, NodeId self) {
                       const double g = t.grad(self)[0];
                       auto& ga = t.grad(ia);
                       switch (kind) {
                         case Reduction::kSum:
                           for (auto& v : ga) v += g;
                           break;
                         case Reduction::kMean:
                           for (auto& v : ga) v += g / static_cast<double>(n);
                           break;
                         case Reduction::kMax:
                           ga[argmax] += g;
                           break;
                       }
                     });
}

Var reduce(Reduction kind, Var a, std::size_t axis) {
  Tape& tape = tape_of(a);
  const auto& av = a.value();
  const AxisSplit s = split_axis(av.shape(), axis, "reduce");
  Shape shape = av.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};

  Tensor out(shape);
  std::vector<std::size_t> argmax(out.size(), 0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t dst = o * s.inner + in;
      const double* src = av.data().data() + o * s.extent * s.inner + in;
      double acc = src[0];
      std::size_t best = 0;
      for (std::size_t e = 1; e < s.extent; ++e) {
        const double v = src[e * s.inner];
        if (kind == Reduction::kMax) {
          if (v > acc) {
            acc = v;
            best = e;
          }
        } else {
          acc += v;
        }
      }
      if (kind == Reduction::kMean) acc /= static_cast<double>(s.extent);
      out[dst] = acc;
      argmax[dst] = best;
    }
  }
  const NodeId ia = a.id();
  return tape.record(
      std::move(out), {ia},
      [kind, ia, s, argmax = std::move(argmax)](Tape& t, NodeId self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ia);
        const double w =
            kind == Reduction::kMean ? 1.0 / static_cast<double>(s.extent)
                                     : 1.0;
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t dst = o * s.inner + in;
            const std::size_t base = o * s.extent * s.inner + in;
            if (kind == Reduction::kMax) {
              ga[base + argmax[dst] * s.inner] += g[dst];
            } else {
              for (std::size_t e = 0; e < s.extent; ++e) {
                ga[base + e * s.inner] += w * g[dst];
              }
            }
          }
        }
      });
}

Var softmax_masked(Var logits, const std::vector<bool>& mask,
                   std::size_t mask_rows, std::size_t mask_cols) {
  Tape& tape = tape_of(logits);
  const auto& lv = logits.value();
  const auto& ls = lv.shape();
  if (ls.size() < 2 || ls[ls.size() - 2] != mask_rows ||
      ls.back() != mask_cols || mask.size() != mask_rows * mask_cols) {
    shape_mismatch("softmax_masked", ls, Shape{mask_rows, mask_cols});
  }
  for (std::size_t r = 0; r < mask_rows; ++r) {
    bool any = false;
    for (std::size_t c = 0; c < mask_cols; ++c) any = any || mask[r * mask_cols + c];
    if (!any) {
      throw DomainError("softmax_masked: row " + std::to_string(r) +
                        " is fully masked");
    }
  }
  const std::size_t rows = lv.rows(), cols = mask_cols;
  Tensor out(ls, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t mr = (r % mask_rows) * cols;
    const double* x = lv.data().data() + r * cols;
    double* y = out.data().data() + r * cols;
    double hi = -INFINITY;
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask[mr + c]) hi = std::max(hi, x[c]);
    }
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask[mr + c]) {
        y[c] = std::exp(x[c] - hi);
        total += y[c];
      }
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= total;
  }
  const NodeId il = logits.id();
  return tape.record(std::move(out), {il},
                     [il, rows, cols](Tape& t, NodeId self) {
                       const auto& g = t.grad(self);
                       const auto& y = t.value(self);
                       auto& gl = t.grad(il);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double dot = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) {
                           dot += g[r * cols + c] * y[r * cols + c];
                         }
                         for (std::size_t c = 0; c < cols; ++c) {
                           const std::size_t i = r * cols + c;
                           gl[i] += y[i] * (g[i] - dot);
                         }
                       }
                     });
}

Var reshape(Var a, Shape shape) {
  Tape& tape = tape_of(a);
  if (num_elements(shape) != a.size()) shape_mismatch("reshape", a.shape(), shape);
  const NodeId ia = a.id();
  return tape.record(a.value().reshaped(std::move(shape)), {ia},
                     [ia](Tape& t, NodeId self) {
                       t.accumulate(ia, t.grad(self));
                     });
}

Var slice(Var a, std::size_t axis, std::size_t start, std::size_t length) {
  Tape& tape = tape_of(a);
  const auto& av = a.value();
  const AxisSplit s = split_axis(av.shape(), axis, "slice");
  if (length == 0 || start + length > s.extent) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") exceeds axis " +
                     std::to_string(axis) + " of shape " + to_string(av.shape()));
  }
  Shape shape = av.shape();
  shape[axis] = length;
  Tensor out(shape);
  const std::size_t block = length * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    const double* src = av.data().data() + (o * s.extent + start) * s.inner;
    std::copy(src, src + block, out.data().data() + o * block);
  }
  const NodeId ia = a.id();
  return tape.record(std::move(out), {ia},
                     [ia, s, start, block](Tape& t, NodeId self) {
                       const auto& g = t.grad(self);
                       auto& ga = t.grad(ia);
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         double* dst = ga.data() + (o * s.extent + start) * s.inner;
                         const double* src = g.data() + o * block;
                         for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                       }
                     });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  Tape& tape = tape_of(parts[0]);
  const Shape& first = parts[0].shape();
  Shape shape = first;
  shape.at(axis) = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    same_tape(parts[0], p);
    const Shape& ps = p.shape();
    if (ps.size() != first.size()) shape_mismatch("concat", first, ps);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (i != axis && ps[i] != first[i]) shape_mismatch("concat", first, ps);
    }
    extents.push_back(ps[axis]);
    shape[axis] += ps[axis];
  }
  const AxisSplit s = split_axis(shape, axis, "concat");
  Tensor out(shape);
  std::vector<NodeId> ids;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value();
    const std::size_t block = extents[k] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy(pv.data().data() + o * block, pv.data().data() + (o + 1) * block,
                out.data().data() + (o * s.extent + offset) * s.inner);
    }
    offset += extents[k];
    ids.push_back(parts[k].id());
  }
  return tape.record(std::move(out), ids,
                     [ids, extents, s](Tape& t, NodeId self) {
                       const auto& g = t.grad(self);
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < ids.size(); ++k) {
                         auto& gp = t.grad(ids[k]);
                         const std::size_t block = extents[k] * s.inner;
                         for (std::size_t o = 0; o < s.outer; ++o) {
                           const double* src =
                               g.data() + (o * s.extent + offset) * s.inner;
                           double* dst = gp.data() + o * block;
                           for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                         }
                         offset += extents[k];
                       }
                     });
}

Var gather_last(Var a, const std::vector<std::size_t>& perm) {
  Tape& tape = tape_of(a);
  const auto& av = a.value();
  const std::size_t cols = av.cols(), rows = av.rows();
  for (auto p : perm) {
    if (p >= cols) {
      throw ShapeError("gather_last: index " + std::to_string(p) +
                       " out of range for shape " + to_string(av.shape()));
    }
  }
  Shape shape = av.shape();
  shape.back() = perm.size();
  Tensor out(shape);
  const std::size_t n = perm.size();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = av[r * cols + perm[j]];
  }
  const NodeId ia = a.id();
  return tape.record(std::move(out), {ia},
                     [ia, perm, rows, cols, n](Tape& t, NodeId self) {
                       const auto& g = t.grad(self);
                       auto& ga = t.grad(ia);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t j = 0; j < n; ++j) {
                           ga[r * cols + perm[j]] += g[r * n + j];
                         }
                       }
                     });
}

Var row_norm(Var a) {
  Tape& tape = tape_of(a);
  const auto& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  Shape shape(av.shape().begin(), av.shape().end() - 1);
  if (shape.empty()) shape = {1};
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += av[r * cols + c] * av[r * cols + c];
    out[r] = std::sqrt(acc);
  }
  const NodeId ia = a.id();
  return tape.record(std::move(out), {ia}, [ia, rows, cols](Tape& t, NodeId self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(ia);
    const auto& y = t.value(self);
    auto& ga = t.grad(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      if (y[r] == 0.0) continue;
      const double w = g[r] / y[r];
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += w * x[r * cols + c];
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& tape = tape_of(x);
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gain.size() != cols || bias.size() != cols) {
    shape_mismatch("layer_norm", xv.shape(), gain.shape());
  }
  Tensor out(xv.shape());
  std::vector<double> xhat(xv.size()), inv_std(rows);
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data().data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += row[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      xhat[i] = (row[c] - mu) * inv_std[r];
      out[i] = xhat[i] * gv[c] + bv[c];
    }
  }
  const NodeId ix = x.id(), ig = gain.id(), ib = bias.id();
  return tape.record(
      std::move(out), {ix, ig, ib},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                NodeId self) {
        const auto& g = t.grad(self);
        const auto& gv = t.value(ig);
        auto& gx = t.grad(ix);
        auto& gg = t.grad(ig);
        auto& gb = t.grad(ib);
        const double n = static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            const double d = g[i] * gv[c];
            gg[c] += g[i] * xhat[i];
            gb[c] += g[i];
            mean_d += d;
            mean_dx += d * xhat[i];
          }
          mean_d /= n;
          mean_dx /= n;
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            gx[i] += inv_std[r] * (g[i] * gv[c] - mean_d - xhat[i] * mean_dx);
          }
        }
      });
}

Var rms_norm(Var x, Var gain, double eps) {
  Tape& tape = tape_of(x);
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gain.size() != cols) shape_mismatch("rms_norm", xv.shape(), gain.shape());
  Tensor out(xv.shape());
  std::vector<double> inv_rms(rows);
  const auto& gv = gain.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ms += xv[r * cols + c] * xv[r * cols + c];
    inv_rms[r] = 1.0 / std::sqrt(ms / static_cast<double>(cols) + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = xv[r * cols + c] * inv_rms[r] * gv[c];
    }
  }
  const NodeId ix = x.id(), ig = gain.id();
  return tape.record(
      std::move(out), {ix, ig},
      [=, inv_rms = std::move(inv_rms)](Tape& t, NodeId self) {
        const auto& g = t.grad(self);
        const auto& xs = t.value(ix);
        const auto& gv = t.value(ig);
        auto& gx = t.grad(ix);
        auto& gg = t.grad(ig);
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            gg[c] += g[i] * xs[i] * inv_rms[r];
            dot += g[i] * gv[c] * xs[i];
          }
          const double k = inv_rms[r] * inv_rms[r] * dot / static_cast<double>(cols);
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            gx[i] += inv_rms[r] * (g[i] * gv[c] - xs[i] * k);
          }
        }
      });
}

Var causal_depthwise_conv(Var x, Var kernel, Var bias) {
  Tape& tape = tape_of(x);
  const auto& xs = x.shape();
  const auto& ks = kernel.shape();
  if (xs.size() != 3 || ks.size() != 2 || ks[1] != xs[2] ||
      bias.size() != xs[2]) {
    shape_mismatch("causal_depthwise_conv", xs, ks);
  }
  const std::size_t batch = xs[0], steps = xs[1], ch = xs[2], width = ks[0];
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  const auto& bv = bias.value();
  Tensor out(xs);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      double* y = out.data().data() + (b * steps + t) * ch;
      for (std::size_t c = 0; c < ch; ++c) y[c] = bv[c];
      for (std::size_t k = 0; k < width && k <= t; ++k) {
        const double* src = xv.data().data() + (b * steps + t - k) * ch;
        for (std::size_t c = 0; c < ch; ++c) y[c] += kv[k * ch + c] * src[c];
      }
    }
  }
  const NodeId ix = x.id(), ik = kernel.id(), ib = bias.id();
  return tape.record(std::move(out), {ix, ik, ib}, [=](Tape& t, NodeId self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(ix);
    const auto& kv = t.value(ik);
    auto& gx = t.grad(ix);
    auto& gk = t.grad(ik);
    auto& gb = t.grad(ib);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t s = 0; s < steps; ++s) {
        const double* gy = g.data() + (b * steps + s) * ch;
        for (std::size_t c = 0; c < ch; ++c) gb[c] += gy[c];
        for (std::size_t k = 0; k < width && k <= s; ++k) {
          const std::size_t src = (b * steps + s - k) * ch;
          for (std::size_t c = 0; c < ch; ++c) {
            gk[k * ch + c] += gy[c] * xv[src + c];
            gx[src + c] += gy[c] * kv[k * ch + c];
          }
        }
      }
    }
  });
}

double zoh_input_factor(double delta, double a) {
  const double z = delta * a;
  if (std::abs(z) < 1e-6) return delta * (1.0 + z / 2.0 + z * z / 6.0);
  return std::expm1(z) / a;
}

Var selective_scan(Var x, Var delta, Var a, Var b, Var c) {
  Tape& tape = tape_of(x);
  const auto& xs = x.shape();
  const auto& as = a.shape();
  if (xs.size() != 3 || delta.shape() != xs || as.size() != 2 ||
      as[0] != xs[2]) {
    shape_mismatch("selective_scan", xs, as);
  }
  const std::size_t batch = xs[0], steps = xs[1], ch = xs[2], ns = as[1];
  const Shape bc_shape{batch, steps, ns};
  if (b.shape() != bc_shape || c.shape() != bc_shape) {
    shape_mismatch("selective_scan (B/C)", bc_shape, b.shape());
  }
  const auto& xv = x.value();
  const auto& dv = delta.value();
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto& cv = c.value();

  // Hidden states for every (batch, step, channel, state) are kept for the
  // backward sweep.
  std::vector<double> h(batch * steps * ch * ns, 0.0);
  Tensor out(xs);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    for (std::size_t t = 0; t < steps; ++t) {
      const std::size_t tok = bi * steps + t;
      for (std::size_t k = 0; k < ch; ++k) {
        const double d = dv[tok * ch + k];
        const double u = xv[tok * ch + k];
        double y = 0.0;
        for (std::size_t n = 0; n < ns; ++n) {
          const double an = av[k * ns + n];
          const double prev = t > 0 ? h[((tok - 1) * ch + k) * ns + n] : 0.0;
          const double state = std::exp(d * an) * prev +
                               zoh_input_factor(d, an) * bv[tok * ns + n] * u;
          if (!std::isfinite(state)) {
            throw DomainError("selective_scan: non-finite state at step " +
                              std::to_string(t));
          }
          h[(tok * ch + k) * ns + n] = state;
          y += cv[tok * ns + n] * state;
        }
        out[tok * ch + k] = y;
      }
    }
  }
  const NodeId ix = x.id(), id = delta.id(), ia = a.id(), ib = b.id(),
               ic = c.id();
  return tape.record(
      std::move(out), {ix, id, ia, ib, ic},
      [=, h = std::move(h)](Tape& t, NodeId self) {
        const auto& gy = t.grad(self);
        const auto& xv = t.value(ix);
        const auto& dv = t.value(id);
        const auto& av = t.value(ia);
        const auto& bv = t.value(ib);
        const auto& cv = t.value(ic);
        auto& gx = t.grad(ix);
        auto& gd = t.grad(id);
        auto& ga = t.grad(ia);
        auto& gb = t.grad(ib);
        auto& gc = t.grad(ic);
        std::vector<double> carry(ch * ns);
        for (std::size_t bi = 0; bi < batch; ++bi) {
          std::fill(carry.begin(), carry.end(), 0.0);
          for (std::size_t s = steps; s-- > 0;) {
            const std::size_t tok = bi * steps + s;
            for (std::size_t k = 0; k < ch; ++k) {
              const double d = dv[tok * ch + k];
              const double u = xv[tok * ch + k];
              const double g_out = gy[tok * ch + k];
              for (std::size_t n = 0; n < ns; ++n) {
                const double an = av[k * ns + n];
                const double state = h[(tok * ch + k) * ns + n];
                const double prev =
                    s > 0 ? h[((tok - 1) * ch + k) * ns + n] : 0.0;
                const double decay = std::exp(d * an);
                const double factor = zoh_input_factor(d, an);
                const double bn = bv[tok * ns + n];
                const double gh = g_out * cv[tok * ns + n] + carry[k * ns + n];
                gc[tok * ns + n] += g_out * state;
                const double g_decay = gh * prev;
                const double g_factor = gh * bn * u;
                gb[tok * ns + n] += gh * factor * u;
                gx[tok * ch + k] += gh * factor * bn;
                // d(factor)/d(delta) = exp(delta a).
                gd[tok * ch + k] += g_decay * an * decay + g_factor * decay;
                ga[k * ns + n] += g_decay * d * decay +
                                  g_factor * zoh_factor_derivative(d, an);
                carry[k * ns + n] = gh * decay;
              }
            }
          }
        }
      });
}

}  // namespace nfest::diff
