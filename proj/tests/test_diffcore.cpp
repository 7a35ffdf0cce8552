#include <cmath>
#include <random>

#include "doctest.h"
#include "nfest/diff/grad_check.hpp"
#include "nfest/diff/ops.hpp"

using namespace nfest::diff;

namespace {

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = -2.0,
               double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Weighted sum so every output entry carries a distinct cotangent.
Var weighted_sum(Var y) {
  Tensor w(y.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.1 * static_cast<double>(i % 7);
  return sum(mul(y, y.tape().constant(std::move(w))));
}

constexpr double kPrimitiveTol = 1e-5;

}  // namespace

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{0, 2}), ShapeError);
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  Parameter p("w", t);
  CHECK(p.grad.shape() == t.shape());
}

TEST_CASE("elementwise examples") {
  Tape tape;
  auto a = tape.constant(Tensor::vector({1, 2}));
  auto b = tape.constant(Tensor::vector({3, 4}));
  auto s = add(a, b);
  CHECK(s.value()[0] == 4.0);
  CHECK(s.value()[1] == 6.0);

  CHECK(silu(tape.constant(Tensor::vector({0.0}))).value()[0] == 0.0);
  auto roundtrip = log(exp(tape.constant(Tensor::vector({0.7}))));
  CHECK(std::abs(roundtrip.value()[0] - 0.7) < 1e-12);
}

TEST_CASE("elementwise errors") {
  Tape tape;
  auto a = tape.constant(Tensor::vector({1, 2, 3}));
  auto b = tape.constant(Tensor::vector({1, 2}));
  try {
    add(a, b);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[3]") != std::string::npos);
    CHECK(msg.find("[2]") != std::string::npos);
  }
  CHECK_THROWS_AS(log(tape.constant(Tensor::vector({1.0, 0.0}))), DomainError);
  CHECK_THROWS_AS(div(a, tape.constant(Tensor::vector({1, 0, 2}))), DomainError);
}

TEST_CASE("trailing singleton broadcast") {
  Tape tape;
  auto a = tape.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  auto b = tape.constant(Tensor::matrix(2, 1, {10, 20}));
  auto y = add(a, b);
  CHECK(y.value().at(0, 2) == 13.0);
  CHECK(y.value().at(1, 0) == 24.0);
  CHECK_THROWS_AS(add(a, tape.constant(Tensor::matrix(1, 3, {1, 2, 3}))),
                  ShapeError);
}

TEST_CASE("matmul examples") {
  Tape tape;
  auto id = tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  auto m = tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  auto y = matmul(id, m);
  CHECK(y.value().values() == std::vector<double>{1, 2, 3, 4});
  auto row = tape.constant(Tensor::matrix(1, 2, {1, 0}));
  auto col = tape.constant(Tensor::matrix(2, 1, {2, 5}));
  CHECK(matmul(row, col).value().item() == 2.0);
  CHECK_THROWS_AS(matmul(row, row), ShapeError);
}

TEST_CASE("gradient of sum(A B) w.r.t. A is the row sums of B") {
  std::mt19937_64 rng(3);
  Parameter a("a", uniform({3, 4}, rng));
  Parameter b("b", uniform({4, 2}, rng));
  Tape tape;
  tape.backward(sum(matmul(tape.param(a), tape.param(b))));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      const double row_sum = b.value.at(k, 0) + b.value.at(k, 1);
      CHECK(a.grad.at(i, k) == doctest::Approx(row_sum).epsilon(1e-12));
    }
  }
  auto res = grad_check(
      [&](Tape& t) { return sum(matmul(t.param(a), t.param(b))); }, {&a});
  CHECK(res.max_rel_error < 1e-8);
}

TEST_CASE("reduce examples") {
  Tape tape;
  CHECK(sum(tape.constant(Tensor::vector({1, 2, 3}))).value().item() == 6.0);
  CHECK(mean(tape.constant(Tensor::vector({2, 4}))).value().item() == 3.0);

  Parameter p("p", Tensor::vector({5, 5, 1}));
  Tape t2;
  t2.backward(reduce(Reduction::kMax, t2.param(p)));
  CHECK(p.grad.values() == std::vector<double>{1, 0, 0});

  Tape t3;
  auto m = t3.constant(Tensor::matrix(2, 3, {1, 7, 3, 4, 5, 6}));
  auto rows = reduce(Reduction::kSum, m, 1);
  CHECK(rows.shape() == Shape{2});
  CHECK(rows.value()[1] == 15.0);
  auto cols = reduce(Reduction::kMax, m, 0);
  CHECK(cols.value().values() == std::vector<double>{4, 7, 6});
  CHECK_THROWS_AS(reduce(Reduction::kSum, m, 2), ShapeError);
}

TEST_CASE("softmax_masked examples") {
  Tape tape;
  SUBCASE("one unmasked entry per row") {
    auto l = tape.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    auto y = softmax_masked(l, {false, true, false, true, false, false}, 2, 3);
    CHECK(y.value().values() == std::vector<double>{0, 1, 0, 1, 0, 0});
  }
  SUBCASE("uniform logits") {
    auto l = tape.constant(Tensor::matrix(1, 4, {0.3, 0.3, 0.3, 0.3}));
    auto y = softmax_masked(l, std::vector<bool>(4, true), 1, 4);
    for (double v : y.value().data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  }
  SUBCASE("masked large logit") {
    auto l = tape.constant(Tensor::matrix(1, 2, {10, 0}));
    auto y = softmax_masked(l, {true, false}, 1, 2);
    CHECK(y.value()[0] == 1.0);
    CHECK(y.value()[1] == 0.0);
  }
  SUBCASE("rows sum to one and masked entries are exactly zero") {
    std::mt19937_64 rng(9);
    auto l = tape.constant(uniform({3, 4, 4}, rng, -30, 30));
    std::vector<bool> causal(16);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c) causal[r * 4 + c] = c <= r;
    auto y = softmax_masked(l, causal, 4, 4);
    for (std::size_t r = 0; r < 12; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 4; ++c) {
        total += y.value()[r * 4 + c];
        if (c > r % 4) CHECK(y.value()[r * 4 + c] == 0.0);
      }
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
  }
  SUBCASE("fully masked row") {
    auto l = tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    CHECK_THROWS_AS(softmax_masked(l, {true, false, false, false}, 2, 2),
                    DomainError);
  }
}

TEST_CASE("backward examples") {
  Parameter w("w", Tensor::vector({0.5, -1, 2}));
  {
    Tape tape;
    tape.backward(sum(tape.param(w)));
  }
  CHECK(w.grad.values() == std::vector<double>{1, 1, 1});

  Parameter x("x", Tensor::vector({2}));
  {
    Tape tape;
    auto v = tape.param(x);
    tape.backward(sum(mul(v, v)));
  }
  CHECK(x.grad[0] == 4.0);

  SUBCASE("repeated backward accumulates") {
    Tape tape;
    auto v = tape.param(x);
    auto loss = sum(mul(v, v));
    tape.backward(loss);
    CHECK(x.grad[0] == 8.0);
  }
  SUBCASE("unreachable parameters stay zero") {
    Parameter unused("u", Tensor::vector({1, 2}));
    Tape tape;
    tape.param(unused);
    tape.backward(sum(tape.param(w)));
    CHECK(unused.grad.values() == std::vector<double>{0, 0});
  }
  SUBCASE("fan-out sums contributions") {
    Parameter s("s", Tensor::scalar(3.0));
    Tape tape;
    auto v = tape.param(s);
    tape.backward(add(v, v));
    CHECK(s.grad[0] == 2.0);
  }
  SUBCASE("non-scalar loss") {
    Tape tape;
    CHECK_THROWS_AS(tape.backward(tape.param(w)), ShapeError);
  }
}

TEST_CASE("grad_check conventions") {
  std::mt19937_64 rng(1);
  Parameter a("a", uniform({4}, rng));
  auto linear_f = [&](Tape& t) {
    return sum(scale(t.param(a), 3.0));
  };
  CHECK(grad_check(linear_f, {&a}).max_rel_error < 1e-10);

  auto tanh_chain = [&](Tape& t) {
    return sum(tanh(tanh(scale(t.param(a), 1.3))));
  };
  CHECK(grad_check(tanh_chain, {&a}).max_rel_error < 1e-5);

  auto constant_f = [&](Tape& t) { return sum(t.constant(Tensor::vector({1}))); };
  CHECK(grad_check(constant_f, {}).max_rel_error == 0.0);
}

TEST_CASE("every primitive matches central differences") {
  std::mt19937_64 rng(42);
  const double h = 1e-4;

  SUBCASE("binary elementwise with broadcasting") {
    Parameter a("a", uniform({3, 4}, rng));
    Parameter b("b", uniform({3, 4}, rng, 0.5, 2.0));
    Parameter bt("bt", uniform({3, 1}, rng, 0.5, 2.0));
    Parameter bs("bs", uniform({1}, rng, 0.5, 2.0));
    for (auto kind : {Elementwise::kAdd, Elementwise::kSub, Elementwise::kMul,
                      Elementwise::kDiv}) {
      for (Parameter* rhs : {&b, &bt, &bs}) {
        auto f = [&](Tape& t) {
          return weighted_sum(elementwise(kind, t.param(a), t.param(*rhs)));
        };
        CHECK(grad_check(f, {&a, rhs}, h).max_rel_error < kPrimitiveTol);
      }
    }
  }

  SUBCASE("unary elementwise") {
    Parameter a("a", uniform({2, 5}, rng));
    Parameter pos("pos", uniform({2, 5}, rng, 0.2, 2.0));
    for (auto kind : {Elementwise::kExp, Elementwise::kTanh, Elementwise::kSilu,
                      Elementwise::kNeg, Elementwise::kSigmoid,
                      Elementwise::kSoftplus, Elementwise::kSquare}) {
      auto f = [&](Tape& t) { return weighted_sum(elementwise(kind, t.param(a))); };
      CHECK(grad_check(f, {&a}, h).max_rel_error < kPrimitiveTol);
    }
    auto f = [&](Tape& t) { return weighted_sum(log(t.param(pos))); };
    CHECK(grad_check(f, {&pos}, h).max_rel_error < kPrimitiveTol);
    auto g = [&](Tape& t) {
      return weighted_sum(clamp(add_scalar(scale(t.param(a), 2.0), 0.1), -1.0, 1.5));
    };
    CHECK(grad_check(g, {&a}, h).max_rel_error < kPrimitiveTol);
  }

  SUBCASE("matmul, linear, bmm") {
    Parameter a("a", uniform({3, 4}, rng));
    Parameter b("b", uniform({4, 5}, rng));
    Parameter x("x", uniform({2, 3, 4}, rng));
    Parameter bias("bias", uniform({5}, rng));
    Parameter p("p", uniform({2, 3, 4}, rng));
    Parameter q("q", uniform({2, 4, 3}, rng));
    Parameter r("r", uniform({2, 5, 4}, rng));
    auto f1 = [&](Tape& t) { return weighted_sum(matmul(t.param(a), t.param(b))); };
    CHECK(grad_check(f1, {&a, &b}, h).max_rel_error < kPrimitiveTol);
    auto f2 = [&](Tape& t) {
      return weighted_sum(linear(t.param(x), t.param(b), t.param(bias)));
    };
    CHECK(grad_check(f2, {&x, &b, &bias}, h).max_rel_error < kPrimitiveTol);
    auto f3 = [&](Tape& t) { return weighted_sum(bmm(t.param(p), t.param(q))); };
    CHECK(grad_check(f3, {&p, &q}, h).max_rel_error < kPrimitiveTol);
    auto f4 = [&](Tape& t) {
      return weighted_sum(bmm(t.param(p), t.param(r), true));
    };
    CHECK(grad_check(f4, {&p, &r}, h).max_rel_error < kPrimitiveTol);
  }

  SUBCASE("reductions") {
    Parameter a("a", uniform({3, 4, 2}, rng));
    for (auto kind : {Reduction::kSum, Reduction::kMean, Reduction::kMax}) {
      auto full = [&](Tape& t) { return reduce(kind, t.param(a)); };
      CHECK(grad_check(full, {&a}, h).max_rel_error < kPrimitiveTol);
      for (std::size_t axis = 0; axis < 3; ++axis) {
        auto f = [&](Tape& t) { return weighted_sum(reduce(kind, t.param(a), axis)); };
        CHECK(grad_check(f, {&a}, h).max_rel_error < kPrimitiveTol);
      }
    }
  }

  SUBCASE("softmax, reshape, slice, concat, gather") {
    Parameter a("a", uniform({2, 3, 3}, rng));
    Parameter b("b", uniform({2, 3, 2}, rng));
    std::vector<bool> causal{true, false, false, true, true, false, true, true, true};
    auto f1 = [&](Tape& t) { return weighted_sum(softmax_masked(t.param(a), causal, 3, 3)); };
    CHECK(grad_check(f1, {&a}, h).max_rel_error < kPrimitiveTol);
    auto f2 = [&](Tape& t) {
      auto joined = concat({t.param(a), t.param(b)}, 2);
      auto mid = slice(reshape(joined, {6, 5}), 1, 1, 3);
      return weighted_sum(gather_last(mid, {2, 0, 1, 0}));
    };
    CHECK(grad_check(f2, {&a, &b}, h).max_rel_error < kPrimitiveTol);
    auto f3 = [&](Tape& t) { return weighted_sum(slice(t.param(a), 1, 1, 2)); };
    CHECK(grad_check(f3, {&a}, h).max_rel_error < kPrimitiveTol);
  }

  SUBCASE("norms") {
    Parameter x("x", uniform({4, 5}, rng));
    Parameter g("g", uniform({5}, rng));
    Parameter b("b", uniform({5}, rng));
    auto f1 = [&](Tape& t) { return weighted_sum(row_norm(t.param(x))); };
    CHECK(grad_check(f1, {&x}, h).max_rel_error < kPrimitiveTol);
    auto f2 = [&](Tape& t) {
      return weighted_sum(layer_norm(t.param(x), t.param(g), t.param(b)));
    };
    CHECK(grad_check(f2, {&x, &g, &b}, h).max_rel_error < kPrimitiveTol);
    auto f3 = [&](Tape& t) { return weighted_sum(rms_norm(t.param(x), t.param(g))); };
    CHECK(grad_check(f3, {&x, &g}, h).max_rel_error < kPrimitiveTol);
  }

  SUBCASE("causal convolution and selective scan") {
    Parameter x("x", uniform({2, 5, 3}, rng));
    Parameter k("k", uniform({4, 3}, rng));
    Parameter kb("kb", uniform({3}, rng));
    auto f1 = [&](Tape& t) {
      return weighted_sum(causal_depthwise_conv(t.param(x), t.param(k), t.param(kb)));
    };
    CHECK(grad_check(f1, {&x, &k, &kb}, h).max_rel_error < kPrimitiveTol);

    Parameter delta("delta", uniform({2, 5, 3}, rng, 0.05, 1.5));
    Parameter a("a", uniform({3, 4}, rng, -2.0, -0.1));
    Parameter bm("bm", uniform({2, 5, 4}, rng));
    Parameter cm("cm", uniform({2, 5, 4}, rng));
    auto f2 = [&](Tape& t) {
      return weighted_sum(selective_scan(t.param(x), t.param(delta), t.param(a),
                                         t.param(bm), t.param(cm)));
    };
    CHECK(grad_check(f2, {&x, &delta, &a, &bm, &cm}, h).max_rel_error <
          kPrimitiveTol);
  }
}

TEST_CASE("row_norm of a zero row has zero gradient") {
  Parameter x("x", Tensor::matrix(2, 2, {0, 0, 3, 4}));
  Tape tape;
  auto n = row_norm(tape.param(x));
  CHECK(n.value()[0] == 0.0);
  CHECK(n.value()[1] == 5.0);
  tape.backward(sum(n));
  CHECK(x.grad[0] == 0.0);
  CHECK(x.grad[1] == 0.0);
  CHECK(x.grad[2] == doctest::Approx(0.6));
  CHECK(x.grad[3] == doctest::Approx(0.8));
}

TEST_CASE("replay is bit-identical") {
  auto run = [] {
    std::mt19937_64 rng(5);
    Parameter a("a", uniform({3, 3}, rng));
    Parameter b("b", uniform({3, 2}, rng));
    Tape tape;
    auto y = sum(tanh(matmul(tape.param(a), tape.param(b))));
    tape.backward(y);
    auto out = a.grad.values();
    out.push_back(y.value().item());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("inference tape rejects backward") {
  Tape tape(Tape::Mode::kInference);
  auto v = tape.constant(Tensor::vector({1}));
  CHECK_THROWS(tape.backward(sum(v)));
}
