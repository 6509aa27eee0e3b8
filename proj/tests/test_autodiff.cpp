// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "f3lab/autodiff.hpp"
#include "test_support.hpp"

using namespace f3lab;
using f3lab::testing::away_from_zero;
using f3lab::testing::random_tensor;
using ad::Tape;
using ad::Var;

namespace {

constexpr int kSeeds = 20;
constexpr double kTol = 1e-4;

/// Reduces any output to a scalar through fixed random weights so every output
/// coordinate contributes a distinct amount to the loss.
Var weighted_sum(Tape& t, const Var& y, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {77}));
  return ad::sum(ad::mul(y, t.constant(random_tensor(rng, y.shape(), 0.5, 1.5))));
}

template <class MakeInput, class Op>
void check_op(const char* name, MakeInput make_input, Op op) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(derive_seed(1234, {static_cast<std::uint64_t>(s)}));
    const Tensor x = make_input(rng);
    const double err = ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, op(t, v, s), s); }, x);
    EXPECT_LE(err, kTol) << name << " seed " << s;
  }
}

}  // namespace

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor(Shape{}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor::vector({1, 2}).item(), ShapeError);
  EXPECT_THROW(Tensor::vector({1, 2, 3}).reshaped({2, 2}), ShapeError);
}

TEST(Tensor, SizeMatchesShape) {
  Tensor t({2, 3, 4}, 1.5);
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_EQ(shape_str(t.shape()), "(2, 3, 4)");
}

TEST(Matmul, IdentityAndHandArithmetic) {
  Tape t;
  Var i2 = t.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  EXPECT_EQ(ad::matmul(i2, i2).value(), Tensor::matrix(2, 2, {1, 0, 0, 1}));
  Var a = t.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Var b = t.constant(Tensor::matrix(2, 1, {1, 1}));
  EXPECT_EQ(ad::matmul(a, b).value(), Tensor::matrix(2, 1, {3, 7}));
  EXPECT_THROW(ad::matmul(b, b), ShapeError);
}

TEST(Matmul, BackwardOfSumIsRowSumsOfB) {
  Tape t;
  Var a = t.leaf(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  Var b = t.leaf(Tensor::matrix(3, 2, {1, -1, 2, 0.5, -3, 4}));
  t.backward(ad::sum(ad::matmul(a, b)));
  // d sum(AB) / dA[i][k] = sum_j B[k][j]
  const Tensor ga = t.grad(a);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_DOUBLE_EQ(ga.at(i, 0), 0.0);
    EXPECT_DOUBLE_EQ(ga.at(i, 1), 2.5);
    EXPECT_DOUBLE_EQ(ga.at(i, 2), 1.0);
  }
}

TEST(Softmax, Examples) {
  Tape t;
  const Tensor z = ad::softmax(t.constant(Tensor({4})), 0).value();
  for (double v : z.data()) EXPECT_DOUBLE_EQ(v, 0.25);
  const Tensor p = ad::softmax(t.constant(Tensor::vector({0.0, std::log(2.0)})), 0).value();
  EXPECT_NEAR(p[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 2.0 / 3.0, 1e-15);
  const Tensor q = ad::softmax(t.constant(Tensor::vector({std::log(1.0), std::log(2.0), std::log(3.0)})), 0).value();
  EXPECT_NEAR(q[0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(q[2], 0.5, 1e-15);
}

TEST(Softmax, RowsSumToOneForExtremeInputs) {
  Rng rng(5);
  for (int s = 0; s < 200; ++s) {
    const double spread = std::pow(10.0, rng.uniform(-3.0, 2.5));
    Tape t;
    const Tensor x = random_tensor(rng, {3, 17}, -spread, spread);
    for (std::size_t axis : {0u, 1u}) {
      const Tensor y = ad::softmax(t.constant(x), axis).value();
      const std::size_t outer = axis == 0 ? 17 : 3, n = axis == 0 ? 3 : 17;
      for (std::size_t o = 0; o < outer; ++o) {
        double sum = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double v = axis == 0 ? y.at(k, o) : y.at(o, k);
          EXPECT_GE(v, 0.0);
          sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
    }
  }
}

TEST(Softmax, GradientLength8) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(derive_seed(9, {static_cast<std::uint64_t>(s)}));
    const Tensor x = random_tensor(rng, {8}, -3, 3);
    const double err =
        ad::grad_check([&](Tape& t, Var v) { return weighted_sum(t, ad::softmax(v, 0), s); }, x);
    EXPECT_LE(err, 1e-5);
  }
}

TEST(Elementwise, Examples) {
  Tape t;
  EXPECT_EQ(ad::sign(t.constant(Tensor::vector({-2, 0, 5}))).value(), Tensor::vector({-1, 0, 1}));
  EXPECT_DOUBLE_EQ(ad::l2_norm(t.constant(Tensor::vector({3, 4}))).value().item(), 5.0);
  Var p = t.constant(Tensor::vector({0.5, 0.5}));
  EXPECT_DOUBLE_EQ(ad::sum(ad::kl_terms(p, p)).value().item(), 0.0);
  EXPECT_DOUBLE_EQ(ad::kl_terms(t.constant(Tensor::vector({0.0, 1.0})), t.constant(Tensor::vector({0.5, 0.5})))
                       .value()[0],
                   0.0);
  EXPECT_THROW(ad::kl_terms(p, t.constant(Tensor::vector({0.0, 1.0}))), NumericError);
  EXPECT_DOUBLE_EQ(ad::mean(t.constant(Tensor::vector({1, 2, 3, 6}))).value().item(), 3.0);
  EXPECT_DOUBLE_EQ(ad::abs(t.constant(Tensor::vector({-2.5}))).value().item(), 2.5);
}

TEST(Elementwise, RowBroadcastAndShapeErrors) {
  Tape t;
  Var m = t.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Var r = t.constant(Tensor::vector({10, 20}));
  EXPECT_EQ(ad::add(m, r).value(), Tensor::matrix(2, 2, {11, 22, 13, 24}));
  EXPECT_THROW(ad::add(m, t.constant(Tensor::vector({1, 2, 3}))), ShapeError);
}

TEST(Clamp, RangeAndSubgradient) {
  Rng rng(3);
  Tape t;
  const Tensor x = random_tensor(rng, {1000}, -3, 3);
  Var v = t.leaf(x);
  Var y = ad::clamp(v, -1.0, 0.5);
  for (double e : y.value().data()) {
    EXPECT_GE(e, -1.0);
    EXPECT_LE(e, 0.5);
  }
  t.backward(ad::sum(y));
  const Tensor g = t.grad(v);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(g[i], (x[i] > -1.0 && x[i] < 0.5) ? 1.0 : 0.0);

  Tape t2;
  Var b = t2.leaf(Tensor::vector({-1.0, 0.5}));
  t2.backward(ad::sum(ad::clamp(b, -1.0, 0.5)));
  EXPECT_EQ(t2.grad(b), Tensor::vector({0.0, 0.0}));
}

TEST(Backward, Examples) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1, -2, 3}));
  t.backward(ad::sum(ad::square(x)));
  EXPECT_EQ(t.grad(x), Tensor::vector({2, -4, 6}));

  Tape c;
  Var y = c.leaf(Tensor::vector({1, 2}));
  Var k = c.constant(Tensor::scalar(4.0));
  c.backward(k);
  EXPECT_EQ(c.grad(y), Tensor::vector({0, 0}));
}

TEST(Backward, ErrorPaths) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(t.grad(x), ad::TapeError);
  EXPECT_THROW(t.backward(ad::square(x)), ad::TapeError);
  Var loss = ad::sum(x);
  t.backward(loss);
  EXPECT_THROW(t.backward(loss), ad::TapeError);
  Tape other;
  Var foreign = other.leaf(Tensor::scalar(1.0));
  EXPECT_THROW(t.grad(foreign), ad::TapeError);
  EXPECT_THROW(ad::add(x, foreign), ad::TapeError);
  EXPECT_THROW(t.grad(t.constant(Tensor::scalar(1.0))), ad::TapeError);
}

TEST(Backward, NonFiniteValuesAreErrors) {
  Tape t;
  EXPECT_THROW(t.leaf(Tensor::vector({1.0, std::nan("")})), NumericError);
  Var big = t.constant(Tensor::vector({1e200}));
  EXPECT_THROW(ad::mul(big, big), NumericError);
}

TEST(Backward, DeterministicGradients) {
  Rng rng(11);
  const Tensor a = random_tensor(rng, {4, 5}), b = random_tensor(rng, {5, 3});
  auto run = [&] {
    Tape t;
    Var va = t.leaf(a), vb = t.leaf(b);
    t.backward(ad::sum(ad::tanh(ad::softmax(ad::matmul(va, vb), 1))));
    return std::pair{t.grad(va), t.grad(vb)};
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, LinearFunctionHasNoError) {
  Rng rng(2);
  EXPECT_LE(ad::grad_check([](Tape&, Var v) { return ad::sum(v); }, random_tensor(rng, {10})), 1e-9);
}

// Reverse-mode vs central differences for every differentiable op, 20 seeds each.

TEST(GradCheckOps, Matmul) {
  check_op("matmul lhs", [](Rng& r) { return random_tensor(r, {3, 4}); },
           [](Tape& t, Var v, int s) {
             Rng r(derive_seed(s, {1}));
             return ad::matmul(v, t.constant(random_tensor(r, {4, 2})));
           });
  check_op("matmul rhs", [](Rng& r) { return random_tensor(r, {4, 2}); },
           [](Tape& t, Var v, int s) {
             Rng r(derive_seed(s, {2}));
             return ad::matmul(t.constant(random_tensor(r, {3, 4})), v);
           });
  check_op("matmul self", [](Rng& r) { return random_tensor(r, {3, 3}); },
           [](Tape&, Var v, int) { return ad::matmul(v, v); });
}

TEST(GradCheckOps, MatmulNt) {
  check_op("matmul_nt", [](Rng& r) { return random_tensor(r, {3, 4}); },
           [](Tape& t, Var v, int s) {
             Rng r(derive_seed(s, {3}));
             return ad::matmul_nt(v, t.constant(random_tensor(r, {5, 4})));
           });
  check_op("matmul_nt self", [](Rng& r) { return random_tensor(r, {3, 4}); },
           [](Tape&, Var v, int) { return ad::matmul_nt(v, v); });
}

TEST(GradCheckOps, Binary) {
  auto other = [](Tape& t, int s, Shape shape) {
    Rng r(derive_seed(s, {4}));
    return t.constant(random_tensor(r, std::move(shape)));
  };
  auto in = [](Rng& r) { return random_tensor(r, {3, 4}); };
  check_op("add", in, [&](Tape& t, Var v, int s) { return ad::add(v, other(t, s, {3, 4})); });
  check_op("sub", in, [&](Tape& t, Var v, int s) { return ad::sub(other(t, s, {3, 4}), v); });
  check_op("mul", in, [&](Tape& t, Var v, int s) { return ad::mul(v, other(t, s, {3, 4})); });
  check_op("mul self", in, [](Tape&, Var v, int) { return ad::mul(v, v); });
  check_op("add row broadcast", [](Rng& r) { return random_tensor(r, {4}); },
           [&](Tape& t, Var v, int s) { return ad::add(other(t, s, {3, 4}), v); });
  check_op("mul row broadcast", [](Rng& r) { return random_tensor(r, {4}); },
           [&](Tape& t, Var v, int s) { return ad::mul(other(t, s, {3, 4}), v); });
}

TEST(GradCheckOps, Unary) {
  auto in = [](Rng& r) { return random_tensor(r, {2, 5}, -2, 2); };
  check_op("scale", in, [](Tape&, Var v, int) { return ad::scale(v, -1.7); });
  check_op("add_scalar", in, [](Tape&, Var v, int) { return ad::add_scalar(v, 0.3); });
  check_op("tanh", in, [](Tape&, Var v, int) { return ad::tanh(v); });
  check_op("square", in, [](Tape&, Var v, int) { return ad::square(v); });
  check_op("abs", [](Rng& r) { return away_from_zero(r, {2, 5}); }, [](Tape&, Var v, int) { return ad::abs(v); });
  check_op("sign", [](Rng& r) { return away_from_zero(r, {2, 5}); }, [](Tape&, Var v, int) { return ad::sign(v); });
  check_op("clamp",
           [](Rng& r) {
             // keep every coordinate at least 0.05 away from the bounds
             Tensor t({10});
             for (double& v : t.data()) {
               const double u = r.uniform();
               v = u < 0.3 ? r.uniform(-2.0, -0.55) : (u < 0.7 ? r.uniform(-0.45, 0.45) : r.uniform(0.55, 2.0));
             }
             return t;
           },
           [](Tape&, Var v, int) { return ad::clamp(v, -0.5, 0.5); });
}

TEST(GradCheckOps, Reductions) {
  auto in = [](Rng& r) { return random_tensor(r, {3, 4}); };
  check_op("sum", in, [](Tape&, Var v, int) { return ad::sum(ad::square(v)); });
  check_op("mean", in, [](Tape&, Var v, int) { return ad::mean(ad::square(v)); });
  check_op("l2_norm", [](Rng& r) { return away_from_zero(r, {3, 4}); },
           [](Tape&, Var v, int) { return ad::l2_norm(v); });
}

TEST(GradCheckOps, Distributions) {
  auto positive = [](Rng& r) { return random_tensor(r, {3, 5}, 0.1, 1.0); };
  check_op("softmax axis 1", [](Rng& r) { return random_tensor(r, {3, 5}, -2, 2); },
           [](Tape&, Var v, int) { return ad::softmax(v, 1); });
  check_op("softmax axis 0", [](Rng& r) { return random_tensor(r, {3, 5}, -2, 2); },
           [](Tape&, Var v, int) { return ad::softmax(v, 0); });
  check_op("normalize_rows", positive, [](Tape&, Var v, int) { return ad::normalize_rows(v); });
  check_op("kl_terms p", positive, [](Tape& t, Var v, int s) {
    Rng r(derive_seed(s, {5}));
    return ad::kl_terms(v, t.constant(random_tensor(r, {3, 5}, 0.1, 1.0)));
  });
  check_op("kl_terms q", positive, [](Tape& t, Var v, int s) {
    Rng r(derive_seed(s, {6}));
    return ad::kl_terms(t.constant(random_tensor(r, {3, 5}, 0.1, 1.0)), v);
  });
  check_op("cross_entropy", [](Rng& r) { return random_tensor(r, {1, 8}, -3, 3); },
           [](Tape&, Var v, int s) { return ad::cross_entropy(v, static_cast<std::size_t>(s) % 8); });
}

TEST(GradCheckOps, Structural) {
  auto in = [](Rng& r) { return random_tensor(r, {4, 5}); };
  check_op("slice", in, [](Tape&, Var v, int) { return ad::slice(v, 1, 3, 2, 5); });
  check_op("concat_rows", in, [](Tape&, Var v, int) {
    return ad::concat_rows({ad::slice(v, 2, 4, 0, 5), v, ad::square(ad::slice(v, 0, 1, 0, 5))});
  });
  check_op("concat_cols", in, [](Tape&, Var v, int) {
    return ad::concat_cols({ad::slice(v, 0, 4, 3, 5), ad::tanh(v)});
  });
  check_op("gather", in, [](Tape&, Var v, int) {
    return ad::gather(v, {19, 0, 3, 3, 7, 12}, {2, 3});
  });
  check_op("gather_rows", in, [](Tape&, Var v, int) { return ad::gather_rows(v, {3, 1, 1}); });
  check_op("reshape", in, [](Tape&, Var v, int) { return ad::tanh(ad::reshape(v, {2, 10})); });
}

TEST(Structural, ShapeErrors) {
  Tape t;
  Var a = t.constant(Tensor({2, 3}));
  EXPECT_THROW(ad::slice(a, 1, 3, 0, 1), ShapeError);
  EXPECT_THROW(ad::concat_rows({a, t.constant(Tensor({2, 2}))}), ShapeError);
  EXPECT_THROW(ad::gather(a, {6}, {1}), ShapeError);
  EXPECT_THROW(ad::cross_entropy(t.constant(Tensor({1, 3})), 3), ShapeError);
}
