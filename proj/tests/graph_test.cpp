#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hiermem/error.hpp"
#include "hiermem/graph.hpp"

namespace hiermem {
namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor t(std::move(s));
  for (auto& v : t.storage()) v = d(rng);
  return t;
}

TEST(Ops, MatmulByIdentityIsNoop) {
  Graph g;
  Var eye = g.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  Tensor a = Tensor::matrix({{1.5, -2}, {3, 4.25}});
  Var out = matmul(eye, g.constant(a));
  EXPECT_EQ(out.value(), a);
}

TEST(Ops, SoftmaxOfEqualLogitsIsUniform) {
  Graph g;
  Var p = softmax(g.constant(Tensor::vector({0, 0, 0})), 0);
  for (double v : p.value().data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Ops, ConvOfOnesWithOnesKernelIsNine) {
  Graph g;
  Var x = g.constant(Tensor({1, 1, 3, 3}, 1.0));
  Var w = g.constant(Tensor({1, 1, 3, 3}, 1.0));
  Var b = g.constant(Tensor({1}, 0.0));
  Var y = conv2d(x, w, b, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 9.0);
}

TEST(Ops, ConvPaddingAndStrideShapes) {
  Graph g;
  std::mt19937_64 rng(1);
  Var x = g.constant(random_tensor({2, 3, 8, 6}, rng));
  Var w = g.constant(random_tensor({4, 3, 3, 3}, rng));
  Var b = g.constant(random_tensor({4}, rng));
  EXPECT_EQ(conv2d(x, w, b, 1, 1).shape(), (Shape{2, 4, 8, 6}));
  EXPECT_EQ(conv2d(x, w, b, 2, 1).shape(), (Shape{2, 4, 4, 3}));
  EXPECT_THROW(conv2d(x, w, b, 3, 1), ValueError);
}

TEST(Ops, ConvMatchesDirectSum) {
  std::mt19937_64 rng(3);
  Graph g;
  Tensor xt = random_tensor({1, 2, 5, 5}, rng), wt = random_tensor({3, 2, 3, 3}, rng),
         bt = random_tensor({3}, rng);
  for (std::size_t stride : {1u, 2u}) {
    Var y = conv2d(g.constant(xt), g.constant(wt), g.constant(bt), stride, 1);
    const auto& s = y.shape();
    for (std::size_t co = 0; co < 3; ++co) {
      for (std::size_t oy = 0; oy < s[2]; ++oy) {
        for (std::size_t ox = 0; ox < s[3]; ++ox) {
          double acc = bt[co];
          for (std::size_t ci = 0; ci < 2; ++ci) {
            for (int ky = 0; ky < 3; ++ky) {
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = static_cast<int>(oy * stride) + ky - 1;
                const int ix = static_cast<int>(ox * stride) + kx - 1;
                if (iy < 0 || ix < 0 || iy >= 5 || ix >= 5) continue;
                acc += xt[(ci * 5 + iy) * 5 + ix] * wt[((co * 2 + ci) * 3 + ky) * 3 + kx];
              }
            }
          }
          EXPECT_NEAR(y.value()[(co * s[2] + oy) * s[3] + ox], acc, 1e-12);
        }
      }
    }
  }
}

TEST(Ops, ShapeMismatchReportsBothShapes) {
  Graph g;
  Var a = g.constant(Tensor({2, 3}));
  Var b = g.constant(Tensor({3, 2}));
  try {
    add(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("(2, 3)"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("(3, 2)"), std::string::npos);
  }
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Ops, NonFiniteIsRejected) {
  Graph g;
  EXPECT_THROW(g.constant(Tensor::vector({1.0, NAN})), NumericError);
  EXPECT_THROW(log(g.constant(Tensor::vector({0.0}))), NumericError);
}

TEST(Ops, ScalarBroadcastOnly) {
  Graph g;
  Var a = g.leaf(Tensor::vector({1, 2, 3}));
  Var s = g.leaf(Tensor::scalar(2.0));
  Var y = sum(a * s);
  g.backward(y);
  EXPECT_EQ(y.item(), 12.0);
  EXPECT_EQ(s.grad()[0], 6.0);
  EXPECT_THROW(add(a, g.constant(Tensor::vector({1, 2}))), ShapeError);
}

TEST(Backward, SumGivesOnes) {
  Graph g;
  Var x = g.leaf(Tensor({2, 3}, 0.7));
  g.backward(sum(x));
  for (double v : x.grad()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SumOfSquares) {
  Graph g;
  Var x = g.leaf(Tensor::vector({2, -3}));
  g.backward(sum(x * x));
  EXPECT_EQ(x.grad(), (std::vector<double>{4, -6}));
}

TEST(Backward, ReluInactiveRegion) {
  Graph g;
  Var x = g.leaf(Tensor::scalar(-1.0));
  g.backward(relu(x));
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Graph g;
  Var x = g.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(g.backward(x * x), ShapeError);
}

TEST(Backward, VisitsEachReachableNodeOnce) {
  Graph g;
  Var x = g.leaf(Tensor::vector({1, 2}));
  Var y = exp(x);
  Var loss = sum(y * y + y);
  g.backward(loss);
  // leaf, exp, mul, add, sum
  EXPECT_EQ(g.last_backward_visits(), 5u);
}

TEST(Backward, BoundParametersAccumulate) {
  Tensor p = Tensor::vector({1.0, 2.0});
  for (int rep = 0; rep < 2; ++rep) {
    Graph g;
    g.backward(sum(g.param(p)));
  }
  EXPECT_EQ(p.grad()[0], 2.0);
  EXPECT_EQ(p.grad()[1], 2.0);
}

TEST(Backward, GradientOfSumOfLossesIsSumOfGradients) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor xt = random_tensor({3, 4}, rng), wt = random_tensor({4, 2}, rng);
    auto loss_a = [&](Var x, Var w) { return sum(softplus(matmul(x, w))); };
    auto loss_b = [&](Var x, Var w) { return mean(exp(scale(matmul(x, w), 0.3))); };
    Tensor wa = wt, wb = wt, wab = wt;
    {
      Graph g;
      Var x = g.constant(xt);
      g.backward(loss_a(x, g.param(wa)));
    }
    {
      Graph g;
      Var x = g.constant(xt);
      g.backward(loss_b(x, g.param(wb)));
    }
    {
      Graph g;
      Var x = g.constant(xt);
      Var w = g.param(wab);
      g.backward(loss_a(x, w) + loss_b(x, w));
    }
    for (std::size_t i = 0; i < wt.numel(); ++i) {
      EXPECT_NEAR(wab.grad()[i], wa.grad()[i] + wb.grad()[i], 1e-12);
    }
  }
}

TEST(Backward, DeterministicBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(5);
    Graph g;
    Var x = g.leaf(random_tensor({2, 1, 6, 6}, rng));
    Var w = g.leaf(random_tensor({3, 1, 3, 3}, rng));
    Var b = g.leaf(random_tensor({3}, rng));
    Var y = avgpool2d(relu(conv2d(x, w, b, 1, 1)), 2);
    Var loss = cross_entropy(flatten(slice(y, 3, 0, 2)), g.constant(Tensor({2, 18}, 1.0 / 18)));
    g.backward(loss);
    return std::make_pair(loss.item(), w.grad());
  };
  EXPECT_EQ(run(), run());
}

TEST(Ops, ConcatAndSliceInvert) {
  std::mt19937_64 rng(2);
  Graph g;
  Tensor a = random_tensor({2, 3, 2}, rng), b = random_tensor({2, 1, 2}, rng);
  Var c = concat({g.constant(a), g.constant(b)}, 1);
  ASSERT_EQ(c.shape(), (Shape{2, 4, 2}));
  EXPECT_EQ(slice(c, 1, 0, 3).value(), a);
  EXPECT_EQ(slice(c, 1, 3, 1).value(), b);
}

TEST(Ops, ReductionsAlongAxes) {
  Graph g;
  Var m = g.constant(Tensor::matrix({{1, 2, 3}, {4, 5, 6}}));
  EXPECT_EQ(sum(m, 0).value(), Tensor::vector({5, 7, 9}));
  EXPECT_EQ(sum(m, 1, true).value(), Tensor({2, 1}, std::vector<double>{6, 15}));
  EXPECT_EQ(mean(m, 1).value(), Tensor::vector({2, 5}));
  EXPECT_NEAR(logsumexp(m, 1).value()[0], std::log(std::exp(1) + std::exp(2) + std::exp(3)), 1e-12);
}

TEST(Ops, CrossEntropyMatchesLogSoftmax) {
  Graph g;
  Var z = g.constant(Tensor::matrix({{1, 2, 0.5}, {0, 0, 0}}));
  Var t = g.constant(Tensor::matrix({{0, 1, 0}, {1, 0, 0}}));
  Var ce = cross_entropy(z, t);
  Var ls = log_softmax(z, 1);
  const double expect = -(ls.value()[1] + ls.value()[3]) / 2.0;
  EXPECT_NEAR(ce.item(), expect, 1e-14);
}

TEST(Ops, SquaredDistances) {
  Graph g;
  Var a = g.constant(Tensor::matrix({{0, 0}, {1, 1}}));
  Var b = g.constant(Tensor::matrix({{3, 4}}));
  Var d = sq_distances(a, b);
  EXPECT_NEAR(d.value()[0], 25.0, 1e-12);
  EXPECT_NEAR(d.value()[1], 13.0, 1e-12);
}

}  // namespace
}  // namespace hiermem
