#include <gtest/gtest.h>

#include <cmath>

#include "xmpt/gradcheck.hpp"
#include "xmpt/op_checks.hpp"
#include "xmpt/rng.hpp"
#include "xmpt/tensor.hpp"

namespace xmpt {
namespace {

TEST(Tensor, RejectsInconsistentShape) {
  EXPECT_THROW(Tensor::from({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor::from({0, 3}, {}), ShapeError);
}

TEST(Tensor, MatmulShapeAlgebra) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 4});
  EXPECT_EQ(matmul(a, b).shape(), (Shape{2, 4}));
  try {
    matmul(b, a);
    FAIL() << "expected shape error";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("3x4"), std::string::npos);
  }
}

TEST(Tensor, ReluDefinition) {
  Tensor y = relu(Tensor::from({3}, {-1, 0, 2}));
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{0, 0, 2}));
}

TEST(Tensor, L2NormalizeThreeFourFive) {
  Tensor y = l2_normalize(Tensor::from({2}, {3, 4}));
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
}

TEST(Tensor, BroadcastAddsBiasAcrossRows) {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2}, {10, 20});
  Tensor y = add(x, b);
  EXPECT_EQ(y[0], 11);
  EXPECT_EQ(y[3], 24);
  Tensor col = Tensor::from({2, 1}, {1, 2});
  Tensor z = sub(x, col);
  EXPECT_EQ(z[1], 1);
  EXPECT_EQ(z[2], 1);
  EXPECT_THROW(add(x, Tensor::zeros({3})), ShapeError);
}

TEST(Tensor, ConvMatchesDirectSum) {
  Rng rng(3);
  Tensor x = detail::random_tensor({2, 6, 5}, rng);
  Tensor w = detail::random_tensor({3, 2, 3, 3}, rng);
  Tensor b = detail::random_tensor({3}, rng);
  Tensor y = conv2d(x, w, b, {2, 1});
  ASSERT_EQ(y.shape(), (Shape{3, 3, 3}));
  for (std::size_t co = 0; co < 3; ++co)
    for (std::size_t oy = 0; oy < 3; ++oy)
      for (std::size_t ox = 0; ox < 3; ++ox) {
        double s = b[co];
        for (std::size_t ci = 0; ci < 2; ++ci)
          for (int ki = 0; ki < 3; ++ki)
            for (int kj = 0; kj < 3; ++kj) {
              const int iy = static_cast<int>(oy * 2) + ki - 1;
              const int ix = static_cast<int>(ox * 2) + kj - 1;
              if (iy < 0 || ix < 0 || iy >= 6 || ix >= 5) continue;
              s += w[((co * 2 + ci) * 3 + ki) * 3 + kj] * x[(ci * 6 + iy) * 5 + ix];
            }
        EXPECT_NEAR(y[(co * 3 + oy) * 3 + ox], s, 1e-12);
      }
}

TEST(Tensor, UpsamplePreservesConstant) {
  Tensor y = upsample2x(Tensor::full({1, 3, 2}, 0.25));
  ASSERT_EQ(y.shape(), (Shape{1, 6, 4}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Backward, SquareGradient) {
  GraphScope scope;
  Tensor x = Tensor::from({2}, {1, 2}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, ReluSubgradient) {
  GraphScope scope;
  Tensor x = Tensor::from({2}, {-1, 2}, true);
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
}

TEST(Backward, ReluAtZeroIsZero) {
  GraphScope scope;
  Tensor x = Tensor::from({1}, {0.0}, true);
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Backward, RejectsNonScalarAndDetachedLoss) {
  GraphScope scope;
  Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), AutodiffError);
  EXPECT_THROW(backward(Tensor::scalar(1.0)), AutodiffError);
  Tensor y = sum(x);
  EXPECT_THROW(backward(y.detach()), AutodiffError);
}

TEST(Backward, LossFromAnotherGraphIsDetached) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y;
  {
    GraphScope outer;
    y = sum(x);
  }
  GraphScope other;
  EXPECT_THROW(backward(y), AutodiffError);
}

TEST(Backward, NoGradLeafNeverReceivesGrad) {
  GraphScope scope;
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor c = Tensor::from({2}, {3, 4});
  backward(sum(mul(x, c)));
  EXPECT_FALSE(c.has_grad());
  EXPECT_TRUE(x.has_grad());
}

TEST(Backward, NoGradGuardStopsRecording) {
  GraphScope scope;
  Tensor x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  Tensor y = sum(x);
  EXPECT_FALSE(y.has_node());
  EXPECT_EQ(scope.graph().size(), 0u);
}

TEST(Backward, ReusedTensorAccumulatesPerUseGradients) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = detail::random_tensor({5}, rng);
    Tensor a = detail::random_tensor({5}, rng);
    Tensor b = detail::random_tensor({5}, rng);
    x.set_requires_grad(true);
    std::vector<double> ga, gb, gboth;
    {
      GraphScope s;
      backward(sum(mul(exp(x), a)));
      ga.assign(x.grad().begin(), x.grad().end());
      x.zero_grad();
    }
    {
      GraphScope s;
      backward(sum(mul(x, b)));
      gb.assign(x.grad().begin(), x.grad().end());
      x.zero_grad();
    }
    {
      GraphScope s;
      backward(add(sum(mul(exp(x), a)), sum(mul(x, b))));
      gboth.assign(x.grad().begin(), x.grad().end());
      x.zero_grad();
    }
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(gboth[i], ga[i] + gb[i], 1e-14);
  }
}

TEST(Backward, GradientsAccumulateAcrossCalls) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  for (int i = 0; i < 2; ++i) {
    GraphScope s;
    backward(sum(mul(x, x)));
  }
  EXPECT_EQ(x.grad()[0], 4.0);
  EXPECT_EQ(x.grad()[1], 8.0);
}

TEST(Backward, EveryNodeVisitedOnce) {
  GraphScope scope;
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  Tensor y = exp(x);
  Tensor z = add(y, y);  // y is used twice by one node
  Tensor w = mul(z, y);
  backward(sum(w));
  // d/dx (2 e^{2x}) = 4 e^{2x}
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(x.grad()[i], 4.0 * std::exp(2.0 * x[i]), 1e-9 * std::exp(2.0 * x[i]));
}

TEST(FiniteDiff, ConstantGradientIsExact) {
  Rng rng(5);
  Tensor x = detail::random_tensor({7}, rng);
  auto r = finite_diff_check([](const Tensor& t) { return sum(t); }, x);
  EXPECT_LT(r.max_rel_err, 1e-10);
  EXPECT_EQ(r.checked, 7u);
}

TEST(FiniteDiff, RejectsNonScalar) {
  Tensor x = Tensor::from({2}, {1, 2});
  EXPECT_THROW(finite_diff_check([](const Tensor& t) { return exp(t); }, x), AutodiffError);
}

TEST(FiniteDiff, KinkIsFlaggedAndExcluded) {
  Tensor x = Tensor::from({3}, {0.0, 0.5, -0.7});
  auto r = finite_diff_check([](const Tensor& t) { return sum(relu(t)); }, x);
  EXPECT_EQ(r.kinks, 1u);
  EXPECT_EQ(r.checked, 2u);
  EXPECT_LT(r.max_rel_err, 1e-10);
}

TEST(FiniteDiff, NearKinkInputsAreExcluded) {
  Tensor x = Tensor::from({2}, {5e-7, -5e-7});
  auto r = finite_diff_check([](const Tensor& t) { return sum(relu(t)); }, x);
  EXPECT_EQ(r.kinks, 2u);
}

TEST(FiniteDiff, RandomFiveLayerGraph) {
  Rng rng(2024);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = detail::random_tensor({4, 6}, rng);
    Tensor w1 = detail::random_tensor({6, 8}, rng);
    Tensor b1 = detail::random_tensor({8}, rng);
    Tensor w2 = detail::random_tensor({8, 5}, rng);
    Tensor r = detail::random_tensor({4, 5}, rng);
    auto f = [=] {
      Tensor h = relu(add(matmul(x, w1), b1));        // 1, 2
      Tensor z = l2_normalize(matmul(h, w2));          // 3, 4
      Tensor p = softmax(scalar_mul(z, 2.5));          // 5
      return sum(mul(log(p), r));                      // 6
    };
    auto res = finite_diff_check_params(f, {x, w1, b1, w2}, 1e-3);
    EXPECT_LT(res.max_rel_err, 1e-4) << "trial " << trial;
    EXPECT_GT(res.checked, 0u);
  }
}

class OpGradient : public ::testing::TestWithParam<OpKind> {};

TEST_P(OpGradient, MatchesCentralDifferencesOnHundredInputs) {
  auto r = check_op(GetParam(), 100, 77);
  EXPECT_LT(r.max_rel_err, 1e-4) << op_name(GetParam());
  EXPECT_GT(r.checked, 0u);
}

TEST_P(OpGradient, CorruptionIsDetected) {
  set_gradient_corruption(GetParam());
  auto r = check_op(GetParam(), 3, 78);
  set_gradient_corruption(std::nullopt);
  EXPECT_GT(r.max_rel_err, 1e-4) << op_name(GetParam());
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(kAllOpKinds),
                         [](const auto& info) { return std::string(op_name(info.param)); });

TEST(Determinism, SameSeedSameBuffers) {
  auto run = [] {
    Rng rng(99);
    Tensor x = detail::random_tensor({16, 9}, rng);
    Tensor w = detail::random_tensor({9, 7}, rng);
    Tensor y = softmax(matmul(x, w));
    return std::vector<double>(y.data().begin(), y.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Gemm, RowPermutationIsExact) {
  Rng rng(8);
  Tensor a = detail::random_tensor({37, 29}, rng);
  Tensor b = detail::random_tensor({29, 19}, rng);
  std::vector<std::size_t> perm(37);
  for (std::size_t i = 0; i < 37; ++i) perm[i] = (i * 11) % 37;
  Tensor c = matmul(a, b);
  Tensor cp = matmul(gather_rows(a, perm), b);
  for (std::size_t i = 0; i < 37; ++i)
    for (std::size_t j = 0; j < 19; ++j) EXPECT_EQ(cp[i * 19 + j], c[perm[i] * 19 + j]);
}

}  // namespace
}  // namespace xmpt
