#include <gtest/gtest.h>

#include <cmath>

#include "attnsteer/error.hpp"
#include "attnsteer/gradcheck.hpp"
#include "attnsteer/tensor.hpp"
#include "op_cases.hpp"

using namespace attnsteer;
using attnsteer::testing::CaseGen;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Direct sliding-window cross-correlation, no im2col.
std::vector<double> naive_conv(const std::vector<double>& x, std::size_t h, std::size_t w,
                               const std::vector<double>& k, std::size_t kh, std::size_t kw) {
  std::vector<double> out;
  for (std::size_t y = 0; y + kh <= h; ++y) {
    for (std::size_t xx = 0; xx + kw <= w; ++xx) {
      double acc = 0.0;
      for (std::size_t i = 0; i < kh; ++i)
        for (std::size_t j = 0; j < kw; ++j) acc += x[(y + i) * w + xx + j] * k[i * kw + j];
      out.push_back(acc);
    }
  }
  return out;
}

}  // namespace

TEST(Tensor, RejectsInconsistentShape) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({0}, {}), ShapeError);
}

TEST(Ops, ReluDefinition) {
  EXPECT_EQ(values(relu(Tensor({3}, {-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
}

TEST(Ops, ConvScalingIdentity) {
  Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor k({1, 1, 1, 1}, {2});
  EXPECT_EQ(values(conv2d(x, k)), (std::vector<double>{2, 4, 6, 8, 10, 12, 14, 16, 18}));
}

TEST(Ops, ConvMatchesSlidingWindowOracle) {
  std::vector<double> ramp(16);
  for (std::size_t i = 0; i < 16; ++i) ramp[i] = static_cast<double>(i);
  std::vector<double> kernel{1, 0, -1, 2, 0.5, -2, 0.25, 1, -0.75};
  auto expected = naive_conv(ramp, 4, 4, kernel, 3, 3);
  auto got = values(conv2d(Tensor({1, 1, 4, 4}, ramp), Tensor({1, 1, 3, 3}, kernel)));
  ASSERT_EQ(got.size(), expected.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_DOUBLE_EQ(got[i], expected[i]);
}

TEST(Ops, ConvStridePaddingShape) {
  Tensor x = Tensor::ones({2, 3, 7, 6});
  Tensor w = Tensor::ones({4, 3, 3, 3});
  Tensor y = conv2d(x, w, {2, 1});
  EXPECT_EQ(y.shape(), (Shape{2, 4, 4, 3}));
  // Interior output sees the full 3x3x3 window.
  EXPECT_DOUBLE_EQ(y.at(1 * 3 + 1), 27.0);
}

TEST(Ops, ShapeErrorsNameOpAndShapes) {
  try {
    add(Tensor::ones({2, 3}), Tensor::ones({3, 2}));
    FAIL();
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[3,2]"), std::string::npos);
  }
  EXPECT_THROW(conv2d(Tensor::ones({1, 2, 4, 4}), Tensor::ones({1, 3, 3, 3})), ShapeError);
  EXPECT_THROW(matmul(Tensor::ones({2, 3}), Tensor::ones({2, 3})), ShapeError);
}

TEST(Ops, NonFiniteOutputIsNumericError) {
  EXPECT_THROW(log(Tensor({2}, {1.0, 0.0})), NumericError);
  EXPECT_THROW(mul(Tensor({1}, {1e200}), Tensor({1}, {1e200})), NumericError);
}

TEST(Ops, MaxpoolTiesGoToLowestIndex) {
  Tensor x = Tensor({1, 1, 2, 2}, {3, 3, 3, 3}).set_requires_grad(true);
  Tensor y = maxpool2d(x, 2, 2);
  auto g = backward(sum(y), {x});
  EXPECT_EQ(values(g[0]), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Ops, ReluAndClampSubgradients) {
  Tensor x = Tensor({3}, {-1, 0, 1}).set_requires_grad(true);
  EXPECT_EQ(values(backward(sum(relu(x)), {x})[0]), (std::vector<double>{0, 0, 1}));
  Tensor c = Tensor({4}, {-1, -0.5, 0, 0.5}).set_requires_grad(true);
  EXPECT_EQ(values(backward(sum(clamp(c, -0.5, 0.5)), {c})[0]), (std::vector<double>{0, 0, 1, 0}));
}

TEST(Ops, MinMaxTiesRouteToFirstArgument) {
  Tensor a = Tensor({2}, {1, 2}).set_requires_grad(true);
  Tensor b = Tensor({2}, {1, 3}).set_requires_grad(true);
  auto g = backward(sum(min_elementwise(a, b)), {a, b});
  EXPECT_EQ(values(g[0]), (std::vector<double>{1, 1}));
  EXPECT_EQ(values(g[1]), (std::vector<double>{0, 0}));
  g = backward(sum(max_elementwise(a, b)), {a, b});
  EXPECT_EQ(values(g[0]), (std::vector<double>{1, 0}));
  EXPECT_EQ(values(g[1]), (std::vector<double>{0, 1}));
}

TEST(Ops, BceStableForm) {
  EXPECT_NEAR(bce_with_logits(Tensor({1}, {0.0}), Tensor({1}, {1.0})).item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce_with_logits(Tensor({1}, {20.0}), Tensor({1}, {1.0})).item(), std::log1p(std::exp(-20.0)), 1e-24);
  EXPECT_NEAR(bce_with_logits(Tensor({1}, {-800.0}), Tensor({1}, {0.0})).item(), 0.0, 1e-300);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::full({2, 3}, 0.7).set_requires_grad(true);
  EXPECT_EQ(values(backward(sum(x), {x})[0]), std::vector<double>(6, 1.0));
}

TEST(Backward, SquareGivesTwoX) {
  Tensor x = Tensor({3}, {1, 2, 3}).set_requires_grad(true);
  EXPECT_EQ(values(backward(sum(mul(x, x)), {x})[0]), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x = Tensor::ones({2}).set_requires_grad(true);
  EXPECT_THROW(backward(mul(x, x), {x}), ShapeError);
}

TEST(Backward, UnreachableAndFrozenGetZero) {
  Tensor x = Tensor::ones({2}).set_requires_grad(true);
  Tensor y = Tensor::ones({2}).set_requires_grad(true);
  Tensor frozen = Tensor::ones({2});
  auto g = backward(sum(mul(x, frozen)), {y, frozen});
  EXPECT_EQ(values(g[0]), (std::vector<double>{0, 0}));
  EXPECT_EQ(values(g[1]), (std::vector<double>{0, 0}));
}

TEST(Backward, IntermediateTarget) {
  Tensor x = Tensor({2}, {1, 2}).set_requires_grad(true);
  Tensor h = scale(x, 3.0);
  auto g = backward(sum(mul(h, h)), {h});
  EXPECT_EQ(values(g[0]), (std::vector<double>{6, 12}));
}

TEST(Backward, InferenceModeRecordsNothing) {
  Tensor x = Tensor::ones({2}).set_requires_grad(true);
  GraphModeGuard guard(GraphMode::inference);
  Tensor y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_THROW(backward(sum(y), {x}, GraphMode::inference), UsageError);
}

TEST(Backward, GradientsAreDetachedInTrainMode) {
  Tensor x = Tensor({1}, {2.0}).set_requires_grad(true);
  auto g = backward(sum(mul(x, x)), {x}, GraphMode::train);
  EXPECT_FALSE(g[0].requires_grad());
  auto g2 = backward(sum(mul(x, x)), {x}, GraphMode::train_with_grad_graph);
  EXPECT_TRUE(g2[0].requires_grad());
}

TEST(DoubleBackward, CubeSecondDerivative) {
  Tensor x = Tensor({1}, {2.0}).set_requires_grad(true);
  Tensor f = sum(mul(mul(x, x), x));
  auto g = backward(f, {x}, GraphMode::train_with_grad_graph);
  EXPECT_DOUBLE_EQ(g[0].item(), 12.0);
  auto h = backward(sum(g[0]), {x});
  EXPECT_DOUBLE_EQ(h[0].item(), 12.0);
}

TEST(DoubleBackward, ReluSquaredMatchesFiniteDifferences) {
  CaseGen gen(11);
  std::vector<Tensor> in{gen.random({4, 3}), gen.random({3, 1})};
  ScalarFn f = [](const std::vector<Tensor>& v) {
    Tensor h = relu(matmul(v[0], v[1]));
    return sum(mul(h, h));
  };
  auto report = grad_of_grad_check(f, in, 1e-5, 3);
  EXPECT_LT(report.max_rel_error, 1e-3);
}

TEST(DoubleBackward, TinyConvNetMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    CaseGen gen(100 + seed);
    auto report = grad_of_grad_check(attnsteer::testing::tiny_conv_net, attnsteer::testing::tiny_conv_net_inputs(gen),
                                     1e-5, seed);
    EXPECT_LT(report.max_rel_error, 1e-3) << "seed " << seed;
  }
}

class OpGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(OpGradient, FirstOrderMatchesFiniteDifferences) {
  CaseGen gen(std::hash<std::string>{}(GetParam()));
  for (int trial = 0; trial < 5; ++trial) {
    auto c = attnsteer::testing::make_case(GetParam(), gen);
    auto report = check_gradients(c.fn, c.inputs, 1e-5);
    EXPECT_LT(report.max_rel_error, 1e-4) << c.op << " trial " << trial;
  }
}

TEST_P(OpGradient, SecondOrderMatchesFiniteDifferences) {
  CaseGen gen(std::hash<std::string>{}(GetParam()) + 1);
  for (int trial = 0; trial < 3; ++trial) {
    auto c = attnsteer::testing::make_case(GetParam(), gen);
    // Square the weighted output so that linear ops have a nonzero Hessian.
    ScalarFn squared = [fn = c.fn](const std::vector<Tensor>& in) {
      Tensor v = fn(in);
      return mul(v, v);
    };
    auto report = grad_of_grad_check(squared, c.inputs, 1e-5, trial);
    EXPECT_LT(report.max_rel_error, 1e-3) << c.op << " trial " << trial;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(attnsteer::testing::all_op_names()),
                         [](const auto& info) { return info.param; });

TEST(Determinism, RepeatedRunsAreBitIdentical) {
  auto run = [] {
    CaseGen gen(5);
    auto in = attnsteer::testing::tiny_conv_net_inputs(gen);
    for (auto& t : in) t.set_requires_grad(true);
    auto g = backward(attnsteer::testing::tiny_conv_net(in), in);
    std::vector<double> flat;
    for (auto& t : g) flat.insert(flat.end(), t.data().begin(), t.data().end());
    return flat;
  };
  EXPECT_EQ(run(), run());
}
