#include "catlab/autodiff.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <unordered_set>

#include "support/gradcheck.hpp"

namespace ad = catlab::ad;
using ad::Tensor;
using catlab::testing::check_gradients;
using catlab::testing::random_tensor;

TEST(AutodiffTest, MatmulShapeAlgebra) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 4});
  EXPECT_EQ(ad::matmul(a, b).shape(), (ad::Shape{2, 4}));
}

TEST(AutodiffTest, ShapeMismatchNamesPrimitiveAndShapes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 4});
  try {
    ad::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ad::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("(2,3)"), std::string::npos);
    EXPECT_NE(msg.find("(2,4)"), std::string::npos);
  }
  EXPECT_THROW(ad::add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ad::ShapeError);
  // only trailing-suffix repetition is allowed
  EXPECT_THROW(ad::add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ad::ShapeError);
}

TEST(AutodiffTest, SoftmaxOfZerosIsUniform) {
  Tensor y = ad::softmax(Tensor::zeros({3}));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(AutodiffTest, ClampAboveRangeHasZeroGradient) {
  Tensor x = Tensor::scalar(12.0, true);
  Tensor y = ad::clamp(x, 0.0, 10.0);
  EXPECT_EQ(y.item(), 10.0);
  EXPECT_EQ(ad::backward(y)[x].item(), 0.0);
}

TEST(AutodiffTest, ClampBoundaryPassesGradient) {
  Tensor x = Tensor::scalar(10.0, true);
  EXPECT_EQ(ad::backward(ad::clamp(x, 0.0, 10.0))[x].item(), 1.0);
}

TEST(AutodiffTest, SumGradientIsOnes) {
  Tensor x = Tensor({3}, {0.5, -2.0, 7.0}, true);
  auto g = ad::backward(ad::sum(x));
  for (double v : g[x].values()) EXPECT_EQ(v, 1.0);
}

TEST(AutodiffTest, SquareGradient) {
  Tensor x = Tensor::scalar(3.0, true);
  EXPECT_DOUBLE_EQ(ad::backward(ad::mul(x, x))[x].item(), 6.0);
}

TEST(AutodiffTest, NonScalarLossRejected) {
  Tensor x = Tensor::zeros({2}, true);
  EXPECT_THROW(ad::backward(ad::tanh(x)), ad::ShapeError);
}

TEST(AutodiffTest, FiniteDifferenceExactOnQuadratic) {
  auto f = [](const Tensor& x) { return ad::mul(x, x); };
  Tensor g = ad::finite_difference_grad(f, Tensor::scalar(3.0), 1e-5);
  EXPECT_NEAR(g.item(), 6.0, 1e-9);
}

TEST(AutodiffTest, FiniteDifferenceOfSoftmaxSumIsZero) {
  std::mt19937_64 rng(3);
  auto f = [](const Tensor& x) { return ad::sum(ad::softmax(x)); };
  Tensor g = ad::finite_difference_grad(f, random_tensor({5}, rng, -3, 3), 1e-5);
  for (double v : g.values()) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(AutodiffTest, CrossEntropyMatchesFiniteDifferences) {
  const Tensor onehot({4}, {0, 0, 1, 0});
  auto ce = [&](const Tensor& logits) {
    return ad::scale(ad::sum(ad::mul(ad::log_softmax(logits), onehot)), -1.0);
  };
  Tensor logits({4}, {0.3, -1.2, 2.0, 0.1}, true);
  const Tensor analytic = ad::backward(ce(logits))[logits];
  const Tensor fd = ad::finite_difference_grad(ce, logits, 1e-5);
  EXPECT_LT(catlab::testing::relative_error(analytic.values(), fd.values()), 1e-5);
}

TEST(AutodiffTest, RandomCompositeGraphMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto inputs = std::vector<Tensor>{random_tensor({3, 4}, rng), random_tensor({4, 2}, rng),
                                      random_tensor({2}, rng)};
    auto fn = [](const std::vector<Tensor>& x) {
      Tensor h = ad::tanh(ad::matmul(x[0], x[1]));  // 1, 2
      h = ad::add(h, x[2]);                          // 3
      h = ad::log_softmax(h);                        // 4
      return ad::mean_last(ad::gelu(h));             // 5
    };
    EXPECT_LT(check_gradients(fn, inputs, rng), 1e-5);
  }
}

TEST(AutodiffTest, EveryPrimitiveAgreesWithFiniteDifferences) {
  std::mt19937_64 rng(2024);
  for (const auto& c : catlab::testing::primitive_catalog()) {
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) worst = std::max(worst, check_gradients(c.fn, c.make_inputs(rng), rng));
    EXPECT_LT(worst, 1e-5) << c.name;
  }
}

TEST(AutodiffTest, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(5);
  Tensor y = ad::softmax(random_tensor({50, 7}, rng, -30, 30));
  for (std::size_t r = 0; r < 50; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += y[r * 7 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(AutodiffTest, DetachBlocksUpstreamGradient) {
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({4}, rng, -1, 1, true);
  Tensor w = random_tensor({4}, rng, -1, 1, true);
  Tensor loss = ad::sum(ad::mul(ad::detach(ad::exp(x)), w));
  auto g = ad::backward(loss);
  EXPECT_FALSE(g.contains(x));
  EXPECT_TRUE(g.contains(w));

  // still reachable through another path: detached branch contributes nothing
  Tensor loss2 = ad::add(loss, ad::sum(ad::scale(x, 0.0)));
  auto g2 = ad::backward(loss2);
  for (double v : g2[x].values()) EXPECT_EQ(v, 0.0);
}

TEST(AutodiffTest, OpsOnUntrackedInputsLeaveNoTape) {
  Tensor a = Tensor::full({2, 2}, 1.0);
  Tensor y = ad::exp(a);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(ad::tape_of(y).empty());
}

TEST(AutodiffTest, TapeIsTopologicalAndVisitsEachNodeOnce) {
  std::mt19937_64 rng(9);
  Tensor x = random_tensor({3, 3}, rng, -1, 1, true);
  Tensor h = ad::tanh(x);
  Tensor loss = ad::sum(ad::add(ad::matmul(h, h), h));  // h reused three times
  const auto tape = ad::tape_of(loss);
  std::unordered_set<ad::NodeId> seen;
  for (const auto& e : tape) {
    for (auto in : e.inputs) EXPECT_LT(in, e.output);
    EXPECT_TRUE(seen.insert(e.output).second);
  }
  EXPECT_EQ(tape.back().output, loss.id());
}

TEST(AutodiffTest, BackwardRestrictedToRequestedLeaves) {
  Tensor a = Tensor::scalar(2.0, true);
  Tensor b = Tensor::scalar(5.0, true);
  Tensor loss = ad::mul(a, b);
  const Tensor wrt[] = {a};
  auto g = ad::backward(loss, wrt);
  EXPECT_TRUE(g.contains(a));
  EXPECT_FALSE(g.contains(b));
  EXPECT_EQ(g[a].item(), 5.0);
}

TEST(AutodiffTest, ReplayIsBitwiseDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(77);
    Tensor x = random_tensor({4, 4}, rng, -1, 1, true);
    Tensor loss = ad::mean(ad::softmax(ad::matmul(x, ad::transpose(x))));
    auto g = ad::backward(loss);
    std::vector<double> out{loss.item()};
    for (double v : g[x].values()) out.push_back(v);
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(AutodiffTest, GatherRejectsOutOfRangeIndex) {
  const std::size_t idx[] = {5};
  EXPECT_THROW(ad::gather_rows(Tensor::zeros({5, 2}), idx), std::out_of_range);
}

TEST(AutodiffTest, GatherGradientTouchesOnlySelectedRows) {
  Tensor table = Tensor::full({4, 2}, 1.0, true);
  const std::size_t idx[] = {1, 3, 1};
  auto g = ad::backward(ad::sum(ad::gather_rows(table, idx)))[table];
  const std::vector<double> expect{0, 0, 2, 2, 0, 0, 1, 1};
  EXPECT_EQ(std::vector<double>(g.values().begin(), g.values().end()), expect);
}
