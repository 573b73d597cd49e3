#include <gtest/gtest.h>

#include "enas4d/ops.hpp"
#include "test_util.hpp"

namespace enas4d {
namespace {

using testing::gradient_check;
using testing::max_rel_err;
using testing::random_tensor;
using testing::weighted_sum;

TEST(Tensor, ShapeAndIndexing) {
  Tensor<float> t({2, 3, 4, 5}, 1.5f);
  EXPECT_EQ(t.size(), 120u);
  EXPECT_EQ(t.rank(), 4);
  t.at4(1, 2, 3, 4) = 7.f;
  EXPECT_EQ(t[119], 7.f);
  EXPECT_THROW(t.reshaped({7}), std::invalid_argument);
  EXPECT_EQ(Tensor<float>::shape_string({2, 3}), "[2,3]");
}

TEST(Ops, ConvMatchesNaive) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 6; ++trial) {
    const int K = 1 + 2 * (trial % 3), stride = 1 + trial % 2;
    auto x = random_tensor({2, 3, 7, 6}, rng);
    auto w = random_tensor({4, 3, K, K}, rng);
    auto y = ops::conv2d(Var<double>::constant(x), Var<double>::constant(w), stride, K / 2);
    EXPECT_LT(max_rel_err(y.value(), testing::naive_conv(x, w, stride, K / 2)), 1e-12);
  }
}

TEST(Ops, DepthwiseMatchesNaive) {
  std::mt19937_64 rng(2);
  for (int K : {3, 5, 7}) {
    for (int stride : {1, 2}) {
      auto x = random_tensor({2, 3, 9, 8}, rng);
      auto w = random_tensor({3, K, K}, rng);
      auto y = ops::depthwise_conv2d(Var<double>::constant(x), Var<double>::constant(w), stride, K / 2);
      EXPECT_LT(max_rel_err(y.value(), testing::naive_depthwise(x, w, stride, K / 2)), 1e-12);
    }
  }
}

TEST(Ops, MacCounterCountsRuntimeShapes) {
  Var<double> x = Var<double>::constant(Tensor<double>({1, 3, 16, 16}, 1.0));
  Var<double> w = Var<double>::constant(Tensor<double>({8, 3, 3, 3}, 1.0));
  MacCounter counter;
  ops::conv2d(x, w, 1, 1);
  EXPECT_EQ(counter.count(), 3u * 8 * 9 * 256);
}

// Central finite differences on 1e-2-scaled inputs, step 1e-3.
class OpGradient : public ::testing::Test {
 protected:
  std::mt19937_64 rng{42};
  Var<double> leaf(std::vector<int> shape, double scale = 1e-2) {
    return Var<double>::leaf(random_tensor(std::move(shape), rng, scale));
  }
  Tensor<double> probe(const Var<double>& y) { return random_tensor(y.shape(), rng); }
};

TEST_F(OpGradient, Conv2d) {
  for (int K : {1, 3}) {
    auto x = leaf({2, 3, 5, 5}), w = leaf({4, 3, K, K});
    const auto r = probe(ops::conv2d(x, w, 2, K / 2));
    EXPECT_LT(gradient_check({x, w}, [&] { return weighted_sum(ops::conv2d(x, w, 2, K / 2), r); }), 1e-4);
  }
}

TEST_F(OpGradient, Depthwise) {
  auto x = leaf({2, 3, 6, 6}), w = leaf({3, 5, 5});
  const auto r = probe(ops::depthwise_conv2d(x, w, 2, 2));
  EXPECT_LT(gradient_check({x, w}, [&] { return weighted_sum(ops::depthwise_conv2d(x, w, 2, 2), r); }), 1e-4);
}

TEST_F(OpGradient, BatchNormTrainingStatistics) {
  auto x = leaf({3, 2, 3, 3}, 1.0), gamma = leaf({2}, 1.0), beta = leaf({2}, 1.0);
  std::vector<double> rm(2, 0.0), rv(2, 1.0);
  auto f = [&] { return ops::batch_norm<double>(x, gamma, beta, rm, rv, true); };
  const auto r = probe(f());
  EXPECT_LT(gradient_check({x, gamma, beta}, [&] { return weighted_sum(f(), r); }), 1e-4);
}

TEST_F(OpGradient, BatchNormRunningStatistics) {
  auto x = leaf({2, 2, 2, 2}, 1.0), gamma = leaf({2}, 1.0), beta = leaf({2}, 1.0);
  std::vector<double> rm = {0.3, -0.2}, rv = {0.5, 2.0};
  auto f = [&] { return ops::batch_norm<double>(x, gamma, beta, rm, rv, false); };
  const auto r = probe(f());
  EXPECT_LT(gradient_check({x, gamma, beta}, [&] { return weighted_sum(f(), r); }), 1e-4);
}

TEST_F(OpGradient, AvgPool) {
  for (int size : {4, 5}) {
    auto x = leaf({2, 3, size, size});
    const auto r = probe(ops::avg_pool(x, 2));
    EXPECT_LT(gradient_check({x}, [&] { return weighted_sum(ops::avg_pool(x, 2), r); }), 1e-4);
  }
}

TEST_F(OpGradient, Relu) {
  auto x = leaf({2, 3, 3, 3});
  // Keep inputs away from the kink.
  for (auto& v : x.mutable_value().storage()) v = v < 0 ? v - 0.05 : v + 0.05;
  const auto r = probe(ops::relu(x));
  EXPECT_LT(gradient_check({x}, [&] { return weighted_sum(ops::relu(x), r); }), 1e-4);
}

TEST_F(OpGradient, GlobalPoolAndLinear) {
  auto x = leaf({2, 3, 5, 5}), w = leaf({4, 3}), b = leaf({4});
  auto f = [&] { return ops::linear(ops::global_avg_pool(x), w, b); };
  const auto r = probe(f());
  EXPECT_LT(gradient_check({x, w, b}, [&] { return weighted_sum(f(), r); }), 1e-4);
}

TEST_F(OpGradient, CropAndKernelTransform) {
  auto w = leaf({3, 5, 5}), m = leaf({9, 9});
  auto f = [&] { return ops::kernel_matmul(ops::center_crop_kernel(w, 3), m); };
  const auto r = probe(f());
  EXPECT_LT(gradient_check({w, m}, [&] { return weighted_sum(f(), r); }), 1e-4);
}

TEST_F(OpGradient, GatherAndConcat) {
  auto p = leaf({5, 4, 3, 3});
  // Repeated rows exercise the scatter-add.
  auto f = [&] {
    auto a = ops::gather(p, std::vector<int>{4, 1, 4}, std::vector<int>{0, 2});
    auto b = ops::gather(p, std::vector<int>{0, 3, 2});
    return ops::concat_channels<double>({a, b});
  };
  const auto r = probe(f());
  EXPECT_LT(gradient_check({p}, [&] { return weighted_sum(f(), r); }), 1e-4);
}

TEST_F(OpGradient, CrossEntropyAndDistillation) {
  auto z = leaf({3, 4}, 1.0);
  const std::vector<int> labels = {0, 3, 1};
  const auto teacher = random_tensor({3, 4}, rng);
  for (double tau : {1.0, 2.5}) {
    auto f = [&] { return ops::add(ops::cross_entropy(z, labels), ops::kl_divergence(z, teacher, tau)); };
    EXPECT_LT(gradient_check({z}, f), 1e-4);
  }
}

TEST(Ops, KlOfIdenticalLogitsIsZero) {
  Tensor<double> t({2, 3});
  t.storage() = {0.1, 2.0, -1.0, 3.0, 0.0, 0.5};
  auto kl = ops::kl_divergence(Var<double>::constant(t), t, 1.0);
  EXPECT_EQ(kl.value()[0], 0.0);
}

TEST(Ops, CrossEntropyUniformLogits) {
  Tensor<double> z({1, 4}, 0.0);
  const std::vector<int> labels = {2};
  EXPECT_NEAR(ops::cross_entropy(Var<double>::constant(z), labels).value()[0], std::log(4.0), 1e-12);
}

TEST(Ops, BilinearResizeKeepsConstants) {
  Tensor<float> x({1, 2, 8, 8}, 0.25f);
  auto y = ops::resize_bilinear(x, 5, 5);
  ASSERT_EQ(y.shape(), (std::vector<int>{1, 2, 5, 5}));
  for (float v : y.storage()) EXPECT_FLOAT_EQ(v, 0.25f);
}

}  // namespace
}  // namespace enas4d
