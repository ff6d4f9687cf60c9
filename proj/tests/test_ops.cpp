#include <gtest/gtest.h>

#include <cmath>

#include "gfm/nn.hpp"
#include "op_suite.hpp"
#include "test_util.hpp"

using namespace gfm;
using gfm::testing::random_tensor;

TEST(OpGradCheck, EveryOpWithinTolerance) {
  for (const auto& c : gfm::testing::run_op_gradchecks(2024, 3)) {
    EXPECT_LT(c.max_rel_error, 1e-4) << c.name;
    EXPECT_GT(c.coords, 0u) << c.name;
  }
}

// Direct nested-loop reference for conv3d with stride == kernel extent.
static std::vector<double> conv3d_oracle(const Tensor<float>& x, const Tensor<float>& k,
                                         const Tensor<float>& b, Stride3 s) {
  const auto C = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Dd = k.dim(0), kt = k.dim(2), kh = k.dim(3), kw = k.dim(4);
  const auto To = (T - kt) / s.t + 1, Ho = (H - kh) / s.h + 1, Wo = (W - kw) / s.w + 1;
  std::vector<double> out;
  for (int64_t d = 0; d < Dd; ++d)
    for (int64_t to = 0; to < To; ++to)
      for (int64_t i = 0; i < Ho; ++i)
        for (int64_t j = 0; j < Wo; ++j) {
          double acc = b[d];
          for (int64_t c = 0; c < C; ++c)
            for (int64_t a = 0; a < kt; ++a)
              for (int64_t u = 0; u < kh; ++u)
                for (int64_t v = 0; v < kw; ++v)
                  acc += static_cast<double>(
                             x[((c * T + to * s.t + a) * H + i * s.h + u) * W + j * s.w + v]) *
                         k[(((d * C + c) * kt + a) * kh + u) * kw + v];
          out.push_back(acc);
        }
  return out;
}

TEST(Conv3d, MatchesNestedLoopOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    const int64_t C = rng.range(1, 4), T = rng.range(1, 2), H = 2 * rng.range(1, 4),
                  W = 2 * rng.range(1, 4), Dd = rng.range(1, 4);
    const int64_t kt = T == 2 ? rng.range(1, 2) : 1, p = rng.range(1, 2);
    auto x = random_tensor<float>({C, T, H, W}, rng);
    auto k = random_tensor<float>({Dd, C, kt, p, p}, rng);
    auto b = random_tensor<float>({Dd}, rng);
    const Stride3 s{kt, p, p};
    auto y = conv3d(x, k, b, s);
    auto ref = conv3d_oracle(x, k, b, s);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-5);
  }
  // the listed example shape
  auto x = random_tensor<float>({2, 1, 4, 4}, rng);
  auto k = random_tensor<float>({3, 2, 1, 2, 2}, rng);
  auto b = random_tensor<float>({3}, rng);
  auto y = conv3d(x, k, b, {1, 2, 2});
  auto ref = conv3d_oracle(x, k, b, {1, 2, 2});
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-5);
}

TEST(Conv3d, ZeroInputAndIdentityKernel) {
  auto b = Tensor<float>::from({2}, {0.5f, -1.f});
  auto y = conv3d(Tensor<float>::zeros({3, 1, 4, 4}), Tensor<float>::full({2, 3, 1, 2, 2}, 0.3f),
                  b, {1, 2, 2});
  for (int64_t i = 0; i < 4; ++i) {
    EXPECT_EQ(y[i], 0.5f);
    EXPECT_EQ(y[4 + i], -1.f);
  }
  Rng rng(1);
  auto x = random_tensor<float>({1, 2, 3, 3}, rng);
  auto id = conv3d(x, Tensor<float>::full({1, 1, 1, 1, 1}, 1.f), Tensor<float>::zeros({1}),
                   {1, 1, 1});
  EXPECT_EQ(id.vec(), x.vec());
}

TEST(Conv3d, Errors) {
  EXPECT_THROW(conv3d(Tensor<float>::zeros({2, 1, 5, 4}), Tensor<float>::zeros({1, 2, 1, 2, 2}),
                      Tensor<float>(), {1, 2, 2}),
               ConfigError);
  EXPECT_THROW(conv3d(Tensor<float>::zeros({3, 1, 4, 4}), Tensor<float>::zeros({1, 2, 1, 2, 2}),
                      Tensor<float>(), {1, 2, 2}),
               DimensionError);
}

TEST(Conv3d, CompositeWithMseMatchesFiniteDifferences) {
  Rng rng(77);
  for (int trial = 0; trial < 3; ++trial) {
    auto x = random_tensor<double>({2, 1, 4, 4}, rng);
    auto k = random_tensor<double>({3, 2, 1, 2, 2}, rng);
    auto b = random_tensor<double>({3}, rng);
    auto target = random_tensor<double>({3, 1, 2, 2}, rng);
    auto r = grad_check_params<double>(
        [&] { return mse_loss(conv3d(x, k, b, {1, 2, 2}), target); }, {x, k, b}, 1e-3);
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
}

TEST(LayerNorm, BlockGradCheck) {
  Rng rng(8);
  auto x = random_tensor<double>({4, 8}, rng);
  LayerNorm<double> ln(8);
  Linear<double> fc(8, 8, rng.split("fc"), 0.3);
  auto r = grad_check_params<double>([&] { return sum(gelu(fc(ln(x)))); },
                                     {x, ln.gamma, ln.beta, fc.weight, fc.bias}, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(Pooling, Examples) {
  auto x = Tensor<float>::from({1, 2, 2}, {0, 1, 2, 3});
  EXPECT_FLOAT_EQ(avg_pool2d(x, 2, 2).item(), 1.5f);
  EXPECT_FLOAT_EQ(max_pool2d(x, 2, 2).item(), 3.0f);
  auto up = upsample_nearest2d(x, 2);
  EXPECT_EQ(up.shape(), (Shape{1, 4, 4}));
  EXPECT_EQ(up[0], 0.f);
  EXPECT_EQ(up[3], 1.f);
  EXPECT_EQ(up[15], 3.f);
}

TEST(PadReplicate, EdgesRepeat) {
  auto x = Tensor<float>::from({1, 2, 2}, {1, 2, 3, 4});
  auto y = pad2d_replicate(x, 1);
  EXPECT_EQ(y.vec(), (std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
}

TEST(ConvTranspose, AdjointOfConv) {
  // <conv(x), y> == <x, conv_transpose(y)> for matching stride/kernel.
  Rng rng(3);
  auto k = random_tensor<double>({3, 2, 2, 2}, rng);  // conv: 2 -> 3 channels
  auto x = random_tensor<double>({2, 6, 6}, rng);
  auto y = random_tensor<double>({3, 3, 3}, rng);
  auto cx = conv2d(x, k, Tensor<double>(), 2, 0);
  auto ty = conv_transpose2d(y, k, Tensor<double>(), 2, 0);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < cx.numel(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < x.numel(); ++i) rhs += x[i] * ty[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(RoiAlign, Examples) {
  auto m = Tensor<double>::from({1, 2, 2}, {0, 1, 2, 3});
  std::vector<double> plane(m.data().begin(), m.data().end());
  EXPECT_DOUBLE_EQ(bilinear_sample<double>(plane, 2, 2, 0.5, 0.5), 1.5);
  EXPECT_DOUBLE_EQ(bilinear_sample<double>(plane, 2, 2, 1.0, 0.0), 2.0);

  auto c = Tensor<float>::full({2, 8, 8}, 2.5f);
  auto y = roi_align(c, {Box{1.3, 2.2, 6.1, 7.7}, Box{0, 0, 8, 8}}, {7, 7, 1.0, 2});
  EXPECT_EQ(y.shape(), (Shape{2, 2, 7, 7}));
  for (float v : y.data()) EXPECT_NEAR(v, 2.5f, 1e-6);

  EXPECT_THROW(roi_align(c, {Box{3, 3, 3, 5}}, {7, 7, 1.0, 2}), EmptyRoiError);
}

TEST(RoiAlign, ExactlyLinearInFeatureMap) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    auto A = random_tensor<float>({3, 8, 8}, rng);
    auto B = random_tensor<float>({3, 8, 8}, rng);
    const float a = static_cast<float>(rng.uniform(-2, 2)), b = static_cast<float>(rng.uniform(-2, 2));
    std::vector<Box> boxes;
    for (int i = 0; i < 4; ++i) {
      const double x1 = rng.uniform(0, 28), y1 = rng.uniform(0, 28);
      boxes.push_back({x1, y1, x1 + rng.uniform(0.5, 10), y1 + rng.uniform(0.5, 10)});
    }
    RoiAlignParams p{7, 7, 0.25, 2};
    auto lhs = roi_align(add(scale(A, a), scale(B, b)), boxes, p);
    auto ra = roi_align(A, boxes, p), rb = roi_align(B, boxes, p);
    for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs[i], a * ra[i] + b * rb[i], 1e-5);
  }
}

TEST(Losses, SmoothL1BoundaryAndCrossEntropy) {
  auto x = Tensor<double>::from({1}, {0.5});
  EXPECT_DOUBLE_EQ(smooth_l1(x, {0.0}).item(), 0.125);
  EXPECT_DOUBLE_EQ(smooth_l1(Tensor<double>::from({1}, {3.0}), {0.0}).item(), 2.5);
  auto l = Tensor<double>::from({1, 2}, {0, 0});
  EXPECT_NEAR(cross_entropy(l, {1}).item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(bce_with_logits(Tensor<double>::from({1}, {0}), {1.0}).item(), std::log(2.0), 1e-12);
}

TEST(GroupNorm, Errors) {
  EXPECT_THROW(group_norm(Tensor<float>::zeros({3, 2, 2}), 2, Tensor<float>::zeros({3}),
                          Tensor<float>::zeros({3})),
               ConfigError);
}
