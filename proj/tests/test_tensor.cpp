#include <gtest/gtest.h>

#include <cmath>

#include "gfm/checkpoint.hpp"
#include "gfm/gradcheck.hpp"
#include "gfm/ops.hpp"
#include "gfm/optim.hpp"
#include "test_util.hpp"

using namespace gfm;
using gfm::testing::random_tensor;

TEST(Matmul, IdentityAndArithmetic) {
  auto eye = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
  auto a = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(eye, a).vec(), a.vec());
  auto b = Tensor<float>::from({2, 1}, {0, 1});
  EXPECT_EQ(matmul(a, b).vec(), (std::vector<float>{2, 4}));
  auto z = Tensor<float>::zeros({3, 2});
  const auto za = matmul(z, a);
  for (float v : za.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Matmul, ShapeMismatchReportsBothShapes) {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("(2,3) x (2,3)"), std::string::npos);
  }
}

TEST(Softmax, Examples) {
  auto y = softmax(Tensor<double>::from({3}, {0, 0, 0}));
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
  auto big = softmax(Tensor<float>::from({2}, {1000, 1000}));
  EXPECT_FLOAT_EQ(big[0], 0.5f);
  EXPECT_FLOAT_EQ(big[1], 0.5f);
  auto l3 = softmax(Tensor<double>::from({2}, {0, std::log(3.0)}));
  EXPECT_NEAR(l3[0], 0.25, 1e-12);
  EXPECT_NEAR(l3[1], 0.75, 1e-12);
  EXPECT_THROW(softmax(Tensor<float>::zeros({2, 0})), DimensionError);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor<float>({4, 7}, rng, 3.0);
    auto shifted = x.detach();
    const float c = static_cast<float>(rng.uniform(-50, 50));
    for (auto& v : shifted.mutable_data()) v += c;
    auto y = softmax(x), ys = softmax(shifted);
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int j = 0; j < 7; ++j) {
        s += y[r * 7 + j];
        EXPECT_GT(y[r * 7 + j], 0.0f);
        EXPECT_NEAR(y[r * 7 + j], ys[r * 7 + j], 1e-6);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Backward, QuadraticConstantAndSharedSubexpression) {
  auto x = Tensor<double>::from({3}, {1, 2, 3}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()),
            (std::vector<double>{2, 4, 6}));

  auto y = Tensor<double>::from({1}, {5}, true);
  y.zero_grad();
  auto c = Tensor<double>::scalar(7.0);
  backward(add(c, scale(y, 0.0)));
  EXPECT_EQ(y.grad()[0], 0.0);

  auto z = Tensor<double>::from({1}, {1.5}, true);
  backward(add(z, z));
  EXPECT_EQ(z.grad()[0], 2.0);
}

TEST(Backward, NonScalarLossIsUsageError) {
  auto x = Tensor<float>::zeros({2}, true);
  EXPECT_THROW(backward(scale(x, 2.0f)), UsageError);
}

TEST(Backward, UnreachableLeafKeepsZeroGrad) {
  auto a = Tensor<double>::from({2}, {1, 2}, true);
  auto b = Tensor<double>::from({2}, {3, 4}, true);
  a.zero_grad();
  b.zero_grad();
  backward(sum(a));
  EXPECT_EQ(b.grad()[0], 0.0);
  EXPECT_EQ(b.grad()[1], 0.0);
}

TEST(Tape, TopologicalOrder) {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  auto y = mul(x, x);
  auto loss = sum(add(y, x));
  auto tape = build_tape(loss);
  ASSERT_FALSE(tape.entries.empty());
  for (std::size_t i = 0; i < tape.entries.size(); ++i)
    for (auto in : tape.entries[i].inputs) EXPECT_LT(in, i);
  EXPECT_EQ(tape.entries.back().tensor, loss.impl());
  // x, mul, add, sum: each node once
  EXPECT_EQ(tape.entries.size(), 4u);
}

TEST(MseLoss, Examples) {
  auto p = Tensor<double>::from({2}, {1, 2});
  auto t = Tensor<double>::from({2}, {1, 0});
  EXPECT_DOUBLE_EQ(mse_loss(p, t).item(), 2.0);
  EXPECT_DOUBLE_EQ(mse_loss(p, p).item(), 0.0);
  EXPECT_THROW(mse_loss(p, Tensor<double>::zeros({3})), DimensionError);

  auto pg = Tensor<double>::from({2}, {1, 2}, true);
  backward(mse_loss(pg, t));
  EXPECT_DOUBLE_EQ(pg.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(pg.grad()[1], 2.0 * 2.0 / 2.0);
}

TEST(GradCheck, TrivialCases) {
  auto r = grad_check<double>([](const Tensor<double>& x) { return mul(x, x); },
                              Tensor<double>::from({1}, {3.0}), 1e-4);
  EXPECT_LT(r.max_rel_error, 1e-6);
  auto c = grad_check<double>(
      [](const Tensor<double>& x) { return add(Tensor<double>::scalar(2.0), scale(x, 0.0)); },
      Tensor<double>::from({1}, {3.0}), 1e-4);
  EXPECT_EQ(c.max_rel_error, 0.0);
  EXPECT_THROW(grad_check<double>([](const Tensor<double>& x) { return x; },
                                  Tensor<double>::from({1}, {1.0}), 0.0),
               UsageError);
  EXPECT_THROW(grad_check<double>(
                   [](const Tensor<double>& x) { return scale(sum(x), std::nan("")); },
                   Tensor<double>::from({1}, {1.0}), 1e-3),
               NumericError);
}

TEST(AdamW, Examples) {
  AdamWConfig cfg{0.1, 0.9, 0.999, 1e-8, 0.0};
  {
    ParamList<double> ps{{"w", Tensor<double>::from({1}, {1.0}, true)}};
    ps[0].tensor.zero_grad();
    AdamState<double> st;
    adamw_step(ps, st, cfg);
    EXPECT_EQ(ps[0].tensor[0], 1.0);
  }
  {
    ParamList<double> ps{{"w", Tensor<double>::from({1}, {1.0}, true)}};
    ps[0].tensor.mutable_grad()[0] = 1.0;
    AdamState<double> st;
    adamw_step(ps, st, cfg);
    EXPECT_NEAR(ps[0].tensor[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-12);
    EXPECT_NEAR(ps[0].tensor[0], 0.9, 1e-7);
  }
  {
    AdamWConfig wd{0.1, 0.9, 0.999, 1e-8, 0.1};
    ParamList<double> ps{{"w", Tensor<double>::from({1}, {2.0}, true)}};
    ps[0].tensor.zero_grad();
    AdamState<double> st;
    adamw_step(ps, st, wd);
    EXPECT_NEAR(ps[0].tensor[0], 2.0 * (1 - 0.01), 1e-15);
  }
  {
    ParamList<float> ps{{"enc.w", Tensor<float>::from({1}, {1.0f}, true)}};
    ps[0].tensor.mutable_grad()[0] = std::numeric_limits<float>::infinity();
    AdamState<float> st;
    try {
      adamw_step(ps, st, cfg);
      FAIL();
    } catch (const NumericError& e) {
      EXPECT_NE(std::string(e.what()).find("enc.w"), std::string::npos);
    }
  }
}

TEST(Checkpoint, RoundTripAndErrors) {
  auto dir = gfm::testing::temp_dir("ckpt");
  Rng rng(3);
  ParamList<float> ps{{"a", random_tensor<float>({2, 3}, rng)}, {"b", random_tensor<float>({4}, rng)}};
  save_checkpoint(make_checkpoint(ps), dir);
  auto ck = load_checkpoint(dir);
  ASSERT_EQ(ck.tensors.size(), 2u);
  EXPECT_EQ(ck.tensors[0].name, "a");
  EXPECT_EQ(ck.tensors[0].tensor.vec(), ps[0].tensor.vec());
  EXPECT_EQ(ck.tensors[1].tensor.shape(), (Shape{4}));

  ParamList<float> target{{"a", Tensor<float>::zeros({2, 3})}, {"c", Tensor<float>::zeros({1})}};
  EXPECT_THROW(load_into(target, ck, true), LoadError);
  auto rep = load_into(target, ck, false);
  EXPECT_EQ(rep.loaded.size(), 1u);
  EXPECT_EQ(rep.missing, std::vector<std::string>{"c"});
  EXPECT_EQ(rep.unexpected, std::vector<std::string>{"b"});
  EXPECT_EQ(target[0].tensor.vec(), ps[0].tensor.vec());

  ParamList<float> bad{{"a", Tensor<float>::zeros({3, 2})}};
  EXPECT_THROW(load_into(bad, ck, false), LoadError);

  std::filesystem::resize_file(dir / "tensors.bin", 8);
  EXPECT_THROW(load_checkpoint(dir), FormatError);
}
