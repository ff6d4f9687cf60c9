#include <gtest/gtest.h>

#include "gfm/gradcheck.hpp"
#include "gfm/pyramid.hpp"
#include "test_util.hpp"

using namespace gfm;
using gfm::testing::random_tensor;

namespace {

std::vector<Tensor<float>> backbone_like(Rng& rng, const std::vector<std::int64_t>& widths,
                                         std::int64_t H) {
  std::vector<Tensor<float>> maps;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const auto s = H / (4 << i);
    maps.push_back(random_tensor<float>({widths[i], s, s}, rng));
  }
  return maps;
}

void expect_constant_per_channel(const Tensor<float>& m, double tol) {
  const auto C = m.dim(0), P = m.dim(1) * m.dim(2);
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 1; i < P; ++i) ASSERT_NEAR(m[c * P + i], m[c * P], tol);
}

}  // namespace

TEST(Fpn, UniformChannelsAndSizes) {
  Fpn<float> fpn({32, 64, 128, 256}, 64, Rng(1));
  Rng rng(2);
  auto p = fpn_forward(fpn, backbone_like(rng, {32, 64, 128, 256}, 64));
  require_full_pyramid(p, 64, 64);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(p.maps[i].dim(0), 64);
    EXPECT_EQ(p.maps[i].dim(1), 64 / p.strides[i]);
  }
  auto bad = backbone_like(rng, {32, 64, 128, 256}, 64);
  bad[2] = random_tensor<float>({128, 3, 3}, rng);
  EXPECT_THROW(fpn(bad), DimensionError);
}

TEST(Fpn, ConstantInputsGiveConstantLevels) {
  Fpn<float> fpn({8, 8, 8, 8}, 8, Rng(3));
  std::vector<Tensor<float>> maps;
  for (std::int64_t s : {16, 8, 4, 2}) {
    auto m = Tensor<float>::zeros({8, s, s});
    for (std::int64_t c = 0; c < 8; ++c)
      for (std::int64_t i = 0; i < s * s; ++i) m.mutable_data()[c * s * s + i] = 0.1f * (c + 1);
    maps.push_back(m);
  }
  for (const auto& m : fpn(maps).maps) expect_constant_per_channel(m, 1e-5);
}

TEST(Fpn, TopDownPathIsolation) {
  Fpn<float> fpn({4, 4, 4, 4}, 4, Rng(4));
  Rng rng(5);
  auto maps = backbone_like(rng, {4, 4, 4, 4}, 32);
  auto zeroed = maps;
  zeroed[3] = Tensor<float>::zeros(maps[3].shape());
  // with the top-down path live, the stride-32 input reaches stride 4
  EXPECT_NE(fpn(maps).maps[0].vec(), fpn(zeroed).maps[0].vec());
  // cut the top-down contributions: coarser laterals feed only the path
  for (std::size_t i = 1; i < 4; ++i) {
    fill(fpn.levels[i].lateral.weight, 0.0f);
    fill(fpn.levels[i].lateral.bias, 0.0f);
  }
  EXPECT_EQ(fpn(maps).maps[0].vec(), fpn(zeroed).maps[0].vec());
}

TEST(SimplePyramid, StrideArithmeticAndUniformity) {
  SimplePyramid<float> g(32, 16, 16, Rng(6));
  Rng rng(7);
  auto p = simple_pyramid_from_single(g, random_tensor<float>({32, 4, 4}, rng), 64, 64);
  require_full_pyramid(p, 64, 64);
  const std::int64_t sizes[] = {16, 8, 4, 2};
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(p.maps[i].dim(0), 16);
    EXPECT_EQ(p.maps[i].dim(1), sizes[i]);
  }
  EXPECT_THROW(g(random_tensor<float>({32, 8, 8}, rng), 64, 64), ConfigError);
  EXPECT_THROW(SimplePyramid<float>(32, 16, 12, Rng(1)), ConfigError);

  SimplePyramid<float> g8(32, 16, 8, Rng(6));
  auto p8 = g8(random_tensor<float>({32, 8, 8}, rng), 64, 64);
  require_full_pyramid(p8, 64, 64);
}

TEST(SimplePyramid, ZeroInputIsBiasDetermined) {
  SimplePyramid<float> g(16, 8, 16, Rng(8));
  for (const auto& m : g(Tensor<float>::zeros({16, 4, 4}), 64, 64).maps)
    expect_constant_per_channel(m, 1e-6);
}

TEST(SimplePyramid, GradCheck) {
  SimplePyramid<double> g(8, 4, 8, Rng(9));
  Rng rng(10);
  auto x = random_tensor<double>({8, 4, 4}, rng);
  std::vector<Tensor<double>> ws;
  for (std::int64_t s : {8, 4, 2, 1}) ws.push_back(random_tensor<double>({4, s, s}, rng));
  ParamList<double> ps;
  g.collect(ps, "pyramid");
  std::vector<Tensor<double>> leaves{x};
  for (auto& p : ps) leaves.push_back(p.tensor);
  auto loss = [&] {
    auto p = g(x, 32, 32);
    std::vector<Tensor<double>> terms;
    for (std::size_t i = 0; i < 4; ++i) terms.push_back(sum(mul(p.maps[i], ws[i])));
    return add_all(terms);
  };
  auto r = grad_check_params<double>(loss, leaves, 1e-6, 400, 11);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(Fpn, GradCheck) {
  Fpn<double> fpn({4, 6, 8, 10}, 4, Rng(12));
  Rng rng(13);
  std::vector<Tensor<double>> maps;
  const std::int64_t widths[] = {4, 6, 8, 10};
  for (int i = 0; i < 4; ++i) {
    const std::int64_t s = 16 >> i;
    maps.push_back(random_tensor<double>({widths[i], s, s}, rng));
  }
  std::vector<Tensor<double>> ws;
  for (int i = 0; i < 4; ++i) {
    const std::int64_t s = 16 >> i;
    ws.push_back(random_tensor<double>({4, s, s}, rng));
  }
  ParamList<double> ps;
  fpn.collect(ps, "fpn");
  std::vector<Tensor<double>> leaves(maps.begin(), maps.end());
  for (auto& p : ps) leaves.push_back(p.tensor);
  auto loss = [&] {
    auto p = fpn(maps);
    std::vector<Tensor<double>> terms;
    for (std::size_t i = 0; i < 4; ++i) terms.push_back(sum(mul(p.maps[i], ws[i])));
    return add_all(terms);
  };
  auto r = grad_check_params<double>(loss, leaves, 1e-6, 400, 14);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(PretrainedPyramid, RoundTripStrictAndLenient) {
  SimplePyramid<float> a(16, 8, 8, Rng(1));
  ParamList<float> pa;
  a.collect(pa, "pyramid");
  const auto dir = gfm::testing::temp_dir("pyramid_ckpt");
  save_checkpoint(make_checkpoint(pa), dir);

  SimplePyramid<float> b(16, 8, 8, Rng(2));
  auto rep = load_pretrained_pyramid(b, load_checkpoint(dir), true);
  EXPECT_EQ(rep.loaded.size(), pa.size());
  Rng rng(3);
  auto x = random_tensor<float>({16, 8, 8}, rng);
  auto ya = a(x, 64, 64), yb = b(x, 64, 64);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(ya.maps[i].vec(), yb.maps[i].vec());

  try {
    load_pretrained_pyramid(b, Checkpoint{}, true);
    FAIL();
  } catch (const LoadError& e) {
    for (const auto& p : pa) EXPECT_NE(std::string(e.what()).find(p.name), std::string::npos);
  }

  Checkpoint partial;
  auto full = load_checkpoint(dir);
  for (std::size_t i = 0; i < 5; ++i) partial.tensors.push_back(full.tensors[i]);
  SimplePyramid<float> c(16, 8, 8, Rng(4));
  auto rep2 = load_pretrained_pyramid(c, partial, false);
  EXPECT_EQ(rep2.loaded.size(), 5u);
  EXPECT_EQ(rep2.missing.size(), pa.size() - 5);

  Checkpoint wrong;
  wrong.tensors.push_back({pa[0].name, Tensor<float>::zeros({1})});
  EXPECT_THROW(load_pretrained_pyramid(c, wrong, false), LoadError);
}
