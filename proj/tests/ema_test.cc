#include "sde/ema.hpp"

#include <gtest/gtest.h>

#include "sde/gradcheck.hpp"
#include "test_util.hpp"

namespace sde {
namespace {

using testing::randn;

TEST(EmaTest, ZeroInputGivesZeroOutput) {
  auto p = make_ema_params<float>(8, 2, 1);
  auto x = TensorF::zeros({8, 5, 5});
  auto y = ema_forward(x, p);
  for (float v : y.values()) EXPECT_EQ(v, 0.f);
}

TEST(EmaTest, ShapePreservedAcrossGroupCounts) {
  for (int g : {1, 2, 4}) {
    auto p = make_ema_params<float>(8, g, 2 + g);
    auto x = randn({8, 5, 7}, 10 + g);
    auto y = ema_forward(x, p);
    EXPECT_EQ(y.shape(), x.shape());
  }
}

TEST(EmaTest, GroupsMustDivideChannels) {
  EXPECT_THROW(make_ema_params<float>(6, 4, 3), ConfigError);
  auto p = make_ema_params<float>(8, 4, 4);
  auto x = randn({6, 4, 4}, 5);
  EXPECT_THROW(ema_forward(x, p), ConfigError);
}

// All positions see identical pooled gates and identical local-branch values
// on a spatially constant input, so every position is reweighted equally.
TEST(EmaTest, SpatiallyConstantInputStaysConstant) {
  auto p = make_ema_params<float>(8, 2, 6);
  auto x = TensorF::zeros({8, 6, 5});
  SplitMix64 rng(7);
  for (int c = 0; c < 8; ++c) {
    const float v = float(rng.uniform_sym(2.0));
    for (int i = 0; i < 30; ++i) x.values()[size_t(c) * 30 + i] = v;
  }
  auto y = ema_forward(x, p);
  for (int c = 0; c < 8; ++c) {
    const float first = y.at({c, 0, 0});
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 5; ++j)
        EXPECT_NEAR(y.at({c, i, j}), first, 1e-6);
  }
}

TEST(EmaTest, GradientCheck) {
  auto p = make_ema_params<float>(4, 2, 8);
  auto x = randn({4, 6, 6}, 9, 0.5);
  auto rx = check_gradient<float>([&] { return ema_forward(x, p); }, x, 1e-3);
  EXPECT_LT(rx.rel_err, 1e-3) << "input grad diff=" << rx.max_abs_diff;
  auto rw = check_gradient<float>(
      [&] { return ema_forward(x, p); }, p.conv3_w, 1e-3);
  EXPECT_LT(rw.rel_err, 1e-3) << "conv3 grad diff=" << rw.max_abs_diff;
}

}  // namespace
}  // namespace sde
