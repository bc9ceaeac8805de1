#include <cmath>
#include <functional>

#include <gtest/gtest.h>

#include "sde/gradcheck.hpp"
#include "sde/ops.hpp"
#include "sde/tensor.hpp"
#include "test_util.hpp"

namespace sde {
namespace {

using testing::randn;

constexpr double kH = 1e-3;
constexpr double kTol = 1e-3;

TEST(BackwardTest, SumOfSquares) {
  auto x = randn({3, 4}, 1);
  x.set_requires_grad(true);
  auto loss = sum(mul(x, x));
  backward(loss);
  for (size_t i = 0; i < x.numel(); ++i)
    EXPECT_NEAR(x.grad()[i], 2.f * x.values()[i], 1e-5);
}

TEST(BackwardTest, NonScalarLossRejected) {
  auto x = randn({2, 2}, 2);
  x.set_requires_grad(true);
  auto y = mul(x, x);
  EXPECT_THROW(backward(y), ConfigError);
}

TEST(BackwardTest, ConstantsReceiveNoGradient) {
  auto x = randn({2, 2}, 3);
  auto w = randn({2, 2}, 4);
  x.set_requires_grad(true);
  auto loss = sum(matmul(x, w));
  backward(loss);
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(w.has_grad());
}

TEST(BackwardTest, LeafPopulatedOncePerReplay) {
  auto x = randn({3}, 5);
  x.set_requires_grad(true);
  auto loss = sum(mul(x, x));
  backward(loss);
  auto first = x.grad();
  backward(loss);  // re-zeroed, not accumulated twice
  EXPECT_EQ(x.grad(), first);
}

TEST(BackwardTest, SharedNodeAccumulates) {
  auto x = randn({4}, 6);
  x.set_requires_grad(true);
  auto y = add(mul(x, x), mul(x, x));
  backward(sum(y));
  for (size_t i = 0; i < x.numel(); ++i)
    EXPECT_NEAR(x.grad()[i], 4.f * x.values()[i], 1e-5);
}

TEST(BackwardTest, MatmulAgainstCentralDifferences) {
  auto a = randn({3, 4}, 6);
  auto b = randn({4, 2}, 7);
  auto r = check_gradient<float>([&] { return matmul(a, b); }, a, kH);
  EXPECT_LT(r.rel_err, kTol) << "diff=" << r.max_abs_diff;
}

TEST(FiniteDiffTest, SumGivesOnes) {
  auto x = randn({2, 3}, 8);
  auto g = finite_diff_grad<float>(
      [](const TensorF& t) {
        double acc = 0;
        for (float v : t.values()) acc += v;
        return acc;
      },
      x, kH);
  for (float v : g.values()) EXPECT_NEAR(v, 1.f, 1e-4);
}

TEST(FiniteDiffTest, SumOfSquares) {
  auto x = randn({2, 3}, 9);
  auto g = finite_diff_grad<float>(
      [](const TensorF& t) {
        double acc = 0;
        for (float v : t.values()) acc += double(v) * double(v);
        return acc;
      },
      x, kH);
  for (size_t i = 0; i < x.numel(); ++i)
    EXPECT_NEAR(g.values()[i], 2.f * x.values()[i], 1e-3);
}

TEST(FiniteDiffTest, AgreesWithBackwardOnConvComposite) {
  auto x = randn({2, 5, 5}, 10);
  auto w = randn({3, 2, 3, 3}, 11);
  auto r = check_gradient<float>([&] { return silu(conv2d(x, w, 1, 1)); }, x,
                                 kH);
  EXPECT_LT(r.rel_err, kTol) << "diff=" << r.max_abs_diff;
}

// One gradcheck per differentiable op, input side and parameter side.
struct OpCase {
  const char* name;
  std::function<GradCheckReport()> run;
};

TEST(OpGradTest, AllDifferentiableOps) {
  std::vector<OpCase> cases;
  cases.push_back({"add", [] {
                     auto a = randn({4, 4}, 20);
                     auto b = randn({4, 4}, 21);
                     return check_gradient<float>(
                         [&] { return add(a, b); }, a, kH);
                   }});
  cases.push_back({"sub", [] {
                     auto a = randn({4, 4}, 22);
                     auto b = randn({4, 4}, 23);
                     return check_gradient<float>(
                         [&] { return sub(a, b); }, b, kH);
                   }});
  cases.push_back({"mul", [] {
                     auto a = randn({4, 4}, 24);
                     auto b = randn({4, 4}, 25);
                     return check_gradient<float>(
                         [&] { return mul(a, b); }, a, kH);
                   }});
  cases.push_back({"scale", [] {
                     auto a = randn({4, 4}, 26);
                     return check_gradient<float>(
                         [&] { return scale(a, -1.7); }, a, kH);
                   }});
  cases.push_back({"relu", [] {
                     // keep inputs away from the kink at 0
                     auto a = randn({5, 5}, 27);
                     for (auto& v : a.values())
                       if (std::abs(v) < 0.05f) v += 0.1f;
                     return check_gradient<float>(
                         [&] { return relu(a); }, a, kH);
                   }});
  cases.push_back({"relu6", [] {
                     auto a = randn({5, 5}, 28);
                     for (auto& v : a.values())
                       if (std::abs(v) < 0.05f) v += 0.1f;
                     return check_gradient<float>(
                         [&] { return relu6(a); }, a, kH);
                   }});
  cases.push_back({"sigmoid", [] {
                     auto a = randn({5, 5}, 29);
                     return check_gradient<float>(
                         [&] { return sigmoid(a); }, a, kH);
                   }});
  cases.push_back({"tanh", [] {
                     auto a = randn({5, 5}, 30);
                     return check_gradient<float>(
                         [&] { return tanh_op(a); }, a, kH);
                   }});
  cases.push_back({"silu", [] {
                     auto a = randn({5, 5}, 31);
                     return check_gradient<float>(
                         [&] { return silu(a); }, a, kH);
                   }});
  cases.push_back({"gelu", [] {
                     auto a = randn({5, 5}, 32);
                     return check_gradient<float>(
                         [&] { return gelu(a); }, a, kH);
                   }});
  cases.push_back({"matmul_a", [] {
                     auto a = randn({4, 5}, 33);
                     auto b = randn({5, 3}, 34);
                     return check_gradient<float>(
                         [&] { return matmul(a, b); }, a, kH);
                   }});
  cases.push_back({"matmul_b", [] {
                     auto a = randn({4, 5}, 35);
                     auto b = randn({5, 3}, 36);
                     return check_gradient<float>(
                         [&] { return matmul(a, b); }, b, kH);
                   }});
  cases.push_back({"matmul_nt", [] {
                     auto a = randn({4, 5}, 37);
                     auto b = randn({3, 5}, 38);
                     return check_gradient<float>(
                         [&] { return matmul_nt(a, b); }, b, kH);
                   }});
  cases.push_back({"conv2d_x", [] {
                     auto x = randn({2, 6, 6}, 39);
                     auto w = randn({3, 2, 3, 3}, 40);
                     return check_gradient<float>(
                         [&] { return conv2d(x, w, 2, 1); }, x, kH);
                   }});
  cases.push_back({"conv2d_w", [] {
                     auto x = randn({2, 6, 6}, 41);
                     auto w = randn({3, 2, 3, 3}, 42);
                     return check_gradient<float>(
                         [&] { return conv2d(x, w, 1, 0); }, w, kH);
                   }});
  cases.push_back({"depthwise_x", [] {
                     auto x = randn({3, 6, 6}, 43);
                     auto w = randn({3, 3, 3}, 44);
                     return check_gradient<float>(
                         [&] { return depthwise_conv2d(x, w, 1, 1); }, x, kH);
                   }});
  cases.push_back({"depthwise_w", [] {
                     auto x = randn({3, 6, 6}, 45);
                     auto w = randn({3, 3, 3}, 46);
                     return check_gradient<float>(
                         [&] { return depthwise_conv2d(x, w, 2, 1); }, w, kH);
                   }});
  cases.push_back({"softmax", [] {
                     auto x = randn({4, 6}, 47);
                     return check_gradient<float>(
                         [&] { return softmax(x, 1); }, x, kH);
                   }});
  cases.push_back({"global_avg_pool", [] {
                     auto x = randn({3, 5, 5}, 49);
                     return check_gradient<float>(
                         [&] { return global_avg_pool(x); }, x, kH);
                   }});
  cases.push_back({"avg_pool_h", [] {
                     auto x = randn({2, 5, 4}, 51);
                     return check_gradient<float>(
                         [&] { return avg_pool_axis(x, PoolAxis::kH); }, x,
                         kH);
                   }});
  cases.push_back({"avg_pool_w", [] {
                     auto x = randn({2, 5, 4}, 52);
                     return check_gradient<float>(
                         [&] { return avg_pool_axis(x, PoolAxis::kW); }, x,
                         kH);
                   }});
  cases.push_back({"max_pool", [] {
                     // well separated values keep windows away from ties
                     auto x = TensorF::zeros({1, 6, 6});
                     SplitMix64 rng(53);
                     std::vector<int> order(36);
                     for (int i = 0; i < 36; ++i) order[i] = i;
                     for (int i = 35; i > 0; --i)
                       std::swap(order[i], order[rng.next() % (i + 1)]);
                     for (int i = 0; i < 36; ++i)
                       x.values()[i] = 0.1f * order[i];
                     return check_gradient<float>(
                         [&] { return max_pool2d(x, 3, 1, 1); }, x, kH);
                   }});
  cases.push_back({"bilinear_map", [] {
                     auto m = randn({2, 4, 4}, 54);
                     return check_gradient<float>(
                         [&] { return bilinear_sample(m, 0.31, -0.22); }, m,
                         kH);
                   }});
  cases.push_back({"sample_points_map", [] {
                     auto m = randn({2, 5, 5}, 55);
                     auto pts = testing::rand_uniform({6, 2}, 56, -0.8, 0.8);
                     return check_gradient<float>(
                         [&] { return sample_points(m, pts); }, m, kH);
                   }});
  cases.push_back({"sample_points_pts", [] {
                     auto m = randn({2, 5, 5}, 57);
                     auto pts = testing::rand_uniform({6, 2}, 58, -0.8, 0.8);
                     return check_gradient<float>(
                         [&] { return sample_points(m, pts); }, pts, kH);
                   }});
  cases.push_back({"concat_slice", [] {
                     auto a = randn({2, 3, 3}, 59);
                     auto b = randn({3, 3, 3}, 60);
                     return check_gradient<float>(
                         [&] {
                           auto cat = concat<float>({a, b}, 0);
                           return mul(slice(cat, 0, 1, 3),
                                      slice(cat, 0, 2, 3));
                         },
                         a, kH);
                   }});
  cases.push_back({"reshape_transpose", [] {
                     auto a = randn({3, 4}, 61);
                     return check_gradient<float>(
                         [&] { return transpose2(reshape(a, {2, 6})); }, a,
                         kH);
                   }});
  cases.push_back({"affine_channels_x", [] {
                     auto x = randn({3, 4, 4}, 62);
                     auto s = randn({3}, 63);
                     auto t = randn({3}, 64);
                     return check_gradient<float>(
                         [&] { return affine_channels(x, s, t); }, x, kH);
                   }});
  cases.push_back({"affine_channels_s", [] {
                     auto x = randn({3, 4, 4}, 62);
                     auto s = randn({3}, 63);
                     auto t = randn({3}, 64);
                     return check_gradient<float>(
                         [&] { return affine_channels(x, s, t); }, s, kH);
                   }});
  cases.push_back({"standardize_x", [] {
                     auto x = randn({2, 4, 4}, 65);
                     auto g = randn({2}, 66);
                     auto b = randn({2}, 67);
                     return check_gradient<float>(
                         [&] { return standardize_channels(x, g, b); }, x,
                         kH);
                   }});
  cases.push_back({"standardize_gamma", [] {
                     auto x = randn({2, 4, 4}, 65);
                     auto g = randn({2}, 66);
                     auto b = randn({2}, 67);
                     return check_gradient<float>(
                         [&] { return standardize_channels(x, g, b); }, g,
                         kH);
                   }});
  cases.push_back({"gates", [] {
                     auto x = randn({2, 4, 5}, 69);
                     auto gh = randn({2, 4}, 70);
                     auto gw = randn({2, 5}, 71);
                     auto gs = randn({4, 5}, 72);
                     return check_gradient<float>(
                         [&] {
                           return mul_spatial_gate(
                               mul_wgate(mul_hgate(x, gh), gw), gs);
                         },
                         x, kH);
                   }});
  cases.push_back({"gate_params", [] {
                     auto x = randn({2, 4, 5}, 69);
                     auto gh = randn({2, 4}, 70);
                     return check_gradient<float>(
                         [&] { return mul_hgate(x, gh); }, gh, kH);
                   }});
  cases.push_back({"upsample_pad", [] {
                     auto x = randn({2, 3, 3}, 73);
                     return check_gradient<float>(
                         [&] {
                           return pad_replicate(upsample_nearest2x(x), 1);
                         },
                         x, kH);
                   }});
  cases.push_back({"bias_adds", [] {
                     auto x = randn({3, 4, 4}, 74);
                     auto b = randn({3}, 75);
                     return check_gradient<float>(
                         [&] {
                           auto y = add_bias_channels(x, b);
                           return add_bias_cols(chw_to_tokens(y), b);
                         },
                         b, kH);
                   }});
  cases.push_back({"reduce_max", [] {
                     auto x = randn({4, 4}, 76);
                     return check_gradient<float>(
                         [&] { return reduce_max(mul(x, x)); }, x, kH);
                   }});
  cases.push_back({"maximum", [] {
                     auto a = randn({4, 4}, 77);
                     auto b = randn({4, 4}, 78);
                     return check_gradient<float>(
                         [&] { return maximum(a, b); }, a, kH);
                   }});

  for (auto& c : cases) {
    auto r = c.run();
    EXPECT_LT(r.rel_err, kTol)
        << c.name << ": diff=" << r.max_abs_diff
        << " scale=" << r.grad_scale;
  }
}

}  // namespace
}  // namespace sde
