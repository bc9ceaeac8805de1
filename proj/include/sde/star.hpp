#pragma once

#include "sde/init.hpp"
#include "sde/ops.hpp"
#include "sde/tensor.hpp"

namespace sde {

// Star operation on augmented vectors: (w1.y)(w2.y). The last slot of y
// carries the folded bias constant 1, so all three vectors have d+1 entries.
template <typename T>
T star_op(const Tensor<T>& y, const Tensor<T>& w1, const Tensor<T>& w2) {
  if (y.shape() != w1.shape() || y.shape() != w2.shape() || y.rank() != 1)
    throw ShapeError("star_op: vectors must share one length, got " +
                     shape_str(y.shape()) + ", " + shape_str(w1.shape()) +
                     ", " + shape_str(w2.shape()));
  detail::Acc a = 0, b = 0;
  for (size_t i = 0; i < y.numel(); ++i) {
    a += double(w1.values()[i]) * double(y.values()[i]);
    b += double(w2.values()[i]) * double(y.values()[i]);
  }
  return static_cast<T>(a * b);
}

// The same quantity as the expanded pairwise sum over i <= j with
// coefficients gamma(i,j). Kept alongside star_op so the algebraic
// equivalence of the two routes stays checkable.
template <typename T>
T star_op_expansion(const Tensor<T>& y, const Tensor<T>& w1,
                    const Tensor<T>& w2) {
  if (y.shape() != w1.shape() || y.shape() != w2.shape() || y.rank() != 1)
    throw ShapeError("star_op_expansion: vectors must share one length");
  const size_t n = y.numel();
  detail::Acc acc = 0;
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i; j < n; ++j) {
      double gamma = double(w1.values()[i]) * double(w2.values()[j]);
      if (i != j) gamma += double(w1.values()[j]) * double(w2.values()[i]);
      acc += gamma * double(y.values()[i]) * double(y.values()[j]);
    }
  return static_cast<T>(acc);
}

// Star block: depthwise 7x7 -> two 1x1 expansions (ratio 4) -> relu6(f1)*f2
// -> 1x1 projection -> depthwise 7x7 -> residual. Channel count is preserved.
template <typename T>
struct StarParams {
  int channels = 0;                     // d
  Tensor<T> dw1_w;                      // [C,7,7]
  Tensor<T> dw1_scale, dw1_shift;       // inference BN affine [C]
  Tensor<T> f1_w, f1_b;                 // [E,C,1,1],[E] expansion branch
  Tensor<T> f2_w, f2_b;                 // [E,C,1,1],[E]
  Tensor<T> g_w;                        // [C,E,1,1] projection
  Tensor<T> g_scale, g_shift;           // [C]
  Tensor<T> dw2_w, dw2_b;               // [C,7,7],[C]
};

template <typename T>
StarParams<T> make_star_params(int channels, uint64_t seed,
                               int expansion = 4) {
  SplitMix64 rng(seed);
  StarParams<T> p;
  p.channels = channels;
  const int e = channels * expansion;
  p.dw1_w = init::uniform_fan_in<T>({channels, 7, 7}, 49, rng);
  p.dw1_scale = init::ones<T>({channels});
  p.dw1_shift = init::zeros<T>({channels});
  p.f1_w = init::uniform_fan_in<T>({e, channels, 1, 1}, channels, rng);
  p.f1_b = init::zeros<T>({e});
  p.f2_w = init::uniform_fan_in<T>({e, channels, 1, 1}, channels, rng);
  p.f2_b = init::zeros<T>({e});
  p.g_w = init::uniform_fan_in<T>({channels, e, 1, 1}, e, rng);
  p.g_scale = init::ones<T>({channels});
  p.g_shift = init::zeros<T>({channels});
  p.dw2_w = init::uniform_fan_in<T>({channels, 7, 7}, 49, rng);
  p.dw2_b = init::zeros<T>({channels});
  return p;
}

template <typename T>
Tensor<T> star_block_forward(const Tensor<T>& x, const StarParams<T>& p) {
  detail::check_rank(x, 3, "star_block_forward");
  if (x.dim(0) != p.channels)
    throw ShapeError("star_block_forward: input has " +
                     std::to_string(x.dim(0)) + " channels, block expects " +
                     std::to_string(p.channels));
  auto h = affine_channels(depthwise_conv2d(x, p.dw1_w, 1, 3), p.dw1_scale,
                           p.dw1_shift);
  auto f1 = add_bias_channels(conv2d(h, p.f1_w, 1, 0), p.f1_b);
  auto f2 = add_bias_channels(conv2d(h, p.f2_w, 1, 0), p.f2_b);
  auto star = mul(relu6(f1), f2);
  auto proj =
      affine_channels(conv2d(star, p.g_w, 1, 0), p.g_scale, p.g_shift);
  auto y = add_bias_channels(depthwise_conv2d(proj, p.dw2_w, 1, 3), p.dw2_b);
  return add(x, y);
}

}  // namespace sde
