#pragma once

#include <vector>

#include "sde/init.hpp"
#include "sde/ops.hpp"
#include "sde/tensor.hpp"

namespace sde {

// conv -> inference-form batch norm (precomputed affine) -> SiLU
template <typename T>
struct ConvModuleParams {
  Tensor<T> w;                   // [Cout,Cin,k,k]
  Tensor<T> bn_scale, bn_shift;  // [Cout]
  int stride = 1;
  int pad = 0;
};

template <typename T>
ConvModuleParams<T> make_conv_module(int cin, int cout, int k, int stride,
                                     SplitMix64& rng) {
  ConvModuleParams<T> p;
  p.w = init::uniform_fan_in<T>({cout, cin, k, k}, cin * k * k, rng);
  p.bn_scale = init::ones<T>({cout});
  p.bn_shift = init::zeros<T>({cout});
  p.stride = stride;
  p.pad = k / 2;
  return p;
}

template <typename T>
Tensor<T> conv_module_forward(const Tensor<T>& x,
                              const ConvModuleParams<T>& p) {
  return silu(
      affine_channels(conv2d(x, p.w, p.stride, p.pad), p.bn_scale, p.bn_shift));
}

template <typename T>
struct BottleneckParams {
  ConvModuleParams<T> cv1, cv2;  // 3x3 both
  bool residual = true;
};

template <typename T>
Tensor<T> bottleneck_forward(const Tensor<T>& x,
                             const BottleneckParams<T>& p) {
  auto y = conv_module_forward(conv_module_forward(x, p.cv1), p.cv2);
  return p.residual ? add(x, y) : y;
}

// CSPLayer_2Conv (C2f): 1x1 split into two halves, a chain of residual
// bottlenecks on the second half, concat of all stages, 1x1 merge.
template <typename T>
struct C2fParams {
  ConvModuleParams<T> cv1;                   // in -> 2h
  std::vector<BottleneckParams<T>> blocks;   // h -> h
  ConvModuleParams<T> cv2;                   // (2+n)h -> out
};

template <typename T>
C2fParams<T> make_c2f(int cin, int cout, int n, SplitMix64& rng) {
  C2fParams<T> p;
  const int half = cout / 2;
  p.cv1 = make_conv_module<T>(cin, 2 * half, 1, 1, rng);
  for (int i = 0; i < n; ++i) {
    BottleneckParams<T> b;
    b.cv1 = make_conv_module<T>(half, half, 3, 1, rng);
    b.cv2 = make_conv_module<T>(half, half, 3, 1, rng);
    p.blocks.push_back(std::move(b));
  }
  p.cv2 = make_conv_module<T>((2 + n) * half, cout, 1, 1, rng);
  return p;
}

template <typename T>
Tensor<T> c2f_forward(const Tensor<T>& x, const C2fParams<T>& p) {
  auto y = conv_module_forward(x, p.cv1);
  const int half = y.dim(0) / 2;
  std::vector<Tensor<T>> parts{slice(y, 0, 0, half),
                               slice(y, 0, half, half)};
  for (const auto& b : p.blocks)
    parts.push_back(bottleneck_forward(parts.back(), b));
  return conv_module_forward(concat(parts, 0), p.cv2);
}

// SPPF: 1x1 reduce, three chained same-size max pools, concat, 1x1 merge.
template <typename T>
struct SppfParams {
  ConvModuleParams<T> cv1;  // C -> C/2
  ConvModuleParams<T> cv2;  // 2C -> C
  int k = 5;
};

template <typename T>
SppfParams<T> make_sppf(int channels, SplitMix64& rng, int k = 5) {
  SppfParams<T> p;
  const int half = channels / 2;
  p.cv1 = make_conv_module<T>(channels, half, 1, 1, rng);
  p.cv2 = make_conv_module<T>(half * 4, channels, 1, 1, rng);
  p.k = k;
  return p;
}

template <typename T>
Tensor<T> sppf_forward(const Tensor<T>& x, const SppfParams<T>& p) {
  auto y = conv_module_forward(x, p.cv1);
  auto p1 = max_pool2d(y, p.k, 1, p.k / 2);
  auto p2 = max_pool2d(p1, p.k, 1, p.k / 2);
  auto p3 = max_pool2d(p2, p.k, 1, p.k / 2);
  return conv_module_forward(concat<T>({y, p1, p2, p3}, 0), p.cv2);
}

}  // namespace sde
