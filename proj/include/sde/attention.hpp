#pragma once

#include <cmath>

#include "sde/init.hpp"
#include "sde/ops.hpp"
#include "sde/tensor.hpp"

namespace sde {

// Uniform reference points at cell centers, normalized to [-1,1]^2,
// row-major (u,v) pairs with u along W: u = (2j+1)/W - 1, v = (2i+1)/H - 1.
template <typename T>
Tensor<T> reference_grid(int h, int w) {
  if (h < 1 || w < 1)
    throw ShapeError("reference_grid: empty grid " + std::to_string(h) + "x" +
                     std::to_string(w));
  auto g = Tensor<T>::zeros({h * w, 2});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      g.values()[size_t(i * w + j) * 2] =
          static_cast<T>((2.0 * j + 1.0) / w - 1.0);
      g.values()[size_t(i * w + j) * 2 + 1] =
          static_cast<T>((2.0 * i + 1.0) / h - 1.0);
    }
  return g;
}

// Multi-head projections share one embedding dim C = M * d. The offset
// subnetwork is depthwise 5x5 -> GELU -> pointwise to 2 channels -> tanh,
// scaled to +-offset_scale cells.
template <typename T>
struct DeformAttnParams {
  int heads = 1;             // M
  double offset_scale = 2.0;  // s, in grid cells
  Tensor<T> wq, wk, wv, wo;  // [C,C], applied as tokens * W
  Tensor<T> off_dw_w;        // [C,5,5]
  Tensor<T> off_dw_b;        // [C]
  Tensor<T> off_pw_w;        // [2,C,1,1]
  Tensor<T> off_pw_b;        // [2]
};

template <typename T>
DeformAttnParams<T> make_deform_params(int channels, int heads, uint64_t seed,
                                       double offset_scale = 2.0) {
  SplitMix64 rng(seed);
  DeformAttnParams<T> p;
  p.heads = heads;
  p.offset_scale = offset_scale;
  p.wq = init::uniform_fan_in<T>({channels, channels}, channels, rng);
  p.wk = init::uniform_fan_in<T>({channels, channels}, channels, rng);
  p.wv = init::uniform_fan_in<T>({channels, channels}, channels, rng);
  p.wo = init::uniform_fan_in<T>({channels, channels}, channels, rng);
  p.off_dw_w = init::uniform_fan_in<T>({channels, 5, 5}, 25, rng);
  p.off_dw_b = init::zeros<T>({channels});
  p.off_pw_w = init::uniform_fan_in<T>({2, channels, 1, 1}, channels, rng);
  p.off_pw_b = init::zeros<T>({2});
  return p;
}

// Offset head on the query map: [C,H,W] -> [2,H,W] of (du,dv) in cell units,
// each bounded to [-s, +s].
template <typename T>
Tensor<T> offset_net_forward(const Tensor<T>& q_map,
                             const DeformAttnParams<T>& p) {
  detail::check_rank(q_map, 3, "offset_net_forward");
  auto t = gelu(add_bias_channels(depthwise_conv2d(q_map, p.off_dw_w, 1, 2),
                                  p.off_dw_b));
  auto o = add_bias_channels(conv2d(t, p.off_pw_w, 1, 0), p.off_pw_b);
  return scale(tanh_op(o), p.offset_scale);
}

namespace detail {

// Eq-7 style scaled dot-product attention per head, then head concat.
template <typename T>
Tensor<T> attention_heads(const Tensor<T>& q, const Tensor<T>& k,
                          const Tensor<T>& v, int heads) {
  const int c = q.dim(1);
  if (heads < 1 || c % heads != 0)
    throw ConfigError("attention: embedding dim " + std::to_string(c) +
                      " not divisible by " + std::to_string(heads) +
                      " heads");
  const int d = c / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(double(d));
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (int m = 0; m < heads; ++m) {
    auto qm = slice(q, 1, m * d, d);
    auto km = slice(k, 1, m * d, d);
    auto vm = slice(v, 1, m * d, d);
    auto attn = softmax(scale(matmul_nt(qm, km), inv_sqrt_d), 1);
    outs.push_back(matmul(attn, vm));
  }
  return concat(outs, 1);
}

}  // namespace detail

// Plain multi-head self-attention over a token matrix [N,C].
template <typename T>
Tensor<T> mhsa_forward(const Tensor<T>& tokens, const DeformAttnParams<T>& p) {
  detail::check_rank(tokens, 2, "mhsa_forward");
  auto q = matmul(tokens, p.wq);
  auto k = matmul(tokens, p.wk);
  auto v = matmul(tokens, p.wv);
  return matmul(detail::attention_heads(q, k, v, p.heads), p.wo);
}

// Deformable attention over a feature map. Keys and values are sampled from
// the raw map at reference points shifted by the predicted offsets, then the
// standard multi-head attention aggregates them. Residual connection around
// the block; output shape equals input shape.
template <typename T>
Tensor<T> deformable_attention_forward(const Tensor<T>& x,
                                       const DeformAttnParams<T>& p) {
  detail::check_rank(x, 3, "deformable_attention_forward");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (p.heads < 1 || c % p.heads != 0)
    throw ConfigError("deformable_attention: " + std::to_string(c) +
                      " channels not divisible by " +
                      std::to_string(p.heads) + " heads");
  auto tokens = chw_to_tokens(x);
  auto q = matmul(tokens, p.wq);

  auto offsets = offset_net_forward(tokens_to_chw(q, h, w), p);  // cells
  auto delta = chw_to_tokens(offsets);  // [N,2]
  auto delta_norm = concat<T>({scale(slice(delta, 1, 0, 1), 2.0 / w),
                               scale(slice(delta, 1, 1, 1), 2.0 / h)},
                              1);
  auto pos = add(reference_grid<T>(h, w), delta_norm);

  auto sampled = sample_points(x, pos);  // [N,C] deformed features
  auto k = matmul(sampled, p.wk);
  auto v = matmul(sampled, p.wv);
  auto out = matmul(detail::attention_heads(q, k, v, p.heads), p.wo);
  return add(x, tokens_to_chw(out, h, w));
}

}  // namespace sde
