#pragma once

#include "sde/init.hpp"
#include "sde/ops.hpp"
#include "sde/tensor.hpp"

namespace sde {

// Channel-grouped attention with directional pooling and cross-spatial
// aggregation. Weights are shared across the G groups; each group carries
// C/G channels. The 3x3 local branch uses replicate padding so a spatially
// constant input keeps identical weights at every position.
template <typename T>
struct EMAParams {
  int groups = 8;                 // G
  Tensor<T> conv1_w, conv1_b;     // [C',C'],[C'] pooled-strip 1x1
  Tensor<T> conv3_w, conv3_b;     // [C',C',3,3],[C'] local branch
  Tensor<T> gn_gamma, gn_beta;    // [C'] group standardization affine
};

template <typename T>
EMAParams<T> make_ema_params(int channels, int groups, uint64_t seed) {
  if (groups < 1 || channels % groups != 0)
    throw ConfigError("ema: " + std::to_string(channels) +
                      " channels not divisible into " +
                      std::to_string(groups) + " groups");
  SplitMix64 rng(seed);
  const int cg = channels / groups;
  EMAParams<T> p;
  p.groups = groups;
  p.conv1_w = init::uniform_fan_in<T>({cg, cg}, cg, rng);
  p.conv1_b = init::zeros<T>({cg});
  p.conv3_w = init::uniform_fan_in<T>({cg, cg, 3, 3}, cg * 9, rng);
  p.conv3_b = init::zeros<T>({cg});
  p.gn_gamma = init::ones<T>({cg});
  p.gn_beta = init::zeros<T>({cg});
  return p;
}

template <typename T>
Tensor<T> ema_forward(const Tensor<T>& x, const EMAParams<T>& p) {
  detail::check_rank(x, 3, "ema_forward");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (p.groups < 1 || c % p.groups != 0)
    throw ConfigError("ema_forward: " + std::to_string(c) +
                      " channels not divisible into " +
                      std::to_string(p.groups) + " groups");
  const int cg = c / p.groups;

  std::vector<Tensor<T>> outs;
  outs.reserve(p.groups);
  for (int g = 0; g < p.groups; ++g) {
    auto xg = slice(x, 0, g * cg, cg);

    // pooled branch: per-row and per-column means share one 1x1 conv
    auto col = reshape(avg_pool_axis(xg, PoolAxis::kW), {cg, h});  // along W
    auto row = reshape(avg_pool_axis(xg, PoolAxis::kH), {cg, w});  // along H
    auto strip = concat<T>({col, row}, 1);  // [C', H+W]
    auto proj = transpose2(
        add_bias_cols(matmul_nt(transpose2(strip), p.conv1_w), p.conv1_b));
    auto gate_h = sigmoid(slice(proj, 1, 0, h));
    auto gate_w = sigmoid(slice(proj, 1, h, w));
    auto gated = mul_wgate(mul_hgate(xg, gate_h), gate_w);
    auto x1 = standardize_channels(gated, p.gn_gamma, p.gn_beta);

    // local branch
    auto x2 = add_bias_channels(
        conv2d(pad_replicate(xg, 1), p.conv3_w, 1, 0), p.conv3_b);

    // cross-spatial aggregation: each branch's channel attention weighs the
    // other branch's flattened map
    auto a1 = softmax(reshape(global_avg_pool(x1), {1, cg}), 1);
    auto a2 = softmax(reshape(global_avg_pool(x2), {1, cg}), 1);
    auto t1 = matmul(a1, reshape(x2, {cg, h * w}));
    auto t2 = matmul(a2, reshape(x1, {cg, h * w}));
    auto wmap = sigmoid(reshape(add(t1, t2), {h, w}));
    outs.push_back(mul_spatial_gate(xg, wmap));
  }
  return p.groups == 1 ? outs[0] : concat(outs, 0);
}

}  // namespace sde
