#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sde/network.hpp"

namespace sde {

inline constexpr float kDefaultConfThresh = 0.25f;
inline constexpr float kDefaultNmsIou = 0.7f;

struct Detection {
  float x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  float score = 0;
  int class_id = 0;
};

inline float detection_iou(const Detection& a, const Detection& b) {
  const float ix = std::max(
      0.f, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const float iy = std::max(
      0.f, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const float inter = ix * iy;
  const float ua = (a.x_max - a.x_min) * (a.y_max - a.y_min) +
                   (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
  return ua > 0.f ? inter / ua : 0.f;
}

namespace detail {

inline float softplus(float x) {
  return x > 20.f ? x : std::log1p(std::exp(x));
}

// Deterministic total order: score desc, then coordinates.
inline bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.x_min != b.x_min) return a.x_min < b.x_min;
  if (a.y_min != b.y_min) return a.y_min < b.y_min;
  if (a.x_max != b.x_max) return a.x_max < b.x_max;
  return a.class_id < b.class_id;
}

}  // namespace detail

// Anchor-free decode: each cell predicts an objectness and class logit whose
// sigmoid product is the detection score, plus four distances to the box
// edges in stride units. Boxes are clipped to the image square.
inline std::vector<Detection> decode_head_maps(
    const std::vector<HeadLevelOut>& levels, float conf_thresh,
    int image_size) {
  std::vector<Detection> out;
  for (const auto& lv : levels) {
    const int nc = lv.cls.dim(0), h = lv.cls.dim(1), w = lv.cls.dim(2);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const float obj = detail::stable_sigmoid(lv.obj.at({0, i, j}));
        for (int c = 0; c < nc; ++c) {
          const float score = obj * detail::stable_sigmoid(lv.cls.at({c, i, j}));
          if (!(score > conf_thresh)) continue;
          const float cx = (j + 0.5f) * float(lv.stride);
          const float cy = (i + 0.5f) * float(lv.stride);
          const float l = detail::softplus(lv.box.at({0, i, j})) * lv.stride;
          const float t = detail::softplus(lv.box.at({1, i, j})) * lv.stride;
          const float r = detail::softplus(lv.box.at({2, i, j})) * lv.stride;
          const float btm = detail::softplus(lv.box.at({3, i, j})) * lv.stride;
          Detection d;
          d.x_min = std::clamp(cx - l, 0.f, float(image_size));
          d.y_min = std::clamp(cy - t, 0.f, float(image_size));
          d.x_max = std::clamp(cx + r, 0.f, float(image_size));
          d.y_max = std::clamp(cy + btm, 0.f, float(image_size));
          d.score = score;
          d.class_id = c;
          out.push_back(d);
        }
      }
  }
  std::sort(out.begin(), out.end(), detail::detection_before);
  return out;
}

inline std::vector<Detection> head_decode(const Model& m,
                                          const std::array<TensorF, 3>& pyramid,
                                          float conf_thresh = kDefaultConfThresh) {
  return decode_head_maps(m.head_forward(pyramid), conf_thresh,
                          m.spec().input_size);
}

// Greedy descending-score suppression; survivors form an antichain under
// "IoU > thresh".
inline std::vector<Detection> nms(std::vector<Detection> dets,
                                  float iou_thresh) {
  std::sort(dets.begin(), dets.end(), detail::detection_before);
  std::vector<Detection> keep;
  std::vector<bool> dead(dets.size(), false);
  for (size_t i = 0; i < dets.size(); ++i) {
    if (dead[i]) continue;
    keep.push_back(dets[i]);
    for (size_t j = i + 1; j < dets.size(); ++j)
      if (!dead[j] && detection_iou(dets[i], dets[j]) > iou_thresh)
        dead[j] = true;
  }
  return keep;
}

inline std::vector<Detection> detect(const Model& m, const TensorF& image,
                                     float conf_thresh = kDefaultConfThresh,
                                     float nms_iou = kDefaultNmsIou) {
  auto feats = m.backbone_forward(image);
  auto pyramid = m.neck_forward(feats);
  auto dets = head_decode(m, pyramid, conf_thresh);
  return nms(std::move(dets), nms_iou);
}

// In-place relu then min-max rescale to [0,1]. A map with any positive
// response ends with max exactly 1; an all-negative map collapses to zeros.
inline void relu_minmax_normalize(TensorF& cam) {
  for (auto& v : cam.values()) v = std::max(v, 0.f);
  const float mx = *std::max_element(cam.values().begin(), cam.values().end());
  const float mn = *std::min_element(cam.values().begin(), cam.values().end());
  if (mx > mn) {
    for (auto& v : cam.values()) v = (v - mn) / (mx - mn);
  } else if (mx > 0.f) {
    for (auto& v : cam.values()) v = 1.f;
  }
}

// Gradient-weighted activation map for the named layer: backprop of the
// maximum detection score, channel-wise pooled gradients as weights, relu,
// min-max normalized to [0,1].
inline TensorF gradcam(const Model& m, const TensorF& image,
                       const std::string& layer) {
  TensorF img = image.detach();
  img.set_requires_grad(true);
  Model::Trace trace;
  auto feats = m.backbone_forward(img, &trace);
  auto pyramid = m.neck_forward(feats, &trace);

  const TensorF* act = trace.find(layer);
  if (!act) {
    std::string names;
    for (const auto& n : trace.names()) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("unknown gradcam layer '" + layer +
                      "'; valid layers: " + names);
  }

  auto heads = m.head_forward(pyramid);
  TensorF best;
  for (const auto& lv : heads) {
    auto s = reduce_max(mul(sigmoid(lv.cls), sigmoid(lv.obj)));
    best = best.defined() ? maximum(best, s) : s;
  }
  backward(best);

  const int c = act->dim(0), h = act->dim(1), w = act->dim(2);
  const auto& grad = act->grad();
  const auto& val = act->values();
  auto cam = TensorF::zeros({h, w});
  for (int ch = 0; ch < c; ++ch) {
    double wsum = 0;
    for (int i = 0; i < h * w; ++i) wsum += grad[size_t(ch) * h * w + i];
    const float weight = float(wsum / double(h * w));
    for (int i = 0; i < h * w; ++i)
      cam.values()[i] += weight * val[size_t(ch) * h * w + i];
  }
  relu_minmax_normalize(cam);
  return cam;
}

}  // namespace sde
