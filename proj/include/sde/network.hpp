#pragma once

#include <array>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sde/attention.hpp"
#include "sde/ema.hpp"
#include "sde/star.hpp"
#include "sde/weights.hpp"
#include "sde/yolo_blocks.hpp"

namespace sde {

// ---------------------------------------------------------------------------
// network description
// ---------------------------------------------------------------------------

enum class LayerKind {
  kConvModule,
  kStarBlock,
  kC2f,
  kSppf,
  kDeformAttn,
};

struct LayerDesc {
  LayerKind kind;
  std::string name;  // weight prefix and trace key
  int in_c = 0, out_c = 0;
  int stride = 1, kernel = 0;
  int out_hw = 0;  // expected square spatial extent after this layer
};

// One printed line of the backbone conformance table.
struct ShapeRow {
  std::string op;
  std::string trace_key;
  int h = 0, w = 0, c = 0;
};

struct NetworkSpec {
  int input_size = 640;
  int num_classes = 1;  // pomelo
  int attn_heads = 8;
  int ema_groups = 8;
  int head_mid = 64;
  int c2f_depth = 1;
  std::vector<LayerDesc> backbone;

  uint64_t hash() const {
    std::ostringstream os;
    os << input_size << '|' << num_classes << '|' << attn_heads << '|'
       << ema_groups << '|' << head_mid << '|' << c2f_depth;
    for (const auto& l : backbone)
      os << '|' << int(l.kind) << ',' << l.name << ',' << l.in_c << ','
         << l.out_c << ',' << l.stride << ',' << l.kernel << ',' << l.out_hw;
    return fnv1a64(os.str());
  }
};

// Backbone layer list; the stride-1 1x1 expansion after the star block
// bridges its 8 channels to the 32-channel downsampling stage.
inline NetworkSpec default_network_spec() {
  NetworkSpec s;
  s.backbone = {
      {LayerKind::kConvModule, "conv1", 3, 8, 2, 3, 320},
      {LayerKind::kStarBlock, "star", 8, 8, 1, 7, 320},
      {LayerKind::kConvModule, "expand", 8, 32, 1, 1, 320},
      {LayerKind::kConvModule, "conv2", 32, 32, 2, 3, 160},
      {LayerKind::kConvModule, "conv3", 32, 64, 2, 3, 80},
      {LayerKind::kC2f, "c2f1", 64, 64, 1, 1, 80},
      {LayerKind::kConvModule, "conv4", 64, 128, 2, 3, 40},
      {LayerKind::kConvModule, "conv5", 128, 256, 2, 3, 20},
      {LayerKind::kC2f, "c2f2", 256, 256, 1, 1, 20},
      {LayerKind::kSppf, "sppf", 256, 256, 1, 5, 20},
      {LayerKind::kDeformAttn, "dattn", 256, 256, 1, 0, 20},
  };
  return s;
}

// The published parameter table: operation rows plus the three feature taps.
inline std::vector<ShapeRow> backbone_shape_rows(const NetworkSpec& s) {
  std::vector<ShapeRow> rows;
  for (const auto& l : s.backbone) {
    if (l.name == "expand") continue;  // internal bridge, not a table row
    std::string op;
    switch (l.kind) {
      case LayerKind::kConvModule: op = "ConvModule"; break;
      case LayerKind::kStarBlock: op = "Star Block"; break;
      case LayerKind::kC2f: op = "CSPLayer_2Conv"; break;
      case LayerKind::kSppf: op = "SPPF"; break;
      case LayerKind::kDeformAttn: op = "Deformable Attention"; break;
    }
    rows.push_back({op, l.name, l.out_hw, l.out_hw, l.out_c});
    if (l.name == "c2f1")
      rows.push_back({"Feat1", l.name, l.out_hw, l.out_hw, l.out_c});
    if (l.name == "conv4")
      rows.push_back({"Feat2", l.name, l.out_hw, l.out_hw, l.out_c});
    if (l.name == "dattn")
      rows.push_back({"Feat3", l.name, l.out_hw, l.out_hw, l.out_c});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// weight enumeration
// ---------------------------------------------------------------------------

enum class InitKind { kFanIn, kOnes, kZeros };

// Single enumeration point: assembly fetches every tensor through this
// callback, so seeding, loading, and validation all see one name/shape list.
using FetchFn =
    std::function<TensorF(const std::string&, Shape, InitKind, int)>;

namespace detail {

inline ConvModuleParams<float> fetch_conv_module(const FetchFn& f,
                                                 const std::string& prefix,
                                                 int cin, int cout, int k,
                                                 int stride) {
  ConvModuleParams<float> p;
  p.w = f(prefix + ".w", {cout, cin, k, k}, InitKind::kFanIn, cin * k * k);
  p.bn_scale = f(prefix + ".bn_scale", {cout}, InitKind::kOnes, 0);
  p.bn_shift = f(prefix + ".bn_shift", {cout}, InitKind::kZeros, 0);
  p.stride = stride;
  p.pad = k / 2;
  return p;
}

inline StarParams<float> fetch_star(const FetchFn& f,
                                    const std::string& prefix, int c) {
  const int e = 4 * c;
  StarParams<float> p;
  p.channels = c;
  p.dw1_w = f(prefix + ".dw1.w", {c, 7, 7}, InitKind::kFanIn, 49);
  p.dw1_scale = f(prefix + ".dw1.bn_scale", {c}, InitKind::kOnes, 0);
  p.dw1_shift = f(prefix + ".dw1.bn_shift", {c}, InitKind::kZeros, 0);
  p.f1_w = f(prefix + ".f1.w", {e, c, 1, 1}, InitKind::kFanIn, c);
  p.f1_b = f(prefix + ".f1.b", {e}, InitKind::kZeros, 0);
  p.f2_w = f(prefix + ".f2.w", {e, c, 1, 1}, InitKind::kFanIn, c);
  p.f2_b = f(prefix + ".f2.b", {e}, InitKind::kZeros, 0);
  p.g_w = f(prefix + ".g.w", {c, e, 1, 1}, InitKind::kFanIn, e);
  p.g_scale = f(prefix + ".g.bn_scale", {c}, InitKind::kOnes, 0);
  p.g_shift = f(prefix + ".g.bn_shift", {c}, InitKind::kZeros, 0);
  p.dw2_w = f(prefix + ".dw2.w", {c, 7, 7}, InitKind::kFanIn, 49);
  p.dw2_b = f(prefix + ".dw2.b", {c}, InitKind::kZeros, 0);
  return p;
}

inline C2fParams<float> fetch_c2f(const FetchFn& f, const std::string& prefix,
                                  int cin, int cout, int n) {
  C2fParams<float> p;
  const int half = cout / 2;
  p.cv1 = fetch_conv_module(f, prefix + ".cv1", cin, 2 * half, 1, 1);
  for (int i = 0; i < n; ++i) {
    BottleneckParams<float> b;
    const std::string bp = prefix + ".m" + std::to_string(i);
    b.cv1 = fetch_conv_module(f, bp + ".cv1", half, half, 3, 1);
    b.cv2 = fetch_conv_module(f, bp + ".cv2", half, half, 3, 1);
    p.blocks.push_back(std::move(b));
  }
  p.cv2 = fetch_conv_module(f, prefix + ".cv2", (2 + n) * half, cout, 1, 1);
  return p;
}

inline SppfParams<float> fetch_sppf(const FetchFn& f,
                                    const std::string& prefix, int c) {
  SppfParams<float> p;
  p.cv1 = fetch_conv_module(f, prefix + ".cv1", c, c / 2, 1, 1);
  p.cv2 = fetch_conv_module(f, prefix + ".cv2", 2 * c, c, 1, 1);
  p.k = 5;
  return p;
}

inline DeformAttnParams<float> fetch_dattn(const FetchFn& f,
                                           const std::string& prefix, int c,
                                           int heads) {
  DeformAttnParams<float> p;
  p.heads = heads;
  p.offset_scale = 2.0;
  p.wq = f(prefix + ".wq", {c, c}, InitKind::kFanIn, c);
  p.wk = f(prefix + ".wk", {c, c}, InitKind::kFanIn, c);
  p.wv = f(prefix + ".wv", {c, c}, InitKind::kFanIn, c);
  p.wo = f(prefix + ".wo", {c, c}, InitKind::kFanIn, c);
  p.off_dw_w = f(prefix + ".off_dw.w", {c, 5, 5}, InitKind::kFanIn, 25);
  p.off_dw_b = f(prefix + ".off_dw.b", {c}, InitKind::kZeros, 0);
  p.off_pw_w = f(prefix + ".off_pw.w", {2, c, 1, 1}, InitKind::kFanIn, c);
  p.off_pw_b = f(prefix + ".off_pw.b", {2}, InitKind::kZeros, 0);
  return p;
}

inline EMAParams<float> fetch_ema(const FetchFn& f, const std::string& prefix,
                                  int c, int groups) {
  if (groups < 1 || c % groups != 0)
    throw ConfigError("ema group count " + std::to_string(groups) +
                      " does not divide " + std::to_string(c) + " channels");
  const int cg = c / groups;
  EMAParams<float> p;
  p.groups = groups;
  p.conv1_w = f(prefix + ".conv1.w", {cg, cg}, InitKind::kFanIn, cg);
  p.conv1_b = f(prefix + ".conv1.b", {cg}, InitKind::kZeros, 0);
  p.conv3_w = f(prefix + ".conv3.w", {cg, cg, 3, 3}, InitKind::kFanIn, cg * 9);
  p.conv3_b = f(prefix + ".conv3.b", {cg}, InitKind::kZeros, 0);
  p.gn_gamma = f(prefix + ".gn.gamma", {cg}, InitKind::kOnes, 0);
  p.gn_beta = f(prefix + ".gn.beta", {cg}, InitKind::kZeros, 0);
  return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

struct HeadLevelParams {
  ConvModuleParams<float> cls_stem0, cls_stem1, reg_stem0, reg_stem1;
  TensorF cls_w, cls_b;  // [nc,mid,1,1]
  TensorF obj_w, obj_b;  // [1,mid,1,1]
  TensorF box_w, box_b;  // [4,mid,1,1]
  int stride = 8;
};

// Raw per-level head maps before decoding.
struct HeadLevelOut {
  TensorF cls;  // [nc,H,W] logits
  TensorF obj;  // [1,H,W] logits
  TensorF box;  // [4,H,W] distance logits (l,t,r,b)
  int stride = 8;
};

class Model {
 public:
  struct Trace {
    std::vector<std::pair<std::string, TensorF>> items;
    void put(const std::string& name, const TensorF& t) {
      items.emplace_back(name, t);
    }
    const TensorF* find(const std::string& name) const {
      for (const auto& [n, t] : items)
        if (n == name) return &t;
      return nullptr;
    }
    std::vector<std::string> names() const {
      std::vector<std::string> out;
      out.reserve(items.size());
      for (const auto& [n, t] : items) out.push_back(n);
      return out;
    }
  };

  const NetworkSpec& spec() const { return spec_; }
  size_t param_count() const { return param_count_; }

  // Three feature taps with the published extents:
  // feat1 [64,80,80], feat2 [128,40,40], feat3 [256,20,20].
  std::array<TensorF, 3> backbone_forward(const TensorF& image,
                                          Trace* trace = nullptr) const {
    if (image.shape() !=
        Shape{3, spec_.input_size, spec_.input_size})
      throw ShapeError("backbone expects input [3," +
                       std::to_string(spec_.input_size) + "," +
                       std::to_string(spec_.input_size) + "], got " +
                       shape_str(image.shape()));
    TensorF x = image;
    std::array<TensorF, 3> feats;
    for (size_t i = 0; i < spec_.backbone.size(); ++i) {
      const auto& l = spec_.backbone[i];
      switch (l.kind) {
        case LayerKind::kConvModule:
          x = conv_module_forward(x, conv_modules_.at(l.name));
          break;
        case LayerKind::kStarBlock:
          x = star_block_forward(x, star_);
          break;
        case LayerKind::kC2f:
          x = c2f_forward(x, c2fs_.at(l.name));
          break;
        case LayerKind::kSppf:
          x = sppf_forward(x, sppf_);
          break;
        case LayerKind::kDeformAttn:
          x = deformable_attention_forward(x, dattn_);
          break;
      }
      if (trace) trace->put(l.name, x);
      if (l.name == "c2f1") {
        feats[0] = x;
        if (trace) trace->put("feat1", x);
      }
      if (l.name == "conv4") {
        feats[1] = x;
        if (trace) trace->put("feat2", x);
      }
      if (l.name == "dattn") {
        feats[2] = x;
        if (trace) trace->put("feat3", x);
      }
    }
    return feats;
  }

  // PAN fusion with one channel-grouped attention block on each fused level.
  std::array<TensorF, 3> neck_forward(const std::array<TensorF, 3>& feats,
                                      Trace* trace = nullptr,
                                      bool ema_enabled = true) const {
    auto td4 = c2f_forward(
        concat<float>({upsample_nearest2x(feats[2]), feats[1]}, 0),
        neck_c2f_td4_);
    if (trace) trace->put("neck.td4", td4);
    auto p3 = c2f_forward(
        concat<float>({upsample_nearest2x(td4), feats[0]}, 0), neck_c2f_p3_);
    if (trace) trace->put("neck.p3_pre", p3);
    auto p4 = c2f_forward(
        concat<float>({conv_module_forward(p3, neck_down_p3_), td4}, 0),
        neck_c2f_p4_);
    if (trace) trace->put("neck.p4_pre", p4);
    auto p5 = c2f_forward(
        concat<float>({conv_module_forward(p4, neck_down_p4_), feats[2]}, 0),
        neck_c2f_p5_);
    if (trace) trace->put("neck.p5_pre", p5);
    if (ema_enabled) {
      p3 = ema_forward(p3, neck_ema_p3_);
      p4 = ema_forward(p4, neck_ema_p4_);
      p5 = ema_forward(p5, neck_ema_p5_);
    }
    if (trace) {
      trace->put("p3", p3);
      trace->put("p4", p4);
      trace->put("p5", p5);
    }
    return {p3, p4, p5};
  }

  std::vector<HeadLevelOut> head_forward(
      const std::array<TensorF, 3>& pyramid) const {
    std::vector<HeadLevelOut> out;
    for (int lvl = 0; lvl < 3; ++lvl) {
      const auto& hp = head_[lvl];
      const auto& x = pyramid[lvl];
      auto cls_feat = conv_module_forward(
          conv_module_forward(x, hp.cls_stem0), hp.cls_stem1);
      auto reg_feat = conv_module_forward(
          conv_module_forward(x, hp.reg_stem0), hp.reg_stem1);
      HeadLevelOut o;
      o.cls = add_bias_channels(conv2d(cls_feat, hp.cls_w, 1, 0), hp.cls_b);
      o.obj = add_bias_channels(conv2d(reg_feat, hp.obj_w, 1, 0), hp.obj_b);
      o.box = add_bias_channels(conv2d(reg_feat, hp.box_w, 1, 0), hp.box_b);
      o.stride = hp.stride;
      out.push_back(std::move(o));
    }
    return out;
  }

 private:
  friend Model build_model_with(const NetworkSpec&, const FetchFn&);

  NetworkSpec spec_;
  size_t param_count_ = 0;

  std::map<std::string, ConvModuleParams<float>> conv_modules_;
  std::map<std::string, C2fParams<float>> c2fs_;
  StarParams<float> star_;
  SppfParams<float> sppf_;
  DeformAttnParams<float> dattn_;

  C2fParams<float> neck_c2f_td4_, neck_c2f_p3_, neck_c2f_p4_, neck_c2f_p5_;
  ConvModuleParams<float> neck_down_p3_, neck_down_p4_;
  EMAParams<float> neck_ema_p3_, neck_ema_p4_, neck_ema_p5_;

  std::array<HeadLevelParams, 3> head_;
};

// Assembles a model pulling every tensor through `fetch`.
inline Model build_model_with(const NetworkSpec& spec, const FetchFn& fetch) {
  size_t total = 0;
  FetchFn f = [&](const std::string& name, Shape shape, InitKind kind,
                  int fan_in) {
    auto t = fetch(name, std::move(shape), kind, fan_in);
    total += t.numel();
    return t;
  };

  Model m;
  m.spec_ = spec;
  for (const auto& l : spec.backbone) {
    const std::string prefix = "backbone." + l.name;
    switch (l.kind) {
      case LayerKind::kConvModule:
        m.conv_modules_[l.name] = detail::fetch_conv_module(
            f, prefix, l.in_c, l.out_c, l.kernel, l.stride);
        break;
      case LayerKind::kStarBlock:
        m.star_ = detail::fetch_star(f, prefix, l.in_c);
        break;
      case LayerKind::kC2f:
        m.c2fs_[l.name] =
            detail::fetch_c2f(f, prefix, l.in_c, l.out_c, spec.c2f_depth);
        break;
      case LayerKind::kSppf:
        m.sppf_ = detail::fetch_sppf(f, prefix, l.in_c);
        break;
      case LayerKind::kDeformAttn:
        m.dattn_ = detail::fetch_dattn(f, prefix, l.in_c, spec.attn_heads);
        break;
    }
  }

  // neck channel plan: feats are 64/128/256
  const int c3 = 64, c4 = 128, c5 = 256;
  m.neck_c2f_td4_ =
      detail::fetch_c2f(f, "neck.c2f_td4", c5 + c4, c4, spec.c2f_depth);
  m.neck_c2f_p3_ =
      detail::fetch_c2f(f, "neck.c2f_p3", c4 + c3, c3, spec.c2f_depth);
  m.neck_down_p3_ = detail::fetch_conv_module(f, "neck.down_p3", c3, c3, 3, 2);
  m.neck_c2f_p4_ =
      detail::fetch_c2f(f, "neck.c2f_p4", c3 + c4, c4, spec.c2f_depth);
  m.neck_down_p4_ = detail::fetch_conv_module(f, "neck.down_p4", c4, c4, 3, 2);
  m.neck_c2f_p5_ =
      detail::fetch_c2f(f, "neck.c2f_p5", c4 + c5, c5, spec.c2f_depth);
  m.neck_ema_p3_ = detail::fetch_ema(f, "neck.ema_p3", c3, spec.ema_groups);
  m.neck_ema_p4_ = detail::fetch_ema(f, "neck.ema_p4", c4, spec.ema_groups);
  m.neck_ema_p5_ = detail::fetch_ema(f, "neck.ema_p5", c5, spec.ema_groups);

  const int strides[3] = {8, 16, 32};
  const int chans[3] = {c3, c4, c5};
  const int mid = spec.head_mid, nc = spec.num_classes;
  for (int lvl = 0; lvl < 3; ++lvl) {
    const std::string prefix = "head.p" + std::to_string(lvl + 3);
    HeadLevelParams hp;
    hp.cls_stem0 = detail::fetch_conv_module(f, prefix + ".cls_stem0",
                                             chans[lvl], mid, 3, 1);
    hp.cls_stem1 =
        detail::fetch_conv_module(f, prefix + ".cls_stem1", mid, mid, 3, 1);
    hp.reg_stem0 = detail::fetch_conv_module(f, prefix + ".reg_stem0",
                                             chans[lvl], mid, 3, 1);
    hp.reg_stem1 =
        detail::fetch_conv_module(f, prefix + ".reg_stem1", mid, mid, 3, 1);
    hp.cls_w = f(prefix + ".cls.w", {nc, mid, 1, 1}, InitKind::kFanIn, mid);
    hp.cls_b = f(prefix + ".cls.b", {nc}, InitKind::kZeros, 0);
    hp.obj_w = f(prefix + ".obj.w", {1, mid, 1, 1}, InitKind::kFanIn, mid);
    hp.obj_b = f(prefix + ".obj.b", {1}, InitKind::kZeros, 0);
    hp.box_w = f(prefix + ".box.w", {4, mid, 1, 1}, InitKind::kFanIn, mid);
    hp.box_b = f(prefix + ".box.b", {4}, InitKind::kZeros, 0);
    hp.stride = strides[lvl];
    m.head_[lvl] = hp;
  }
  m.param_count_ = total;
  return m;
}

// Seeded store: every tensor draws from splitmix64(seed ^ fnv1a(name)), so
// the draw is independent of enumeration order.
inline WeightStore init_weights(const NetworkSpec& spec, uint64_t seed) {
  WeightStore store;
  store.seed = seed;
  store.spec_hash = spec.hash();
  FetchFn fetch = [&](const std::string& name, Shape shape, InitKind kind,
                      int fan_in) {
    SplitMix64 rng(seed ^ fnv1a64(name));
    TensorF t;
    switch (kind) {
      case InitKind::kFanIn:
        t = init::uniform_fan_in<float>(std::move(shape), fan_in, rng);
        break;
      case InitKind::kOnes:
        t = init::ones<float>(std::move(shape));
        break;
      case InitKind::kZeros:
        t = init::zeros<float>(std::move(shape));
        break;
    }
    store.tensors.emplace(name, t);
    return t;
  };
  build_model_with(spec, fetch);
  return store;
}

// Validates the store against the network enumeration: every required tensor
// present with the required shape, and nothing else.
inline Model build_model(const NetworkSpec& spec, const WeightStore& store) {
  if (store.spec_hash != spec.hash())
    throw ConfigError("weight store was produced for a different spec (hash " +
                      std::to_string(store.spec_hash) + " vs " +
                      std::to_string(spec.hash()) + ")");
  std::set<std::string> used;
  FetchFn fetch = [&](const std::string& name, Shape shape, InitKind,
                      int) -> TensorF {
    auto it = store.tensors.find(name);
    if (it == store.tensors.end())
      throw ConfigError("missing weight tensor " + name + ", expected shape " +
                        shape_str(shape));
    if (it->second.shape() != shape)
      throw ConfigError("weight " + name + " has shape " +
                        shape_str(it->second.shape()) + " but the network requires " +
                        shape_str(shape));
    used.insert(name);
    return it->second;
  };
  Model m = build_model_with(spec, fetch);
  for (const auto& [name, t] : store.tensors)
    if (!used.count(name))
      throw ConfigError("weight store holds unexpected tensor " + name);
  return m;
}

// Multiply-accumulates x2 over conv and matmul ops only, reported in FLOPs.
inline double flops_estimate(const NetworkSpec& spec) {
  double total = 0;
  auto conv = [&](int cin, int cout, int k, int hw) {
    total += 2.0 * cout * double(hw) * hw * cin * k * k;
  };
  auto dw = [&](int c, int k, int hw) {
    total += 2.0 * c * double(hw) * hw * k * k;
  };
  auto c2f = [&](int cin, int cout, int n, int hw) {
    const int half = cout / 2;
    conv(cin, 2 * half, 1, hw);
    for (int i = 0; i < n; ++i) {
      conv(half, half, 3, hw);
      conv(half, half, 3, hw);
    }
    conv((2 + n) * half, cout, 1, hw);
  };
  for (const auto& l : spec.backbone) {
    switch (l.kind) {
      case LayerKind::kConvModule:
        conv(l.in_c, l.out_c, l.kernel, l.out_hw);
        break;
      case LayerKind::kStarBlock: {
        const int c = l.in_c, e = 4 * c, hw = l.out_hw;
        dw(c, 7, hw);
        conv(c, e, 1, hw);
        conv(c, e, 1, hw);
        conv(e, c, 1, hw);
        dw(c, 7, hw);
        break;
      }
      case LayerKind::kC2f:
        c2f(l.in_c, l.out_c, spec.c2f_depth, l.out_hw);
        break;
      case LayerKind::kSppf:
        conv(l.in_c, l.in_c / 2, 1, l.out_hw);
        conv(2 * l.in_c, l.out_c, 1, l.out_hw);
        break;
      case LayerKind::kDeformAttn: {
        const int c = l.in_c, hw = l.out_hw;
        const double n = double(hw) * hw;
        total += 4 * 2.0 * n * c * c;  // q,k,v,o projections
        dw(c, 5, hw);
        conv(c, 2, 1, hw);
        total += 2 * 2.0 * n * n * c;  // qk^T and attn*v
        break;
      }
    }
  }
  const int c3 = 64, c4 = 128, c5 = 256;
  c2f(c5 + c4, c4, spec.c2f_depth, 40);
  c2f(c4 + c3, c3, spec.c2f_depth, 80);
  conv(c3, c3, 3, 40);
  c2f(c3 + c4, c4, spec.c2f_depth, 40);
  conv(c4, c4, 3, 20);
  c2f(c4 + c5, c5, spec.c2f_depth, 20);
  const int hws[3] = {80, 40, 20};
  const int chans[3] = {c3, c4, c5};
  for (int lvl = 0; lvl < 3; ++lvl) {
    const int cg = chans[lvl] / spec.ema_groups;
    // per group: strip 1x1, local 3x3, two [1,cg]x[cg,hw] aggregations
    total += spec.ema_groups *
             (2.0 * cg * cg * (hws[lvl] + hws[lvl]) +
              2.0 * cg * cg * 9 * hws[lvl] * hws[lvl] +
              2 * 2.0 * cg * double(hws[lvl]) * hws[lvl]);
    conv(chans[lvl], spec.head_mid, 3, hws[lvl]);
    conv(spec.head_mid, spec.head_mid, 3, hws[lvl]);
    conv(chans[lvl], spec.head_mid, 3, hws[lvl]);
    conv(spec.head_mid, spec.head_mid, 3, hws[lvl]);
    conv(spec.head_mid, spec.num_classes + 5, 1, hws[lvl]);
  }
  return total;
}

}  // namespace sde
