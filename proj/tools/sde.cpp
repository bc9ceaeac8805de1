#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sde/data.hpp"
#include "sde/detect.hpp"
#include "sde/eval.hpp"
#include "sde/gradcheck.hpp"
#include "sde/network.hpp"
#include "sde/weights.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitInputError = 2;

struct Options {
  uint64_t seed = 42;
  float conf = sde::kDefaultConfThresh;
  float nms_iou = sde::kDefaultNmsIou;
  int groups = 8;
  double ratio = 0.6;
  int reps = 5;
  std::string weights;
  std::string layer = "feat3";
  std::string out;
  std::string pred_dir, gt_dir;
  std::string in_dir;
  std::string image;
  std::string break_stride;
  bool inject_fault = false;
  bool json = false;
};

sde::NetworkSpec make_spec(const Options& opt) {
  auto spec = sde::default_network_spec();
  spec.ema_groups = opt.groups;
  return spec;
}

sde::Model load_or_init_model(const Options& opt, const sde::NetworkSpec& spec) {
  if (!opt.weights.empty())
    return sde::build_model(spec, sde::load_weights(opt.weights));
  return sde::build_model(spec, sde::init_weights(spec, opt.seed));
}

// ---------------------------------------------------------------------------

int cmd_shapes(const Options& opt) {
  auto spec = make_spec(opt);
  const auto expected_rows = sde::backbone_shape_rows(spec);
  if (!opt.break_stride.empty()) {
    bool found = false;
    for (auto& l : spec.backbone)
      if (l.name == opt.break_stride) {
        l.stride = l.stride == 2 ? 1 : 2;
        found = true;
      }
    if (!found) {
      std::cerr << "no backbone layer named '" << opt.break_stride << "'\n";
      return kExitInputError;
    }
  }
  auto model = sde::build_model(spec, sde::init_weights(spec, opt.seed));
  sde::SplitMix64 rng(opt.seed);
  auto image = sde::TensorF::zeros({3, spec.input_size, spec.input_size});
  for (auto& v : image.values()) v = float(rng.uniform());

  sde::Model::Trace trace;
  model.backbone_forward(image, &trace);

  std::string first_mismatch;
  int row_no = 0;
  for (const auto& row : expected_rows) {
    ++row_no;
    const sde::TensorF* t = trace.find(row.trace_key);
    const sde::Shape got = t ? t->shape() : sde::Shape{};
    const bool ok =
        got == sde::Shape{row.c, row.h, row.w};  // stored channels-first
    std::printf("%2d  %-22s expected (%d,%d,%d)  actual (%d,%d,%d)  %s\n",
                row_no, row.op.c_str(), row.h, row.w, row.c,
                got.size() == 3 ? got[1] : -1, got.size() == 3 ? got[2] : -1,
                got.size() == 3 ? got[0] : -1, ok ? "ok" : "MISMATCH");
    if (!ok && first_mismatch.empty()) first_mismatch = row.op;
  }
  if (!first_mismatch.empty()) {
    std::printf("shape conformance FAILED, first mismatching row: %s\n",
                first_mismatch.c_str());
    return kExitCheckFailed;
  }
  std::printf("shape conformance OK, %zu rows match\n", expected_rows.size());
  return kExitOk;
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(const Options& opt) {
  using sde::TensorF;
  const double h = 1e-3, tol = 1e-3;
  const uint64_t seed = opt.seed;

  struct BlockCheck {
    const char* name;
    std::function<sde::GradCheckReport()> run;
  };

  // A fault routes half the output around the tape: the numeric side sees
  // 1.5x the true derivative while the analytic side reports 1x.
  const bool fault = opt.inject_fault;
  auto maybe_fault = [fault](TensorF y, const TensorF&) {
    if (!fault) return y;
    return sde::add(y, sde::scale(y.detach(), 0.5));
  };

  std::vector<BlockCheck> checks;
  checks.push_back({"star-block", [&] {
                      auto p = sde::make_star_params<float>(4, seed + 1);
                      for (auto& b : p.f1_b.values()) b = 0.21f;
                      auto x = TensorF::zeros({4, 6, 6});
                      sde::SplitMix64 rng(seed + 2);
                      for (auto& v : x.values())
                        v = float(rng.uniform_sym(0.5));
                      // central differences are only valid away from the
                      // relu6 kinks; shift the branch bias until every
                      // pre-activation clears them
                      for (int tries = 0; tries < 64; ++tries) {
                        auto hmap = sde::affine_channels(
                            sde::depthwise_conv2d(x, p.dw1_w, 1, 3),
                            p.dw1_scale, p.dw1_shift);
                        auto pa = sde::add_bias_channels(
                            sde::conv2d(hmap, p.f1_w, 1, 0), p.f1_b);
                        bool clean = true;
                        for (float v : pa.values())
                          if (std::abs(v) < 5e-3f || std::abs(v - 6.f) < 5e-3f)
                            clean = false;
                        if (clean) break;
                        for (auto& b : p.f1_b.values()) b += 0.0173f;
                      }
                      return sde::check_gradient<float>(
                          [&] {
                            return maybe_fault(sde::star_block_forward(x, p),
                                               x);
                          },
                          x, h);
                    }});
  checks.push_back({"deform-attn", [&] {
                      auto p = sde::make_deform_params<float>(4, 2, seed + 3);
                      auto x = TensorF::zeros({4, 6, 6});
                      sde::SplitMix64 rng(seed + 4);
                      for (auto& v : x.values())
                        v = float(rng.uniform_sym(0.5));
                      // sampling positions sit at (cell + offset) in pixel
                      // units; keep every offset clear of the bilinear kinks
                      // at integer coordinates by shifting the offset bias
                      for (int tries = 0; tries < 64; ++tries) {
                        auto tokens = sde::chw_to_tokens(x);
                        auto q = sde::tokens_to_chw(
                            sde::matmul(tokens, p.wq), 6, 6);
                        auto off = sde::offset_net_forward(q, p);
                        bool clean = true;
                        for (float v : off.values())
                          if (std::abs(v - std::round(v)) < 5e-3f)
                            clean = false;
                        if (clean) break;
                        for (auto& b : p.off_pw_b.values()) b += 0.0117f;
                      }
                      return sde::check_gradient<float>(
                          [&] {
                            return maybe_fault(
                                sde::deformable_attention_forward(x, p), x);
                          },
                          x, h);
                    }});
  checks.push_back({"ema", [&] {
                      auto p = sde::make_ema_params<float>(4, 2, seed + 5);
                      auto x = TensorF::zeros({4, 6, 6});
                      sde::SplitMix64 rng(seed + 6);
                      for (auto& v : x.values())
                        v = float(rng.uniform_sym(0.5));
                      return sde::check_gradient<float>(
                          [&] { return maybe_fault(sde::ema_forward(x, p), x); },
                          x, h);
                    }});
  checks.push_back({"conv-module", [&] {
                      sde::SplitMix64 wrng(seed + 7);
                      auto p = sde::make_conv_module<float>(3, 4, 3, 2, wrng);
                      auto x = TensorF::zeros({3, 6, 6});
                      sde::SplitMix64 rng(seed + 8);
                      for (auto& v : x.values())
                        v = float(rng.uniform_sym(0.5));
                      return sde::check_gradient<float>(
                          [&] {
                            return maybe_fault(sde::conv_module_forward(x, p),
                                               x);
                          },
                          x, h);
                    }});

  bool all_ok = true;
  for (auto& c : checks) {
    const auto r = c.run();
    const bool ok = r.rel_err < tol;
    all_ok = all_ok && ok;
    std::printf("%-12s max_rel_err=%.3e  %s\n", c.name, r.rel_err,
                ok ? "ok" : "FAILED");
  }
  std::printf("gradient checks %s (tolerance %.0e)\n",
              all_ok ? "OK" : "FAILED", tol);
  return all_ok ? kExitOk : kExitCheckFailed;
}

// ---------------------------------------------------------------------------

int cmd_eval(const Options& opt) {
  sde::EvalConfig cfg;
  cfg.conf_thresh = opt.conf;
  auto report = sde::evaluate_dataset(opt.pred_dir, opt.gt_dir, cfg);
  const std::string json = sde::eval_report_json(report);
  if (opt.out.empty()) {
    std::printf("%s\n", json.c_str());
  } else {
    std::ofstream f(opt.out);
    if (!f) throw sde::IoError("cannot open " + opt.out + " for writing");
    f << json << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

int cmd_augment(const Options& opt) {
  namespace fs = std::filesystem;
  auto samples = sde::load_dataset(opt.in_dir);
  if (opt.out.empty()) throw sde::IoError("augment requires --out directory");
  fs::create_directories(opt.out);
  auto augmented = sde::augment_dataset(samples);
  for (const auto& a : augmented) {
    const std::string stem =
        a.sample.name + "_" + sde::augment_kind_name(a.kind);
    sde::write_ppm((fs::path(opt.out) / (stem + ".ppm")).string(),
                   a.sample.image);
    sde::write_labels((fs::path(opt.out) / (stem + ".txt")).string(),
                      a.sample.labels);
  }
  std::printf("augmented %zu samples into %zu images + %zu label files\n",
              samples.size(), augmented.size(), augmented.size());
  return kExitOk;
}

// ---------------------------------------------------------------------------

int cmd_split(const Options& opt) {
  namespace fs = std::filesystem;
  auto samples = sde::load_dataset(opt.in_dir);
  auto [train, test] = sde::split_dataset(samples, opt.ratio, opt.seed);
  const fs::path out_dir = opt.out.empty() ? fs::path(opt.in_dir)
                                           : fs::path(opt.out);
  fs::create_directories(out_dir);
  {
    std::ofstream tr(out_dir / "train.txt");
    for (const auto& s : train) tr << s.name << "\n";
    std::ofstream te(out_dir / "test.txt");
    for (const auto& s : test) te << s.name << "\n";
  }
  std::printf("split %zu samples: train %zu, test %zu (ratio %.2f, seed %llu)\n",
              samples.size(), train.size(), test.size(), opt.ratio,
              static_cast<unsigned long long>(opt.seed));
  return kExitOk;
}

// ---------------------------------------------------------------------------

void print_detection_lines(const std::vector<sde::Detection>& dets,
                           std::ostream& os) {
  char buf[160];
  for (const auto& d : dets) {
    std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f %.6f", d.class_id,
                  d.score, d.x_min, d.y_min, d.x_max, d.y_max);
    os << buf << "\n";
  }
}

std::string detections_json(const std::vector<sde::Detection>& dets) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << "[";
  for (size_t i = 0; i < dets.size(); ++i) {
    const auto& d = dets[i];
    os << (i ? "," : "") << "{\"class\":" << d.class_id
       << ",\"score\":" << d.score << ",\"x_min\":" << d.x_min
       << ",\"y_min\":" << d.y_min << ",\"x_max\":" << d.x_max
       << ",\"y_max\":" << d.y_max << "}";
  }
  os << "]";
  return os.str();
}

// Maps letterboxed detections back to source-image pixels.
std::vector<sde::Detection> to_source_coords(std::vector<sde::Detection> dets,
                                             const sde::Letterboxed& lb,
                                             int src_w, int src_h) {
  for (auto& d : dets) {
    d.x_min = std::clamp(float((d.x_min - lb.pad_x) / lb.scale), 0.f,
                         float(src_w));
    d.x_max = std::clamp(float((d.x_max - lb.pad_x) / lb.scale), 0.f,
                         float(src_w));
    d.y_min = std::clamp(float((d.y_min - lb.pad_y) / lb.scale), 0.f,
                         float(src_h));
    d.y_max = std::clamp(float((d.y_max - lb.pad_y) / lb.scale), 0.f,
                         float(src_h));
  }
  return dets;
}

int cmd_infer(const Options& opt) {
  auto spec = make_spec(opt);
  auto model = load_or_init_model(opt, spec);
  auto img = sde::read_ppm(opt.image);
  auto lb = sde::letterbox(img, spec.input_size);
  auto dets = sde::detect(model, lb.image, opt.conf, opt.nms_iou);
  dets = to_source_coords(std::move(dets), lb, img.dim(2), img.dim(1));
  if (opt.json) {
    const std::string json = detections_json(dets);
    if (opt.out.empty()) {
      std::printf("%s\n", json.c_str());
    } else {
      std::ofstream f(opt.out);
      f << json << "\n";
    }
  } else {
    print_detection_lines(dets, std::cout);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

int cmd_gradcam(const Options& opt) {
  auto spec = make_spec(opt);
  auto model = load_or_init_model(opt, spec);
  auto img = sde::read_ppm(opt.image);
  auto lb = sde::letterbox(img, spec.input_size);
  auto cam = sde::gradcam(model, lb.image, opt.layer);

  // heat overlay: red channel carries the map, upscaled to the input size
  const int size = spec.input_size;
  auto heat3 = sde::TensorF::zeros({3, cam.dim(0), cam.dim(1)});
  for (size_t i = 0; i < cam.numel(); ++i) heat3.values()[i] = cam.values()[i];
  auto heat = sde::resize_bilinear_image(heat3, size, size);
  auto overlay = sde::TensorF::zeros({3, size, size});
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const size_t px = size_t(i) * size + j;
      const float gray = (lb.image.values()[px] +
                          lb.image.values()[size_t(size) * size + px] +
                          lb.image.values()[2 * size_t(size) * size + px]) /
                         3.f;
      const float hv = heat.values()[px];
      overlay.values()[px] = std::clamp(0.4f * gray + 0.6f * hv, 0.f, 1.f);
      overlay.values()[size_t(size) * size + px] = 0.4f * gray;
      overlay.values()[2 * size_t(size) * size + px] = 0.4f * gray;
    }
  const std::string out = opt.out.empty() ? "gradcam.ppm" : opt.out;
  sde::write_ppm(out, overlay);
  std::printf("gradcam layer %s (%dx%d) written to %s\n", opt.layer.c_str(),
              cam.dim(0), cam.dim(1), out.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------

int cmd_bench(const Options& opt) {
  auto spec = make_spec(opt);
  auto model = load_or_init_model(opt, spec);
  sde::SplitMix64 rng(opt.seed);
  auto image = sde::TensorF::zeros({3, spec.input_size, spec.input_size});
  for (auto& v : image.values()) v = float(rng.uniform());

  sde::detect(model, image, opt.conf, opt.nms_iou);  // warm-up
  std::vector<double> times_ms;
  for (int r = 0; r < opt.reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    sde::detect(model, image, opt.conf, opt.nms_iou);
    const auto t1 = std::chrono::steady_clock::now();
    times_ms.push_back(
        std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  double mean = 0;
  for (double t : times_ms) mean += t;
  mean /= times_ms.size();
  double var = 0;
  for (double t : times_ms) var += (t - mean) * (t - mean);
  const double stddev = std::sqrt(var / times_ms.size());

  const double gflops = sde::flops_estimate(spec) / 1e9;
  std::printf("forward latency over %d runs: mean %.1f ms, stddev %.1f ms\n",
              opt.reps, mean, stddev);
  std::printf("flop estimate (conv+matmul MACs x2): %.2f GFLOPs, throughput "
              "%.2f GFLOP/s\n",
              gflops, gflops / (mean / 1000.0));
  std::printf("parameters: %zu\n", model.param_count());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SDE-DET detection toolkit: shape conformance, gradient "
               "checks, inference, evaluation, and the dataset pipeline"};
  app.require_subcommand(1);
  app.fallthrough(true);
  Options opt;

  app.add_option("--seed", opt.seed, "seed for every random draw");

  auto* shapes = app.add_subcommand(
      "shapes", "verify the backbone against its published layer table");
  shapes->add_option("--break-stride", opt.break_stride,
                     "self-test: flip the stride of the named layer");

  auto* gradcheck = app.add_subcommand(
      "gradcheck", "analytic vs central-difference gradients per block");
  gradcheck->add_flag("--inject-fault", opt.inject_fault,
                      "self-test: corrupt one backward rule");

  auto* eval = app.add_subcommand("eval", "score predictions against labels");
  eval->add_option("--pred", opt.pred_dir, "directory of prediction files")
      ->required();
  eval->add_option("--gt", opt.gt_dir, "directory of ground truth files")
      ->required();
  eval->add_option("--conf", opt.conf, "operating-point confidence")
      ->check(CLI::Range(0.f, 1.f));
  eval->add_option("--out", opt.out, "write the JSON report here");

  auto* augment = app.add_subcommand(
      "augment", "expand a dataset with the six augmentations");
  augment->add_option("dir", opt.in_dir, "dataset directory")->required();
  augment->add_option("--out", opt.out, "output directory")->required();

  auto* split = app.add_subcommand("split", "seeded train/test split");
  split->add_option("dir", opt.in_dir, "dataset directory")->required();
  split->add_option("--ratio", opt.ratio, "train fraction")
      ->check(CLI::Range(0.0, 1.0));
  split->add_option("--out", opt.out, "directory for train.txt/test.txt");

  auto* infer = app.add_subcommand("infer", "detect on one image");
  infer->add_option("image", opt.image, "input image (ppm)")->required();
  infer->add_option("--weights", opt.weights, "weights file (seeded when absent)");
  infer->add_option("--conf", opt.conf, "confidence threshold")
      ->check(CLI::Range(0.f, 1.f));
  infer->add_option("--nms-iou", opt.nms_iou, "NMS IoU threshold")
      ->check(CLI::Range(0.f, 1.f));
  infer->add_option("--groups", opt.groups, "attention group count");
  infer->add_flag("--json", opt.json, "emit JSON instead of lines");
  infer->add_option("--out", opt.out, "write output here");

  auto* gradcam = app.add_subcommand("gradcam", "activation heatmap overlay");
  gradcam->add_option("image", opt.image, "input image (ppm)")->required();
  gradcam->add_option("--layer", opt.layer, "layer name (see error for list)");
  gradcam->add_option("--weights", opt.weights, "weights file");
  gradcam->add_option("--groups", opt.groups, "attention group count");
  gradcam->add_option("--out", opt.out, "output ppm path");

  auto* bench = app.add_subcommand("bench", "forward latency and flop report");
  bench->add_option("--reps", opt.reps, "repetitions");
  bench->add_option("--groups", opt.groups, "attention group count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInputError;
  }

  try {
    if (shapes->parsed()) return cmd_shapes(opt);
    if (gradcheck->parsed()) return cmd_gradcheck(opt);
    if (eval->parsed()) return cmd_eval(opt);
    if (augment->parsed()) return cmd_augment(opt);
    if (split->parsed()) return cmd_split(opt);
    if (infer->parsed()) return cmd_infer(opt);
    if (gradcam->parsed()) return cmd_gradcam(opt);
    if (bench->parsed()) return cmd_bench(opt);
  } catch (const sde::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const sde::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const sde::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const sde::ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInputError;
  }
  return kExitOk;
}
