#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sde/common.hpp"
#include "sde/tensor.hpp"

namespace sde {

// YOLO-format label: normalized center box.
struct Label {
  int class_id = 0;
  float cx = 0, cy = 0, w = 0, h = 0;
};

struct Sample {
  TensorF image;  // [3,H,W] in [0,1]
  std::vector<Label> labels;
  std::string name;
};

enum class AugmentKind {
  kOriginal,
  kBrightness,
  kContrast,
  kDenoise,
  kGrayscale,
  kHFlip,
  kVFlip,
};

inline const std::vector<AugmentKind>& augment_kinds() {
  static const std::vector<AugmentKind> kinds{
      AugmentKind::kBrightness, AugmentKind::kContrast,
      AugmentKind::kDenoise,    AugmentKind::kGrayscale,
      AugmentKind::kHFlip,      AugmentKind::kVFlip};
  return kinds;
}

inline std::string augment_kind_name(AugmentKind k) {
  switch (k) {
    case AugmentKind::kOriginal: return "original";
    case AugmentKind::kBrightness: return "brightness";
    case AugmentKind::kContrast: return "contrast";
    case AugmentKind::kDenoise: return "denoise";
    case AugmentKind::kGrayscale: return "grayscale";
    case AugmentKind::kHFlip: return "hflip";
    case AugmentKind::kVFlip: return "vflip";
  }
  throw ConfigError("unknown augmentation kind");
}

inline AugmentKind augment_kind_from_name(const std::string& name) {
  for (AugmentKind k :
       {AugmentKind::kOriginal, AugmentKind::kBrightness,
        AugmentKind::kContrast, AugmentKind::kDenoise, AugmentKind::kGrayscale,
        AugmentKind::kHFlip, AugmentKind::kVFlip})
    if (augment_kind_name(k) == name) return k;
  throw ConfigError("unknown augmentation kind '" + name + "'");
}

struct AugmentedSample {
  Sample sample;
  AugmentKind kind = AugmentKind::kOriginal;
};

struct AugmentConfig {
  float brightness_factor = 1.3f;
  float contrast_factor = 1.3f;
};

// ---------------------------------------------------------------------------
// PPM (P6, 8-bit) image IO
// ---------------------------------------------------------------------------

namespace detail {

inline int ppm_token(std::istream& in, const std::string& path) {
  // skips whitespace and # comments
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int v;
  if (!(in >> v))
    throw ParseError(path + ": malformed ppm header");
  return v;
}

}  // namespace detail

inline TensorF read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open image " + path);
  std::string magic(2, '\0');
  f.read(magic.data(), 2);
  if (magic != "P6")
    throw ParseError(path + ": not a P6 ppm image");
  const int w = detail::ppm_token(f, path);
  const int h = detail::ppm_token(f, path);
  const int maxval = detail::ppm_token(f, path);
  if (w <= 0 || h <= 0)
    throw ParseError(path + ": bad dimensions " + std::to_string(w) + "x" +
                     std::to_string(h));
  if (maxval != 255)
    throw ParseError(path + ": unsupported maxval " + std::to_string(maxval));
  f.get();  // single whitespace after maxval
  std::vector<unsigned char> raw(size_t(w) * h * 3);
  f.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  if (size_t(f.gcount()) != raw.size())
    throw ParseError(path + ": truncated pixel data, expected " +
                     std::to_string(raw.size()) + " bytes");
  auto img = TensorF::zeros({3, h, w});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c)
        img.values()[(size_t(c) * h + i) * w + j] =
            float(raw[(size_t(i) * w + j) * 3 + c]) / 255.f;
  return img;
}

inline void write_ppm(const std::string& path, const TensorF& img) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw ShapeError("write_ppm expects [3,H,W], got " +
                     shape_str(img.shape()));
  const int h = img.dim(1), w = img.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> raw(size_t(w) * h * 3);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c) {
        const float v =
            std::clamp(img.values()[(size_t(c) * h + i) * w + j], 0.f, 1.f);
        raw[(size_t(i) * w + j) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.f));
      }
  f.write(reinterpret_cast<const char*>(raw.data()),
          std::streamsize(raw.size()));
  if (!f) throw IoError("short write to " + path);
}

// ---------------------------------------------------------------------------
// labels
// ---------------------------------------------------------------------------

inline std::vector<Label> read_labels(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open label file " + path);
  std::vector<Label> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream is(line);
    Label l;
    double cx, cy, w, h;
    if (!(is >> l.class_id >> cx >> cy >> w >> h))
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": expected `class cx cy w h`");
    std::string rest;
    if (is >> rest)
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": trailing token '" + rest + "'");
    for (double v : {cx, cy, w, h})
      if (v < 0.0 || v > 1.0)
        throw ParseError(path + ":" + std::to_string(lineno) +
                         ": coordinate " + std::to_string(v) +
                         " outside [0,1]");
    if (w <= 0.0 || h <= 0.0)
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": non-positive box extent");
    l.cx = float(cx);
    l.cy = float(cy);
    l.w = float(w);
    l.h = float(h);
    out.push_back(l);
  }
  return out;
}

inline void write_labels(const std::string& path,
                         const std::vector<Label>& labels) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.precision(9);
  for (const auto& l : labels)
    f << l.class_id << " " << l.cx << " " << l.cy << " " << l.w << " " << l.h
      << "\n";
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

// Pairs every .ppm with its same-stem .txt annotation file.
inline std::vector<Sample> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::set<std::string> images, labels;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    if (e.path().extension() == ".ppm") images.insert(e.path().stem().string());
    if (e.path().extension() == ".txt") labels.insert(e.path().stem().string());
  }
  for (const auto& s : images)
    if (!labels.count(s))
      throw IoError("image " + s + ".ppm has no matching label file");
  for (const auto& s : labels)
    if (!images.count(s))
      throw IoError("label " + s + ".txt has no matching image");
  std::vector<Sample> out;
  for (const auto& s : images) {
    Sample sample;
    sample.name = s;
    sample.image = read_ppm((fs::path(dir) / (s + ".ppm")).string());
    sample.labels = read_labels((fs::path(dir) / (s + ".txt")).string());
    out.push_back(std::move(sample));
  }
  return out;
}

// Deterministic Fisher-Yates over splitmix64: for i in [0,n-2],
// j = i + next() % (n - i), swap. First floor(n*ratio) go to train.
inline std::pair<std::vector<Sample>, std::vector<Sample>> split_dataset(
    std::vector<Sample> samples, double ratio, uint64_t seed) {
  if (ratio < 0.0 || ratio > 1.0)
    throw ConfigError("split ratio must lie in [0,1]");
  SplitMix64 rng(seed);
  const size_t n = samples.size();
  for (size_t i = 0; i + 1 < n; ++i) {
    const size_t j = i + size_t(rng.next() % uint64_t(n - i));
    std::swap(samples[i], samples[j]);
  }
  const size_t train_n = size_t(std::floor(double(n) * ratio));
  std::vector<Sample> train(samples.begin(), samples.begin() + train_n);
  std::vector<Sample> test(samples.begin() + train_n, samples.end());
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// augmentations
// ---------------------------------------------------------------------------

namespace detail {

inline TensorF map_pixels(const TensorF& img, float (*fn)(float, float),
                          float arg) {
  auto out = TensorF::zeros(img.shape());
  for (size_t i = 0; i < img.numel(); ++i)
    out.values()[i] = std::clamp(fn(img.values()[i], arg), 0.f, 1.f);
  return out;
}

inline TensorF box_blur3(const TensorF& img) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  auto out = TensorF::zeros(img.shape());
  auto clampi = [](int v, int hi) { return std::min(std::max(v, 0), hi); };
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        float acc = 0;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj)
            acc += img.values()[(size_t(ch) * h + clampi(i + di, h - 1)) * w +
                                clampi(j + dj, w - 1)];
        out.values()[(size_t(ch) * h + i) * w + j] = acc / 9.f;
      }
  return out;
}

inline TensorF grayscale(const TensorF& img) {
  const int h = img.dim(1), w = img.dim(2);
  auto out = TensorF::zeros(img.shape());
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const size_t base = size_t(i) * w + j;
      const float lum = 0.299f * img.values()[base] +
                        0.587f * img.values()[size_t(h) * w + base] +
                        0.114f * img.values()[2 * size_t(h) * w + base];
      for (int c = 0; c < 3; ++c)
        out.values()[size_t(c) * h * w + base] = lum;
    }
  return out;
}

inline TensorF mirror(const TensorF& img, bool horizontal) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  auto out = TensorF::zeros(img.shape());
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const int si = horizontal ? i : h - 1 - i;
        const int sj = horizontal ? w - 1 - j : j;
        out.values()[(size_t(ch) * h + i) * w + j] =
            img.values()[(size_t(ch) * h + si) * w + sj];
      }
  return out;
}

}  // namespace detail

// Photometric kinds carry labels through bitwise untouched; flips reflect
// the box centers analytically.
inline AugmentedSample augment(const Sample& s, AugmentKind kind,
                               const AugmentConfig& cfg = {}) {
  AugmentedSample out;
  out.kind = kind;
  out.sample.name = s.name;
  out.sample.labels = s.labels;
  switch (kind) {
    case AugmentKind::kOriginal:
      out.sample.image = s.image.detach();
      break;
    case AugmentKind::kBrightness:
      out.sample.image = detail::map_pixels(
          s.image, [](float v, float f) { return v * f; },
          cfg.brightness_factor);
      break;
    case AugmentKind::kContrast:
      out.sample.image = detail::map_pixels(
          s.image, [](float v, float f) { return (v - 0.5f) * f + 0.5f; },
          cfg.contrast_factor);
      break;
    case AugmentKind::kDenoise:
      out.sample.image = detail::box_blur3(s.image);
      break;
    case AugmentKind::kGrayscale:
      out.sample.image = detail::grayscale(s.image);
      break;
    case AugmentKind::kHFlip:
      out.sample.image = detail::mirror(s.image, true);
      for (auto& l : out.sample.labels) l.cx = 1.f - l.cx;
      break;
    case AugmentKind::kVFlip:
      out.sample.image = detail::mirror(s.image, false);
      for (auto& l : out.sample.labels) l.cy = 1.f - l.cy;
      break;
  }
  return out;
}

// Emits the original plus all six augmentations per sample: 7x growth.
inline std::vector<AugmentedSample> augment_dataset(
    const std::vector<Sample>& samples, const AugmentConfig& cfg = {}) {
  std::vector<AugmentedSample> out;
  out.reserve(samples.size() * 7);
  for (const auto& s : samples) {
    out.push_back(augment(s, AugmentKind::kOriginal, cfg));
    for (AugmentKind k : augment_kinds()) out.push_back(augment(s, k, cfg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// resize + letterbox
// ---------------------------------------------------------------------------

inline TensorF resize_bilinear_image(const TensorF& img, int oh, int ow) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  auto out = TensorF::zeros({c, oh, ow});
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) {
      const double sy = (i + 0.5) * double(h) / oh - 0.5;
      const double sx = (j + 0.5) * double(w) / ow - 0.5;
      const int y0 = int(std::floor(sy)), x0 = int(std::floor(sx));
      const double fy = sy - y0, fx = sx - x0;
      auto clampi = [](int v, int hi) { return std::min(std::max(v, 0), hi); };
      for (int ch = 0; ch < c; ++ch) {
        auto at = [&](int y, int x) {
          return double(
              img.values()[(size_t(ch) * h + clampi(y, h - 1)) * w +
                           clampi(x, w - 1)]);
        };
        out.values()[(size_t(ch) * oh + i) * ow + j] = float(
            (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
            fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1)));
      }
    }
  return out;
}

struct Letterboxed {
  TensorF image;  // [3,size,size]
  double scale = 1.0;
  int pad_x = 0, pad_y = 0;
};

// Aspect-preserving resize onto a gray square canvas, centered.
inline Letterboxed letterbox(const TensorF& img, int size = 640,
                             float pad_value = 114.f / 255.f) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw ShapeError("letterbox expects [3,H,W], got " +
                     shape_str(img.shape()));
  const int h = img.dim(1), w = img.dim(2);
  const double scale = std::min(double(size) / h, double(size) / w);
  const int nh = std::max(1, int(std::lround(h * scale)));
  const int nw = std::max(1, int(std::lround(w * scale)));
  auto resized = resize_bilinear_image(img, nh, nw);
  Letterboxed out;
  out.scale = scale;
  out.pad_y = (size - nh) / 2;
  out.pad_x = (size - nw) / 2;
  out.image = TensorF::filled({3, size, size}, pad_value);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < nh; ++i)
      for (int j = 0; j < nw; ++j)
        out.image.values()[(size_t(c) * size + i + out.pad_y) * size + j +
                           out.pad_x] =
            resized.values()[(size_t(c) * nh + i) * nw + j];
  return out;
}

}  // namespace sde
