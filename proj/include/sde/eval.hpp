#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sde/common.hpp"

namespace sde {

// Axis-aligned box, corner form. Metric code runs in double end to end.
struct BBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
};

struct GroundTruthBox {
  BBox box;
  int class_id = 0;
};

struct ScoredBox {
  BBox box;
  double score = 0;
  int class_id = 0;
};

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, fn = 0;
};

struct PRPoint {
  double recall = 0, precision = 0;
};

struct PRCurve {
  std::vector<PRPoint> points;  // recall non-decreasing
};

struct ClassAP {
  int class_id = 0;
  double ap = 0;
};

struct EvalReport {
  double precision = 0, recall = 0, f1 = 0;
  double map50 = 0, map50_95 = 0;
  std::vector<double> ap_per_threshold;  // 0.50 .. 0.95 step 0.05
  std::vector<ClassAP> per_class_ap50;
  bool degenerate_precision = false;  // no detections at the operating point
};

inline double iou(const BBox& a, const BBox& b) {
  if (a.x_min > a.x_max || a.y_min > a.y_max || b.x_min > b.x_max ||
      b.y_min > b.y_max)
    throw ConfigError("iou: box with min > max");
  const double ix =
      std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy =
      std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min);
  const double area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min);
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct MatchResult {
  std::vector<bool> is_tp;  // aligned with the input detection order
  int64_t fn = 0;
};

// Greedy one-to-one matching: walk detections by descending score, each takes
// the unmatched ground truth of highest IoU when that IoU clears the
// threshold, otherwise it is a false positive.
inline MatchResult match_detections(const std::vector<ScoredBox>& dets,
                                    const std::vector<BBox>& gts,
                                    double iou_thresh) {
  std::vector<size_t> order(dets.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return dets[a].score > dets[b].score;
  });
  MatchResult r;
  r.is_tp.assign(dets.size(), false);
  std::vector<bool> taken(gts.size(), false);
  for (size_t k : order) {
    double best = -1.0;
    int best_g = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(dets[k].box, gts[g]);
      if (v > best) {
        best = v;
        best_g = int(g);
      }
    }
    if (best_g >= 0 && best >= iou_thresh) {
      taken[best_g] = true;
      r.is_tp[k] = true;
    }
  }
  r.fn = int64_t(gts.size()) -
         int64_t(std::count(taken.begin(), taken.end(), true));
  return r;
}

struct PrecisionRecall {
  double precision = 0, recall = 0;
  bool degenerate = false;  // an empty denominator hit the 0 convention
};

inline PrecisionRecall precision_recall(const ConfusionCounts& c) {
  PrecisionRecall out;
  if (c.tp + c.fp > 0)
    out.precision = double(c.tp) / double(c.tp + c.fp);
  else
    out.degenerate = true;
  if (c.tp + c.fn > 0)
    out.recall = double(c.tp) / double(c.tp + c.fn);
  else
    out.degenerate = true;
  return out;
}

// Prefix sweep over score-ranked (score, tp) flags: point k is the cumulative
// (recall, precision) after the k highest-scored detections.
inline PRCurve pr_curve_from_flags(
    const std::vector<std::pair<double, bool>>& ranked, int64_t total_gts) {
  PRCurve curve;
  int64_t tp = 0;
  for (size_t k = 0; k < ranked.size(); ++k) {
    if (ranked[k].second) ++tp;
    PRPoint p;
    p.precision = double(tp) / double(k + 1);
    p.recall = total_gts > 0 ? double(tp) / double(total_gts) : 0.0;
    curve.points.push_back(p);
  }
  return curve;
}

inline PRCurve pr_curve(const std::vector<ScoredBox>& dets,
                        const std::vector<BBox>& gts, double iou_thresh) {
  auto m = match_detections(dets, gts, iou_thresh);
  std::vector<std::pair<double, bool>> ranked;
  ranked.reserve(dets.size());
  for (size_t i = 0; i < dets.size(); ++i)
    ranked.emplace_back(dets[i].score, m.is_tp[i]);
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  return pr_curve_from_flags(ranked, int64_t(gts.size()));
}

// All-point interpolation: replace precision by its right-to-left running
// maximum and integrate stepwise over recall.
inline double average_precision(const PRCurve& curve) {
  const auto& pts = curve.points;
  if (pts.empty()) return 0.0;
  std::vector<double> env(pts.size());
  double running = 0.0;
  for (size_t i = pts.size(); i-- > 0;) {
    running = std::max(running, pts[i].precision);
    env[i] = running;
  }
  double ap = 0.0, prev_recall = 0.0;
  for (size_t i = 0; i < pts.size(); ++i) {
    ap += (pts[i].recall - prev_recall) * env[i];
    prev_recall = pts[i].recall;
  }
  return ap;
}

inline double mean_ap(const std::vector<double>& per_class_aps) {
  if (per_class_aps.empty()) return 0.0;
  double acc = 0.0;
  for (double v : per_class_aps) acc += v;
  return acc / double(per_class_aps.size());
}

inline double f1_score(double precision, double recall) {
  const double denom = precision + recall;
  return denom > 0.0 ? 2.0 * precision * recall / denom : 0.0;
}

inline std::vector<double> map_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.50 + 0.05 * i);
  return t;
}

// One image's annotations and predictions.
struct ImageEval {
  std::string name;
  std::vector<ScoredBox> dets;
  std::vector<GroundTruthBox> gts;
};

struct EvalConfig {
  double conf_thresh = 0.25;  // operating point for the headline P/R/F1
  double pr_iou = 0.5;        // IoU behind the headline P/R/F1
};

namespace detail {

struct RankedFlag {
  double score;
  bool tp;
  // deterministic pooling order across images
  std::string image;
  size_t index;
};

inline bool ranked_before(const RankedFlag& a, const RankedFlag& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.image != b.image) return a.image < b.image;
  return a.index < b.index;
}

// Per-class AP at one IoU threshold, detections pooled across images after
// per-image matching. Classes never seen in the ground truth carry no AP.
inline std::vector<ClassAP> per_class_ap(const std::vector<ImageEval>& images,
                                         double iou_thresh) {
  std::set<int> classes;
  for (const auto& im : images)
    for (const auto& g : im.gts) classes.insert(g.class_id);

  std::vector<ClassAP> out;
  for (int cls : classes) {
    std::vector<RankedFlag> pool;
    int64_t total_gts = 0;
    for (const auto& im : images) {
      std::vector<ScoredBox> dets;
      std::vector<BBox> gts;
      for (const auto& d : im.dets)
        if (d.class_id == cls) dets.push_back(d);
      for (const auto& g : im.gts)
        if (g.class_id == cls) gts.push_back(g.box);
      total_gts += int64_t(gts.size());
      auto m = match_detections(dets, gts, iou_thresh);
      for (size_t i = 0; i < dets.size(); ++i)
        pool.push_back({dets[i].score, m.is_tp[i], im.name, i});
    }
    std::sort(pool.begin(), pool.end(), ranked_before);
    std::vector<std::pair<double, bool>> ranked;
    ranked.reserve(pool.size());
    for (const auto& r : pool) ranked.emplace_back(r.score, r.tp);
    ClassAP ap;
    ap.class_id = cls;
    ap.ap = total_gts > 0
                ? average_precision(pr_curve_from_flags(ranked, total_gts))
                : 0.0;
    out.push_back(ap);
  }
  return out;
}

inline ConfusionCounts operating_point_counts(
    const std::vector<ImageEval>& images, const EvalConfig& cfg) {
  ConfusionCounts c;
  for (const auto& im : images) {
    std::set<int> classes;
    for (const auto& g : im.gts) classes.insert(g.class_id);
    for (const auto& d : im.dets)
      if (d.score > cfg.conf_thresh) classes.insert(d.class_id);
    for (int cls : classes) {
      std::vector<ScoredBox> dets;
      std::vector<BBox> gts;
      for (const auto& d : im.dets)
        if (d.class_id == cls && d.score > cfg.conf_thresh) dets.push_back(d);
      for (const auto& g : im.gts)
        if (g.class_id == cls) gts.push_back(g.box);
      auto m = match_detections(dets, gts, cfg.pr_iou);
      for (bool tp : m.is_tp) (tp ? c.tp : c.fp)++;
      c.fn += m.fn;
    }
  }
  return c;
}

}  // namespace detail

inline EvalReport evaluate_samples(const std::vector<ImageEval>& images,
                                   const EvalConfig& cfg = {}) {
  EvalReport report;
  const auto counts = detail::operating_point_counts(images, cfg);
  const auto pr = precision_recall(counts);
  report.precision = pr.precision;
  report.recall = pr.recall;
  report.degenerate_precision = pr.degenerate;
  report.f1 = f1_score(pr.precision, pr.recall);

  for (double t : map_thresholds()) {
    auto per_class = detail::per_class_ap(images, t);
    std::vector<double> aps;
    aps.reserve(per_class.size());
    for (const auto& c : per_class) aps.push_back(c.ap);
    report.ap_per_threshold.push_back(mean_ap(aps));
    if (t == 0.5) report.per_class_ap50 = per_class;
  }
  report.map50 = report.ap_per_threshold.empty() ? 0.0
                                                 : report.ap_per_threshold[0];
  report.map50_95 = mean_ap(report.ap_per_threshold);
  return report;
}

inline std::string eval_report_json(const EvalReport& r) {
  std::ostringstream os;
  os.precision(12);
  os << "{\"precision\":" << r.precision << ",\"recall\":" << r.recall
     << ",\"f1\":" << r.f1 << ",\"map50\":" << r.map50
     << ",\"map50_95\":" << r.map50_95 << ",\"ap_per_threshold\":[";
  for (size_t i = 0; i < r.ap_per_threshold.size(); ++i)
    os << (i ? "," : "") << r.ap_per_threshold[i];
  os << "]}";
  return os.str();
}

// ---------------------------------------------------------------------------
// file-based evaluation
// ---------------------------------------------------------------------------

namespace detail {

inline BBox center_box_to_corners(double cx, double cy, double w, double h) {
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

inline std::vector<double> parse_numbers(const std::string& line,
                                         const std::string& file, int lineno) {
  std::istringstream is(line);
  std::vector<double> nums;
  double v;
  while (is >> v) nums.push_back(v);
  if (!is.eof())
    throw ParseError(file + ":" + std::to_string(lineno) +
                     ": non-numeric token in '" + line + "'");
  return nums;
}

}  // namespace detail

// `class cx cy w h`, normalized.
inline std::vector<GroundTruthBox> read_gt_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open ground truth file " + path);
  std::vector<GroundTruthBox> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto nums = detail::parse_numbers(line, path, lineno);
    if (nums.size() != 5)
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": expected 5 fields `class cx cy w h`, got " +
                       std::to_string(nums.size()));
    GroundTruthBox g;
    g.class_id = int(nums[0]);
    g.box = detail::center_box_to_corners(nums[1], nums[2], nums[3], nums[4]);
    out.push_back(g);
  }
  return out;
}

// `class score cx cy w h`, normalized.
inline std::vector<ScoredBox> read_pred_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open prediction file " + path);
  std::vector<ScoredBox> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto nums = detail::parse_numbers(line, path, lineno);
    if (nums.size() != 6)
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": expected 6 fields `class score cx cy w h`, got " +
                       std::to_string(nums.size()));
    ScoredBox d;
    d.class_id = int(nums[0]);
    d.score = nums[1];
    d.box = detail::center_box_to_corners(nums[2], nums[3], nums[4], nums[5]);
    out.push_back(d);
  }
  return out;
}

inline EvalReport evaluate_dataset(const std::string& pred_dir,
                                   const std::string& gt_dir,
                                   const EvalConfig& cfg = {}) {
  namespace fs = std::filesystem;
  auto stems = [](const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
    std::set<std::string> out;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".txt")
        out.insert(e.path().stem().string());
    return out;
  };
  const auto pred_stems = stems(pred_dir);
  const auto gt_stems = stems(gt_dir);
  for (const auto& s : gt_stems)
    if (!pred_stems.count(s))
      throw IoError("prediction file missing for " + s + ".txt (present in " +
                    gt_dir + ", absent in " + pred_dir + ")");
  for (const auto& s : pred_stems)
    if (!gt_stems.count(s))
      throw IoError("ground truth file missing for " + s +
                    ".txt (present in " + pred_dir + ", absent in " + gt_dir +
                    ")");

  std::vector<ImageEval> images;
  for (const auto& s : gt_stems) {
    ImageEval im;
    im.name = s;
    im.gts = read_gt_file((fs::path(gt_dir) / (s + ".txt")).string());
    im.dets = read_pred_file((fs::path(pred_dir) / (s + ".txt")).string());
    images.push_back(std::move(im));
  }
  return evaluate_samples(images, cfg);
}

}  // namespace sde
