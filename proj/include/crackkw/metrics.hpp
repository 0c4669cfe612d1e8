#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "crackkw/box.hpp"
#include "crackkw/tensor.hpp"

// Detection and segmentation scores for a single "crack" class.
//
// Ground truth is indexed by image: gts[i] holds the boxes of image i, and a
// Detection refers to its image through image_id.

namespace crackkw {

struct Detection {
  Box box;
  double score = 0.0;
  std::size_t image_id = 0;
};

using GroundTruth = std::vector<std::vector<Box>>;

/// Safe ratio: 0 when the denominator is 0.
inline double ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

/// Indices of `dets` by descending score; equal scores keep input order.
inline std::vector<std::size_t> score_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

struct MatchResult {
  std::vector<std::size_t> order;      ///< detection indices, best score first
  std::vector<bool> tp_ranked;         ///< tp_ranked[k] labels dets[order[k]]
  std::vector<bool> tp;                ///< per detection, input order
  std::vector<std::vector<bool>> gt_matched;
  std::size_t tp_count = 0, fp_count = 0, fn_count = 0;
};

/// Greedy single-use matching in score order. A detection takes the unmatched
/// gt on its image with the highest IoU (lowest index on ties) when that IoU
/// reaches the threshold.
inline MatchResult match_detections(const std::vector<Detection>& dets, const GroundTruth& gts, double iou_threshold) {
  MatchResult r;
  r.order = score_order(dets);
  r.tp.assign(dets.size(), false);
  r.gt_matched.resize(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) r.gt_matched[i].assign(gts[i].size(), false);
  for (std::size_t k : r.order) {
    const auto& d = dets[k];
    if (d.image_id >= gts.size()) throw std::out_of_range("detection refers to unknown image " + std::to_string(d.image_id));
    const auto& boxes = gts[d.image_id];
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < boxes.size(); ++j) {
      if (r.gt_matched[d.image_id][j]) continue;
      const double v = iou(d.box, boxes[j]);
      if (v > best) best = v, best_j = j;
    }
    const bool hit = best >= iou_threshold;
    if (hit) r.gt_matched[d.image_id][best_j] = true;
    r.tp[k] = hit;
    r.tp_ranked.push_back(hit);
    (hit ? r.tp_count : r.fp_count)++;
  }
  for (const auto& row : r.gt_matched) r.fn_count += static_cast<std::size_t>(std::count(row.begin(), row.end(), false));
  return r;
}

struct PrecisionRecall {
  double precision = 0.0, recall = 0.0;
};

inline PrecisionRecall precision_recall(std::size_t tp, std::size_t fp, std::size_t fn) {
  return {ratio(double(tp), double(tp + fp)), ratio(double(tp), double(tp + fn))};
}

struct MissFalseRates {
  double mdr = 0.0, fdr = 0.0;
};

/// MDR = FN/(TP+FN) = 1 - R and FDR = FP/(TP+FP) = 1 - P.
inline MissFalseRates mdr_fdr(std::size_t tp, std::size_t fp, std::size_t fn) {
  return {ratio(double(fn), double(tp + fn)), ratio(double(fp), double(tp + fp))};
}

/// Discrete PR curve, one point per ranked detection.
inline std::vector<std::array<double, 2>> pr_curve(const std::vector<bool>& tp_ranked, std::size_t total_gt) {
  std::vector<std::array<double, 2>> pts;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < tp_ranked.size(); ++k) {
    tp += tp_ranked[k];
    pts.push_back({ratio(double(tp), double(total_gt)), double(tp) / double(k + 1)});
  }
  return pts;
}

/// All-point interpolated AP: area under the monotone precision envelope.
/// Absent (nullopt) when there is no ground truth.
inline std::optional<double> average_precision(const std::vector<bool>& tp_ranked, std::size_t total_gt) {
  if (total_gt == 0) return std::nullopt;
  const auto pts = pr_curve(tp_ranked, total_gt);
  std::vector<double> env(pts.size());
  double run = 0.0;
  for (std::size_t k = pts.size(); k-- > 0;) env[k] = run = std::max(run, pts[k][1]);
  double ap = 0.0, prev_r = 0.0;
  for (std::size_t k = 0; k < pts.size(); ++k) {
    ap += (pts[k][0] - prev_r) * env[k];
    prev_r = pts[k][0];
  }
  return ap;
}

inline std::size_t count_gt(const GroundTruth& gts) {
  std::size_t n = 0;
  for (const auto& g : gts) n += g.size();
  return n;
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
inline std::array<double, 10> coco_thresholds() {
  std::array<double, 10> t{};
  for (int i = 0; i < 10; ++i) t[i] = 0.5 + 0.05 * i;
  return t;
}

/// Mean over the classes that are present.
inline double mean_ap(const std::vector<std::optional<double>>& per_class) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& ap : per_class)
    if (ap) sum += *ap, ++n;
  if (n == 0) throw std::invalid_argument("mean_ap: no class has ground truth");
  return sum / double(n);
}

/// Image-level counts laid out as [[TP, FN], [FP, TN]] (rows: true crack, true background).
struct ConfusionMatrix {
  std::array<std::array<std::size_t, 2>, 2> counts{};

  std::size_t total() const { return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1]; }
  std::array<std::array<double, 2>, 2> normalized() const {
    std::array<std::array<double, 2>, 2> n{};
    for (int r = 0; r < 2; ++r) {
      const double s = double(counts[r][0] + counts[r][1]);
      for (int c = 0; c < 2; ++c) n[r][c] = ratio(double(counts[r][c]), s);
    }
    return n;
  }
};

inline ConfusionMatrix confusion_matrix_images(const std::vector<bool>& predicted_crack, const std::vector<bool>& true_crack) {
  if (predicted_crack.size() != true_crack.size()) throw std::invalid_argument("confusion matrix: label count mismatch");
  ConfusionMatrix m;
  for (std::size_t i = 0; i < true_crack.size(); ++i) m.counts[true_crack[i] ? 0 : 1][predicted_crack[i] ? 0 : 1]++;
  return m;
}

struct OverlapCounts {
  std::size_t inter = 0, uni = 0, a = 0, b = 0;
  OverlapCounts& operator+=(const OverlapCounts& o) {
    inter += o.inter, uni += o.uni, a += o.a, b += o.b;
    return *this;
  }
  double iou() const { return uni == 0 ? 1.0 : double(inter) / double(uni); }
  double dice() const { return a + b == 0 ? 1.0 : 2.0 * double(inter) / double(a + b); }
};

/// Pixels count as foreground above 0.5.
inline OverlapCounts mask_overlap(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape())
    throw std::invalid_argument("mask shape mismatch: " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  OverlapCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] > 0.5, g = gt[i] > 0.5;
    c.inter += p && g;
    c.uni += p || g;
    c.a += p;
    c.b += g;
  }
  return c;
}

struct IouDice {
  double iou = 0.0, dice = 0.0;
};

/// Two empty masks score (1, 1).
inline IouDice pixel_iou_dice(const Tensor& pred, const Tensor& gt) {
  const auto c = mask_overlap(pred, gt);
  return {c.iou(), c.dice()};
}

// ---------------------------------------------------------------------------
// Reports.

struct EvalReport {
  double precision = 0.0, recall = 0.0;
  bool has_gt = false;  ///< false: AP is undefined and serialized as null
  double map50 = 0.0, map50_95 = 0.0;
  std::array<double, 10> ap_table{};  ///< AP at each threshold 0.50..0.95
  ConfusionMatrix confusion;
  bool has_masks = false;  ///< false: no masks were scored; pixel IoU/Dice serialize as null
  double pixel_iou = 1.0, dice = 1.0;
  double mdr = 0.0, fdr = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
};

struct EvalOptions {
  double conf_threshold = 0.25;  ///< for P/R, MDR/FDR and the image labels; AP uses every detection
  double iou_threshold = 0.5;
};

/// Boxes only; masks are folded in by `add_masks`.
inline EvalReport evaluate(const std::vector<Detection>& dets, const GroundTruth& gts, const EvalOptions& opt = {}) {
  EvalReport r;
  const std::size_t total = count_gt(gts);
  r.has_gt = total > 0;
  const auto thresholds = coco_thresholds();
  if (r.has_gt) {
    double sum = 0.0;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      const auto m = match_detections(dets, gts, thresholds[t]);
      r.ap_table[t] = mean_ap({average_precision(m.tp_ranked, total)});
      sum += r.ap_table[t];
    }
    r.map50 = r.ap_table[0];
    r.map50_95 = sum / double(thresholds.size());
  }
  std::vector<Detection> kept;
  for (const auto& d : dets)
    if (d.score >= opt.conf_threshold) kept.push_back(d);
  const auto m = match_detections(kept, gts, opt.iou_threshold);
  r.tp = m.tp_count, r.fp = m.fp_count, r.fn = m.fn_count;
  const auto pr = precision_recall(r.tp, r.fp, r.fn);
  r.precision = pr.precision, r.recall = pr.recall;
  const auto rates = mdr_fdr(r.tp, r.fp, r.fn);
  r.mdr = rates.mdr, r.fdr = rates.fdr;
  std::vector<bool> pred_label(gts.size(), false), true_label(gts.size(), false);
  for (const auto& d : kept) pred_label[d.image_id] = true;
  for (std::size_t i = 0; i < gts.size(); ++i) true_label[i] = !gts[i].empty();
  r.confusion = confusion_matrix_images(pred_label, true_label);
  return r;
}

/// Pooled pixel IoU/Dice over a set of masks.
inline void add_masks(EvalReport& r, const std::vector<Tensor>& pred, const std::vector<Tensor>& gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("add_masks: mask count mismatch");
  OverlapCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) c += mask_overlap(pred[i], gt[i]);
  r.pixel_iou = c.iou(), r.dice = c.dice();
  r.has_masks = true;
}

/// Keys come out sorted, so equal reports serialize to equal bytes.
inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["map50"] = r.has_gt ? nlohmann::json(r.map50) : nlohmann::json(nullptr);
  j["map50_95"] = r.has_gt ? nlohmann::json(r.map50_95) : nlohmann::json(nullptr);
  nlohmann::json table = nlohmann::json::array();
  const auto th = coco_thresholds();
  for (std::size_t t = 0; t < th.size(); ++t) {
    std::ostringstream key;
    key.precision(2);
    key << std::fixed << th[t];
    table.push_back({{"iou", key.str()}, {"ap", r.has_gt ? nlohmann::json(r.ap_table[t]) : nlohmann::json(nullptr)}});
  }
  j["ap_table"] = table;
  const auto& c = r.confusion.counts;
  j["confusion_matrix"] = {{c[0][0], c[0][1]}, {c[1][0], c[1][1]}};
  const auto n = r.confusion.normalized();
  j["confusion_matrix_normalized"] = {{n[0][0], n[0][1]}, {n[1][0], n[1][1]}};
  j["pixel_iou"] = r.has_masks ? nlohmann::json(r.pixel_iou) : nlohmann::json(nullptr);
  j["dice"] = r.has_masks ? nlohmann::json(r.dice) : nlohmann::json(nullptr);
  j["mdr"] = r.mdr;
  j["fdr"] = r.fdr;
  j["tp"] = r.tp;
  j["fp"] = r.fp;
  j["fn"] = r.fn;
  j["conventions"] = "zero denominators give 0; empty masks give IoU = Dice = 1; AP is null without ground truth; pixel scores are null without masks";
  return j;
}

inline std::string csv_header() { return "precision,recall,map50,map50_95,pixel_iou,dice,mdr,fdr,tp,fp,fn"; }

inline std::string fmt_num(double v) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << v;
  return os.str();
}

inline std::string csv_row(const EvalReport& r) {
  std::ostringstream os;
  os << fmt_num(r.precision) << ',' << fmt_num(r.recall) << ',' << (r.has_gt ? fmt_num(r.map50) : "") << ','
     << (r.has_gt ? fmt_num(r.map50_95) : "") << ',' << (r.has_masks ? fmt_num(r.pixel_iou) : "") << ','
     << (r.has_masks ? fmt_num(r.dice) : "") << ','
     << fmt_num(r.mdr) << ',' << fmt_num(r.fdr) << ',' << r.tp << ',' << r.fp << ',' << r.fn;
  return os.str();
}

}  // namespace crackkw
