#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "crackkw/autodiff.hpp"
#include "crackkw/kernel_warehouse.hpp"
#include "crackkw/metrics.hpp"
#include "crackkw/ops.hpp"
#include "crackkw/random.hpp"
#include "crackkw/triple_attention.hpp"

// A small single-scale detector/segmenter for 64 x 64 grayscale crack images.
//
//   stem     conv 4x4/2             64 -> 32
//   (every backbone and neck conv is followed by batch norm and ReLU)
//   stage B  conv 4x4/2, conv 3x3   32 -> 16   (KWConv when enabled)
//   stage C  conv 4x4/2, conv 3x3   16 -> 8    (KWConv when enabled)
//   neck     1x1(C), upsample x2, + 1x1(B), optional triple attention
//   head     1x1 -> 2 objectness logits, 4 box distances, 2 coarse mask logits;
//            the mask logits are upsampled x4, joined with the image and
//            refined by a 3x3 conv to full resolution.
//
// Every downsampling conv is 4x4 / stride 2 / pad 1 so extents divide exactly.

namespace crackkw {

struct ModelConfig {
  bool kwconv = true;
  bool ta = true;
  std::size_t stem_ch = 8, stage_b_ch = 16, stage_c_ch = 32, neck_ch = 16;
  std::size_t ta_reduction = 4;
  double kw_budget = 2.0;
  int tau_epochs = 3;
  std::size_t image_size = 64;
  double box_base = 2.0;  ///< distance at raw 0, in strides
  double obj_prior_logit = -4.0;
  double mask_prior_logit = -2.0;

  std::size_t stride() const { return 4; }
  std::size_t grid() const { return image_size / stride(); }
};

namespace detail {

inline Tensor he_normal(Rng& rng, Shape s) {
  const double fan_in = double(s[1] * s[2] * s[3]);
  return rng.normal_tensor(std::move(s), std::sqrt(2.0 / fan_in));
}

}  // namespace detail

struct ConvLayer {
  Parameter weight, bias;
  std::size_t stride = 1, padding = 0;

  static ConvLayer make(Rng& rng, std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad) {
    ConvLayer l;
    l.weight = Parameter(detail::he_normal(rng, Shape{out, in, k, k}));
    l.bias = Parameter(Tensor(Shape{out}, 0.0));
    l.stride = stride, l.padding = pad;
    return l;
  }
  Var operator()(Graph& g, Var x) {
    return add_channel_bias(conv2d(x, g.param(weight), stride, padding), g.param(bias));
  }
};

/// Batch norm parameters and running statistics for one layer.
struct NormLayer {
  Parameter gamma, beta;
  NormStats stats;

  static NormLayer make(std::size_t channels) {
    NormLayer l;
    l.gamma = Parameter(Tensor(Shape{channels}, 1.0));
    l.beta = Parameter(Tensor(Shape{channels}, 0.0));
    l.stats = NormStats(channels);
    return l;
  }
  Var operator()(Graph& g, Var x, bool training) {
    return batch_norm(x, g.param(gamma), g.param(beta), stats, training);
  }
};

/// conv (no bias) -> batch norm -> ReLU.
struct ConvBnRelu {
  Parameter weight;
  NormLayer norm;
  std::size_t stride = 1, padding = 0;

  static ConvBnRelu make(Rng& rng, std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad) {
    ConvBnRelu l;
    l.weight = Parameter(detail::he_normal(rng, Shape{out, in, k, k}));
    l.norm = NormLayer::make(out);
    l.stride = stride, l.padding = pad;
    return l;
  }
  Var operator()(Graph& g, Var x, bool training) {
    return relu(norm(g, conv2d(x, g.param(weight), stride, padding), training));
  }
  std::vector<Parameter*> parameters() { return {&weight, &norm.gamma, &norm.beta}; }
};

/// The two convolutions of one backbone stage, static or drawn from a
/// warehouse, each followed by batch norm and ReLU.
class Stage {
 public:
  Stage(const std::string& id, std::size_t in, std::size_t out, bool kw, double budget, Rng& rng) : kw_(kw) {
    const KernelShape down{out, in, 4, 4}, same{out, out, 3, 3};
    if (kw_) {
      StageConfig cfg;
      cfg.stage_id = id;
      cfg.layers = {down, same};
      cfg.budget_b = budget;
      wh_ = std::make_unique<Warehouse>(cfg, rng);
      wh_->set_geometry(0, 2, 1);
      wh_->set_geometry(1, 1, 1);
      norm_[0] = NormLayer::make(out);
      norm_[1] = NormLayer::make(out);
    } else {
      conv_[0] = ConvBnRelu::make(rng, in, out, 4, 2, 1);
      conv_[1] = ConvBnRelu::make(rng, out, out, 3, 1, 1);
    }
  }

  Var operator()(Graph& g, Var x, const NafConfig& naf_cfg, int epoch, bool training) {
    for (std::size_t l = 0; l < 2; ++l)
      x = kw_ ? relu(norm_[l](g, kwconv_forward(g, x, l, *wh_, naf_cfg, epoch), training)) : conv_[l](g, x, training);
    return x;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    if (kw_) {
      ps = wh_->parameters();
      for (auto& n : norm_) ps.insert(ps.end(), {&n.gamma, &n.beta});
    } else {
      for (auto& c : conv_)
        for (auto* p : c.parameters()) ps.push_back(p);
    }
    return ps;
  }

  std::vector<NormStats*> norm_stats() {
    if (kw_) return {&norm_[0].stats, &norm_[1].stats};
    return {&conv_[0].norm.stats, &conv_[1].norm.stats};
  }

  bool is_kw() const { return kw_; }
  Warehouse* warehouse() { return wh_.get(); }

 private:
  bool kw_;
  std::unique_ptr<Warehouse> wh_;
  ConvBnRelu conv_[2];
  NormLayer norm_[2];
};

struct DetectorOutput {
  Var obj;   ///< N x 2 x G x G
  Var reg;   ///< N x 4 x G x G raw distances (left, top, right, bottom)
  Var mask;  ///< N x 2 x S x S
};

struct Cell {
  std::size_t n = 0, y = 0, x = 0;
};

/// Soft bound on a raw distance: 6 tanh(raw / 6). Close to the identity near
/// zero; unlike a hard clamp it never stops passing gradient, so a box thrown
/// far out by one bad step can still be pulled back.
inline double bounded_raw(double raw) { return 6.0 * std::tanh(raw / 6.0); }

/// Decodes raw distances at the listed cells into corner boxes (P x 4).
/// Distance = exp(bounded_raw(raw)) * base * stride.

inline Var decode_boxes(Var reg, const std::vector<Cell>& cells, double stride, double base) {
  const Shape& s = reg.shape();
  if (s.size() != 4 || s[1] != 4 || cells.empty()) {
    throw ShapeError("decode_boxes: need N x 4 x H x W distances and at least one cell, got " + shape_str(s));
  }
  const std::size_t H = s[2], W = s[3], P = cells.size();
  const Tensor& t = reg.value();
  Tensor out(Shape{P, 4});
  std::vector<double> dcorner(P * 4);  // d corner / d raw
  std::vector<std::size_t> src(P * 4);
  static constexpr double sign[4] = {-1.0, -1.0, 1.0, 1.0};
  for (std::size_t p = 0; p < P; ++p) {
    const auto& c = cells[p];
    if (c.n >= s[0] || c.y >= H || c.x >= W) throw std::out_of_range("decode_boxes: cell outside the grid");
    const double centre[4] = {(c.x + 0.5) * stride, (c.y + 0.5) * stride, (c.x + 0.5) * stride, (c.y + 0.5) * stride};
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t i = ((c.n * 4 + k) * H + c.y) * W + c.x;
      const double raw = t[i];
      const double th = std::tanh(raw / 6.0);
      const double d = std::exp(6.0 * th) * base * stride;
      out[p * 4 + k] = centre[k] + sign[k] * d;
      dcorner[p * 4 + k] = sign[k] * d * (1.0 - th * th);
      src[p * 4 + k] = i;
    }
  }
  return reg.graph->record("decode_boxes", std::move(out), {reg}, [=](Graph& g, const Tensor& go) {
    double* gr = g.grad_data(reg);
    if (!gr) return;
    for (std::size_t i = 0; i < src.size(); ++i) gr[src[i]] += go[i] * dcorner[i];
  });
}

class TinyDetector {
 public:
  TinyDetector(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.image_size % 8 != 0 || cfg.image_size < 16) throw std::invalid_argument("image size must be a multiple of 8, at least 16");
    Rng rng(seed);
    stem_ = ConvBnRelu::make(rng, 1, cfg.stem_ch, 4, 2, 1);
    stage_b_ = std::make_unique<Stage>("stage_b", cfg.stem_ch, cfg.stage_b_ch, cfg.kwconv, cfg.kw_budget, rng);
    stage_c_ = std::make_unique<Stage>("stage_c", cfg.stage_b_ch, cfg.stage_c_ch, cfg.kwconv, cfg.kw_budget, rng);
    lat_c_ = ConvBnRelu::make(rng, cfg.stage_c_ch, cfg.neck_ch, 1, 1, 0);
    lat_b_ = ConvBnRelu::make(rng, cfg.stage_b_ch, cfg.neck_ch, 1, 1, 0);
    if (cfg.ta) ta_ = TripleAttentionParams::make(cfg.neck_ch, cfg.ta_reduction, rng);
    head_ = ConvLayer::make(rng, cfg.neck_ch, 8, 1, 1, 0);
    head_.weight.value = rng.normal_tensor(Shape{8, cfg.neck_ch, 1, 1}, 0.01);
    head_.bias.value[1] = cfg.obj_prior_logit;
    head_.bias.value[7] = cfg.mask_prior_logit;
    refine_ = ConvLayer::make(rng, 3, 2, 3, 1, 1);
    naf_.tau_epochs = cfg.tau_epochs;
    naf_.budget_b = cfg.kw_budget;
  }
  TinyDetector(const TinyDetector&) = delete;
  TinyDetector& operator=(const TinyDetector&) = delete;

  const ModelConfig& config() const { return cfg_; }

  /// images: N x 1 x S x S. Training mode normalizes with batch statistics
  /// and updates the running ones; eval mode reads them.
  DetectorOutput forward(Graph& g, Var images, int epoch, bool training) {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != 1 || s[2] != cfg_.image_size || s[3] != cfg_.image_size) {
      throw ShapeError("detector expects N x 1 x " + std::to_string(cfg_.image_size) + " x " +
                       std::to_string(cfg_.image_size) + " images, got " + shape_str(s));
    }
    Var x = stem_(g, images, training);
    Var b = (*stage_b_)(g, x, naf_, epoch, training);
    Var c = (*stage_c_)(g, b, naf_, epoch, training);
    Var f = add(upsample_nearest(lat_c_(g, c, training), 2), lat_b_(g, b, training));
    if (cfg_.ta) f = triple_attention(g, f, *ta_);
    Var h = head_(g, f);
    DetectorOutput out;
    out.obj = slice(h, 1, 0, 2);
    out.reg = slice(h, 1, 2, 4);
    Var coarse = upsample_nearest(slice(h, 1, 6, 2), cfg_.stride());
    out.mask = refine_(g, concat({coarse, images}, 1));
    return out;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    for (auto* l : {&stem_, &lat_c_, &lat_b_})
      for (auto* p : l->parameters()) ps.push_back(p);
    for (auto* st : {stage_b_.get(), stage_c_.get()})
      for (auto* p : st->parameters()) ps.push_back(p);
    for (auto* l : {&head_, &refine_}) {
      ps.push_back(&l->weight);
      ps.push_back(&l->bias);
    }
    if (ta_)
      for (auto* p : ta_->parameters()) ps.push_back(p);
    return ps;
  }

  std::vector<NormStats*> norm_stats() {
    std::vector<NormStats*> out{&stem_.norm.stats, &lat_c_.norm.stats, &lat_b_.norm.stats};
    for (auto* st : {stage_b_.get(), stage_c_.get()})
      for (auto* n : st->norm_stats()) out.push_back(n);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

 private:
  ModelConfig cfg_;
  NafConfig naf_;
  ConvBnRelu stem_, lat_c_, lat_b_;
  ConvLayer head_, refine_;
  std::unique_ptr<Stage> stage_b_, stage_c_;
  std::optional<TripleAttentionParams> ta_;
};

// ---------------------------------------------------------------------------
// Targets and inference.

/// The cell containing each gt centre is positive; when two centres share a
/// cell the first box (in mask order) keeps it.
struct HeadTargets {
  Tensor objectness;  ///< N x G x G, 0 / 1
  std::vector<Cell> cells;
  std::vector<Box> boxes;
};

inline HeadTargets assign_targets(const std::vector<std::vector<Box>>& gts, std::size_t grid, double stride) {
  HeadTargets t;
  t.objectness = Tensor(Shape{gts.size(), grid, grid}, 0.0);
  for (std::size_t n = 0; n < gts.size(); ++n) {
    for (const auto& b : gts[n]) {
      const auto gx = std::min<std::size_t>(grid - 1, std::size_t(std::max(0.0, 0.5 * (b.x1 + b.x2) / stride)));
      const auto gy = std::min<std::size_t>(grid - 1, std::size_t(std::max(0.0, 0.5 * (b.y1 + b.y2) / stride)));
      double& o = t.objectness[(n * grid + gy) * grid + gx];
      if (o == 1.0) continue;
      o = 1.0;
      t.cells.push_back({n, gy, gx});
      t.boxes.push_back(b);
    }
  }
  return t;
}

/// Greedy NMS: keeps boxes in score order, dropping any with IoU > threshold
/// against an already kept box.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold, std::size_t max_keep) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    if (kept.size() >= max_keep) break;
    bool drop = false;
    for (const auto& k : kept)
      if (iou(d.box, k.box) > iou_threshold) {
        drop = true;
        break;
      }
    if (!drop) kept.push_back(d);
  }
  return kept;
}

struct InferenceConfig {
  double min_score = 0.01;
  double nms_iou = 0.5;
  std::size_t max_dets = 100;
};

struct Predictions {
  std::vector<Detection> detections;
  std::vector<Tensor> masks;  ///< S x S, 0 / 1
};

/// Batched inference; image_id of detection = first_id + batch position.
inline void decode_predictions(const DetectorOutput& out, const ModelConfig& cfg, const InferenceConfig& icfg,
                               std::size_t first_id, Predictions& pred) {
  const Tensor& obj = out.obj.value();
  const Tensor& reg = out.reg.value();
  const Tensor& mask = out.mask.value();
  const std::size_t N = obj.dim(0), G = obj.dim(2), S = mask.dim(2);
  const double stride = double(cfg.stride());
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<Detection> cand;
    for (std::size_t y = 0; y < G; ++y)
      for (std::size_t x = 0; x < G; ++x) {
        const double p1 = detail::stable_sigmoid(obj.at(n, 1, y, x) - obj.at(n, 0, y, x));
        if (p1 < icfg.min_score) continue;
        double d[4];
        for (std::size_t k = 0; k < 4; ++k) d[k] = std::exp(bounded_raw(reg.at(n, k, y, x))) * cfg.box_base * stride;
        const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
        cand.push_back({{cx - d[0], cy - d[1], cx + d[2], cy + d[3]}, p1, first_id + n});
      }
    for (auto& d : nms(std::move(cand), icfg.nms_iou, icfg.max_dets)) pred.detections.push_back(d);
    Tensor m(Shape{S, S}, 0.0);
    for (std::size_t q = 0; q < S * S; ++q) m[q] = mask[(n * 2 + 1) * S * S + q] > mask[(n * 2) * S * S + q] ? 1.0 : 0.0;
    pred.masks.push_back(std::move(m));
  }
}

}  // namespace crackkw
