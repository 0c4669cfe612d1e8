#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "crackkw/box.hpp"
#include "crackkw/ops.hpp"

// Box-regression losses and the pixel-wise weighted cross-entropy.
//
// Every box loss is a template over the scalar type so the same code yields
// values (double) and exact corner gradients (Dual<4>).
//
// Two readings of "L_IoU" appear below: the Focaler maps take the raw IoU
// value, while the additive term of PIoU is the loss 1 - IoU, so that
// coincident boxes cost nothing.

namespace crackkw {

template <class T>
struct EdgeDistances {
  T dw1{}, dw2{}, dh1{}, dh2{};
};

struct FocalerParams {
  double d = 0.0;
  double u = 0.95;
};

struct PIoUv2Params {
  double lambda = 1.3;
};

/// Piecewise-linear remap of v over [d, u].
template <class T>
T focaler_map(const T& v, const FocalerParams& p) {
  if (value_of(v) < p.d) return T(0.0);
  if (value_of(v) > p.u) return T(1.0);
  return (v - p.d) / (p.u - p.d);
}

/// Focaler map with d eliminated: v / u up to u, then 1. At v == u the linear
/// branch is taken, which fixes the subgradient to 1/u.
template <class T>
T focaler_map_simplified(const T& v, double u) {
  if (value_of(v) <= u) return v / u;
  return T(1.0);
}

template <class T>
EdgeDistances<T> edge_distances(const BasicBox<T>& pred, const BasicBox<T>& gt) {
  using std::abs;
  return {abs(pred.x1 - gt.x1), abs(pred.x2 - gt.x2), abs(pred.y1 - gt.y1), abs(pred.y2 - gt.y2)};
}

/// Mean edge distance normalized by the ground-truth width and height.
template <class T>
T penalty_factor(const BasicBox<T>& pred, const BasicBox<T>& gt) {
  const auto e = edge_distances(pred, gt);
  const T w = gt.width(), h = gt.height();
  return 0.25 * (e.dw1 / w + e.dw2 / w + e.dh1 / h + e.dh2 / h);
}

template <class T>
T piou_loss(const BasicBox<T>& pred, const BasicBox<T>& gt) {
  using std::exp;
  const T p = penalty_factor(pred, gt);
  return (1.0 - iou(pred, gt)) + 1.0 - exp(-(p * p));
}

/// Anchor quality e^{-p}.
template <class T>
T quality(const T& p) {
  using std::exp;
  return exp(-p);
}

/// m(x) = 3x e^{-x^2}.
template <class T>
T nonmonotonic_attention(const T& x) {
  using std::exp;
  return 3.0 * x * exp(-(x * x));
}

/// Weight applied to the PIoU-style terms. `strict` keeps the literal leading
/// factor 3 in front of m, giving 9 lambda q e^{-(lambda q)^2} in total.
template <class T>
T quality_weight(const T& p, double lambda, bool strict) {
  const T w = nonmonotonic_attention(lambda * quality(p));
  return strict ? 3.0 * w : w;
}

template <class T>
T piouv2_loss(const BasicBox<T>& pred, const BasicBox<T>& gt, const PIoUv2Params& prm, bool strict = true) {
  return quality_weight(penalty_factor(pred, gt), prm.lambda, strict) * piou_loss(pred, gt);
}

template <class T>
T fp_iou_loss(const BasicBox<T>& pred, const BasicBox<T>& gt, double u, double lambda, bool strict = true) {
  using std::exp;
  const T p = penalty_factor(pred, gt);
  const T inner = (1.0 - focaler_map_simplified(iou(pred, gt), u)) + 1.0 - exp(-(p * p));
  return quality_weight(p, lambda, strict) * inner;
}

/// Complete-IoU loss: 1 - IoU + centre distance^2 / enclosing diagonal^2 + alpha v.
/// alpha is differentiated with everything else.
template <class T>
T ciou_loss(const BasicBox<T>& pred, const BasicBox<T>& gt) {
  using std::atan;
  const T i = iou(pred, gt);
  const T dx = (pred.x1 + pred.x2 - gt.x1 - gt.x2) * 0.5;
  const T dy = (pred.y1 + pred.y2 - gt.y1 - gt.y2) * 0.5;
  const T cw = max_of(pred.x2, gt.x2) - min_of(pred.x1, gt.x1);
  const T ch = max_of(pred.y2, gt.y2) - min_of(pred.y1, gt.y1);
  const T rho = (dx * dx + dy * dy) / (cw * cw + ch * ch);
  const T dv = atan(gt.width() / gt.height()) - atan(pred.width() / pred.height());
  const T v = (4.0 / (std::numbers::pi * std::numbers::pi)) * dv * dv;
  const T denom = v + (1.0 - i);
  const T alpha = value_of(denom) > 0.0 ? v / denom : T(0.0);
  return (1.0 - i) + rho + alpha * v;
}

// ---------------------------------------------------------------------------
// Loss registry.

enum class LossKind { iou, ciou, focaler, piou, piouv2, fpiou };

inline constexpr std::array<std::pair<std::string_view, LossKind>, 6> kLossNames{{{"iou", LossKind::iou},
                                                                                   {"ciou", LossKind::ciou},
                                                                                   {"focaler", LossKind::focaler},
                                                                                   {"piou", LossKind::piou},
                                                                                   {"piouv2", LossKind::piouv2},
                                                                                   {"fpiou", LossKind::fpiou}}};

inline LossKind parse_loss_kind(std::string_view name) {
  for (const auto& [n, k] : kLossNames) {
    if (n == name) return k;
  }
  throw std::invalid_argument("unknown loss kind '" + std::string(name) + "'");
}

inline std::string_view loss_name(LossKind k) {
  for (const auto& [n, kind] : kLossNames) {
    if (kind == k) return n;
  }
  return "?";
}

struct LossConfig {
  LossKind kind = LossKind::fpiou;
  double d = 0.0;  ///< Focaler lower bound (only used by LossKind::focaler)
  double u = 0.95;
  double lambda = 1.3;
  bool strict_eq24 = true;
};

template <class T>
T box_loss(const BasicBox<T>& pred, const BasicBox<T>& gt, const LossConfig& cfg) {
  switch (cfg.kind) {
    case LossKind::iou:
      return 1.0 - iou(pred, gt);
    case LossKind::ciou:
      return ciou_loss(pred, gt);
    case LossKind::focaler:
      return 1.0 - focaler_map(iou(pred, gt), FocalerParams{cfg.d, cfg.u});
    case LossKind::piou:
      return piou_loss(pred, gt);
    case LossKind::piouv2:
      return piouv2_loss(pred, gt, PIoUv2Params{cfg.lambda}, cfg.strict_eq24);
    case LossKind::fpiou:
      return fp_iou_loss(pred, gt, cfg.u, cfg.lambda, cfg.strict_eq24);
  }
  return T(0.0);
}

/// True when pred lies within `margin` of a kink of the box losses: coinciding
/// edges (|.| and min/max), touching boxes, or IoU at the Focaler breakpoint.
inline bool near_breakpoint(const Box& pred, const Box& gt, double u, double margin) {
  const double xs[] = {pred.x1 - gt.x1, pred.x2 - gt.x2, pred.y1 - gt.y1, pred.y2 - gt.y2,
                       pred.x1 - gt.x2, pred.x2 - gt.x1, pred.y1 - gt.y2, pred.y2 - gt.y1};
  for (double d : xs) {
    if (std::abs(d) < margin) return true;
  }
  return std::abs(iou(pred, gt) - u) < margin;
}

struct LossAndGrad {
  double value = 0.0;
  std::array<double, 4> grad{};  ///< d loss / d (x1, y1, x2, y2)
};

inline LossAndGrad box_loss_with_grad(const Box& pred, const Box& gt, const LossConfig& cfg) {
  using D = Dual<4>;
  const BasicBox<D> p{D::variable(pred.x1, 0), D::variable(pred.y1, 1), D::variable(pred.x2, 2),
                      D::variable(pred.y2, 3)};
  const D l = box_loss(p, lift<D>(gt), cfg);
  return {l.v, l.d};
}

/// Mean box loss over rows of a P x 4 corner tensor against fixed targets.
inline Var box_regression_loss(Var corners, const std::vector<Box>& targets, const LossConfig& cfg) {
  const Shape& s = corners.shape();
  if (s.size() != 2 || s[1] != 4 || s[0] != targets.size()) {
    throw ShapeError("box_regression_loss: corners " + shape_str(s) + " for " + std::to_string(targets.size()) +
                     " targets");
  }
  const std::size_t P = s[0];
  const Tensor& t = corners.value();
  std::vector<double> grads(P * 4);
  double total = 0.0;
  for (std::size_t i = 0; i < P; ++i) {
    const Box pred{t[i * 4], t[i * 4 + 1], t[i * 4 + 2], t[i * 4 + 3]};
    const auto lg = box_loss_with_grad(pred, targets[i], cfg);
    total += lg.value;
    for (std::size_t k = 0; k < 4; ++k) grads[i * 4 + k] = lg.grad[k] / static_cast<double>(P);
  }
  return corners.graph->record("box_loss", Tensor::scalar(total / static_cast<double>(P)), {corners},
                               [corners, grads = std::move(grads)](Graph& g, const Tensor& go) {
                                 double* gc = g.grad_data(corners);
                                 if (!gc) return;
                                 for (std::size_t i = 0; i < grads.size(); ++i) gc[i] += go[0] * grads[i];
                               });
}

// ---------------------------------------------------------------------------
// Weighted cross-entropy over two classes (background, crack).

struct WceConfig {
  std::array<double, 2> weights{1.0, 1.0};
  double normalizer = 8.0;  ///< N, the mini-batch size
};

/// -(1/N) * sum over samples and pixels of w_t * log softmax_t(logits), t the target class.
inline Var weighted_cross_entropy(Var logits, const Tensor& target, const WceConfig& cfg) {
  const Shape& s = logits.shape();
  if (s.size() != 4 || s[1] != 2 || target.shape() != Shape{s[0], s[2], s[3]}) {
    throw ShapeError("weighted_cross_entropy: logits " + shape_str(s) + " incompatible with target " +
                     shape_str(target.shape()));
  }
  if (cfg.weights[0] <= 0.0 || cfg.weights[1] <= 0.0 || cfg.normalizer <= 0.0) {
    throw std::invalid_argument("weighted_cross_entropy: weights and normalizer must be positive");
  }
  const std::size_t N = s[0], HW = s[2] * s[3];
  const Tensor& l = logits.value();
  std::vector<double> p1(N * HW);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t q = 0; q < HW; ++q) {
      const double t = target[n * HW + q];
      if (t != 0.0 && t != 1.0) {
        throw std::invalid_argument("weighted_cross_entropy: target class must be 0 or 1");
      }
      const double a = l[(n * 2) * HW + q], b = l[(n * 2 + 1) * HW + q];
      const double m = std::max(a, b);
      const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
      p1[n * HW + q] = std::exp(b - lse);
      const int cls = t == 1.0 ? 1 : 0;
      total -= cfg.weights[cls] * ((cls == 1 ? b : a) - lse);
    }
  }
  const double inv_n = 1.0 / cfg.normalizer;
  return logits.graph->record(
      "weighted_cross_entropy", Tensor::scalar(total * inv_n), {logits},
      [logits, target, cfg, p1 = std::move(p1), N, HW, inv_n](Graph& g, const Tensor& go) {
        double* gl = g.grad_data(logits);
        if (!gl) return;
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t q = 0; q < HW; ++q) {
            const int cls = target[n * HW + q] == 1.0 ? 1 : 0;
            const double w = cfg.weights[cls] * inv_n * go[0];
            const double prob1 = p1[n * HW + q];
            gl[(n * 2) * HW + q] += w * ((1.0 - prob1) - (cls == 0 ? 1.0 : 0.0));
            gl[(n * 2 + 1) * HW + q] += w * (prob1 - (cls == 1 ? 1.0 : 0.0));
          }
        }
      });
}

}  // namespace crackkw
