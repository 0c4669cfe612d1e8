#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "crackkw/iou_losses.hpp"
#include "crackkw/optim.hpp"
#include "crackkw/random.hpp"

// Anchor regression races: each anchor's four corners are free parameters
// pushed toward a fixed target by SGD on one box loss.

namespace crackkw {

struct BoxPair {
  Box anchor, target;
};

struct RaceConfig {
  std::vector<LossKind> kinds{LossKind::iou, LossKind::ciou, LossKind::focaler,
                              LossKind::piou, LossKind::piouv2, LossKind::fpiou};
  std::size_t n_pairs = 256;
  std::size_t steps = 1000;
  std::uint64_t seed = 42;
  double space = 64.0;         ///< side of the square coordinate space
  /// Parameters are pixel coordinates divided by this. At lr0 = 0.01 and
  /// momentum 0.937, 5 px units move 8 to 32 px boxes at a workable pace.
  double coord_scale = 5.0;
  double target_iou = 0.9;
  double min_extent = 1e-3;    ///< in parameter units
  SgdConfig sgd;
  LossConfig loss;             ///< shape parameters; `kind` is overridden per lane
};

/// The seeded suite: targets with sides in [8, 32] inside the space, anchors
/// shifted and rescaled copies with 0 < IoU < 0.9.
inline std::vector<BoxPair> make_race_pairs(std::size_t n, std::uint64_t seed, double space = 64.0) {
  Rng rng(seed);
  std::vector<BoxPair> pairs;
  pairs.reserve(n);
  while (pairs.size() < n) {
    const double w = rng.uniform(8, 32), h = rng.uniform(8, 32);
    const double x = rng.uniform(0, space - w), y = rng.uniform(0, space - h);
    const Box t{x, y, x + w, y + h};
    const double cx = x + w / 2 + rng.uniform(-0.5, 0.5) * w, cy = y + h / 2 + rng.uniform(-0.5, 0.5) * h;
    const double aw = w * std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
    const double ah = h * std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
    const Box a{cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2};
    const double v = iou(a, t);
    if (v > 0.0 && v < 0.9) pairs.push_back({a, t});
  }
  return pairs;
}

struct ConvergenceTrace {
  LossKind kind = LossKind::iou;
  std::vector<double> loss;      ///< mean over pairs, per step
  std::vector<double> mean_iou;  ///< mean over pairs, per step
  std::vector<std::optional<std::size_t>> steps_to;  ///< per pair; absent if never reached

  /// Median of steps_to with missing entries counted as infinite.
  double median_steps_to() const {
    std::vector<double> v;
    for (const auto& s : steps_to) v.push_back(s ? double(*s) : std::numeric_limits<double>::infinity());
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  }
  std::size_t reached() const {
    return static_cast<std::size_t>(std::count_if(steps_to.begin(), steps_to.end(), [](const auto& s) { return s.has_value(); }));
  }
};

/// Keeps x2 >= x1 + eps and y2 >= y1 + eps by moving the far corner.
inline void clamp_corners(std::array<double, 4>& c, double eps) {
  c[2] = std::max(c[2], c[0] + eps);
  c[3] = std::max(c[3], c[1] + eps);
}

/// One lane of the race. steps_to counts optimizer steps taken before the
/// anchor first reaches the target IoU (0 when it starts there).
inline ConvergenceTrace run_race_lane(LossKind kind, const std::vector<BoxPair>& pairs, const RaceConfig& cfg) {
  cfg.sgd.validate();
  LossConfig lc = cfg.loss;
  lc.kind = kind;
  const double s = cfg.coord_scale;
  ConvergenceTrace tr;
  tr.kind = kind;
  tr.steps_to.assign(pairs.size(), std::nullopt);
  std::vector<Tensor> params, vel;
  std::vector<Box> targets;
  for (const auto& p : pairs) {
    params.push_back(Tensor(Shape{4}, {p.anchor.x1 / s, p.anchor.y1 / s, p.anchor.x2 / s, p.anchor.y2 / s}));
    vel.emplace_back(Shape{4}, 0.0);
    targets.push_back({p.target.x1 / s, p.target.y1 / s, p.target.x2 / s, p.target.y2 / s});
  }
  Tensor grad(Shape{4});
  const double inv = 1.0 / double(std::max<std::size_t>(pairs.size(), 1));
  for (std::size_t step = 0; step <= cfg.steps; ++step) {
    double loss_sum = 0.0, iou_sum = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      auto& c = params[i];
      const Box b{c[0], c[1], c[2], c[3]};
      const double v = iou(b, targets[i]);
      if (!tr.steps_to[i] && v >= cfg.target_iou) tr.steps_to[i] = step;
      if (step == cfg.steps) continue;
      iou_sum += v;
      const auto lg = box_loss_with_grad(b, targets[i], lc);
      loss_sum += lg.value;
      for (int k = 0; k < 4; ++k) grad[k] = lg.grad[k];
      sgd_step(c, grad, vel[i], cfg.sgd);
      std::array<double, 4> corners{c[0], c[1], c[2], c[3]};
      clamp_corners(corners, cfg.min_extent);
      for (int k = 0; k < 4; ++k) c[k] = corners[k];
    }
    if (step == cfg.steps) break;
    // Values before this step's update.
    tr.loss.push_back(loss_sum * inv);
    tr.mean_iou.push_back(iou_sum * inv);
  }
  return tr;
}

inline std::vector<ConvergenceTrace> box_regression_race(const RaceConfig& cfg) {
  const auto pairs = make_race_pairs(cfg.n_pairs, cfg.seed, cfg.space);
  std::vector<ConvergenceTrace> out;
  for (auto k : cfg.kinds) out.push_back(run_race_lane(k, pairs, cfg));
  return out;
}

}  // namespace crackkw
