#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "crackkw/gradcheck.hpp"
#include "crackkw/iou_losses.hpp"
#include "crackkw/random.hpp"

using namespace crackkw;

namespace {

const Box kPred{0, 0, 2, 2};
const Box kGt{1, 1, 4, 5};

Box random_box(Rng& rng, double extent = 64.0) {
  const double w = rng.uniform(2.0, extent / 2), h = rng.uniform(2.0, extent / 2);
  const double x = rng.uniform(0.0, extent - w), y = rng.uniform(0.0, extent - h);
  return {x, y, x + w, y + h};
}

// A nearby prediction: jittered corners, still valid.
Box jitter(Rng& rng, const Box& gt, double amount) {
  const double w = gt.width(), h = gt.height();
  Box b{gt.x1 + rng.uniform(-amount, amount) * w, gt.y1 + rng.uniform(-amount, amount) * h,
        gt.x2 + rng.uniform(-amount, amount) * w, gt.y2 + rng.uniform(-amount, amount) * h};
  if (b.x2 <= b.x1 + 0.1) b.x2 = b.x1 + 0.1 * w;
  if (b.y2 <= b.y1 + 0.1) b.y2 = b.y1 + 0.1 * h;
  return b;
}

// CIoU written from centres and extents, sharing no code with the library.
double ciou_reference(const Box& a, const Box& b) {
  const double acx = (a.x1 + a.x2) / 2, acy = (a.y1 + a.y2) / 2, aw = a.x2 - a.x1, ah = a.y2 - a.y1;
  const double bcx = (b.x1 + b.x2) / 2, bcy = (b.y1 + b.y2) / 2, bw = b.x2 - b.x1, bh = b.y2 - b.y1;
  const double ix = std::max(0.0, std::min(acx + aw / 2, bcx + bw / 2) - std::max(acx - aw / 2, bcx - bw / 2));
  const double iy = std::max(0.0, std::min(acy + ah / 2, bcy + bh / 2) - std::max(acy - ah / 2, bcy - bh / 2));
  const double inter = ix * iy;
  const double v_iou = inter / (aw * ah + bw * bh - inter);
  const double ex = std::max(acx + aw / 2, bcx + bw / 2) - std::min(acx - aw / 2, bcx - bw / 2);
  const double ey = std::max(acy + ah / 2, bcy + bh / 2) - std::min(acy - ah / 2, bcy - bh / 2);
  const double centre = (acx - bcx) * (acx - bcx) + (acy - bcy) * (acy - bcy);
  const double pi = 3.14159265358979323846;
  const double v = 4.0 / (pi * pi) * std::pow(std::atan(bw / bh) - std::atan(aw / ah), 2);
  const double alpha = v == 0.0 ? 0.0 : v / ((1.0 - v_iou) + v);
  return 1.0 - v_iou + centre / (ex * ex + ey * ey) + alpha * v;
}

LossConfig config_for(LossKind k) {
  LossConfig c;
  c.kind = k;
  return c;
}

}  // namespace

TEST(Iou, BasicCases) {
  EXPECT_EQ(iou(kPred, kPred), 1.0);
  EXPECT_EQ(iou(Box{0, 0, 1, 1}, Box{2, 2, 3, 3}), 0.0);
  EXPECT_DOUBLE_EQ(iou(Box{0, 0, 2, 2}, Box{1, 0, 3, 2}), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(iou(kPred, kGt), 1.0 / 15.0);
  EXPECT_THROW(require_valid(Box{1, 0, 1, 2}), std::invalid_argument);
}

TEST(Focaler, PiecewiseMap) {
  const FocalerParams p{0.2, 0.8};
  EXPECT_EQ(focaler_map(0.2, p), 0.0);
  EXPECT_DOUBLE_EQ(focaler_map(0.8, p), 1.0);
  EXPECT_DOUBLE_EQ(focaler_map(0.5, p), 0.5);
  EXPECT_EQ(focaler_map(0.1, p), 0.0);
  EXPECT_EQ(focaler_map(0.9, p), 1.0);
  for (double v = 0.0; v <= 1.0; v += 0.01) EXPECT_EQ(focaler_map(v, FocalerParams{0.0, 1.0}), v);
  double prev = 0.0;
  for (int i = 0; i <= 1000; ++i) {
    const double v = i / 1000.0, m = focaler_map(v, p);
    EXPECT_GE(m, prev);
    EXPECT_LE(m - prev, 0.001 / 0.6 + 1e-15);
    prev = m;
  }

  EXPECT_EQ(focaler_map_simplified(0.0, 0.95), 0.0);
  EXPECT_EQ(focaler_map_simplified(0.95, 0.95), 1.0);
  EXPECT_EQ(focaler_map_simplified(0.99, 0.95), 1.0);
  EXPECT_DOUBLE_EQ(focaler_map_simplified(0.475, 0.95), 0.5);
  // Left-segment subgradient at the breakpoint.
  auto d = focaler_map_simplified(Dual<1>::variable(0.95, 0), 0.95);
  EXPECT_DOUBLE_EQ(d.d[0], 1.0 / 0.95);
}

TEST(Penalty, EdgeDistancesAndFactor) {
  const auto e = edge_distances(kPred, kGt);
  EXPECT_EQ(e.dw1, 1.0);
  EXPECT_EQ(e.dw2, 2.0);
  EXPECT_EQ(e.dh1, 1.0);
  EXPECT_EQ(e.dh2, 3.0);
  EXPECT_DOUBLE_EQ(penalty_factor(kPred, kGt), 0.5);
  EXPECT_EQ(penalty_factor(Box{1, 0, 2, 1}, Box{0, 0, 1, 1}), 0.5);
  const auto t = edge_distances(Box{3.5, 1, 6.5, 5}, Box{1, 1, 4, 5});
  EXPECT_EQ(t.dw1, 2.5);
  EXPECT_EQ(t.dw2, 2.5);
  EXPECT_EQ(t.dh1 + t.dh2, 0.0);
  EXPECT_EQ(penalty_factor(kGt, kGt), 0.0);
}

TEST(Quality, ExponentialOfPenalty) {
  EXPECT_EQ(quality(0.0), 1.0);
  EXPECT_DOUBLE_EQ(quality(std::log(2.0)), 0.5);
  EXPECT_GT(quality(700.0), 0.0);
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const Box gt = random_box(rng), pred = random_box(rng);
    const double q = quality(penalty_factor(pred, gt));
    EXPECT_GT(q, 0.0);
    EXPECT_LE(q, 1.0);
  }
}

TEST(Attention, NonmonotonicCurve) {
  EXPECT_EQ(nonmonotonic_attention(0.0), 0.0);
  EXPECT_NEAR(nonmonotonic_attention(1.0), 3.0 / std::exp(1.0), 1e-15);
  const double xs = 1.0 / std::sqrt(2.0);
  const double peak = 3.0 / std::sqrt(2.0 * std::exp(1.0));
  EXPECT_NEAR(nonmonotonic_attention(xs), peak, 1e-12);
  EXPECT_NEAR(peak, 1.2866, 5e-5);
  auto d = nonmonotonic_attention(Dual<1>::variable(xs, 0));
  EXPECT_NEAR(d.d[0], 0.0, 1e-15);
  for (double x = 0.0; x < 4.0; x += 0.001) EXPECT_LE(nonmonotonic_attention(x), peak + 1e-15);
}

TEST(PiouV2, WeightClosedForms) {
  const double w = quality_weight(std::log(2.0), 1.0, true);
  EXPECT_NEAR(w, 4.5 * std::exp(-0.25), 1e-15);
  EXPECT_NEAR(quality_weight(std::log(2.0), 1.0, false), 1.5 * std::exp(-0.25), 1e-15);
  // Interior maximum of the weight in q at 1 / (lambda sqrt 2).
  for (double lambda : {0.8, 1.3, 2.0}) {
    const double qstar = 1.0 / (lambda * std::sqrt(2.0));
    const double wstar = quality_weight(-std::log(qstar), lambda, true);
    for (double q = 0.001; q <= 1.0; q += 0.001) EXPECT_LE(quality_weight(-std::log(q), lambda, true), wstar + 1e-12);
  }
  EXPECT_EQ(piouv2_loss(kGt, kGt, PIoUv2Params{}), 0.0);
}

TEST(Piou, ClosedFormsAndBound) {
  EXPECT_EQ(piou_loss(kGt, kGt), 0.0);
  EXPECT_NEAR(piou_loss(kPred, kGt), 14.0 / 15.0 + 1.0 - std::exp(-0.25), 1e-15);
  // 2 - e^{-p^2} rounds to 2 once e^{-p^2} drops below half an ulp of 2.
  const double far = piou_loss(Box{1000, 1000, 1001, 1001}, Box{0, 0, 1, 1});
  EXPECT_LE(far, 2.0);
  EXPECT_NEAR(far, 2.0, 1e-12);
  EXPECT_LT(piou_loss(Box{3, 0, 4, 1}, Box{0, 0, 1, 1}), 2.0);
  Rng rng(2);
  for (int i = 0; i < 2000; ++i) {
    const Box a = random_box(rng), b = random_box(rng);
    const double v = piou_loss(a, b), p = penalty_factor(a, b);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 2.0);
    if (iou(a, b) > 0.0 || std::exp(-p * p) > 0x1p-52) {
      EXPECT_LT(v, 2.0);
    }
  }
}

TEST(FpIou, GoldenFixtureAndZeros) {
  // p = 0.5 and IoU = 1/15 for this pair; with u = 0.95, lambda = 1.3:
  //   3 m(1.3 e^-0.5) * ((1 - (1/15) / 0.95) + 1 - e^-0.25)
  EXPECT_NEAR(fp_iou_loss(kPred, kGt, 0.95, 1.3), 4.386468119079199, 1e-14);
  EXPECT_NEAR(fp_iou_loss(kPred, kGt, 0.95, 1.3, false), 1.4621560396930662, 1e-14);
  EXPECT_EQ(fp_iou_loss(kGt, kGt, 0.95, 1.3), 0.0);
  EXPECT_LT(fp_iou_loss(Box{500, 500, 501, 501}, Box{0, 0, 1, 1}, 0.95, 1.3), 1e-100);
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) EXPECT_GE(fp_iou_loss(random_box(rng), random_box(rng), 0.95, 1.3), 0.0);
}

TEST(FpIou, SmallLossImpliesNearCoincidence) {
  Rng rng(4);
  for (int i = 0; i < 2000; ++i) {
    const Box gt = random_box(rng);
    const Box pred = jitter(rng, gt, rng.uniform(0.0, 0.3));
    if (fp_iou_loss(pred, gt, 0.95, 1.3) < 1e-3) {
      EXPECT_LT(penalty_factor(pred, gt), 0.05);
    }
  }
}

TEST(FpIou, PushesBackAlongTranslation) {
  const Box gt{10, 10, 30, 25};
  for (double t = 0.05; t < 25.0; t += 0.25) {
    auto at = [&](double s) { return fp_iou_loss(Box{gt.x1 + s, gt.y1, gt.x2 + s, gt.y2}, gt, 0.95, 1.3); };
    const double slope = (at(t + 1e-6) - at(t - 1e-6)) / 2e-6;
    EXPECT_GT(slope, 0.0) << "t=" << t;
  }
}

TEST(Ciou, MatchesReferenceAndSpecialCases) {
  EXPECT_EQ(ciou_loss(kGt, kGt), 0.0);
  const Box outer{0, 0, 4, 4}, inner{1, 1, 3, 3};
  EXPECT_DOUBLE_EQ(ciou_loss(inner, outer), 1.0 - iou(inner, outer));
  Rng rng(5);
  for (int i = 0; i < 2000; ++i) {
    const Box a = random_box(rng), b = random_box(rng);
    EXPECT_NEAR(ciou_loss(a, b), ciou_reference(a, b), 1e-12);
  }
}

TEST(BoxLoss, TranslationAndScaleInvariance) {
  Rng rng(6);
  for (const auto& [name, kind] : kLossNames) {
    const auto cfg = config_for(kind);
    for (int i = 0; i < 200; ++i) {
      const Box gt = random_box(rng), pred = jitter(rng, gt, 0.4);
      const double base = box_loss(pred, gt, cfg);
      const double tx = rng.uniform(-50, 50), ty = rng.uniform(-50, 50), s = rng.uniform(0.1, 10.0);
      auto move = [&](const Box& b) { return Box{b.x1 + tx, b.y1 + ty, b.x2 + tx, b.y2 + ty}; };
      auto grow = [&](const Box& b) { return Box{b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s}; };
      EXPECT_NEAR(box_loss(move(pred), move(gt), cfg), base, 1e-10) << name;
      EXPECT_NEAR(box_loss(grow(pred), grow(gt), cfg), base, 1e-10) << name;
    }
  }
}

TEST(BoxLoss, RegistryNames) {
  for (const auto& [name, kind] : kLossNames) EXPECT_EQ(loss_name(parse_loss_kind(name)), name);
  EXPECT_THROW(parse_loss_kind("giou"), std::invalid_argument);
}

TEST(BoxLoss, CornerGradientsMatchFiniteDifference) {
  Rng rng(7);
  for (const auto& [name, kind] : kLossNames) {
    const auto cfg = config_for(kind);
    int checked = 0;
    for (std::uint64_t seed = 0; checked < 100; ++seed) {
      Rng r(seed * 31 + static_cast<std::uint64_t>(kind));
      std::vector<Box> gts, preds;
      bool skip = false;
      for (int k = 0; k < 3; ++k) {
        gts.push_back(random_box(r));
        preds.push_back(jitter(r, gts.back(), 0.5));
        skip |= near_breakpoint(preds.back(), gts.back(), cfg.u, 1e-3);
      }
      if (skip) continue;
      ++checked;
      Tensor corners(Shape{3, 4});
      for (std::size_t k = 0; k < 3; ++k) {
        corners[k * 4] = preds[k].x1, corners[k * 4 + 1] = preds[k].y1;
        corners[k * 4 + 2] = preds[k].x2, corners[k * 4 + 3] = preds[k].y2;
      }
      auto f = [&](Graph&, Var v) { return box_regression_loss(v, gts, cfg); };
      EXPECT_LT(finite_diff_check(f, corners).max_rel_error, 1e-4) << name << " seed " << seed;
    }
  }
  (void)rng;
}

TEST(Wce, UniformAndConfidentLogits) {
  Graph g;
  const WceConfig cfg;  // N = 8
  Tensor target(Shape{8, 3, 3});
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = i % 3 == 0 ? 1.0 : 0.0;
  const double uniform = weighted_cross_entropy(g.constant(Tensor(Shape{8, 2, 3, 3}, 0.0)), target, cfg).value().item();
  EXPECT_NEAR(uniform, 9.0 * std::log(2.0), 1e-12);

  Tensor confident(Shape{8, 2, 3, 3});
  for (std::size_t n = 0; n < 8; ++n)
    for (std::size_t q = 0; q < 9; ++q) {
      const bool crack = target[n * 9 + q] == 1.0;
      confident[(n * 2) * 9 + q] = crack ? -50.0 : 50.0;
      confident[(n * 2 + 1) * 9 + q] = crack ? 50.0 : -50.0;
    }
  EXPECT_LT(weighted_cross_entropy(g.constant(confident), target, cfg).value().item(), 1e-40);

  Tensor bad = target;
  bad[0] = 2.0;
  EXPECT_THROW(weighted_cross_entropy(g.constant(Tensor(Shape{8, 2, 3, 3}, 0.0)), bad, cfg), std::invalid_argument);
  EXPECT_THROW(weighted_cross_entropy(g.constant(Tensor(Shape{8, 3, 3, 3}, 0.0)), target, cfg), ShapeError);
}

TEST(Wce, LoopOracleAndGradient) {
  const WceConfig cfg{{1.0, 5.0}, 8.0};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    Tensor logits = rng.normal_tensor(Shape{2, 2, 3, 4}, 3.0);
    Tensor target(Shape{2, 3, 4});
    for (auto& t : target.storage()) t = rng.bernoulli(0.3) ? 1.0 : 0.0;
    double expect = 0.0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t q = 0; q < 12; ++q) {
        const double a = logits[(n * 2) * 12 + q], b = logits[(n * 2 + 1) * 12 + q];
        const int c = target[n * 12 + q] == 1.0 ? 1 : 0;
        const double pc = std::exp(c == 1 ? b : a) / (std::exp(a) + std::exp(b));
        expect -= cfg.weights[c] * std::log(pc);
      }
    expect /= 8.0;
    Graph g;
    EXPECT_NEAR(weighted_cross_entropy(g.constant(logits), target, cfg).value().item(), expect, 1e-10);
    auto f = [&](Graph&, Var v) { return weighted_cross_entropy(v, target, cfg); };
    EXPECT_LT(finite_diff_check(f, logits).max_rel_error, 1e-4) << seed;
  }
}
