#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "crackkw/dual.hpp"
#include "crackkw/gradcheck.hpp"
#include "crackkw/iou_losses.hpp"
#include "crackkw/kernel_warehouse.hpp"
#include "crackkw/random.hpp"
#include "crackkw/triple_attention.hpp"

// Finite-difference sweeps over the differentiable operations of the kernel
// warehouse, the attention block and the loss family. Instances that fall
// within `margin` of a kink (|.|, ReLU, max ties, piecewise branches) are
// skipped and redrawn.

namespace crackkw {

struct OpCheck {
  std::string scope;
  std::string op;
  std::size_t instances = 0;
  std::size_t skipped = 0;
  double max_rel_error = 0.0;

  bool passed(double tol) const { return instances > 0 && max_rel_error < tol; }
};

struct GradientSuiteConfig {
  std::size_t instances = 100;
  double eps = 1e-5;
  double margin = 1e-3;
};

inline const std::vector<std::string>& gradient_scopes() {
  static const std::vector<std::string> s{"all", "kwconv", "ta", "losses"};
  return s;
}

namespace detail {

// One draw: returns the worst error, or nullopt when the instance is excluded.
using InstanceCheck = std::function<std::optional<double>(Rng&)>;

inline OpCheck run_op(const std::string& scope, const std::string& op, std::uint64_t seed, std::uint64_t op_id,
                      const GradientSuiteConfig& cfg, const InstanceCheck& check) {
  OpCheck r{scope, op};
  const std::size_t max_draws = cfg.instances * 10 + 10;
  for (std::size_t draw = 0; r.instances < cfg.instances && draw < max_draws; ++draw) {
    Rng rng(derive_seed(derive_seed(seed, op_id), draw));
    const auto err = check(rng);
    if (!err) {
      ++r.skipped;
      continue;
    }
    ++r.instances;
    r.max_rel_error = std::max(r.max_rel_error, *err);
  }
  return r;
}

inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

// f: scalar template, checked by dual numbers against central differences.
template <class F>
double scalar_rel_error(F&& f, double x, double eps) {
  const auto d = f(Dual<1>::variable(x, 0));
  return rel_err(d.d[0], (f(x + eps) - f(x - eps)) / (2.0 * eps));
}

// f: (BasicBox<T> pred, BasicBox<T> gt) -> T, differentiated in the pred corners.
template <class F>
double box_rel_error(F&& f, const Box& pred, const Box& gt, double eps) {
  using D = Dual<4>;
  const BasicBox<D> p{D::variable(pred.x1, 0), D::variable(pred.y1, 1), D::variable(pred.x2, 2),
                      D::variable(pred.y2, 3)};
  const D a = f(p, lift<D>(gt));
  double worst = 0.0;
  for (int k = 0; k < 4; ++k) {
    Box up = pred, down = pred;
    double* u[4] = {&up.x1, &up.y1, &up.x2, &up.y2};
    double* dn[4] = {&down.x1, &down.y1, &down.x2, &down.y2};
    *u[k] += eps;
    *dn[k] -= eps;
    worst = std::max(worst, rel_err(a.d[std::size_t(k)], (f(up, gt) - f(down, gt)) / (2.0 * eps)));
  }
  return worst;
}

inline Box random_box(Rng& rng, double extent = 64.0) {
  const double w = rng.uniform(2.0, extent / 2), h = rng.uniform(2.0, extent / 2);
  const double x = rng.uniform(0.0, extent - w), y = rng.uniform(0.0, extent - h);
  return {x, y, x + w, y + h};
}

inline Box jitter_box(Rng& rng, const Box& gt, double amount) {
  const double w = gt.width(), h = gt.height();
  Box b{gt.x1 + rng.uniform(-amount, amount) * w, gt.y1 + rng.uniform(-amount, amount) * h,
        gt.x2 + rng.uniform(-amount, amount) * w, gt.y2 + rng.uniform(-amount, amount) * h};
  if (b.x2 <= b.x1 + 0.1) b.x2 = b.x1 + 0.1 * w;
  if (b.y2 <= b.y1 + 0.1) b.y2 = b.y1 + 0.1 * h;
  return b;
}

inline double min_abs(const Tensor& t) {
  double m = std::numeric_limits<double>::infinity();
  for (double v : t.storage()) m = std::min(m, std::abs(v));
  return m;
}

// Smallest gap between the two largest entries of each group of `len`
// values spaced `stride` apart, starting at every offset in `starts`.
inline double top2_gap(const Tensor& t, const std::vector<std::size_t>& starts, std::size_t len, std::size_t stride) {
  double gap = std::numeric_limits<double>::infinity();
  for (std::size_t s : starts) {
    if (len < 2) continue;
    double a = -std::numeric_limits<double>::infinity(), b = a;
    for (std::size_t k = 0; k < len; ++k) {
      const double v = t[s + k * stride];
      if (v > a) b = a, a = v;
      else if (v > b) b = v;
    }
    gap = std::min(gap, a - b);
  }
  return gap;
}

inline void randomize(std::vector<Parameter*> ps, Rng& rng, double sd) {
  for (auto* p : ps)
    for (auto& v : p->value.storage()) v = rng.normal(0.0, sd);
}

// Kinks of channel and spatial attention for input x: ReLU pre-activations
// of the channel MLP and ties in the max pools.
inline double ta_kink_distance(const Tensor& x, const ChannelAttentionParams* ch, bool channel_max) {
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  double d = std::numeric_limits<double>::infinity();
  if (ch) {
    std::vector<std::size_t> starts;
    for (std::size_t i = 0; i < N * C; ++i) starts.push_back(i * HW);
    d = std::min(d, top2_gap(x, starts, HW, 1));
    const std::size_t Hd = ch->hidden();
    for (std::size_t n = 0; n < N; ++n) {
      for (int mode = 0; mode < 2; ++mode) {
        std::vector<double> pooled(C);
        for (std::size_t c = 0; c < C; ++c) {
          double acc = mode == 0 ? 0.0 : -std::numeric_limits<double>::infinity();
          for (std::size_t i = 0; i < HW; ++i) {
            const double v = x[(n * C + c) * HW + i];
            acc = mode == 0 ? acc + v / double(HW) : std::max(acc, v);
          }
          pooled[c] = acc;
        }
        for (std::size_t h = 0; h < Hd; ++h) {
          double pre = ch->b1.value[h];
          for (std::size_t c = 0; c < C; ++c) pre += ch->w1.value[h * C + c] * pooled[c];
          d = std::min(d, std::abs(pre));
        }
      }
    }
  }
  if (channel_max) {
    std::vector<std::size_t> starts;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) starts.push_back(n * C * HW + i);
    d = std::min(d, top2_gap(x, starts, C, HW));
  }
  return d;
}

// Checks d/dx and d/dparam for every listed parameter; returns the worst.
template <class Fx, class Fp>
double tape_errors(Fx&& fx, const Tensor& x, Fp&& fp, const std::vector<Parameter*>& ps, double eps) {
  double worst = finite_diff_check(fx, x, eps).max_rel_error;
  for (auto* p : ps) worst = std::max(worst, finite_diff_check_param(fp, *p, eps).max_rel_error);
  return worst;
}

inline std::vector<OpCheck> kwconv_suite(std::uint64_t seed, const GradientSuiteConfig& cfg) {
  std::vector<OpCheck> out;
  out.push_back(run_op("kwconv", "naf", seed, 101, cfg, [&](Rng& rng) -> std::optional<double> {
    const std::size_t rows = 1 + std::size_t(rng.integer(1, 4)), n = std::size_t(rng.integer(2, 7));
    Tensor z = rng.normal_tensor(Shape{rows, n}), w = rng.normal_tensor(Shape{rows, n});
    if (min_abs(z) < cfg.margin) return std::nullopt;
    const double tau = rng.uniform(0.0, 0.95);
    Tensor beta(Shape{rows, n}, 0.0);
    for (std::size_t i = 0; i < rows; ++i) beta[i * n + std::size_t(rng.integer(0, int(n) - 1))] = 1.0;
    auto f = [&](Graph& g, Var v) { return sum(mul(naf(v, tau, beta), g.constant(w))); };
    return finite_diff_check(f, z, cfg.eps).max_rel_error;
  }));
  out.push_back(run_op("kwconv", "assemble_kernels", seed, 102, cfg, [&](Rng& rng) -> std::optional<double> {
    const KernelShape unit{2, 2, 1, 1};
    const KernelShape layer{2 * std::size_t(rng.integer(1, 2)), 2 * std::size_t(rng.integer(1, 2)),
                            std::size_t(rng.integer(1, 3)), std::size_t(rng.integer(1, 3))};
    const std::size_t P = mixing_positions(layer, unit), n = std::size_t(rng.integer(2, 6));
    Tensor bank = rng.normal_tensor(Shape{n, unit.numel()}), alpha = rng.normal_tensor(Shape{P, n});
    Tensor w = rng.normal_tensor(layer.as_shape());
    auto fb = [&](Graph& g, Var v) {
      return sum(crackkw::tanh(mul(assemble_kernels(v, g.constant(alpha), layer, unit), g.constant(w))));
    };
    auto fa = [&](Graph& g, Var v) {
      return sum(crackkw::tanh(mul(assemble_kernels(g.constant(bank), v, layer, unit), g.constant(w))));
    };
    return std::max(finite_diff_check(fb, bank, cfg.eps).max_rel_error,
                    finite_diff_check(fa, alpha, cfg.eps).max_rel_error);
  }));
  out.push_back(run_op("kwconv", "kwconv_forward", seed, 103, cfg, [&](Rng& rng) -> std::optional<double> {
    StageConfig small;
    small.layers = {KernelShape{4, 2, 1, 1}, KernelShape{4, 4, 1, 1}};
    small.budget_b = rng.bernoulli(0.5) ? 2.0 : 0.5;
    Warehouse wh(small, rng, 1.0);
    const std::size_t stride = std::size_t(rng.integer(1, 2));
    wh.set_geometry(1, stride, std::size_t(rng.integer(0, 1)));
    NafConfig naf_cfg;
    naf_cfg.tau_epochs = 4;
    const int epoch = rng.integer(0, 5);
    Tensor x = rng.normal_tensor(Shape{2, 4, 5, 5});
    {
      Graph g;
      if (min_abs(kw_scores(g, g.constant(x), wh.layer(1)).value()) < cfg.margin) return std::nullopt;
    }
    auto fx = [&](Graph& g, Var v) { return mean(crackkw::tanh(kwconv_forward(g, v, 1, wh, naf_cfg, epoch))); };
    auto fp = [&](Graph& g) {
      return mean(crackkw::tanh(kwconv_forward(g, g.constant(x), 1, wh, naf_cfg, epoch)));
    };
    return tape_errors(fx, x, fp, {&wh.bank(), &wh.layer(1).scorer_w, &wh.layer(1).scorer_b}, cfg.eps);
  }));
  return out;
}

inline std::vector<OpCheck> ta_suite(std::uint64_t seed, const GradientSuiteConfig& cfg) {
  std::vector<OpCheck> out;
  auto feature = [](Rng& rng) {
    return rng.normal_tensor(Shape{std::size_t(rng.integer(1, 2)), 4, std::size_t(rng.integer(2, 3)),
                                   std::size_t(rng.integer(2, 3))});
  };
  out.push_back(run_op("ta", "channel_attention", seed, 201, cfg, [&](Rng& rng) -> std::optional<double> {
    auto p = ChannelAttentionParams::make(4, 2, rng);
    randomize({&p.w1, &p.b1, &p.w2, &p.b2}, rng, 0.7);
    Tensor x = feature(rng);
    if (ta_kink_distance(x, &p, false) < cfg.margin) return std::nullopt;
    Tensor w = rng.normal_tensor(Shape{x.dim(0), 4, 1, 1});
    auto fx = [&](Graph& g, Var v) { return sum(mul(channel_attention(g, v, p), g.constant(w))); };
    auto fp = [&](Graph& g) { return sum(mul(channel_attention(g, g.constant(x), p), g.constant(w))); };
    return tape_errors(fx, x, fp, {&p.w1, &p.b1, &p.w2, &p.b2}, cfg.eps);
  }));
  out.push_back(run_op("ta", "spatial_attention", seed, 202, cfg, [&](Rng& rng) -> std::optional<double> {
    auto p = SpatialAttentionParams::make(rng);
    Tensor x = feature(rng);
    if (ta_kink_distance(x, nullptr, true) < cfg.margin) return std::nullopt;
    Tensor w = rng.normal_tensor(Shape{x.dim(0), 1, x.dim(2), x.dim(3)});
    auto fx = [&](Graph& g, Var v) { return sum(mul(spatial_attention(g, v, p), g.constant(w))); };
    auto fp = [&](Graph& g) { return sum(mul(spatial_attention(g, g.constant(x), p), g.constant(w))); };
    return tape_errors(fx, x, fp, {&p.kernel}, cfg.eps);
  }));
  out.push_back(run_op("ta", "lstm_step", seed, 203, cfg, [&](Rng& rng) -> std::optional<double> {
    auto p = RecurrentGateParams::make(3, rng);
    std::vector<Parameter*> ps;
    for (auto& np : p.named()) ps.push_back(np.second);
    randomize(ps, rng, 0.7);
    const std::size_t N = std::size_t(rng.integer(1, 2));
    Tensor h = rng.normal_tensor(Shape{N, 3}), c = rng.normal_tensor(Shape{N, 3}), x = rng.normal_tensor(Shape{N, 3});
    Tensor wh = rng.normal_tensor(Shape{N, 3}), wc = rng.normal_tensor(Shape{N, 3});
    auto out_of = [&](Graph& g, Var hv, Var cv, Var xv) {
      const auto st = lstm_step(hv, cv, xv, RecurrentGateVars::bind(g, p));
      return add(sum(mul(st.h, g.constant(wh))), sum(mul(st.c, g.constant(wc))));
    };
    auto fh = [&](Graph& g, Var v) { return out_of(g, v, g.constant(c), g.constant(x)); };
    auto fc = [&](Graph& g, Var v) { return out_of(g, g.constant(h), v, g.constant(x)); };
    auto fx = [&](Graph& g, Var v) { return out_of(g, g.constant(h), g.constant(c), v); };
    auto fp = [&](Graph& g) { return out_of(g, g.constant(h), g.constant(c), g.constant(x)); };
    return std::max({finite_diff_check(fh, h, cfg.eps).max_rel_error, finite_diff_check(fc, c, cfg.eps).max_rel_error,
                     tape_errors(fx, x, fp, ps, cfg.eps)});
  }));
  out.push_back(run_op("ta", "recurrent_branch", seed, 204, cfg, [&](Rng& rng) -> std::optional<double> {
    auto p = RecurrentGateParams::make(4, rng);
    std::vector<Parameter*> ps;
    for (auto& np : p.named()) ps.push_back(np.second);
    randomize(ps, rng, 0.5);
    const auto scan = rng.bernoulli(0.5) ? ScanOrder::row_major : ScanOrder::column_major;
    Tensor x = feature(rng), w = rng.normal_tensor(x.shape());
    auto fx = [&](Graph& g, Var v) { return sum(mul(recurrent_branch(g, v, p, scan), g.constant(w))); };
    auto fp = [&](Graph& g) { return sum(mul(recurrent_branch(g, g.constant(x), p, scan), g.constant(w))); };
    return tape_errors(fx, x, fp, ps, cfg.eps);
  }));
  out.push_back(run_op("ta", "triple_attention", seed, 205, cfg, [&](Rng& rng) -> std::optional<double> {
    auto p = TripleAttentionParams::make(4, 2, rng);
    randomize(p.parameters(), rng, 0.5);
    Tensor x = feature(rng), w = rng.normal_tensor(x.shape());
    if (ta_kink_distance(x, &p.channel, true) < cfg.margin) return std::nullopt;
    auto fx = [&](Graph& g, Var v) { return sum(mul(triple_attention(g, v, p), g.constant(w))); };
    auto fp = [&](Graph& g) { return sum(mul(triple_attention(g, g.constant(x), p), g.constant(w))); };
    return tape_errors(fx, x, fp, p.parameters(), cfg.eps);
  }));
  return out;
}

inline std::vector<OpCheck> losses_suite(std::uint64_t seed, const GradientSuiteConfig& cfg) {
  std::vector<OpCheck> out;
  const double eps = cfg.eps;
  auto pair = [&](Rng& rng, double u) -> std::optional<std::pair<Box, Box>> {
    const Box gt = random_box(rng);
    const Box pred = jitter_box(rng, gt, 0.5);
    if (near_breakpoint(pred, gt, u, cfg.margin)) return std::nullopt;
    return std::make_pair(pred, gt);
  };
  std::uint64_t id = 300;
  auto box_op = [&](const std::string& name, auto f) {
    out.push_back(run_op("losses", name, seed, ++id, cfg, [&, f](Rng& rng) -> std::optional<double> {
      const auto pg = pair(rng, LossConfig{}.u);
      if (!pg) return std::nullopt;
      return box_rel_error(f, pg->first, pg->second, eps);
    }));
  };
  // Registry losses go through the tape wrapper used in training.
  auto registry_op = [&](const std::string& name, LossKind kind) {
    out.push_back(run_op("losses", name, seed, ++id, cfg, [&, kind](Rng& rng) -> std::optional<double> {
      LossConfig lc;
      lc.kind = kind;
      std::vector<Box> gts;
      Tensor corners(Shape{3, 4});
      for (std::size_t k = 0; k < 3; ++k) {
        const auto pg = pair(rng, lc.u);
        if (!pg) return std::nullopt;
        gts.push_back(pg->second);
        const Box& b = pg->first;
        corners[k * 4] = b.x1, corners[k * 4 + 1] = b.y1, corners[k * 4 + 2] = b.x2, corners[k * 4 + 3] = b.y2;
      }
      auto f = [&](Graph&, Var v) { return box_regression_loss(v, gts, lc); };
      return finite_diff_check(f, corners, eps).max_rel_error;
    }));
  };

  registry_op("iou", LossKind::iou);
  out.push_back(run_op("losses", "focaler_map", seed, ++id, cfg, [&](Rng& rng) -> std::optional<double> {
    const FocalerParams p{rng.uniform(0.0, 0.3), rng.uniform(0.7, 0.99)};
    const double v = rng.uniform(0.0, 1.0);
    if (std::abs(v - p.d) < cfg.margin || std::abs(v - p.u) < cfg.margin) return std::nullopt;
    return std::max(scalar_rel_error([&](const auto& t) { return focaler_map(t, p); }, v, eps),
                    scalar_rel_error([&](const auto& t) { return focaler_map_simplified(t, p.u); }, v, eps));
  }));
  // Edge distances enter only through the penalty factor.
  box_op("penalty_factor", [](const auto& p, const auto& g) { return penalty_factor(p, g); });
  registry_op("piou_loss", LossKind::piou);
  out.push_back(run_op("losses", "quality", seed, ++id, cfg, [&](Rng& rng) -> std::optional<double> {
    const double p = rng.uniform(cfg.margin, 4.0);
    return scalar_rel_error([](const auto& t) { return quality(t); }, p, eps);
  }));
  out.push_back(run_op("losses", "nonmonotonic_attention", seed, ++id, cfg, [&](Rng& rng) -> std::optional<double> {
    const double x = rng.uniform(cfg.margin, 3.0);
    return scalar_rel_error([](const auto& t) { return nonmonotonic_attention(t); }, x, eps);
  }));
  registry_op("piouv2_loss", LossKind::piouv2);
  registry_op("fp_iou_loss", LossKind::fpiou);
  registry_op("ciou_loss", LossKind::ciou);
  out.push_back(run_op("losses", "weighted_cross_entropy", seed, ++id, cfg, [&](Rng& rng) -> std::optional<double> {
    const std::size_t N = std::size_t(rng.integer(1, 3)), H = std::size_t(rng.integer(2, 4));
    const WceConfig wc{{rng.uniform(0.5, 2.0), rng.uniform(1.0, 8.0)}, double(N)};
    Tensor logits = rng.normal_tensor(Shape{N, 2, H, H}, 2.0);
    Tensor target(Shape{N, H, H});
    for (auto& t : target.storage()) t = rng.bernoulli(0.3) ? 1.0 : 0.0;
    auto f = [&](Graph&, Var v) { return weighted_cross_entropy(v, target, wc); };
    return finite_diff_check(f, logits, eps).max_rel_error;
  }));
  return out;
}

}  // namespace detail

/// Runs the suites of `scope` ("all", "kwconv", "ta" or "losses").
inline std::vector<OpCheck> gradient_suite(const std::string& scope, std::uint64_t seed,
                                           const GradientSuiteConfig& cfg = {}) {
  if (std::find(gradient_scopes().begin(), gradient_scopes().end(), scope) == gradient_scopes().end()) {
    throw std::invalid_argument("unknown gradcheck scope '" + scope + "' (expected all, kwconv, ta or losses)");
  }
  std::vector<OpCheck> out;
  auto append = [&](std::vector<OpCheck> v) { out.insert(out.end(), v.begin(), v.end()); };
  if (scope == "all" || scope == "kwconv") append(detail::kwconv_suite(seed, cfg));
  if (scope == "all" || scope == "ta") append(detail::ta_suite(seed, cfg));
  if (scope == "all" || scope == "losses") append(detail::losses_suite(seed, cfg));
  return out;
}

}  // namespace crackkw
