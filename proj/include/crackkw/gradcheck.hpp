#pragma once

#include <cmath>
#include <string>

#include "crackkw/autodiff.hpp"

namespace crackkw {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

/// Compares the reverse-mode gradient of `f` at `x` with central differences.
///
/// `f(Graph&, Var x)` must return a scalar Var and must be a pure function of x.
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
/// Throws NumericError naming the coordinate when an evaluation is not finite.
template <class F>
GradCheckResult finite_diff_check(F&& f, const Tensor& x, double eps = 1e-5) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");

  Tensor analytic;
  {
    Graph g;
    Var xv = g.leaf(x, true);
    Var loss = f(g, xv);
    if (!std::isfinite(loss.value().item())) throw NumericError("finite_diff_check: non-finite loss at x");
    g.backward(loss);
    analytic = g.grad(xv) ? *g.grad(xv) : Tensor(x.shape(), 0.0);
  }

  auto eval = [&](const Tensor& at, std::size_t i) {
    Graph g;
    Var xv = g.constant(at);
    const double v = f(g, xv).value().item();
    if (!std::isfinite(v)) {
      throw NumericError("finite_diff_check: non-finite value when perturbing coordinate " + std::to_string(i));
    }
    return v;
  };

  GradCheckResult res;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = eval(probe, i);
    probe[i] = orig - eps;
    const double down = eval(probe, i);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    if (!std::isfinite(analytic[i])) {
      throw NumericError("finite_diff_check: non-finite analytic gradient at coordinate " + std::to_string(i));
    }
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
    }
  }
  return res;
}

/// Same comparison for a Parameter read through `g.param(p)` inside `f(Graph&)`.
template <class F>
GradCheckResult finite_diff_check_param(F&& f, Parameter& p, double eps = 1e-5) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check_param: eps must be positive");
  p.zero_grad();
  {
    Graph g;
    Var loss = f(g);
    if (!std::isfinite(loss.value().item())) throw NumericError("finite_diff_check_param: non-finite loss");
    g.backward(loss);
  }
  const Tensor analytic = p.grad;
  auto eval = [&](std::size_t i) {
    Graph g;
    const double v = f(g).value().item();
    if (!std::isfinite(v)) {
      throw NumericError("finite_diff_check_param: non-finite value when perturbing coordinate " + std::to_string(i));
    }
    return v;
  };
  GradCheckResult res;
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double orig = p.value[i];
    p.value[i] = orig + eps;
    const double up = eval(i);
    p.value[i] = orig - eps;
    const double down = eval(i);
    p.value[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
    }
  }
  p.zero_grad();
  return res;
}

}  // namespace crackkw
