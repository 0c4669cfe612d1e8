#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "crackkw/autodiff.hpp"

namespace crackkw {

struct SgdConfig {
  double lr0 = 0.01;
  double momentum = 0.937;
  std::size_t batch = 16;
  int epochs = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr0 > 0.0)) throw std::invalid_argument("sgd: lr0 must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("sgd: momentum must lie in [0, 1)");
    if (batch == 0) throw std::invalid_argument("sgd: batch must be positive");
    if (epochs < 0) throw std::invalid_argument("sgd: epochs must be non-negative");
  }
};

/// v <- momentum * v + grad; param <- param - lr * v. The learning rate stays at lr0.
inline void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, const SgdConfig& cfg) {
  if (grad.shape() != param.shape() || velocity.shape() != param.shape()) {
    throw ShapeError("sgd_step: param " + shape_str(param.shape()) + ", grad " + shape_str(grad.shape()) +
                     ", velocity " + shape_str(velocity.shape()));
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = cfg.momentum * velocity[i] + grad[i];
    param[i] -= cfg.lr0 * velocity[i];
  }
}

/// Momentum buffers for a fixed list of parameters.
class Sgd {
 public:
  Sgd(std::vector<Parameter*> params, SgdConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    for (auto* p : params_) velocity_.emplace_back(p->value.shape(), 0.0);
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) sgd_step(params_[i]->value, params_[i]->grad, velocity_[i], cfg_);
  }

  const SgdConfig& config() const { return cfg_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> velocity_;
  SgdConfig cfg_;
};

}  // namespace crackkw
