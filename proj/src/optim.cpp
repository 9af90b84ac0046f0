#include "tta/optim.hpp"

#include <cmath>

namespace tta {

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, SgdConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (cfg_.lr < 0.0 || cfg_.momentum < 0.0 || cfg_.momentum >= 1.0 ||
      cfg_.weight_decay < 0.0)
    throw ConfigError("SgdOptimizer: invalid hyperparameters");
  velocity_.reserve(params_.size());
  for (const Tensor& p : params_) {
    if (!p.defined()) throw ContractError("SgdOptimizer: undefined parameter");
    velocity_.emplace_back(p.size(), 0.0);
  }
}

void SgdOptimizer::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    auto w = p.values();
    std::vector<double>& v = velocity_[i];
    const bool has_g = p.has_grad();
    std::span<const double> g;
    if (has_g) {
      g = static_cast<const Tensor&>(p).grad();
      if (g.size() != w.size())
        throw ContractError("SgdOptimizer: grad/param shape mismatch");
    }
    for (std::size_t e = 0; e < w.size(); ++e) {
      const double ge =
          (has_g ? g[e] : 0.0) + cfg_.weight_decay * w[e];
      v[e] = cfg_.momentum * v[e] + ge;
      w[e] -= cfg_.lr * v[e];
      if (!std::isfinite(w[e]))
        throw NumericFault("SgdOptimizer: non-finite parameter after step");
    }
  }
}

void SgdOptimizer::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

std::span<const double> SgdOptimizer::velocity(std::size_t i) const {
  return velocity_.at(i);
}

}  // namespace tta
