#pragma once

#include <span>
#include <vector>

#include "tta/tensor.hpp"

namespace tta {

struct SgdConfig {
  double lr = 0.0;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

// Classic SGD with momentum and L2 weight decay:
//   g = grad + wd*w;  v = momentum*v + g;  w -= lr*v
// A parameter with no grad buffer contributes g = wd*w only.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor> params, SgdConfig cfg);

  void step();
  void zero_grad();

  const SgdConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::span<const double> velocity(std::size_t i) const;

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  SgdConfig cfg_;
};

}  // namespace tta
