#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "tta/tensor.hpp"

namespace tta {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::string worst;
  bool pass(double tol = 1e-4) const { return max_rel_err <= tol; }
};

// Central-difference oracle for a scalar graph builder. `build` must
// reconstruct the graph from the given leaves on every call; the leaves'
// buffers are perturbed in place and restored. Relative error uses
// |a - n| / max(|a|, |n|, 1).
inline GradCheckReport grad_check(const std::function<Tensor()>& build,
                                  std::span<Tensor> leaves,
                                  double eps = 1e-5) {
  std::vector<std::vector<double>> analytic;
  {
    for (Tensor& leaf : leaves) {
      leaf.set_requires_grad(true);
      leaf.reset_grad();
    }
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = build();
    tape.backward(loss);
    for (Tensor& leaf : leaves)
      analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
  }
  GradCheckReport rep;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto vals = leaves[li].values();
    for (std::size_t e = 0; e < vals.size(); ++e) {
      const double saved = vals[e];
      vals[e] = saved + eps;
      const double up = build().item();
      vals[e] = saved - eps;
      const double dn = build().item();
      vals[e] = saved;
      const double numeric = (up - dn) / (2.0 * eps);
      const double a = analytic[li][e];
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1.0});
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        char buf[160];
        std::snprintf(buf, sizeof buf,
                      "leaf %zu elem %zu: analytic=%.9e numeric=%.9e", li, e,
                      a, numeric);
        rep.max_rel_err = rel;
        rep.worst = buf;
      }
    }
  }
  return rep;
}

}  // namespace tta
