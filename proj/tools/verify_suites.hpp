#pragma once

#include <string>
#include <vector>

namespace tta::verify {

struct SuiteResult {
  std::string name;
  bool pass = false;
  std::string detail;  // worst-case numbers; empty when unremarkable
};

// Re-runs the built-in property suites: gradient, tau_limit, bn_mix,
// restoration, miou_oracle (in that order, each exactly once).
// corrupt_gradient perturbs one analytic derivative before the finite-
// difference comparison, proving the gradient suite can fail.
std::vector<SuiteResult> run_all(bool corrupt_gradient);

}  // namespace tta::verify
