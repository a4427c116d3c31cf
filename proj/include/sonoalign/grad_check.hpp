#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sonoalign/autodiff.hpp"

namespace sonoalign::ad {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  // Entry with the largest relative error; meaningful when entries is non-empty.
  GradCheckEntry worst;
  bool passed = false;
};

// Compares reverse-mode gradients of a scalar function against central
// differences, element by element:
//   rel = |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
// `loss_fn` must be deterministic and rebuild its graph on every call; it is
// invoked once under a fresh tape and 2 * (number of parameter entries) times
// without one. Existing gradients on `params` are cleared.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::span<const NamedParam> params,
                           double step = 1e-5, double tol = 1e-4);

}  // namespace sonoalign::ad
