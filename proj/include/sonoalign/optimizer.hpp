#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sonoalign/autodiff.hpp"

namespace sonoalign::optim {

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  std::vector<Matrix> first;   // one per parameter, same shape
  std::vector<Matrix> second;
  std::uint64_t step = 0;
};

AdamWState make_adamw_state(std::span<const ad::Tensor> params);

// One decoupled-weight-decay Adam update:
//   p <- p * (1 - lr * wd)
//   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
//   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
// Parameters that received no gradient this step are left untouched.
void adamw_step(std::span<ad::Tensor> params, AdamWState& state, const AdamWConfig& cfg);

}  // namespace sonoalign::optim
