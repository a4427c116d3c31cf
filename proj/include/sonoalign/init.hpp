#pragma once

#include <cmath>
#include <cstddef>

#include "sonoalign/matrix.hpp"
#include "sonoalign/rng.hpp"

namespace sonoalign {

// Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)), fan_in = rows.
inline Matrix glorot_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  const double s = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.uniform(-s, s);
  return m;
}

}  // namespace sonoalign
