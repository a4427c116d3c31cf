#pragma once

#include <string>
#include <vector>

#include "sonoalign/autodiff.hpp"
#include "sonoalign/dataset.hpp"
#include "sonoalign/grad_check.hpp"
#include "sonoalign/matrix.hpp"
#include "sonoalign/rng.hpp"

namespace testutil {

inline sonoalign::Matrix random_matrix(std::size_t r, std::size_t c, sonoalign::Rng& rng, double lo = -1.0,
                                       double hi = 1.0) {
  sonoalign::Matrix m(r, c);
  for (double& v : m.data()) v = rng.uniform(lo, hi);
  return m;
}

inline sonoalign::ad::Tensor random_param(std::size_t r, std::size_t c, sonoalign::Rng& rng) {
  return sonoalign::ad::Tensor::parameter(random_matrix(r, c, rng));
}

// sum(op(x) .* weights) so every output entry gets a distinct upstream gradient.
inline sonoalign::ad::Tensor weighted_sum(const sonoalign::ad::Tensor& y, const sonoalign::Matrix& w) {
  return sonoalign::ad::sum(sonoalign::ad::hadamard(y, sonoalign::ad::Tensor::constant(w)));
}

inline std::vector<sonoalign::dataset::SampleRecord> small_corpus(std::size_t n_cases, std::uint64_t seed = 7,
                                                                  double noise = 0.3) {
  sonoalign::dataset::SynthConfig cfg;
  cfg.n_cases = n_cases;
  cfg.images_min = 2;
  cfg.images_max = 3;
  cfg.seed = seed;
  cfg.noise_sigma = noise;
  return sonoalign::dataset::generate_synthetic(sonoalign::taxonomy::default_catalog(), cfg);
}

}  // namespace testutil
