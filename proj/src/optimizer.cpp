#include "sonoalign/optimizer.hpp"

#include <cmath>

#include "sonoalign/errors.hpp"

namespace sonoalign::optim {

AdamWState make_adamw_state(std::span<const ad::Tensor> params) {
  AdamWState s;
  for (const auto& p : params) {
    s.first.emplace_back(p.rows(), p.cols());
    s.second.emplace_back(p.rows(), p.cols());
  }
  return s;
}

void adamw_step(std::span<ad::Tensor> params, AdamWState& state, const AdamWConfig& cfg) {
  if (state.first.size() != params.size() || state.second.size() != params.size()) {
    throw DimensionError("adamw_step: optimizer state does not match the parameter list");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Matrix* grad = params[k].grad();
    if (grad == nullptr) continue;
    Matrix& value = params[k].mutable_value();
    Matrix& m = state.first[k];
    Matrix& v = state.second[k];
    if (!m.same_shape(value)) throw DimensionError("adamw_step: moment shape mismatch");
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = (*grad)[i];
      value[i] *= decay;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      value[i] -= cfg.lr * (m[i] / bias1) / (std::sqrt(v[i] / bias2) + cfg.eps);
    }
  }
}

}  // namespace sonoalign::optim
