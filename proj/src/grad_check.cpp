#include "sonoalign/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "sonoalign/errors.hpp"

namespace sonoalign::ad {

namespace {

double evaluate(const std::function<Tensor()>& loss_fn) {
  const double v = loss_fn().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: loss evaluated to a non-finite value");
  return v;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::span<const NamedParam> params,
                           double step, double tol) {
  if (!(step > 0.0) || !(tol > 0.0)) throw ArgumentError("grad_check: step and tol must be positive");

  std::vector<Tensor> tensors;
  for (const auto& p : params) {
    tensors.push_back(p.tensor);
    tensors.back().zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: loss evaluated to a non-finite value");
    tape.backward(loss);
  }

  GradCheckReport report;
  report.passed = true;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& t = tensors[k];
    const Matrix* grad = t.grad();
    Matrix& value = t.mutable_value();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + step;
      const double up = evaluate(loss_fn);
      value[i] = saved - step;
      const double down = evaluate(loss_fn);
      value[i] = saved;

      GradCheckEntry e;
      e.param = params[k].name;
      e.index = i;
      e.analytic = grad ? (*grad)[i] : 0.0;
      e.numeric = (up - down) / (2.0 * step);
      e.rel_error = std::abs(e.analytic - e.numeric) /
                    std::max(1e-8, std::abs(e.analytic) + std::abs(e.numeric));
      if (report.entries.empty() || e.rel_error > report.max_rel_error) {
        report.max_rel_error = e.rel_error;
        report.worst = e;
      }
      if (e.rel_error > tol) report.passed = false;
      report.entries.push_back(std::move(e));
    }
  }
  return report;
}

}  // namespace sonoalign::ad
