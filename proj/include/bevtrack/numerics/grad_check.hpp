#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bevtrack/numerics/autodiff.hpp"

namespace bev {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool finite = true;
  bool passed = false;
  std::string diagnostic;
};

// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps central
// differences of vanishing gradients (roundoff ~ 1e-11) from dominating.
inline double grad_rel_error(double analytic, double numeric, double floor = 1e-5) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
  return std::fabs(analytic - numeric) / denom;
}

// Compares `analytic` against central differences of `eval` obtained by
// perturbing `values` in place (restored afterwards). `indices` selects which
// entries to probe; empty means all.
inline GradCheckReport grad_check_values(const std::function<double()>& eval, std::span<double> values,
                                         std::span<const double> analytic, double eps, double tol,
                                         const std::vector<std::size_t>& indices = {}, double floor = 1e-5) {
  GradCheckReport rep;
  auto probe = [&](std::size_t i) {
    const double orig = values[i];
    values[i] = orig + eps;
    const double fp = eval();
    values[i] = orig - eps;
    const double fm = eval();
    values[i] = orig;
    const double num = (fp - fm) / (2.0 * eps);
    ++rep.checked;
    if (!std::isfinite(num) || !std::isfinite(analytic[i])) {
      rep.finite = false;
      rep.diagnostic = "non-finite gradient at index " + std::to_string(i);
      return;
    }
    const double rel = grad_rel_error(analytic[i], num, floor);
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst_index = i;
    }
    rep.max_abs_error = std::max(rep.max_abs_error, std::fabs(analytic[i] - num));
  };
  if (indices.empty())
    for (std::size_t i = 0; i < values.size(); ++i) probe(i);
  else
    for (auto i : indices) probe(i);
  rep.passed = rep.finite && rep.max_rel_error < tol;
  if (rep.finite && !rep.passed)
    rep.diagnostic = "max rel. error " + std::to_string(rep.max_rel_error) + " at index " +
                     std::to_string(rep.worst_index);
  return rep;
}

using ScalarFn = std::function<ad::Var(ad::Tape&, const ad::Var&)>;

// Tape gradient of f at x vs. central differences, per element.
inline GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-6, double tol = 1e-5,
                                  const std::vector<std::size_t>& indices = {}, double floor = 1e-5) {
  std::vector<double> analytic;
  {
    ad::Tape tape;
    Tensor xt = x;
    xt.set_requires_grad(true);
    ad::Var xv = tape.leaf(xt);
    ad::Var y = f(tape, xv);
    if (!std::isfinite(y.item())) {
      GradCheckReport rep;
      rep.finite = false;
      rep.diagnostic = "non-finite function value";
      return rep;
    }
    tape.backward(y);
    analytic = tape.grad(xv).vec();
  }
  std::vector<double> values = x.vec();
  auto eval = [&]() {
    ad::Tape tape;
    ad::Var xv = tape.constant(x.shape(), values);
    return f(tape, xv).item();
  };
  return grad_check_values(eval, values, analytic, eps, tol, indices, floor);
}

}  // namespace bev
