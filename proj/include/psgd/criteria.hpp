#pragma once

// Per-step convergence quantities: masking norm loss (c_norm), perturbation
// norm loss (c_sim) and alignment (c_align), plus the iteration bound that
// turns them into a step budget.

#include "psgd/errors.hpp"
#include "psgd/mask.hpp"
#include "psgd/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <optional>

namespace psgd {

// Raw norms of one (mask, grad f(x), grad f(x~)) triple.
struct GradientGeometry {
  double grad_norm = 0.0;             // ||grad f(x)||
  double masked_norm = 0.0;           // ||p (.) grad f(x)||
  double masked_perturbed_norm = 0.0; // ||p (.) grad f(x~)||
  double inner = 0.0;                 // <p (.) grad f(x), p (.) grad f(x~)>
  bool masking_is_identity = false;   // p (.) grad f(x) == grad f(x) bitwise
  bool perturbation_is_identity = false;  // p (.) grad f(x) == p (.) grad f(x~) bitwise
};

inline GradientGeometry gradient_geometry(const Mask& p, const RealVector& grad_x,
                                          const RealVector& grad_xt) {
  detail::require(grad_x.size() == p.dim() && grad_xt.size() == p.dim(),
                  "mask/gradient dimension mismatch");
  const RealVector a = p.apply(grad_x);
  const RealVector b = p.apply(grad_xt);
  GradientGeometry g;
  g.grad_norm = grad_x.norm();
  g.masked_norm = a.norm();
  g.masked_perturbed_norm = b.norm();
  g.inner = a.dot(b);
  g.masking_is_identity = bit_equal(a, grad_x);
  g.perturbation_is_identity = bit_equal(a, b);
  return g;
}

// Undefined ratios are std::nullopt rather than an exception so that long
// measurement runs never abort.
struct CriteriaSnapshot {
  std::optional<double> c_norm;
  std::optional<double> c_sim;
  std::optional<double> c_align;
};

inline CriteriaSnapshot criteria_from(const GradientGeometry& g) {
  CriteriaSnapshot s;
  if (g.masked_norm > 0.0) {
    s.c_norm = g.masking_is_identity ? 1.0 : g.grad_norm / g.masked_norm;
  }
  if (g.masked_perturbed_norm > 0.0) {
    s.c_sim = g.perturbation_is_identity ? 1.0 : g.masked_norm / g.masked_perturbed_norm;
  }
  if (g.inner != 0.0 && g.masked_norm > 0.0 && g.masked_perturbed_norm > 0.0) {
    s.c_align = g.perturbation_is_identity ? 1.0
                                           : g.masked_norm * g.masked_perturbed_norm / g.inner;
  }
  return s;
}

inline CriteriaSnapshot criteria_snapshot(const Mask& p, const RealVector& grad_x,
                                          const RealVector& grad_xt) {
  return criteria_from(gradient_geometry(p, grad_x, grad_xt));
}

// ceil(4 (sigma^2 / eps^2 + (M + 1) / eps) L F0); with q the target becomes
// eps / q^2.
inline std::int64_t theorem_bound_T(double L, double F0, double M, double sigma2, double eps,
                                    std::optional<double> q = std::nullopt) {
  detail::require(L > 0.0, "L must be positive");
  detail::require(F0 > 0.0, "F0 must be positive");
  detail::require(M >= 0.0 && sigma2 >= 0.0, "noise constants must be nonnegative");
  detail::require(eps > 0.0, "epsilon must be positive");
  double target = eps;
  if (q) {
    detail::require(*q > 0.0, "q must be positive");
    target = eps / (*q * *q);
  }
  const double v = 4.0 * (sigma2 / (target * target) + (M + 1.0) / target) * L * F0;
  detail::require(std::isfinite(v) && v < 9.0e18, "iteration bound overflows");
  return static_cast<std::int64_t>(std::ceil(v));
}

}  // namespace psgd
