#pragma once

#include "psgd/errors.hpp"
#include "psgd/mask.hpp"
#include "psgd/tensor.hpp"

#include <algorithm>
#include <string>
#include <variant>

namespace psgd {

// Direction of the extragradient probe. Ascent (+eta * grad) is the default;
// Descent is the classical extragradient look-ahead.
enum class ProbeSign { Ascent = 1, Descent = -1 };

inline const char* to_string(ProbeSign s) { return s == ProbeSign::Ascent ? "ascent" : "descent"; }

struct NoPerturbation {};
// dx = -(1 - p) (.) x, i.e. the gradient is taken on the masked subnetwork.
struct ZeroComplement {};
struct Extragradient {
  double eta;
  ProbeSign sign = ProbeSign::Ascent;
};

using PerturbationStrategy = std::variant<NoPerturbation, ZeroComplement, Extragradient>;

inline std::string perturbation_name(const PerturbationStrategy& s) {
  if (std::holds_alternative<NoPerturbation>(s)) return "none";
  if (std::holds_alternative<ZeroComplement>(s)) return "zero_complement";
  return "extragradient";
}

inline bool needs_gradient(const PerturbationStrategy& s) {
  return std::holds_alternative<Extragradient>(s);
}

struct Perturbed {
  ParamVector point;  // x~ = x + dx
  ParamVector delta;  // dx
};

inline Perturbed perturb(const PerturbationStrategy& s, const ParamVector& x, const Mask& p,
                         const ParamVector* grad_at_x) {
  detail::require(p.dim() == x.size(), "mask/parameter dimension mismatch");
  if (std::holds_alternative<NoPerturbation>(s)) {
    return {x, ParamVector::Zero(x.size())};
  }
  if (std::holds_alternative<ZeroComplement>(s)) {
    return {p.apply(x), -p.apply_complement(x)};
  }
  const auto& eg = std::get<Extragradient>(s);
  detail::require(eg.eta > 0.0, "extragradient step must be positive");
  if (grad_at_x == nullptr) throw ContractError("extragradient perturbation needs grad f(x)");
  detail::require(grad_at_x->size() == x.size(), "gradient dimension mismatch");
  ParamVector delta = (static_cast<double>(static_cast<int>(eg.sign)) * eg.eta) * *grad_at_x;
  ParamVector point = x + delta;
  return {std::move(point), std::move(delta)};
}

struct Assumption3Check {
  double ratio;
  bool holds;
};

// ratio = ||dx|| / max(||p (.) grad f(x)||, ||p (.) grad f(x~)||), holds iff
// ratio < 1 / (2L).
inline Assumption3Check check_assumption3(const RealVector& delta, const Mask& p,
                                          const RealVector& grad_x, const RealVector& grad_xt,
                                          double L) {
  detail::require(L > 0.0, "smoothness constant must be positive");
  const double denom = std::max(p.apply(grad_x).norm(), p.apply(grad_xt).norm());
  if (denom == 0.0) throw DegenerateError("both masked gradients vanish");
  const double ratio = delta.norm() / denom;
  return {ratio, ratio < 1.0 / (2.0 * L)};
}

}  // namespace psgd
