#pragma once

// The partial-SGD loop: per step choose a mask p_t and perturbation dx_t,
// take a stochastic gradient g_t at x~_t = x_t + dx_t and update
// x_{t+1} = x_t - gamma_t p_t (.) g_t. Also the alternating core/super driver.

#include "psgd/criteria.hpp"
#include "psgd/errors.hpp"
#include "psgd/mask.hpp"
#include "psgd/mask_strategy.hpp"
#include "psgd/perturbation.hpp"
#include "psgd/problem.hpp"
#include "psgd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace psgd {

enum class AlphaMode { Theoretical, Constant };

inline const char* to_string(AlphaMode m) {
  return m == AlphaMode::Theoretical ? "theoretical" : "constant";
}

// min{1/(L(M+1)), eps/(2 L sigma^2)}; the second branch is dropped when
// sigma^2 = 0.
inline double gamma_base(double L, double M, double sigma2, double eps) {
  detail::require(L > 0.0, "L must be positive");
  detail::require(eps > 0.0, "epsilon must be positive");
  detail::require(M >= 0.0 && sigma2 >= 0.0, "noise constants must be nonnegative");
  const double smooth = 1.0 / (L * (M + 1.0));
  if (sigma2 == 0.0) return smooth;
  return std::min(smooth, eps / (2.0 * L * sigma2));
}

// min{1, <a, b> / ||b||^2} with a = p (.) grad f(x), b = p (.) grad f(x~).
// A vanishing b or a negative inner product gives 0, i.e. the step is skipped.
inline double alpha_from(const GradientGeometry& g) {
  if (g.masked_perturbed_norm == 0.0) return 0.0;
  if (g.perturbation_is_identity) return 1.0;
  const double ratio = g.inner / (g.masked_perturbed_norm * g.masked_perturbed_norm);
  return std::clamp(ratio, 0.0, 1.0);
}

inline double alpha_t(const Mask& p, const RealVector& grad_x, const RealVector& grad_xt) {
  return alpha_from(gradient_geometry(p, grad_x, grad_xt));
}

// c_norm * max{c_sim, c_align}. Undefined (nullopt) when a norm vanishes or
// the inner product is not positive, since then alpha_t = 0 and no finite q
// bounds ||grad f(x)|| / (alpha_t ||p (.) grad f(x~)||).
inline std::optional<double> q_from(const GradientGeometry& g) {
  if (g.masked_norm == 0.0 || g.masked_perturbed_norm == 0.0 || !(g.inner > 0.0)) return std::nullopt;
  const double c_norm = g.masking_is_identity ? 1.0 : g.grad_norm / g.masked_norm;
  const double c_sim = g.perturbation_is_identity ? 1.0 : g.masked_norm / g.masked_perturbed_norm;
  const double c_align =
      g.perturbation_is_identity ? 1.0 : g.masked_norm * g.masked_perturbed_norm / g.inner;
  return c_norm * std::max(c_sim, c_align);
}

inline std::optional<double> q_t(const Mask& p, const RealVector& grad_x, const RealVector& grad_xt) {
  return q_from(gradient_geometry(p, grad_x, grad_xt));
}

struct TrainConfig {
  double gamma_base = 0.1;
  AlphaMode alpha_mode = AlphaMode::Constant;
  double alpha_constant = 1.0;
  Index steps = 1;
  std::uint64_t seed = 0;
  // Trace norms from full gradients; otherwise from one minibatch estimate
  // shared by grad f(x) and grad f(x~). Theoretical alpha requires this.
  bool exact_gradients = true;
  bool evaluate_loss = true;
  bool keep_traces = true;  // otherwise only the summary survives the run

  void validate() const {
    detail::require(gamma_base > 0.0 && std::isfinite(gamma_base), "gamma_base must be positive");
    detail::require(steps >= 1, "number of steps must be at least 1");
    detail::require(alpha_constant > 0.0 && alpha_constant <= 1.0, "constant alpha must be in (0, 1]");
    detail::require(alpha_mode == AlphaMode::Constant || exact_gradients,
                    "theoretical alpha needs exact gradients");
  }
};

struct StepTrace {
  Index t = 0;
  std::string phase = "step";
  double alpha = 0.0;
  bool alpha_clamped = false;  // negative inner product forced alpha to 0
  double gamma = 0.0;
  std::optional<double> q;
  GradientGeometry geometry;
  CriteriaSnapshot criteria;
  Index mask_count = 0;
  double mask_density = 0.0;
  double delta_norm = 0.0;
  std::string perturbation = "none";
  std::optional<ProbeSign> probe_sign;
  bool exact = true;
  std::optional<double> loss_before;
  std::optional<double> loss_after;
  std::optional<double> descent_residual;
  std::optional<double> assumption3_ratio;
  std::optional<bool> assumption3_holds;
};

struct Summary {
  Index steps = 0;
  double mean_scaled_masked_sq = 0.0;  // (1/T) sum alpha_t^2 ||p_t (.) grad f(x~_t)||^2
  double mean_grad_sq = 0.0;           // (1/T) sum ||grad f(x_t)||^2
  std::optional<double> max_q;
  Index undefined_q = 0;
  Index undefined_c_norm = 0;
  Index undefined_c_sim = 0;
  Index undefined_c_align = 0;
  Index clamped_alpha = 0;
  Index assumption3_violations = 0;
  std::optional<double> final_loss;
  std::optional<double> final_grad_norm;
};

struct Trajectory {
  std::vector<StepTrace> steps;
  ParamVector final_point;
  Summary summary;
  std::map<std::string, Summary> phases;
  bool aborted = false;
  std::string abort_reason;
};

struct StepResult {
  ParamVector next;
  StepTrace trace;
};

// Called once per completed step with x_t (before the update) and its trace.
using StepObserver = std::function<void(const ParamVector&, const StepTrace&)>;

// Running version of the trajectory summary, so long runs need not keep
// every trace.
class SummaryAccumulator {
 public:
  void add(const StepTrace& tr) {
    ++s_.steps;
    const double b = tr.geometry.masked_perturbed_norm;
    scaled_ += tr.alpha * tr.alpha * b * b;
    full_ += tr.geometry.grad_norm * tr.geometry.grad_norm;
    if (tr.q) {
      s_.max_q = s_.max_q ? std::max(*s_.max_q, *tr.q) : *tr.q;
    } else {
      ++s_.undefined_q;
    }
    if (!tr.criteria.c_norm) ++s_.undefined_c_norm;
    if (!tr.criteria.c_sim) ++s_.undefined_c_sim;
    if (!tr.criteria.c_align) ++s_.undefined_c_align;
    if (tr.alpha_clamped) ++s_.clamped_alpha;
    if (tr.assumption3_holds && !*tr.assumption3_holds) ++s_.assumption3_violations;
    s_.final_loss = tr.loss_after;
  }

  Summary result() const {
    Summary out = s_;
    if (out.steps > 0) {
      out.mean_scaled_masked_sq = scaled_ / static_cast<double>(out.steps);
      out.mean_grad_sq = full_ / static_cast<double>(out.steps);
    }
    return out;
  }

 private:
  Summary s_;
  double scaled_ = 0.0;
  double full_ = 0.0;
};

inline Summary summarize(std::span<const StepTrace> steps) {
  SummaryAccumulator acc;
  for (const auto& s : steps) acc.add(s);
  return acc.result();
}

inline StepResult partial_sgd_step(const ParamVector& x, MaskStrategy& masks,
                                   const PerturbationStrategy& perturbation, const Problem& problem,
                                   const TrainConfig& cfg, Rng& rng, Index t,
                                   const std::string& phase = "step") {
  detail::require(x.size() == problem.dim(), "parameter dimension mismatch");
  if (!x.allFinite()) throw NumericError("non-finite iterate at step " + std::to_string(t));
  const bool theoretical = cfg.alpha_mode == AlphaMode::Theoretical;
  detail::require(!theoretical || cfg.exact_gradients, "theoretical alpha needs exact gradients");

  // One minibatch key shared by both estimates when exact gradients are off.
  const std::uint64_t probe_key = cfg.exact_gradients ? 0 : rng();
  auto measure = [&](const ParamVector& at) {
    ParamVector g = cfg.exact_gradients ? problem.gradient(at) : problem.sampled_gradient(at, probe_key);
    if (!g.allFinite()) throw NumericError("non-finite gradient at step " + std::to_string(t));
    return g;
  };

  const ParamVector grad_x = measure(x);
  const Mask p = masks.next(t, x.size(), &grad_x, rng);
  const Perturbed pert = perturb(perturbation, x, p, &grad_x);
  const bool moved = !bit_equal(pert.point, x);
  const ParamVector grad_xt = moved ? measure(pert.point) : grad_x;

  const ParamVector g = problem.stochastic_gradient(pert.point, rng);
  if (!g.allFinite()) throw NumericError("non-finite stochastic gradient at step " + std::to_string(t));

  StepTrace tr;
  tr.t = t;
  tr.phase = phase;
  tr.geometry = gradient_geometry(p, grad_x, grad_xt);
  tr.criteria = criteria_from(tr.geometry);
  tr.q = q_from(tr.geometry);
  tr.alpha = theoretical ? alpha_from(tr.geometry) : cfg.alpha_constant;
  tr.alpha_clamped = theoretical && tr.geometry.masked_perturbed_norm > 0.0 && tr.geometry.inner < 0.0;
  tr.gamma = tr.alpha * cfg.gamma_base;
  tr.mask_count = p.count();
  tr.mask_density = p.density();
  tr.delta_norm = pert.delta.norm();
  tr.perturbation = perturbation_name(perturbation);
  if (auto* eg = std::get_if<Extragradient>(&perturbation)) tr.probe_sign = eg->sign;
  tr.exact = cfg.exact_gradients;

  ParamVector next = x - tr.gamma * p.apply(g);
  if (!next.allFinite()) throw NumericError("non-finite update at step " + std::to_string(t));

  const auto L = problem.smoothness();
  if (cfg.evaluate_loss) {
    tr.loss_before = problem.loss(x);
    tr.loss_after = problem.loss(next);
    const auto noise = problem.noise();
    if (L && noise) {
      const double b = tr.geometry.masked_perturbed_norm;
      const double bound = *tr.loss_before - 0.5 * cfg.gamma_base * tr.alpha * tr.alpha * b * b +
                           0.5 * cfg.gamma_base * cfg.gamma_base * *L * noise->sigma2;
      tr.descent_residual = *tr.loss_after - bound;
    }
  }
  if (L && !std::holds_alternative<NoPerturbation>(perturbation)) {
    try {
      const auto a3 = check_assumption3(pert.delta, p, grad_x, grad_xt, *L);
      tr.assumption3_ratio = a3.ratio;
      tr.assumption3_holds = a3.holds;
    } catch (const DegenerateError&) {
    }
  }
  return {std::move(next), std::move(tr)};
}

namespace detail {

class RunRecorder {
 public:
  explicit RunRecorder(const TrainConfig& cfg) : keep_(cfg.keep_traces) {
    if (keep_) traj_.steps.reserve(static_cast<std::size_t>(cfg.steps));
  }

  void add(StepTrace tr) {
    all_.add(tr);
    phases_[tr.phase].add(tr);
    if (keep_) traj_.steps.push_back(std::move(tr));
  }

  Trajectory finish(ParamVector x, const Problem& problem, const TrainConfig& cfg, bool aborted,
                    std::string reason) && {
    traj_.final_point = std::move(x);
    traj_.aborted = aborted;
    traj_.abort_reason = std::move(reason);
    traj_.summary = all_.result();
    if (phases_.size() > 1) {
      for (const auto& [name, acc] : phases_) traj_.phases[name] = acc.result();
    }
    if (cfg.exact_gradients && traj_.final_point.allFinite()) {
      traj_.summary.final_grad_norm = problem.gradient(traj_.final_point).norm();
    }
    if (cfg.evaluate_loss && !aborted && traj_.final_point.allFinite()) {
      traj_.summary.final_loss = problem.loss(traj_.final_point);
    }
    return std::move(traj_);
  }

 private:
  bool keep_;
  Trajectory traj_;
  SummaryAccumulator all_;
  std::map<std::string, SummaryAccumulator> phases_;
};

}  // namespace detail

// Runs cfg.steps steps from x0. A non-finite value aborts the run; the
// trajectory up to the failing step is kept and flagged.
inline Trajectory run_partial_sgd(const Problem& problem, const ParamVector& x0, MaskStrategy masks,
                                  const PerturbationStrategy& perturbation, const TrainConfig& cfg,
                                  const StepObserver& observer = {}) {
  cfg.validate();
  Rng rng(cfg.seed);
  detail::RunRecorder rec(cfg);
  ParamVector x = x0;
  bool aborted = false;
  std::string reason;
  try {
    for (Index t = 0; t < cfg.steps; ++t) {
      auto step = partial_sgd_step(x, masks, perturbation, problem, cfg, rng, t);
      if (observer) observer(x, step.trace);
      rec.add(std::move(step.trace));
      x = std::move(step.next);
    }
  } catch (const NumericError& e) {
    aborted = true;
    reason = e.what();
  }
  return std::move(rec).finish(std::move(x), problem, cfg, aborted, std::move(reason));
}

// Alternating training: even steps update the whole network (p = 1, no
// perturbation); odd steps update the core (p = 1_core) with the gradient
// taken at 1_core (.) x.
inline Trajectory run_ats(const Problem& problem, const ParamVector& x0, const Mask& core,
                          const TrainConfig& cfg, const StepObserver& observer = {}) {
  cfg.validate();
  detail::require(core.dim() == problem.dim(), "core mask dimension mismatch");
  detail::require(!core.is_sentinel(), "core mask must not be empty");
  Rng rng(cfg.seed);
  MaskStrategy full = MaskStrategy::all_ones();
  MaskStrategy core_only = MaskStrategy::fixed(core);
  const PerturbationStrategy none = NoPerturbation{};
  const PerturbationStrategy zero = ZeroComplement{};
  detail::RunRecorder rec(cfg);
  ParamVector x = x0;
  bool aborted = false;
  std::string reason;
  try {
    for (Index t = 0; t < cfg.steps; ++t) {
      const bool even = t % 2 == 0;
      auto step = even ? partial_sgd_step(x, full, none, problem, cfg, rng, t, "full")
                       : partial_sgd_step(x, core_only, zero, problem, cfg, rng, t, "core");
      if (observer) observer(x, step.trace);
      rec.add(std::move(step.trace));
      x = std::move(step.next);
    }
  } catch (const NumericError& e) {
    aborted = true;
    reason = e.what();
  }
  return std::move(rec).finish(std::move(x), problem, cfg, aborted, std::move(reason));
}

}  // namespace psgd
