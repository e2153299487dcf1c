#pragma once

// Property suites with fixed seeds. Each suite reports one line per property
// with the measured value next to its threshold; `psgd verify <suite>` and
// the acceptance binary both run these.

#include "psgd/criteria.hpp"
#include "psgd/graph.hpp"
#include "psgd/instrumentation.hpp"
#include "psgd/mask_strategy.hpp"
#include "psgd/model_zoo.hpp"
#include "psgd/optimizer.hpp"
#include "psgd/perturbation.hpp"
#include "psgd/problem.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace psgd::verify {

struct PropertyResult {
  std::string name;
  bool passed = false;
  double measured = 0.0;
  std::string relation;  // how measured compares with bound, e.g. "<" or ">="
  double bound = 0.0;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<PropertyResult> properties;
  double seconds = 0.0;

  bool passed() const {
    return std::all_of(properties.begin(), properties.end(), [](const auto& p) { return p.passed; });
  }
};

namespace detail {

inline bool holds(double measured, const std::string& rel, double bound) {
  if (rel == "<") return measured < bound;
  if (rel == "<=") return measured <= bound;
  if (rel == ">=") return measured >= bound;
  if (rel == ">") return measured > bound;
  if (rel == "==") return measured == bound;
  throw ContractError("unknown relation " + rel);
}

inline PropertyResult check(std::string name, double measured, std::string rel, double bound,
                            std::string detail = {}) {
  PropertyResult r{std::move(name), false, measured, std::move(rel), bound, std::move(detail)};
  r.passed = std::isfinite(measured) && holds(r.measured, r.relation, r.bound);
  return r;
}

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline RealVector gaussian(Index d, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  RealVector v(d);
  for (auto& x : v) x = n(rng);
  return v;
}

inline RealMatrix gaussian(Index r, Index c, Rng& rng) {
  std::normal_distribution<double> n;
  RealMatrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Mask bernoulli_mask(Index d, double keep, Rng& rng) {
  std::bernoulli_distribution coin(keep);
  std::uniform_int_distribution<Index> any(0, d - 1);
  RealVector v(d);
  for (auto& x : v) x = coin(rng) ? 1.0 : 0.0;
  if (v.sum() == 0.0) v[any(rng)] = 1.0;
  return Mask::from_values(std::move(v));
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

inline double median(std::vector<double> v) {
  psgd::detail::require(!v.empty(), "median of an empty sample");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Partial SGD with p = 1, no perturbation and alpha = 1 against a plain SGD
// loop drawing from the same stochastic oracle.
inline SuiteReport template_collapse(Index dim = 50, Index steps = 1000, std::uint64_t seed = 101) {
  detail::Timer timer;
  SuiteReport rep{"template", {}, 0.0};
  const auto q = make_quadratic({.dim = dim, .condition = 10.0, .seed = seed, .offset = true,
                                 .noise = AdditiveNoise{1.0}});
  Rng x0_rng(seed + 1);
  const RealVector x0 = detail::gaussian(dim, x0_rng);
  TrainConfig cfg;
  cfg.gamma_base = 0.05;
  cfg.steps = steps;
  cfg.seed = seed;
  cfg.evaluate_loss = false;
  cfg.exact_gradients = true;
  const auto traj = run_partial_sgd(q, x0, MaskStrategy::all_ones(), NoPerturbation{}, cfg);

  Rng rng(seed);
  RealVector x = x0;
  double max_step_diff = 0.0;
  for (Index t = 0; t < steps; ++t) {
    x = x - cfg.gamma_base * q.sampled_gradient(x, rng());
  }
  max_step_diff = (traj.final_point - x).cwiseAbs().maxCoeff();
  rep.properties.push_back(detail::check("final iterate bit-identical to reference SGD",
                                         bit_equal(traj.final_point, x) ? 0.0 : 1.0, "==", 0.0,
                                         "max |diff| = " + detail::fmt(max_step_diff)));
  rep.properties.push_back(detail::check("steps run", static_cast<double>(traj.steps.size()), "==",
                                         static_cast<double>(steps)));
  rep.seconds = timer.seconds();
  return rep;
}

// Reverse mode against central differences. With `zoo` the networks cycle
// through dense, LFC, low-rank and wide-and-deep graphs with one or two hidden
// layers; otherwise they are dense networks with one hidden layer.
inline SuiteReport gradient_check(int networks = 100, bool zoo = true, std::uint64_t seed = 202) {
  detail::Timer timer;
  SuiteReport rep{"gradient", {}, 0.0};
  Rng rng(seed);
  auto uni = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  double worst = 0.0, worst_abs = 0.0, smallest_failing = std::numeric_limits<double>::infinity();
  Index max_dim = 0, failing_coords = 0;
  int built = 0, failing_nets = 0;
  while (built < networks) {
    const Index in = uni(2, 10), out = uni(1, 5);
    std::vector<Index> widths{in};
    const Index hidden_layers = zoo ? uni(1, 2) : 1;
    for (Index h = 0; h < hidden_layers; ++h) widths.push_back(uni(2, zoo ? 20 : 80));
    widths.push_back(out);
    const Activation act = uni(0, 1) == 0 ? Activation::Tanh : Activation::Relu;
    const LossKind loss = uni(0, 1) == 0 ? LossKind::MeanSquared : LossKind::SoftmaxCrossEntropy;
    const std::uint64_t s = rng();
    Network net;
    switch (zoo ? built % 4 : 0) {
      case 0: net = build_mlp({widths, act, loss, s}); break;
      case 1: net = build_lfc_composite({widths, 0.5, act, loss, s}).super; break;
      case 2: net = build_low_rank_mlp({widths, 0.5, act, loss, s}); break;
      default: net = build_wide_deep({widths, act, loss, s}).super; break;
    }
    if (net.dim() > 1000) continue;
    ++built;
    max_dim = std::max(max_dim, net.dim());
    const Index n = uni(1, 8);
    const RealMatrix X = detail::gaussian(in, n, rng);
    RealMatrix T;
    if (loss == LossKind::SoftmaxCrossEntropy) {
      T = RealMatrix::Zero(out, n);
      for (Index j = 0; j < n; ++j) T(uni(0, out - 1), j) = 1.0;
    } else {
      T = detail::gaussian(out, n, rng);
    }
    const ParamVector g = gradient(net.graph, net.params, X, T);
    const ParamVector fd = finite_diff_gradient(
        [&](const ParamVector& p) { return forward(net.graph, p, X, T); }, net.params, 1e-5);
    const double e = max_relative_error(g, fd);
    worst = std::max(worst, e);
    worst_abs = std::max(worst_abs, (g - fd).cwiseAbs().maxCoeff());
    if (e >= 1e-6) ++failing_nets;
    for (Index i = 0; i < g.size(); ++i) {
      const double denom = std::max({std::abs(g[i]), std::abs(fd[i]), 1e-8});
      if (std::abs(g[i] - fd[i]) / denom >= 1e-6) {
        ++failing_coords;
        smallest_failing = std::min(smallest_failing, std::abs(g[i]));
      }
    }
  }
  std::string detail = std::to_string(networks) + " networks, largest d = " + std::to_string(max_dim) +
                       ", max abs error " + detail::fmt(worst_abs);
  if (failing_nets > 0) {
    detail += ", " + std::to_string(failing_nets) + " networks / " + std::to_string(failing_coords) +
              " coordinates over, smallest such |g| " + detail::fmt(smallest_failing);
  }
  rep.properties.push_back(detail::check("max relative error vs finite differences", worst, "<", 1e-6, detail));
  rep.properties.push_back(detail::check("max absolute error vs finite differences", worst_abs, "<=", 1e-8));
  rep.seconds = timer.seconds();
  return rep;
}

struct BoundedPerturbationStats {
  Index accepted = 0;
  Index attempts = 0;
  double max_c_sim = 0.0;
  double max_c_align = 0.0;
  Index non_positive_inner = 0;
  std::array<Index, 3> accepted_by_kind{};
  std::array<double, 3> max_c_sim_by_kind{};
};

// Random (quadratic, mask, perturbation) instances that pass the bounded
// perturbation check, built from isotropic random perturbations, ascent
// extragradient probes and zeroed complements in turn. `perturbed_premise`
// switches the filter to ||dx|| < ||p (.) grad f(x~)|| / (2L).
inline BoundedPerturbationStats bounded_perturbation_instances(Index instances, std::uint64_t seed,
                                                               bool perturbed_premise) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<Index> dim(1, 12);
  BoundedPerturbationStats st;
  const Index max_attempts = 400 * instances;
  while (st.accepted < instances && st.attempts < max_attempts) {
    const int kind = static_cast<int>(st.attempts % 3);
    ++st.attempts;
    const Index d = dim(rng);
    const double kappa = std::exp(u(rng) * std::log(100.0));
    const auto q = make_quadratic({.dim = d, .condition = kappa, .seed = rng(), .offset = true});
    const double L = *q.smoothness();
    const RealVector x = q.minimizer() + detail::gaussian(d, rng, std::exp(u(rng) * std::log(1000.0)) / 100.0);
    const Mask p = detail::bernoulli_mask(d, 0.3 + 0.7 * u(rng), rng);
    const RealVector gx = q.gradient(x);
    RealVector delta;
    if (kind == 0) {
      const RealVector dir = detail::gaussian(d, rng);
      delta = (1.5 * u(rng) * p.apply(gx).norm() / (2.0 * L)) * dir / dir.norm();
    } else if (kind == 1) {
      delta = perturb(Extragradient{u(rng) / (2.0 * L)}, x, p, &gx).delta;
    } else {
      delta = perturb(ZeroComplement{}, x, p, &gx).delta;
    }
    const RealVector gxt = q.gradient(x + delta);
    bool ok = false;
    if (perturbed_premise) {
      const double b = p.apply(gxt).norm();
      ok = b > 0.0 && delta.norm() < b / (2.0 * L);
    } else {
      try {
        ok = check_assumption3(delta, p, gx, gxt, L).holds;
      } catch (const DegenerateError&) {
        ok = false;
      }
    }
    if (!ok) continue;
    ++st.accepted;
    ++st.accepted_by_kind[static_cast<std::size_t>(kind)];
    const auto g = gradient_geometry(p, gx, gxt);
    const auto c = criteria_from(g);
    const double sim = c.c_sim ? *c.c_sim : std::numeric_limits<double>::infinity();
    double align = std::numeric_limits<double>::infinity();
    if (g.inner > 0.0 && c.c_align) align = *c.c_align;
    else ++st.non_positive_inner;
    st.max_c_sim = std::max(st.max_c_sim, sim);
    st.max_c_align = std::max(st.max_c_align, align);
    auto& k = st.max_c_sim_by_kind[static_cast<std::size_t>(kind)];
    k = std::max(k, sim);
  }
  return st;
}

inline SuiteReport bounded_perturbation(Index instances = 1000, std::uint64_t seed = 303,
                                        bool with_perturbed_premise = true) {
  detail::Timer timer;
  SuiteReport rep{"lemma1", {}, 0.0};
  const double sim_bound = std::sqrt(10.0) / 2.0 + 1e-9, align_bound = std::sqrt(10.0) + 1e-9;
  const auto st = bounded_perturbation_instances(instances, seed, false);
  std::string mix = "accepted " + std::to_string(st.accepted) + " of " + std::to_string(st.attempts) +
                    " (random " + std::to_string(st.accepted_by_kind[0]) + ", extragradient " +
                    std::to_string(st.accepted_by_kind[1]) + ", zero-complement " +
                    std::to_string(st.accepted_by_kind[2]) + ")";
  rep.properties.push_back(detail::check("instances passing the perturbation check",
                                         static_cast<double>(st.accepted), ">=",
                                         static_cast<double>(instances), mix));
  rep.properties.push_back(detail::check(
      "max c_sim", st.max_c_sim, "<=", sim_bound,
      "per kind: random " + detail::fmt(st.max_c_sim_by_kind[0]) + ", extragradient " +
          detail::fmt(st.max_c_sim_by_kind[1]) + ", zero-complement " + detail::fmt(st.max_c_sim_by_kind[2])));
  rep.properties.push_back(detail::check("max c_align", st.max_c_align, "<=", align_bound,
                                         std::to_string(st.non_positive_inner) + " non-positive inner products"));
  if (!with_perturbed_premise) {
    rep.seconds = timer.seconds();
    return rep;
  }
  const auto strict = bounded_perturbation_instances(instances, seed + 1, true);
  rep.properties.push_back(detail::check("max c_sim with ||dx|| < ||p (.) grad f(x~)|| / 2L",
                                         strict.max_c_sim, "<=", sim_bound));
  rep.properties.push_back(detail::check("max c_align with ||dx|| < ||p (.) grad f(x~)|| / 2L",
                                         strict.max_c_align, "<=", align_bound));
  rep.seconds = timer.seconds();
  return rep;
}

// Mean of f(x_{t+1}) over independent noise draws against
// f(x_t) - gamma/2 alpha^2 ||p (.) grad f(x~)||^2 + gamma^2 L sigma^2 / 2.
inline SuiteReport descent(Index draws = 20000, std::uint64_t seed = 404) {
  detail::Timer timer;
  SuiteReport rep{"descent", {}, 0.0};
  Rng rng(seed);
  const auto q = make_quadratic({.dim = 10, .condition = 10.0, .seed = rng(), .offset = true,
                                 .noise = AdditiveNoise{1.0}});
  const double L = *q.smoothness();
  TrainConfig cfg;
  cfg.gamma_base = gamma_base(L, 0.0, 1.0, 0.1);
  cfg.alpha_mode = AlphaMode::Theoretical;
  const Mask fixed = detail::bernoulli_mask(10, 0.6, rng);
  const RealVector dir = detail::gaussian(10, rng).normalized();
  struct Case {
    double radius;
    Mask mask;
    PerturbationStrategy pert;
    std::string label;
  };
  const std::vector<Case> cases{
      {3.0, Mask::ones(10), NoPerturbation{}, "r=3 full mask"},
      {1.0, fixed, NoPerturbation{}, "r=1 fixed mask"},
      {0.3, fixed, ZeroComplement{}, "r=0.3 fixed mask, zeroed complement"},
      {0.05, Mask::ones(10), Extragradient{0.4 / L}, "r=0.05 extragradient"},
      {1e-3, fixed, NoPerturbation{}, "r=0.001 fixed mask (near optimum)"},
  };
  for (const auto& c : cases) {
    const RealVector x = q.minimizer() + c.radius * dir;
    auto masks = MaskStrategy::fixed(c.mask);
    double sum = 0.0, sq = 0.0, bound = 0.0;
    for (Index i = 0; i < draws; ++i) {
      const auto r = partial_sgd_step(x, masks, c.pert, q, cfg, rng, 0);
      const double f = *r.trace.loss_after;
      sum += f;
      sq += f * f;
      bound = f - *r.trace.descent_residual;
    }
    const double n = static_cast<double>(draws);
    const double mean = sum / n;
    const double se = std::sqrt(std::max(0.0, sq / n - mean * mean) / (n - 1.0));
    const double z = se > 0.0 ? (mean - bound) / se : (mean <= bound ? -1.0 : 1e300);
    rep.properties.push_back(detail::check("excess over bound in standard errors, " + c.label, z, "<=", 3.0,
                                           "mean " + detail::fmt(mean) + ", bound " + detail::fmt(bound) +
                                               ", se " + detail::fmt(se)));
  }
  rep.seconds = timer.seconds();
  return rep;
}

struct TheoremSetup {
  double epsilon = 0.1;
  double sigma2 = 1.0;
  Index dim = 20;
  double condition = 10.0;
  double keep = 0.7;
  int seeds = 20;
  int required = 18;
  std::uint64_t seed = 505;
};

struct TheoremRun {
  double F0 = 0.0;
  std::int64_t T = 0;
  double first_quantity = 0.0;  // (1/T) sum alpha^2 ||p (.) grad f(x~)||^2
  std::optional<double> q;
  std::int64_t T_q = 0;
  double second_quantity = 0.0;  // (1/T') sum ||grad f(x_t)||^2
  std::optional<double> q_rerun;
  bool aborted = false;
};

// One seed of the iteration-bound experiment: a quadratic with additive
// noise, three random fixed masks used in turn, theoretical stepsizes.
inline TheoremRun theorem_run(const TheoremSetup& s, int index, bool second) {
  Rng rng(s.seed + static_cast<std::uint64_t>(index));
  const auto q = make_quadratic({.dim = s.dim, .condition = s.condition, .seed = rng(), .offset = true,
                                 .noise = AdditiveNoise{s.sigma2}});
  const double L = *q.smoothness();
  const RealVector x0 = q.minimizer() + detail::gaussian(s.dim, rng);
  std::vector<Mask> set;
  for (int i = 0; i < 3; ++i) set.push_back(detail::bernoulli_mask(s.dim, s.keep, rng));
  const std::uint64_t run_seed = rng();

  TheoremRun out;
  out.F0 = q.loss(x0) - *q.optimum_value();
  out.T = theorem_bound_T(L, out.F0, 0.0, s.sigma2, s.epsilon);
  TrainConfig cfg;
  cfg.gamma_base = gamma_base(L, 0.0, s.sigma2, s.epsilon);
  cfg.alpha_mode = AlphaMode::Theoretical;
  cfg.steps = out.T;
  cfg.seed = run_seed;
  cfg.evaluate_loss = false;
  cfg.keep_traces = false;
  const auto first = run_partial_sgd(q, x0, MaskStrategy::alternating(set), NoPerturbation{}, cfg);
  out.first_quantity = first.summary.mean_scaled_masked_sq;
  out.q = first.summary.max_q;
  out.aborted = first.aborted;
  if (!second || !out.q) return out;

  const double target = s.epsilon / (*out.q * *out.q);
  out.T_q = theorem_bound_T(L, out.F0, 0.0, s.sigma2, s.epsilon, out.q);
  cfg.gamma_base = gamma_base(L, 0.0, s.sigma2, target);
  cfg.steps = out.T_q;
  const auto rerun = run_partial_sgd(q, x0, MaskStrategy::alternating(set), NoPerturbation{}, cfg);
  out.second_quantity = rerun.summary.mean_grad_sq;
  out.q_rerun = rerun.summary.max_q;
  out.aborted = out.aborted || rerun.aborted;
  return out;
}

inline SuiteReport theorem_first(const TheoremSetup& s = {}) {
  detail::Timer timer;
  SuiteReport rep{"theorem1-first", {}, 0.0};
  int pass = 0;
  std::vector<double> values;
  std::int64_t max_T = 0;
  for (int i = 0; i < s.seeds; ++i) {
    const auto r = theorem_run(s, i, false);
    values.push_back(r.first_quantity);
    max_T = std::max(max_T, r.T);
    if (!r.aborted && r.first_quantity < s.epsilon) ++pass;
  }
  rep.properties.push_back(detail::check("seeds with mean alpha^2 ||p (.) grad f(x~)||^2 < eps", pass, ">=",
                                         s.required, "largest T = " + std::to_string(max_T)));
  rep.properties.push_back(detail::check("median over seeds", detail::median(values), "<", s.epsilon));
  rep.seconds = timer.seconds();
  return rep;
}

inline SuiteReport theorem_second(const TheoremSetup& s = {}) {
  detail::Timer timer;
  SuiteReport rep{"theorem1-second", {}, 0.0};
  int pass = 0;
  std::vector<double> values;
  double max_q = 0.0, max_q_rerun = 0.0;
  std::int64_t max_T = 0;
  for (int i = 0; i < s.seeds; ++i) {
    const auto r = theorem_run(s, i, true);
    const double v = r.q ? r.second_quantity : std::numeric_limits<double>::infinity();
    values.push_back(v);
    if (r.q) max_q = std::max(max_q, *r.q);
    if (r.q_rerun) max_q_rerun = std::max(max_q_rerun, *r.q_rerun);
    max_T = std::max(max_T, r.T_q);
    if (!r.aborted && v < s.epsilon) ++pass;
  }
  rep.properties.push_back(detail::check("seeds with mean ||grad f(x_t)||^2 < eps", pass, ">=", s.required,
                                         "max q " + detail::fmt(max_q) + " (rerun " + detail::fmt(max_q_rerun) +
                                             "), largest T' = " + std::to_string(max_T)));
  rep.properties.push_back(detail::check("median over seeds", detail::median(values), "<", s.epsilon));
  rep.seconds = timer.seconds();
  return rep;
}

inline SuiteReport theorem(const TheoremSetup& s = {}) {
  detail::Timer timer;
  SuiteReport rep{"theorem1", {}, 0.0};
  for (auto part : {theorem_first(s), theorem_second(s)}) {
    for (auto& p : part.properties) {
      p.name = (part.suite == "theorem1-first" ? "first bound: " : "second bound: ") + p.name;
      rep.properties.push_back(std::move(p));
    }
  }
  rep.seconds = timer.seconds();
  return rep;
}

// ||g||^2 / ||topk(g) (.) g||^2 <= d / k.
inline SuiteReport meprop(int vectors = 10000, std::uint64_t seed = 606) {
  detail::Timer timer;
  SuiteReport rep{"meprop", {}, 0.0};
  Rng rng(seed);
  std::uniform_int_distribution<Index> quarter(1, 32);
  double worst = 0.0;  // max of ratio / (d / k)
  int violations = 0;
  for (int i = 0; i < vectors; ++i) {
    const Index d = 4 * quarter(rng);
    const RealVector g = detail::gaussian(d, rng);
    for (Index k : {Index{1}, d / 4, d / 2, d}) {
      const double ratio = g.squaredNorm() / top_k_mask(g, k).apply(g).squaredNorm();
      const double limit = static_cast<double>(d) / static_cast<double>(k);
      if (!(ratio <= limit)) ++violations;
      worst = std::max(worst, ratio / limit);
    }
  }
  rep.properties.push_back(detail::check("vectors violating the d/k bound", violations, "==", 0.0,
                                         "max ratio / (d/k) = " + detail::fmt(worst)));
  rep.seconds = timer.seconds();
  return rep;
}

// Per-weight Bernoulli(mu) masks: mean of ||p (.) g||^2 against mu ||g||^2.
inline SuiteReport dropout(int masks = 100000, std::uint64_t seed = 707) {
  detail::Timer timer;
  SuiteReport rep{"dropout", {}, 0.0};
  Rng rng(seed);
  const Index d = 100;
  const RealVector g = detail::gaussian(d, rng);
  for (double mu : {0.3, 0.5, 0.9}) {
    auto s = MaskStrategy::dropout(mu);
    double sum = 0.0, ratio = 0.0;
    for (int i = 0; i < masks; ++i) {
      const double m = next_mask(s, i, d, nullptr, rng).apply(g).squaredNorm();
      sum += m;
      ratio += g.squaredNorm() / m;
    }
    const double rel = std::abs(sum / masks / (mu * g.squaredNorm()) - 1.0);
    rep.properties.push_back(detail::check("relative error of E||p (.) g||^2, mu = " + detail::fmt(mu), rel, "<",
                                           0.01,
                                           "mean ||g||^2/||p (.) g||^2 = " + detail::fmt(ratio / masks) +
                                               " vs 1/mu = " + detail::fmt(1.0 / mu)));
  }
  rep.seconds = timer.seconds();
  return rep;
}

// Ascent extragradient with eta = 0.4 / L keeps every visited iterate inside
// the bounded perturbation condition.
inline SuiteReport extragradient(int seeds = 10, Index steps = 500, std::uint64_t seed = 808) {
  detail::Timer timer;
  SuiteReport rep{"extragradient", {}, 0.0};
  Index checked = 0, violations = 0, degenerate = 0;
  double max_ratio_L = 0.0, max_sim = 0.0, max_align = 0.0;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(seed + static_cast<std::uint64_t>(s));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto q = make_quadratic({.dim = 20, .condition = 1.0 + 99.0 * u(rng), .seed = rng(), .L = 0.5 + 2.0 * u(rng),
                                   .offset = true, .noise = AdditiveNoise{0.01}});
    const double L = *q.smoothness();
    TrainConfig cfg;
    cfg.gamma_base = 0.5 / L;
    cfg.steps = steps;
    cfg.seed = rng();
    cfg.evaluate_loss = false;
    const RealVector x0 = q.minimizer() + detail::gaussian(20, rng, 3.0);
    const auto traj = run_partial_sgd(q, x0, MaskStrategy::all_ones(), Extragradient{0.4 / L}, cfg);
    for (const auto& t : traj.steps) {
      if (!t.assumption3_holds) {
        ++degenerate;
        continue;
      }
      ++checked;
      if (!*t.assumption3_holds) ++violations;
      max_ratio_L = std::max(max_ratio_L, *t.assumption3_ratio * L);
      if (t.criteria.c_sim) max_sim = std::max(max_sim, *t.criteria.c_sim);
      if (t.criteria.c_align) max_align = std::max(max_align, *t.criteria.c_align);
    }
  }
  rep.properties.push_back(detail::check("iterates violating the perturbation bound", violations, "==", 0.0,
                                         std::to_string(checked) + " checked, " + std::to_string(degenerate) +
                                             " degenerate, max ratio * L = " + detail::fmt(max_ratio_L)));
  rep.properties.push_back(detail::check("iterates checked", checked, "==", seeds * steps));
  rep.properties.push_back(detail::check("max c_sim along the runs", max_sim, "<=", std::sqrt(10.0) / 2.0 + 1e-9));
  rep.properties.push_back(detail::check("max c_align along the runs", max_align, "<=", std::sqrt(10.0) + 1e-9));
  rep.seconds = timer.seconds();
  return rep;
}

// k workers train disjoint neuron partitions for s local steps from a common
// start and merge, against the interleaved single-process mask sequence.
inline double interleave_gap(Index k, Index local_steps, Index rounds, std::uint64_t seed) {
  const auto data = make_blobs({.samples = 120, .features = 4, .classes = 3, .seed = seed});
  const auto net = build_mlp({{4, 8, 8, 3}, Activation::Tanh, LossKind::SoftmaxCrossEntropy, seed});
  const NetworkProblem prob(net.graph, data.train, data.train.size());
  const auto inc = neuron_incidence(net);
  Rng part_rng(seed ^ 0xabcdefULL);
  std::vector<std::vector<Mask>> partitions;
  for (Index r = 0; r < rounds; ++r) partitions.push_back(partition_disjoint(inc, k, part_rng));
  const double gamma = 0.5;

  ParamVector x = net.params;
  for (const auto& masks : partitions) {
    ParamVector merged = x;
    for (const auto& p : masks) {
      ParamVector local = x;
      for (Index s = 0; s < local_steps; ++s) {
        const ParamVector g = prob.gradient(p.apply(local));
        local = local - gamma * p.apply(g);
      }
      for (Index i : p.indices()) merged[i] = local[i];
    }
    x = merged;
  }

  std::vector<Mask> sequence;
  for (const auto& masks : partitions) {
    for (Index s = 0; s < local_steps; ++s) {
      for (const auto& p : masks) sequence.push_back(p);
    }
  }
  TrainConfig cfg;
  cfg.gamma_base = gamma;
  cfg.steps = static_cast<Index>(sequence.size());
  cfg.seed = seed;
  cfg.evaluate_loss = false;
  cfg.keep_traces = false;
  const auto traj = run_partial_sgd(prob, net.params, MaskStrategy::alternating(sequence), ZeroComplement{}, cfg);
  return (traj.final_point - x).cwiseAbs().maxCoeff();
}

inline SuiteReport interleave(std::uint64_t seed = 909) {
  detail::Timer timer;
  SuiteReport rep{"interleave", {}, 0.0};
  for (Index k : {2, 4}) {
    for (Index s : {1, 5}) {
      const double gap = interleave_gap(k, s, 3, seed + static_cast<std::uint64_t>(10 * k + s));
      rep.properties.push_back(detail::check(
          "max |parallel - interleaved|, k = " + std::to_string(k) + ", s = " + std::to_string(s), gap, "<=", 1e-12));
    }
  }
  rep.seconds = timer.seconds();
  return rep;
}

inline SuiteReport collapse(int shapes = 100, std::uint64_t seed = 1010) {
  detail::Timer timer;
  SuiteReport rep{"collapse", {}, 0.0};
  Rng rng(seed);
  std::uniform_int_distribution<Index> size(1, 64), batch(1, 16);
  std::uniform_real_distribution<double> ratio(0.01, 1.0);
  double worst_layer = 0.0;
  for (int i = 0; i < shapes; ++i) {
    const LfcLayerSpec spec(size(rng), size(rng), ratio(rng));
    const RealMatrix U = detail::gaussian(spec.k(), spec.f_in, rng);
    const RealMatrix V = detail::gaussian(spec.f_out, spec.k(), rng);
    const RealMatrix W = detail::gaussian(spec.f_out, spec.f_in, rng);
    const RealMatrix X = detail::gaussian(spec.f_in, batch(rng), rng);
    const RealMatrix diff = collapse_lfc(U, V, W) * X - lfc_forward(U, V, W, X);
    worst_layer = std::max(worst_layer, diff.cwiseAbs().maxCoeff());
  }
  rep.properties.push_back(detail::check("max |collapsed - LFC| per entry, " + std::to_string(shapes) + " shapes",
                                         worst_layer, "<=", 1e-12));
  double worst_net = 0.0;
  std::uniform_int_distribution<Index> width(2, 24), depth(1, 3);
  for (int i = 0; i < 20; ++i) {
    std::vector<Index> widths{width(rng)};
    const Index h = depth(rng);
    for (Index j = 0; j < h; ++j) widths.push_back(width(rng));
    widths.push_back(width(rng));
    const auto c = build_lfc_composite({widths, ratio(rng), Activation::Tanh, LossKind::MeanSquared, rng()});
    const auto dense = collapse_network(c.super);
    const RealMatrix X = detail::gaussian(widths.front(), 32, rng);
    const RealMatrix diff = predict(dense.graph, dense.params, X) - predict(c.super.graph, c.super.params, X);
    worst_net = std::max(worst_net, diff.cwiseAbs().maxCoeff());
  }
  rep.properties.push_back(detail::check("max |collapsed network - composite| output", worst_net, "<=", 1e-10));
  rep.seconds = timer.seconds();
  return rep;
}

struct AtsSetup {
  int seeds = 5;
  Index steps = 3000;
  Index hidden = 32;
  double core_ratio = 0.5;
  Index batch = 32;
  double gamma = 0.1;
  double separation = 1.0;
  double spread = 1.0;
  double tolerance = 1.2;
  std::uint64_t seed = 1111;
};

struct AtsOutcome {
  double ats_core = 0.0;
  double solo_core = 0.0;
  double ats_full = 0.0;
  double solo_full = 0.0;
};

// Validation losses of one seed: ATS-trained network and its extracted core
// against a solo-trained full network and a solo-trained core.
inline AtsOutcome ats_run(const AtsSetup& s, int index) {
  const std::uint64_t seed = s.seed + static_cast<std::uint64_t>(index);
  const auto data = make_blobs({.samples = 2000, .features = 10, .classes = 3, .separation = s.separation,
                                .spread = s.spread, .seed = seed});
  Network net = build_mlp({{10, s.hidden, 3}, Activation::Tanh, LossKind::SoftmaxCrossEntropy, seed + 7});
  const NetworkProblem prob(net.graph, data.train, s.batch);
  TrainConfig cfg;
  cfg.gamma_base = s.gamma;
  cfg.steps = s.steps;
  cfg.seed = seed + 13;
  cfg.exact_gradients = false;
  cfg.evaluate_loss = false;
  cfg.keep_traces = false;

  AtsOutcome out;
  const auto ats = run_ats(prob, net.params, slim_width_mask(net, s.core_ratio), cfg);
  Network trained = net;
  trained.params = ats.final_point;
  out.ats_full = dataset_loss(net.graph, ats.final_point, data.validation);
  const auto extracted = slim_core(trained, s.core_ratio);
  out.ats_core = dataset_loss(extracted.graph, extracted.params, data.validation);

  const auto solo = run_partial_sgd(prob, net.params, MaskStrategy::all_ones(), NoPerturbation{}, cfg);
  out.solo_full = dataset_loss(net.graph, solo.final_point, data.validation);
  const auto core0 = slim_core(net, s.core_ratio);
  const NetworkProblem core_prob(core0.graph, data.train, s.batch);
  const auto solo_core = run_partial_sgd(core_prob, core0.params, MaskStrategy::all_ones(), NoPerturbation{}, cfg);
  out.solo_core = dataset_loss(core0.graph, solo_core.final_point, data.validation);
  return out;
}

inline SuiteReport ats(const AtsSetup& s = {}) {
  detail::Timer timer;
  SuiteReport rep{"ats", {}, 0.0};
  std::vector<double> ac, sc, af, sf;
  for (int i = 0; i < s.seeds; ++i) {
    const auto r = ats_run(s, i);
    ac.push_back(r.ats_core);
    sc.push_back(r.solo_core);
    af.push_back(r.ats_full);
    sf.push_back(r.solo_full);
  }
  const double core_ratio = detail::median(ac) / detail::median(sc);
  const double full_ratio = detail::median(af) / detail::median(sf);
  rep.properties.push_back(detail::check("median core validation loss, ATS / solo", core_ratio, "<=", s.tolerance,
                                         detail::fmt(detail::median(ac)) + " vs " + detail::fmt(detail::median(sc))));
  rep.properties.push_back(detail::check("median full validation loss, ATS / solo", full_ratio, "<=", s.tolerance,
                                         detail::fmt(detail::median(af)) + " vs " + detail::fmt(detail::median(sf))));
  rep.seconds = timer.seconds();
  return rep;
}

// q_t alpha_t ||p (.) grad f(x~)|| = ||grad f(x)|| on random triples with a
// positive inner product.
inline SuiteReport identity(int triples = 10000, std::uint64_t seed = 1212) {
  detail::Timer timer;
  SuiteReport rep{"identity", {}, 0.0};
  Rng rng(seed);
  std::uniform_int_distribution<Index> dim(2, 50);
  std::uniform_real_distribution<double> u(0.0, 2.0), keep(0.2, 1.0);
  double worst = 0.0, worst_q = 0.0;
  int done = 0;
  while (done < triples) {
    const Index d = dim(rng);
    const RealVector gx = detail::gaussian(d, rng);
    const RealVector gxt = gx + u(rng) * detail::gaussian(d, rng);
    const Mask p = detail::bernoulli_mask(d, keep(rng), rng);
    const auto g = gradient_geometry(p, gx, gxt);
    if (!(g.inner > 0.0)) continue;
    ++done;
    const double lhs = *q_from(g) * alpha_from(g) * g.masked_perturbed_norm;
    worst = std::max(worst, std::abs(lhs - g.grad_norm) / g.grad_norm);
    const auto c = criteria_from(g);
    const double q2 = *c.c_norm * std::max(*c.c_sim, p.apply(gx).norm() * p.apply(gxt).norm() /
                                                         p.apply(gx).dot(p.apply(gxt)));
    worst_q = std::max(worst_q, std::abs(*q_from(g) - q2) / q2);
  }
  rep.properties.push_back(detail::check("max relative error of q alpha ||p (.) grad f(x~)|| vs ||grad f(x)||",
                                         worst, "<", 1e-10));
  rep.properties.push_back(detail::check("max relative error of q vs raw-norm recomputation", worst_q, "<", 1e-12));
  rep.seconds = timer.seconds();
  return rep;
}

// Mask algebra: projection, Pythagorean split, partition disjointness.
inline SuiteReport masks(std::uint64_t seed = 1313) {
  detail::Timer timer;
  SuiteReport rep{"masks", {}, 0.0};
  Rng rng(seed);
  std::uniform_int_distribution<Index> dim(1, 200);
  std::uniform_real_distribution<double> keep(0.05, 1.0);
  int projection_failures = 0;
  double worst_split = 0.0;
  for (int i = 0; i < 2000; ++i) {
    const Index d = dim(rng);
    const Mask p = detail::bernoulli_mask(d, keep(rng), rng);
    const RealVector v = detail::gaussian(d, rng);
    if (!bit_equal(p.apply(p.apply(v)), p.apply(v))) ++projection_failures;
    const double split = p.apply(v).squaredNorm() + p.apply_complement(v).squaredNorm();
    worst_split = std::max(worst_split, std::abs(split - v.squaredNorm()) / v.squaredNorm());
  }
  rep.properties.push_back(detail::check("projection failures p (.) (p (.) v) != p (.) v", projection_failures, "==", 0));
  rep.properties.push_back(detail::check("max relative Pythagorean split error", worst_split, "<=", 1e-12));

  int overlap = 0, incomplete = 0;
  for (int i = 0; i < 50; ++i) {
    const auto net = build_mlp({{3, 8, 8, 2}, Activation::Tanh, LossKind::MeanSquared, rng()});
    const auto inc = neuron_incidence(net);
    for (Index k : {1, 2, 4, 8}) {
      const auto parts = partition_disjoint(inc, k, rng);
      RealVector total = RealVector::Zero(net.dim());
      for (const auto& m : parts) total += m.values();
      if (total.maxCoeff() > 1.0) ++overlap;
      // A coordinate touching at most one hidden neuron always has an owner.
      for (Index c = 0; c < inc.dim; ++c) {
        const auto& e = inc.coords[static_cast<std::size_t>(c)];
        if (e.count < 2 && total[c] != 1.0) ++incomplete;
      }
    }
  }
  rep.properties.push_back(detail::check("overlapping worker masks", overlap, "==", 0));
  rep.properties.push_back(detail::check("uncovered single-layer coordinates", incomplete, "==", 0));
  rep.seconds = timer.seconds();
  return rep;
}

struct SuiteInfo {
  std::string name;
  std::string description;
  std::function<SuiteReport()> run;
};

inline const std::vector<SuiteInfo>& registry() {
  static const std::vector<SuiteInfo> suites{
      {"template", "p = 1, no perturbation, alpha = 1 equals plain SGD bit for bit", [] { return template_collapse(); }},
      {"gradient", "reverse mode vs central finite differences across the zoo", [] { return gradient_check(); }},
      {"gradient-mlp", "reverse mode vs central finite differences on dense networks", [] { return gradient_check(100, false); }},
      {"lemma1", "c_sim and c_align bounds under bounded perturbation", [] { return bounded_perturbation(); }},
      {"descent", "per-step expected descent inequality", [] { return descent(); }},
      {"theorem1", "iteration bounds for both convergence statements", [] { return theorem(); }},
      {"meprop", "top-k overlap bound d/k", [] { return meprop(); }},
      {"dropout", "Bernoulli mask second moment", [] { return dropout(); }},
      {"extragradient", "extragradient probe keeps perturbations bounded", [] { return extragradient(); }},
      {"interleave", "parallel disjoint workers equal the interleaved sequence", [] { return interleave(); }},
      {"collapse", "LFC layers and networks collapse to dense layers", [] { return collapse(); }},
      {"ats", "alternating training against solo training", [] { return ats(); }},
      {"identity", "q alpha ||p (.) grad f(x~)|| = ||grad f(x)||", [] { return identity(); }},
      {"masks", "mask algebra and partitions", [] { return masks(); }},
  };
  return suites;
}

inline const SuiteInfo* find_suite(const std::string& name) {
  for (const auto& s : registry()) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

}  // namespace psgd::verify
