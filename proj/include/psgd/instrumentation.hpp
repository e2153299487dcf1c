#pragma once

// Per-step measurement series: gradient overlap, norm similarity and
// alignment, either read off a trajectory or probed at an iterate with a
// mask and perturbation that the training step itself did not use.

#include "psgd/criteria.hpp"
#include "psgd/errors.hpp"
#include "psgd/mask.hpp"
#include "psgd/optimizer.hpp"
#include "psgd/perturbation.hpp"
#include "psgd/problem.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace psgd {

struct FigureRow {
  Index t = 0;
  std::string phase;
  std::optional<double> overlap;    // ||grad f(x)||^2 / ||p (.) grad f(x)||^2
  std::optional<double> sim_sq;     // ||p (.) grad f(x)||^2 / ||p (.) grad f(x~)||^2
  std::optional<double> align_sq;   // (||a|| ||b|| / <a, b>)^2
  std::optional<double> c_sim;
  std::optional<double> c_align;
  std::optional<double> cosine;     // <a, b> / (||a|| ||b||)
};

namespace detail {

inline std::optional<double> square(std::optional<double> v) {
  if (!v) return std::nullopt;
  return *v * *v;
}

inline FigureRow figure_row(Index t, const std::string& phase, const GradientGeometry& g) {
  const auto c = criteria_from(g);
  FigureRow r;
  r.t = t;
  r.phase = phase;
  r.overlap = square(c.c_norm);
  r.sim_sq = square(c.c_sim);
  r.align_sq = square(c.c_align);
  r.c_sim = c.c_sim;
  r.c_align = c.c_align;
  if (g.masked_norm > 0.0 && g.masked_perturbed_norm > 0.0) {
    r.cosine = g.perturbation_is_identity ? 1.0 : g.inner / (g.masked_norm * g.masked_perturbed_norm);
  }
  return r;
}

}  // namespace detail

inline std::vector<FigureRow> figure_metrics(const Trajectory& traj) {
  detail::require(!traj.steps.empty(), "trajectory has no step traces");
  std::vector<FigureRow> rows;
  rows.reserve(traj.steps.size());
  for (const auto& s : traj.steps) rows.push_back(detail::figure_row(s.t, s.phase, s.geometry));
  return rows;
}

// Criteria at x for mask p and perturbation s, measured with full gradients
// or with one minibatch estimate (same draw at x and x~).
inline FigureRow probe_criteria(const Problem& problem, const ParamVector& x, const Mask& p,
                                const PerturbationStrategy& s, bool exact, Rng& rng, Index t = 0,
                                const std::string& phase = "probe") {
  const std::uint64_t key = exact ? 0 : rng();
  auto grad = [&](const ParamVector& at) {
    return exact ? problem.gradient(at) : problem.sampled_gradient(at, key);
  };
  const ParamVector gx = grad(x);
  const auto pert = perturb(s, x, p, &gx);
  const ParamVector gxt = bit_equal(pert.point, x) ? gx : grad(pert.point);
  return detail::figure_row(t, phase, gradient_geometry(p, gx, gxt));
}

// Median of the defined entries of one series; nullopt when none is defined.
template <typename Get>
std::optional<double> series_median(const std::vector<FigureRow>& rows, Get get, std::size_t from = 0) {
  std::vector<double> v;
  for (std::size_t i = from; i < rows.size(); ++i) {
    const std::optional<double> x = get(rows[i]);
    if (x && std::isfinite(*x)) v.push_back(*x);
  }
  if (v.empty()) return std::nullopt;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

template <typename Get>
std::optional<double> series_mean(const std::vector<FigureRow>& rows, Get get, std::size_t from = 0) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = from; i < rows.size(); ++i) {
    const std::optional<double> x = get(rows[i]);
    if (x && std::isfinite(*x)) {
      sum += *x;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

}  // namespace psgd
