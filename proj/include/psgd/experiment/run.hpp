#pragma once

// Turns a parsed configuration into a problem, a starting point, strategies
// and an optimizer configuration, and runs it.

#include "psgd/experiment/config.hpp"
#include "psgd/mask_strategy.hpp"
#include "psgd/model_zoo.hpp"
#include "psgd/optimizer.hpp"
#include "psgd/perturbation.hpp"
#include "psgd/problem.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace psgd::experiment {

// Independent streams for data, initialisation, masks and the run itself.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

enum Stream : std::uint64_t { kData = 1, kInit = 2, kMasks = 3, kRun = 4, kProbe = 5 };

struct Setup {
  std::shared_ptr<const Problem> problem;
  std::shared_ptr<const QuadraticProblem> quadratic;
  ParamVector x0;
  std::optional<Network> net;
  std::vector<std::string> core_tensors;
  std::optional<SyntheticClassification> data;
  std::optional<double> L;
  NoiseBound noise;
};

inline NoiseModel noise_model(const NoiseSpec& n) {
  if (n.kind == "multiplicative") return MultiplicativeNoise{n.M};
  if (n.kind == "composite") return CompositeNoise{n.M, n.sigma2};
  if (n.kind == "additive") return AdditiveNoise{n.sigma2};
  return AdditiveNoise{0.0};
}

inline Setup build_setup(const ExperimentConfig& c) {
  Setup s;
  const auto& p = c.problem;
  if (p.kind == "quadratic") {
    auto q = std::make_shared<QuadraticProblem>(make_quadratic({.dim = p.dim,
                                                                .condition = p.condition,
                                                                .seed = derive_seed(c.seed, kData),
                                                                .L = p.L,
                                                                .offset = p.offset,
                                                                .noise = noise_model(p.noise)}));
    Rng init(derive_seed(c.seed, kInit));
    std::normal_distribution<double> n(0.0, p.init_scale);
    s.x0 = q->minimizer();
    for (Index i = 0; i < s.x0.size(); ++i) s.x0[i] += n(init);
    s.L = q->smoothness();
    s.noise = noise_bound(q->noise_model());
    s.quadratic = q;
    s.problem = q;
    return s;
  }

  s.data = make_blobs({.samples = p.samples,
                       .features = p.features,
                       .classes = p.classes,
                       .separation = p.separation,
                       .spread = p.spread,
                       .validation_fraction = p.validation_fraction,
                       .seed = derive_seed(c.seed, kData)});
  const auto& m = c.model;
  std::vector<Index> widths{p.features};
  widths.insert(widths.end(), m.hidden.begin(), m.hidden.end());
  widths.push_back(p.classes);
  const Activation act = m.activation == "relu" ? Activation::Relu : Activation::Tanh;
  const LossKind loss = m.loss == "mse" ? LossKind::MeanSquared : LossKind::SoftmaxCrossEntropy;
  const std::uint64_t init = derive_seed(c.seed, kInit);
  if (m.kind == "mlp") {
    s.net = build_mlp({widths, act, loss, init});
  } else if (m.kind == "low_rank") {
    s.net = build_low_rank_mlp({widths, m.rank_ratio, act, loss, init});
  } else if (m.kind == "lfc") {
    auto comp = build_lfc_composite({widths, m.rank_ratio, act, loss, init});
    s.net = std::move(comp.super);
    s.core_tensors = std::move(comp.core_tensors);
  } else {
    auto comp = build_wide_deep({widths, act, loss, init});
    s.net = std::move(comp.super);
    s.core_tensors = std::move(comp.core_tensors);
  }
  s.x0 = s.net->params;
  s.problem = std::make_shared<NetworkProblem>(s.net->graph, s.data->train, p.batch_size);
  return s;
}

// Core of the network: the slim-width block of a dense network, or the
// low-rank / deep tensors of a composite.
inline Mask core_of(const ExperimentConfig& c, const Setup& s) {
  if (!s.net) throw ConfigError("a core needs a classification problem");
  if (c.model.kind == "mlp") return slim_width_mask(*s.net, c.core.ratio);
  if (c.model.kind == "low_rank") throw ConfigError("'model.kind: low_rank' has no core; use lfc");
  return core_mask(*s.net->layout, s.core_tensors);
}

// Standalone network holding the core parameters of x.
inline Network extract_core(const ExperimentConfig& c, const Setup& s, const ParamVector& x) {
  Network trained = *s.net;
  trained.params = x;
  if (c.model.kind == "mlp") return slim_core(trained, c.core.ratio);
  Network core = c.model.kind == "lfc"
                     ? build_low_rank_mlp({trained.widths, trained.rank_ratio, trained.activation, trained.loss, 0})
                     : build_mlp({trained.widths, trained.activation, trained.loss, 0});
  copy_tensors_by_name(*trained.layout, x, *core.layout, core.params);
  return core;
}

inline MaskStrategy make_mask_strategy(const ExperimentConfig& c, const Setup& s) {
  const auto& m = c.mask;
  auto dense = [&]() -> const Network& {
    if (!s.net || c.model.kind != "mlp") throw ConfigError("'mask.kind: " + m.kind + "' needs 'model.kind: mlp'");
    return *s.net;
  };
  if (m.kind == "all_ones") return MaskStrategy::all_ones();
  if (m.kind == "dropout") return MaskStrategy::dropout(m.keep);
  if (m.kind == "neuron_dropout") return MaskStrategy::neuron_dropout(m.keep, neuron_incidence(dense()));
  if (m.kind == "tensor_dropout") return MaskStrategy::tensor_dropout(m.keep, s.net->layout);
  if (m.kind == "top_k") {
    if (m.k > s.problem->dim()) throw ConfigError("'mask.k' exceeds the parameter count");
    return MaskStrategy::top_k(m.k);
  }
  if (m.kind == "disjoint") return MaskStrategy::disjoint(m.workers, m.local_steps, neuron_incidence(dense()));
  if (m.kind == "core") return MaskStrategy::fixed(core_of(c, s));
  Rng rng(derive_seed(c.seed, kMasks));
  std::bernoulli_distribution coin(m.keep);
  const Index d = s.problem->dim();
  std::vector<Mask> set;
  for (Index i = 0; i < m.count; ++i) {
    RealVector v(d);
    for (auto& x : v) x = coin(rng) ? 1.0 : 0.0;
    if (v.sum() == 0.0) v[std::uniform_int_distribution<Index>(0, d - 1)(rng)] = 1.0;
    set.push_back(Mask::from_values(std::move(v)));
  }
  return MaskStrategy::alternating(std::move(set));
}

inline PerturbationStrategy make_perturbation(const ExperimentConfig& c, const Setup& s) {
  const auto& p = c.perturbation;
  if (p.kind == "zero_complement") return ZeroComplement{};
  if (p.kind == "extragradient") {
    const double eta = p.eta ? *p.eta : *p.eta_over_L / *s.L;
    return Extragradient{eta, p.sign == "descent" ? ProbeSign::Descent : ProbeSign::Ascent};
  }
  return NoPerturbation{};
}

inline TrainConfig make_train_config(const ExperimentConfig& c, const Setup& s) {
  const auto& o = c.optimizer;
  TrainConfig t;
  if (o.gamma_base) {
    t.gamma_base = *o.gamma_base;
  } else {
    if (!s.L) throw ConfigError("deriving 'optimizer.gamma_base' from epsilon needs a known L");
    t.gamma_base = gamma_base(*s.L, s.noise.M, s.noise.sigma2, *o.epsilon);
  }
  t.alpha_mode = o.alpha == "theoretical" ? AlphaMode::Theoretical : AlphaMode::Constant;
  t.alpha_constant = o.alpha_constant;
  t.steps = o.steps;
  t.seed = derive_seed(c.seed, kRun);
  t.exact_gradients = o.exact_gradients;
  t.evaluate_loss = o.evaluate_loss;
  t.keep_traces = false;
  return t;
}

struct RunOutcome {
  Trajectory trajectory;
  std::optional<double> validation_loss;
  std::optional<double> core_validation_loss;
};

inline RunOutcome execute(const ExperimentConfig& c, const Setup& s, const StepObserver& observer = {}) {
  const TrainConfig cfg = make_train_config(c, s);
  RunOutcome out;
  if (c.optimizer.scheme == "ats") {
    out.trajectory = run_ats(*s.problem, s.x0, core_of(c, s), cfg, observer);
  } else {
    out.trajectory = run_partial_sgd(*s.problem, s.x0, make_mask_strategy(c, s), make_perturbation(c, s), cfg, observer);
  }
  const auto& x = out.trajectory.final_point;
  if (s.data && !out.trajectory.aborted && x.allFinite()) {
    out.validation_loss = dataset_loss(s.net->graph, x, s.data->validation);
    if (c.uses_core()) {
      const Network core = extract_core(c, s, x);
      out.core_validation_loss = dataset_loss(core.graph, core.params, s.data->validation);
    }
  }
  return out;
}

// F0 = f(x0) - f* and the matching iteration bound, when the constants are known.
inline std::optional<std::int64_t> iteration_bound(const ExperimentConfig& c, const Setup& s) {
  if (!s.quadratic || !c.optimizer.epsilon) return std::nullopt;
  const double F0 = s.quadratic->loss(s.x0) - *s.quadratic->optimum_value();
  if (!(F0 > 0.0)) return std::nullopt;
  return theorem_bound_T(*s.L, F0, s.noise.M, s.noise.sigma2, *c.optimizer.epsilon);
}

}  // namespace psgd::experiment
