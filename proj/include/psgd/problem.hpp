#pragma once

// Objectives with known constants and the stochastic-gradient oracles
// g(x) = grad f(x) + xi(x) used by the optimizer.

#include "psgd/errors.hpp"
#include "psgd/graph.hpp"
#include "psgd/model_zoo.hpp"
#include "psgd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <variant>
#include <vector>

namespace psgd {

// Constants of the (M, sigma^2)-bounded noise condition.
struct NoiseBound {
  double M = 0.0;
  double sigma2 = 0.0;
};

// xi ~ N(0, (sigma^2 / d) I), so E||p (.) xi||^2 = (|p|_0 / d) sigma^2 <= sigma^2.
struct AdditiveNoise {
  double sigma2 = 0.0;
};
// xi_i = m_i * d_i f(x) with m_i = +-sqrt(M) equiprobable.
struct MultiplicativeNoise {
  double M = 0.0;
};
struct CompositeNoise {
  double M = 0.0;
  double sigma2 = 0.0;
};

using NoiseModel = std::variant<AdditiveNoise, MultiplicativeNoise, CompositeNoise>;

inline NoiseBound noise_bound(const NoiseModel& n) {
  if (auto* a = std::get_if<AdditiveNoise>(&n)) return {0.0, a->sigma2};
  if (auto* m = std::get_if<MultiplicativeNoise>(&n)) return {m->M, 0.0};
  const auto& c = std::get<CompositeNoise>(n);
  return {c.M, c.sigma2};
}

inline bool is_silent(const NoiseModel& n) {
  const auto b = noise_bound(n);
  return b.M == 0.0 && b.sigma2 == 0.0;
}

inline RealVector sample_noise(const NoiseModel& n, const RealVector& grad, Rng& rng) {
  const auto b = noise_bound(n);
  detail::require(b.M >= 0.0 && b.sigma2 >= 0.0, "noise parameters must be nonnegative");
  const Index d = grad.size();
  RealVector xi = RealVector::Zero(d);
  if (b.M > 0.0) {
    std::bernoulli_distribution coin(0.5);
    const double s = std::sqrt(b.M);
    for (Index i = 0; i < d; ++i) xi[i] = (coin(rng) ? s : -s) * grad[i];
  }
  if (b.sigma2 > 0.0) {
    std::normal_distribution<double> normal(0.0, std::sqrt(b.sigma2 / static_cast<double>(d)));
    for (Index i = 0; i < d; ++i) xi[i] += normal(rng);
  }
  return xi;
}

class Problem {
 public:
  virtual ~Problem() = default;

  virtual Index dim() const = 0;
  virtual double loss(const ParamVector& x) const = 0;
  virtual ParamVector gradient(const ParamVector& x) const = 0;

  // Stochastic gradient whose randomness (noise draw or minibatch) is fully
  // determined by `sample`. Calling it twice with the same key at two points
  // gives estimates from the same draw.
  virtual ParamVector sampled_gradient(const ParamVector& x, std::uint64_t sample) const = 0;

  ParamVector stochastic_gradient(const ParamVector& x, Rng& rng) const {
    return sampled_gradient(x, rng());
  }

  virtual std::optional<double> smoothness() const { return std::nullopt; }
  virtual std::optional<double> optimum_value() const { return std::nullopt; }
  virtual std::optional<NoiseBound> noise() const { return std::nullopt; }
};

inline ParamVector stochastic_gradient(const Problem& problem, const ParamVector& x,
                                       const NoiseModel& noise, Rng& rng) {
  detail::require(x.allFinite(), "stochastic gradient needs a finite point");
  ParamVector g = problem.gradient(x);
  if (is_silent(noise)) return g;
  return g + sample_noise(noise, g, rng);
}

// f(x) = 1/2 x^T A x - b^T x with A symmetric positive semidefinite.
class QuadraticProblem : public Problem {
 public:
  QuadraticProblem(RealMatrix A, RealVector b, NoiseModel noise = AdditiveNoise{0.0})
      : A_(std::move(A)), b_(std::move(b)), noise_(noise) {
    detail::require(A_.rows() == A_.cols() && A_.rows() > 0, "A must be square");
    detail::require(b_.size() == A_.rows(), "b must match A");
    detail::require((A_ - A_.transpose()).cwiseAbs().maxCoeff() <= 1e-12, "A must be symmetric");
    Eigen::SelfAdjointEigenSolver<RealMatrix> es(A_);
    eigenvalues_ = es.eigenvalues();
    detail::require(eigenvalues_.minCoeff() >= -1e-12, "A must be positive semidefinite");
    L_ = eigenvalues_.maxCoeff();
    detail::require(L_ > 0.0, "A must not be zero");
    // Pseudo-inverse minimiser; exact solve when A is definite.
    RealVector inv = eigenvalues_;
    for (Index i = 0; i < inv.size(); ++i) inv[i] = inv[i] > 1e-12 * L_ ? 1.0 / inv[i] : 0.0;
    minimizer_ = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose() * b_;
    f_star_ = loss(minimizer_);
  }

  Index dim() const override { return A_.rows(); }

  double loss(const ParamVector& x) const override { return 0.5 * x.dot(A_ * x) - b_.dot(x); }

  ParamVector gradient(const ParamVector& x) const override { return A_ * x - b_; }

  ParamVector sampled_gradient(const ParamVector& x, std::uint64_t sample) const override {
    Rng rng(sample);
    return psgd::stochastic_gradient(*this, x, noise_, rng);
  }

  std::optional<double> smoothness() const override { return L_; }
  std::optional<double> optimum_value() const override { return f_star_; }
  std::optional<NoiseBound> noise() const override { return noise_bound(noise_); }

  const RealMatrix& A() const { return A_; }
  const RealVector& b() const { return b_; }
  const RealVector& eigenvalues() const { return eigenvalues_; }
  const RealVector& minimizer() const { return minimizer_; }
  const NoiseModel& noise_model() const { return noise_; }

  QuadraticProblem with_noise(NoiseModel n) const { return QuadraticProblem(A_, b_, n); }

 private:
  RealMatrix A_;
  RealVector b_;
  NoiseModel noise_;
  RealVector eigenvalues_;
  RealVector minimizer_;
  double L_ = 0.0;
  double f_star_ = 0.0;
};

struct QuadraticOptions {
  Index dim = 2;
  double condition = 1.0;
  std::uint64_t seed = 0;
  double L = 1.0;
  bool offset = false;  // draw b ~ N(0, I) instead of b = 0
  NoiseModel noise = AdditiveNoise{0.0};
};

// Eigenvalues log-spaced in [L / kappa, L] in a random orthogonal basis.
inline QuadraticProblem make_quadratic(const QuadraticOptions& opt) {
  detail::require(opt.dim >= 1, "quadratic dimension must be positive");
  detail::require(opt.condition >= 1.0, "condition number must be >= 1");
  detail::require(opt.L > 0.0, "L must be positive");
  const Index d = opt.dim;
  Rng rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  RealMatrix G(d, d);
  for (Index c = 0; c < d; ++c) {
    for (Index r = 0; r < d; ++r) G(r, c) = normal(rng);
  }
  const RealMatrix Q = Eigen::HouseholderQR<RealMatrix>(G).householderQ();
  RealVector lambda(d);
  for (Index i = 0; i < d; ++i) {
    const double frac = d == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(d - 1);
    lambda[i] = opt.L * std::pow(opt.condition, -frac);
  }
  RealMatrix A = Q * lambda.asDiagonal() * Q.transpose();
  A = 0.5 * (A + A.transpose()).eval();
  RealVector b = RealVector::Zero(d);
  if (opt.offset) {
    for (Index i = 0; i < d; ++i) b[i] = normal(rng);
  }
  return QuadraticProblem(std::move(A), std::move(b), opt.noise);
}

// Column-per-sample features with one-hot targets.
struct Dataset {
  RealMatrix features;
  RealMatrix targets;
  std::vector<Index> labels;

  Index size() const { return features.cols(); }
};

struct SyntheticClassification {
  Dataset train;
  Dataset validation;
  Index classes = 0;
};

struct BlobOptions {
  Index samples = 2000;
  Index features = 10;
  Index classes = 3;
  double separation = 1.0;  // std of the class centres
  double spread = 1.0;      // std of points around their centre
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;
};

// Gaussian blobs. Labels are assigned round-robin before shuffling, so class
// counts differ by at most one.
inline SyntheticClassification make_blobs(const BlobOptions& opt) {
  detail::require(opt.samples >= 2 && opt.features >= 1 && opt.classes >= 2,
                  "blobs need >= 2 samples, >= 1 feature and >= 2 classes");
  detail::require(opt.validation_fraction > 0.0 && opt.validation_fraction < 1.0,
                  "validation fraction must be in (0, 1)");
  Rng rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  RealMatrix centres(opt.features, opt.classes);
  for (Index c = 0; c < opt.classes; ++c) {
    for (Index r = 0; r < opt.features; ++r) centres(r, c) = opt.separation * normal(rng);
  }
  std::vector<Index> labels(static_cast<std::size_t>(opt.samples));
  for (Index i = 0; i < opt.samples; ++i) labels[static_cast<std::size_t>(i)] = i % opt.classes;
  std::shuffle(labels.begin(), labels.end(), rng);

  const Index n_val = std::max<Index>(
      1, static_cast<Index>(std::round(opt.validation_fraction * static_cast<double>(opt.samples))));
  const Index n_train = opt.samples - n_val;
  detail::require(n_train >= 1, "no training samples left");

  auto make = [&](Index begin, Index count) {
    Dataset ds;
    ds.features.resize(opt.features, count);
    ds.targets = RealMatrix::Zero(opt.classes, count);
    for (Index j = 0; j < count; ++j) {
      const Index y = labels[static_cast<std::size_t>(begin + j)];
      for (Index r = 0; r < opt.features; ++r) ds.features(r, j) = centres(r, y) + opt.spread * normal(rng);
      ds.targets(y, j) = 1.0;
      ds.labels.push_back(y);
    }
    return ds;
  };
  SyntheticClassification out;
  out.train = make(0, n_train);
  out.validation = make(n_train, n_val);
  out.classes = opt.classes;
  return out;
}

inline double dataset_loss(const CompGraph& g, const ParamVector& x, const Dataset& data) {
  return forward(g, x, data.features, data.targets);
}

// Training loss of a network on a dataset; stochastic gradients are minibatch
// gradients drawn without replacement.
class NetworkProblem : public Problem {
 public:
  NetworkProblem(CompGraph graph, Dataset train, Index batch_size)
      : graph_(std::move(graph)), train_(std::move(train)), batch_(batch_size) {
    detail::require(batch_ >= 1, "batch size must be positive");
    detail::require(train_.size() >= 1, "training set is empty");
  }

  Index dim() const override { return graph_.layout()->dim(); }

  double loss(const ParamVector& x) const override { return dataset_loss(graph_, x, train_); }

  ParamVector gradient(const ParamVector& x) const override {
    return psgd::gradient(graph_, x, train_.features, train_.targets);
  }

  ParamVector sampled_gradient(const ParamVector& x, std::uint64_t sample) const override {
    if (batch_ >= train_.size()) return gradient(x);
    Rng rng(sample);
    std::vector<Index> idx(static_cast<std::size_t>(train_.size()));
    std::iota(idx.begin(), idx.end(), Index{0});
    for (Index i = 0; i < batch_; ++i) {
      std::uniform_int_distribution<Index> pick(i, train_.size() - 1);
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    }
    RealMatrix X(train_.features.rows(), batch_);
    RealMatrix T(train_.targets.rows(), batch_);
    for (Index j = 0; j < batch_; ++j) {
      X.col(j) = train_.features.col(idx[static_cast<std::size_t>(j)]);
      T.col(j) = train_.targets.col(idx[static_cast<std::size_t>(j)]);
    }
    return psgd::gradient(graph_, x, X, T);
  }

  const CompGraph& graph() const { return graph_; }
  const Dataset& data() const { return train_; }
  Index batch_size() const { return batch_; }

 private:
  CompGraph graph_;
  Dataset train_;
  Index batch_;
};

}  // namespace psgd
