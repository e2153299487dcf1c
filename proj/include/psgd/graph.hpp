#pragma once

// Computation graphs over a fixed node vocabulary with a reverse-mode
// gradient. Graphs are built once with GraphBuilder and never mutated; the
// parameters live outside the graph in a flat ParamVector.

#include "psgd/errors.hpp"
#include "psgd/layout.hpp"
#include "psgd/tensor.hpp"

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace psgd {

enum class Activation { Tanh, Relu };
enum class LossKind { MeanSquared, SoftmaxCrossEntropy };

inline const char* to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }
inline const char* to_string(LossKind l) {
  return l == LossKind::MeanSquared ? "mse" : "softmax_ce";
}

namespace node {
struct Input {};
// W X + b
struct Affine {
  int input;
  std::size_t weight;
  std::optional<std::size_t> bias;
};
// (V U + W) X + b, evaluated as V (U X) + W X + b
struct Lfc {
  int input;
  std::size_t u, v, w;
  std::optional<std::size_t> bias;
};
struct Act {
  int input;
  Activation fn;
};
struct Sum {
  int lhs, rhs;
};
}  // namespace node

using Node = std::variant<node::Input, node::Affine, node::Lfc, node::Act, node::Sum>;

class CompGraph {
 public:
  const std::shared_ptr<const ParamLayout>& layout() const { return layout_; }
  const std::vector<Node>& nodes() const { return nodes_; }
  Index width(int id) const { return widths_.at(static_cast<std::size_t>(id)); }
  int output() const { return output_; }
  LossKind loss() const { return loss_; }
  Index input_dim() const { return widths_.front(); }
  Index output_dim() const { return width(output_); }
  // Id used in NumericError when the loss itself is non-finite.
  int loss_node_id() const { return static_cast<int>(nodes_.size()); }

 private:
  friend class GraphBuilder;
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<Node> nodes_;
  std::vector<Index> widths_;
  int output_ = 0;
  LossKind loss_ = LossKind::MeanSquared;
};

// Nodes may only reference earlier nodes, so every built graph is acyclic and
// node order is a topological order.
class GraphBuilder {
 public:
  GraphBuilder(std::shared_ptr<const ParamLayout> layout, Index input_dim) {
    detail::require(layout != nullptr, "graph needs a parameter layout");
    detail::require(input_dim > 0, "graph input width must be positive");
    g_.layout_ = std::move(layout);
    g_.nodes_.emplace_back(node::Input{});
    g_.widths_.push_back(input_dim);
    used_.assign(g_.layout_->size(), false);
  }

  int input() const { return 0; }

  int affine(int in, const std::string& weight, const std::optional<std::string>& bias) {
    check_node(in);
    auto w = claim(weight);
    const auto& ws = g_.layout_->slot(w);
    detail::require(ws.cols == g_.width(in), "affine weight '" + weight + "' expects input width " +
                                                 std::to_string(ws.cols));
    auto b = claim_bias(bias, ws.rows);
    return push(node::Affine{in, w, b}, ws.rows);
  }

  int lfc(int in, const std::string& u, const std::string& v, const std::string& w,
          const std::optional<std::string>& bias) {
    check_node(in);
    auto us = claim(u), vs = claim(v), wsid = claim(w);
    const auto& U = g_.layout_->slot(us);
    const auto& V = g_.layout_->slot(vs);
    const auto& W = g_.layout_->slot(wsid);
    const Index f_in = g_.width(in);
    detail::require(U.cols == f_in && W.cols == f_in, "LFC U and W must have f_in columns");
    detail::require(V.cols == U.rows, "LFC V must have k columns");
    detail::require(V.rows == W.rows, "LFC V and W must have f_out rows");
    auto b = claim_bias(bias, W.rows);
    return push(node::Lfc{in, us, vs, wsid, b}, W.rows);
  }

  int activation(int in, Activation fn) {
    check_node(in);
    return push(node::Act{in, fn}, g_.width(in));
  }

  int sum(int lhs, int rhs) {
    check_node(lhs);
    check_node(rhs);
    detail::require(g_.width(lhs) == g_.width(rhs), "sum operands must have equal width");
    return push(node::Sum{lhs, rhs}, g_.width(lhs));
  }

  CompGraph build(int output, LossKind loss) && {
    check_node(output);
    detail::require(output != 0, "graph output cannot be the raw input");
    g_.output_ = output;
    g_.loss_ = loss;
    return std::move(g_);
  }

 private:
  void check_node(int id) const {
    detail::require(id >= 0 && static_cast<std::size_t>(id) < g_.nodes_.size(),
                    "node id " + std::to_string(id) + " does not exist yet");
  }

  std::size_t claim(const std::string& name) {
    auto id = g_.layout_->require_slot(name);
    detail::require(!used_[id], "parameter tensor '" + name + "' referenced twice");
    used_[id] = true;
    return id;
  }

  std::optional<std::size_t> claim_bias(const std::optional<std::string>& name, Index rows) {
    if (!name) return std::nullopt;
    auto id = claim(*name);
    const auto& s = g_.layout_->slot(id);
    detail::require(s.rows == rows && s.cols == 1, "bias '" + *name + "' must be a column of " +
                                                       std::to_string(rows));
    return id;
  }

  int push(Node n, Index width) {
    g_.nodes_.push_back(std::move(n));
    g_.widths_.push_back(width);
    return static_cast<int>(g_.nodes_.size() - 1);
  }

  CompGraph g_;
  std::vector<bool> used_;
};

namespace detail {

struct Tape {
  std::vector<RealMatrix> values;  // per node output
  std::vector<RealMatrix> inner;   // U X for LFC nodes, empty otherwise
};

inline void check_inputs(const CompGraph& g, const ParamVector& params, const RealMatrix& batch) {
  require(params.size() == g.layout()->dim(),
          "parameter vector has dimension " + std::to_string(params.size()) + ", layout expects " +
              std::to_string(g.layout()->dim()));
  require(batch.cols() > 0, "empty batch");
  require(batch.rows() == g.input_dim(), "batch has " + std::to_string(batch.rows()) +
                                             " features, graph expects " +
                                             std::to_string(g.input_dim()));
}

inline void check_targets(const CompGraph& g, const RealMatrix& batch, const RealMatrix& targets) {
  require(targets.rows() == g.output_dim() && targets.cols() == batch.cols(),
          "targets must be " + std::to_string(g.output_dim()) + "x" + std::to_string(batch.cols()));
}

inline void check_finite(const RealMatrix& m, int node_id) {
  if (!m.allFinite()) {
    throw NumericError("non-finite value at graph node " + std::to_string(node_id), node_id);
  }
}

inline Tape run_forward(const CompGraph& g, const ParamVector& params, const RealMatrix& batch) {
  check_inputs(g, params, batch);
  const auto& L = *g.layout();
  const auto n = g.nodes().size();
  Tape tape;
  tape.values.resize(n);
  tape.inner.resize(n);
  tape.values[0] = batch;
  for (std::size_t i = 1; i < n; ++i) {
    const auto& nd = g.nodes()[i];
    RealMatrix& out = tape.values[i];
    if (auto* a = std::get_if<node::Affine>(&nd)) {
      const auto& X = tape.values[a->input];
      out.noalias() = L.view(params, a->weight) * X;
      if (a->bias) out.colwise() += L.view(params, *a->bias).col(0);
    } else if (auto* f = std::get_if<node::Lfc>(&nd)) {
      const auto& X = tape.values[f->input];
      tape.inner[i].noalias() = L.view(params, f->u) * X;
      out.noalias() = L.view(params, f->v) * tape.inner[i];
      out.noalias() += L.view(params, f->w) * X;
      if (f->bias) out.colwise() += L.view(params, *f->bias).col(0);
    } else if (auto* act = std::get_if<node::Act>(&nd)) {
      const auto& X = tape.values[act->input];
      if (act->fn == Activation::Tanh) {
        out = X.array().tanh().matrix();
      } else {
        out = X.cwiseMax(0.0);
      }
    } else if (auto* s = std::get_if<node::Sum>(&nd)) {
      out = tape.values[s->lhs] + tape.values[s->rhs];
    }
    check_finite(out, static_cast<int>(i));
  }
  return tape;
}

// Column-wise softmax with the max subtracted for stability.
inline RealMatrix softmax(const RealMatrix& z) {
  RealMatrix p(z.rows(), z.cols());
  for (Index j = 0; j < z.cols(); ++j) {
    const double m = z.col(j).maxCoeff();
    p.col(j) = (z.col(j).array() - m).exp().matrix();
    p.col(j) /= p.col(j).sum();
  }
  return p;
}

// Mean over samples of 1/2 ||y - t||^2, or of the softmax cross-entropy.
inline double loss_value(LossKind kind, const RealMatrix& y, const RealMatrix& t) {
  const double n = static_cast<double>(y.cols());
  if (kind == LossKind::MeanSquared) {
    return 0.5 * (y - t).squaredNorm() / n;
  }
  double total = 0.0;
  for (Index j = 0; j < y.cols(); ++j) {
    const double m = y.col(j).maxCoeff();
    const double lse = m + std::log((y.col(j).array() - m).exp().sum());
    total += t.col(j).sum() * lse - t.col(j).dot(y.col(j));
  }
  return total / n;
}

inline RealMatrix loss_adjoint(LossKind kind, const RealMatrix& y, const RealMatrix& t) {
  const double n = static_cast<double>(y.cols());
  if (kind == LossKind::MeanSquared) return (y - t) / n;
  RealMatrix p = softmax(y);
  for (Index j = 0; j < y.cols(); ++j) p.col(j) *= t.col(j).sum();
  return (p - t) / n;
}

inline void accumulate(RealMatrix& into, const RealMatrix& delta) {
  if (into.size() == 0) {
    into = delta;
  } else {
    into += delta;
  }
}

}  // namespace detail

// Network output before the loss, one column per sample.
inline RealMatrix predict(const CompGraph& g, const ParamVector& params, const RealMatrix& batch) {
  auto tape = detail::run_forward(g, params, batch);
  return std::move(tape.values[static_cast<std::size_t>(g.output())]);
}

inline double forward(const CompGraph& g, const ParamVector& params, const RealMatrix& batch,
                      const RealMatrix& targets) {
  detail::check_inputs(g, params, batch);
  detail::check_targets(g, batch, targets);
  auto tape = detail::run_forward(g, params, batch);
  const double loss =
      detail::loss_value(g.loss(), tape.values[static_cast<std::size_t>(g.output())], targets);
  if (!std::isfinite(loss)) throw NumericError("non-finite loss", g.loss_node_id());
  return loss;
}

inline std::pair<double, ParamVector> value_and_gradient(const CompGraph& g, const ParamVector& params,
                                                         const RealMatrix& batch,
                                                         const RealMatrix& targets) {
  detail::check_inputs(g, params, batch);
  detail::check_targets(g, batch, targets);
  const auto& L = *g.layout();
  auto tape = detail::run_forward(g, params, batch);
  const auto out = static_cast<std::size_t>(g.output());
  const double loss = detail::loss_value(g.loss(), tape.values[out], targets);
  if (!std::isfinite(loss)) throw NumericError("non-finite loss", g.loss_node_id());

  ParamVector grad = ParamVector::Zero(params.size());
  std::vector<RealMatrix> adj(g.nodes().size());
  adj[out] = detail::loss_adjoint(g.loss(), tape.values[out], targets);

  for (std::size_t i = out; i >= 1; --i) {
    if (adj[i].size() == 0) continue;
    const RealMatrix& dY = adj[i];
    const auto& nd = g.nodes()[i];
    if (auto* a = std::get_if<node::Affine>(&nd)) {
      const auto& X = tape.values[a->input];
      L.view(grad, a->weight).noalias() += dY * X.transpose();
      if (a->bias) L.view(grad, *a->bias).col(0) += dY.rowwise().sum();
      if (a->input != 0) {
        detail::accumulate(adj[a->input], L.view(params, a->weight).transpose() * dY);
      }
    } else if (auto* f = std::get_if<node::Lfc>(&nd)) {
      const auto& X = tape.values[f->input];
      const RealMatrix dH = L.view(params, f->v).transpose() * dY;
      L.view(grad, f->v).noalias() += dY * tape.inner[i].transpose();
      L.view(grad, f->u).noalias() += dH * X.transpose();
      L.view(grad, f->w).noalias() += dY * X.transpose();
      if (f->bias) L.view(grad, *f->bias).col(0) += dY.rowwise().sum();
      if (f->input != 0) {
        RealMatrix dX = L.view(params, f->u).transpose() * dH;
        dX.noalias() += L.view(params, f->w).transpose() * dY;
        detail::accumulate(adj[f->input], dX);
      }
    } else if (auto* act = std::get_if<node::Act>(&nd)) {
      RealMatrix dX;
      if (act->fn == Activation::Tanh) {
        const auto& Y = tape.values[i];
        dX = (dY.array() * (1.0 - Y.array().square())).matrix();
      } else {
        const auto& X = tape.values[act->input];
        dX = (dY.array() * (X.array() > 0.0).cast<double>()).matrix();
      }
      if (act->input != 0) detail::accumulate(adj[act->input], dX);
    } else if (auto* s = std::get_if<node::Sum>(&nd)) {
      if (s->lhs != 0) detail::accumulate(adj[s->lhs], dY);
      if (s->rhs != 0) detail::accumulate(adj[s->rhs], dY);
    }
  }
  if (!grad.allFinite()) throw NumericError("non-finite gradient", g.loss_node_id());
  return {loss, std::move(grad)};
}

inline ParamVector gradient(const CompGraph& g, const ParamVector& params, const RealMatrix& batch,
                            const RealMatrix& targets) {
  return value_and_gradient(g, params, batch, targets).second;
}

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h, one coordinate at a
// time. Independent of the reverse pass; used as its oracle.
template <typename F>
ParamVector finite_diff_gradient(F&& f, const ParamVector& x, double h = 1e-5) {
  detail::require(h > 0.0, "finite-difference step must be positive");
  ParamVector g(x.size());
  ParamVector probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Max over coordinates of |a - b| / max(|a|, |b|, floor).
inline double max_relative_error(const RealVector& a, const RealVector& b, double floor = 1e-8) {
  detail::require(a.size() == b.size(), "relative error needs equal sizes");
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace psgd
