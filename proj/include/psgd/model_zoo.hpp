#pragma once

// Networks used by the experiments: plain MLPs, low-rank (LFC) composites,
// output-summed wide-and-deep composites and width-slimmed subnetworks, plus
// the masks that pick a core network out of its super-network.

#include "psgd/errors.hpp"
#include "psgd/graph.hpp"
#include "psgd/layout.hpp"
#include "psgd/mask.hpp"
#include "psgd/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace psgd {

namespace detail {
// floor(r * n), tolerant to representation error in r * n (0.29 * 100).
inline Index scaled_floor(double r, Index n) {
  return static_cast<Index>(std::floor(r * static_cast<double>(n) + 1e-9));
}
}  // namespace detail

// Low-rank fully connected layer (V U + W) X with U: k x f_in, V: f_out x k,
// W: f_out x f_in and k = floor(r * min(f_in, f_out)) clamped to >= 1.
struct LfcLayerSpec {
  Index f_in = 0;
  Index f_out = 0;
  double r = 1.0;

  LfcLayerSpec(Index in, Index out, double ratio) : f_in(in), f_out(out), r(ratio) {
    detail::require(f_in > 0 && f_out > 0, "LFC dimensions must be positive");
    detail::require(r > 0.0 && r <= 1.0, "rank ratio must be in (0, 1]");
  }

  Index k() const { return std::max<Index>(1, detail::scaled_floor(r, std::min(f_in, f_out))); }
};

inline RealMatrix collapse_lfc(const RealMatrix& U, const RealMatrix& V, const RealMatrix& W) {
  detail::require(U.cols() == W.cols(), "LFC U and W must share f_in");
  detail::require(V.rows() == W.rows(), "LFC V and W must share f_out");
  detail::require(V.cols() == U.rows(), "LFC V columns must equal U rows");
  return V * U + W;
}

inline RealMatrix lfc_forward(const RealMatrix& U, const RealMatrix& V, const RealMatrix& W,
                              const RealMatrix& X) {
  detail::require(U.cols() == W.cols() && V.rows() == W.rows() && V.cols() == U.rows(),
                  "LFC shape mismatch");
  detail::require(X.rows() == W.cols(), "LFC input must have f_in rows");
  RealMatrix out = V * (U * X);
  out.noalias() += W * X;
  return out;
}

// Parameter slots of one weight layer. `u`/`v` are set for LFC layers and
// for the factor pair of a standalone low-rank layer.
struct LayerSlots {
  Index fan_in = 0;
  Index fan_out = 0;
  std::optional<std::size_t> weight;
  std::optional<std::size_t> bias;
  std::optional<std::size_t> u;
  std::optional<std::size_t> v;
};

enum class NetworkKind { Mlp, LowRank, LfcComposite, WideDeep };

struct Network {
  std::shared_ptr<const ParamLayout> layout;
  CompGraph graph;
  ParamVector params;
  NetworkKind kind = NetworkKind::Mlp;
  std::vector<Index> widths;
  std::vector<LayerSlots> layers;  // main chain, input to output
  std::optional<std::size_t> side_weight;  // wide branch of a wide-and-deep composite
  Activation activation = Activation::Tanh;
  LossKind loss = LossKind::MeanSquared;
  double rank_ratio = 1.0;

  Index dim() const { return layout->dim(); }
};

struct MlpOptions {
  std::vector<Index> widths;
  Activation activation = Activation::Tanh;
  LossKind loss = LossKind::MeanSquared;
  std::uint64_t seed = 0;
};

namespace detail {

inline void check_widths(const std::vector<Index>& widths) {
  require(widths.size() >= 2, "an MLP needs at least an input and an output width");
  for (Index w : widths) require(w > 0, "layer widths must be positive");
}

inline std::string layer_name(std::size_t i, const char* what) {
  return "layer" + std::to_string(i) + "." + what;
}

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every entry of the slot.
inline void fill_uniform(const ParamLayout& layout, ParamVector& x, std::size_t slot, Index fan_in,
                         Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  auto m = layout.view(x, slot);
  for (Index c = 0; c < m.cols(); ++c) {
    for (Index r = 0; r < m.rows(); ++r) m(r, c) = dist(rng);
  }
}

}  // namespace detail

inline Network build_mlp(const MlpOptions& opt) {
  detail::check_widths(opt.widths);
  const auto& w = opt.widths;
  auto layout = std::make_shared<ParamLayout>();
  std::vector<LayerSlots> layers;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    LayerSlots s{w[i], w[i + 1], {}, {}, {}, {}};
    s.weight = layout->add(detail::layer_name(i, "weight"), w[i + 1], w[i]);
    s.bias = layout->add(detail::layer_name(i, "bias"), w[i + 1], 1);
    layers.push_back(s);
  }
  GraphBuilder gb(layout, w.front());
  int h = gb.input();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = gb.affine(h, detail::layer_name(i, "weight"), detail::layer_name(i, "bias"));
    if (i + 1 < layers.size()) h = gb.activation(h, opt.activation);
  }
  CompGraph graph = std::move(gb).build(h, opt.loss);

  ParamVector x(layout->dim());
  Rng rng(opt.seed);
  for (const auto& s : layers) {
    detail::fill_uniform(*layout, x, *s.weight, s.fan_in, rng);
    detail::fill_uniform(*layout, x, *s.bias, s.fan_in, rng);
  }
  return Network{layout, std::move(graph), std::move(x), NetworkKind::Mlp, w, std::move(layers),
                 std::nullopt, opt.activation, opt.loss, 1.0};
}

struct LowRankOptions {
  std::vector<Index> widths;
  double rank_ratio = 0.5;
  Activation activation = Activation::Tanh;
  LossKind loss = LossKind::MeanSquared;
  std::uint64_t seed = 0;
};

// The super-network of low-rank joint training plus the names of its core
// tensors. The core of an LFC composite is every U, V and every tensor that is
// not part of an LFC product (the biases).
struct Composite {
  Network super;
  std::vector<std::string> core_tensors;
};

// Every layer is an LFC layer (V U + W) X + b; hidden layers use the
// activation, so outputs are summed layer-wise rather than only at the end.
inline Composite build_lfc_composite(const LowRankOptions& opt) {
  detail::check_widths(opt.widths);
  const auto& w = opt.widths;
  auto layout = std::make_shared<ParamLayout>();
  std::vector<LayerSlots> layers;
  std::vector<std::string> core;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    const LfcLayerSpec spec(w[i], w[i + 1], opt.rank_ratio);
    LayerSlots s{w[i], w[i + 1], {}, {}, {}, {}};
    s.u = layout->add(detail::layer_name(i, "U"), spec.k(), w[i]);
    s.v = layout->add(detail::layer_name(i, "V"), w[i + 1], spec.k());
    s.weight = layout->add(detail::layer_name(i, "W"), w[i + 1], w[i]);
    s.bias = layout->add(detail::layer_name(i, "bias"), w[i + 1], 1);
    core.push_back(detail::layer_name(i, "U"));
    core.push_back(detail::layer_name(i, "V"));
    core.push_back(detail::layer_name(i, "bias"));
    layers.push_back(s);
  }
  GraphBuilder gb(layout, w.front());
  int h = gb.input();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = gb.lfc(h, detail::layer_name(i, "U"), detail::layer_name(i, "V"),
               detail::layer_name(i, "W"), detail::layer_name(i, "bias"));
    if (i + 1 < layers.size()) h = gb.activation(h, opt.activation);
  }
  CompGraph graph = std::move(gb).build(h, opt.loss);

  ParamVector x(layout->dim());
  Rng rng(opt.seed);
  for (const auto& s : layers) {
    const Index k = layout->slot(*s.u).rows;
    detail::fill_uniform(*layout, x, *s.u, s.fan_in, rng);
    detail::fill_uniform(*layout, x, *s.v, k, rng);
    detail::fill_uniform(*layout, x, *s.weight, s.fan_in, rng);
    detail::fill_uniform(*layout, x, *s.bias, s.fan_in, rng);
  }
  Network net{layout, std::move(graph), std::move(x), NetworkKind::LfcComposite, w,
              std::move(layers), std::nullopt, opt.activation, opt.loss, opt.rank_ratio};
  return Composite{std::move(net), std::move(core)};
}

// Standalone low-rank network: each layer is V (U X) + b with the same tensor
// names as the core of build_lfc_composite, so parameters can be copied by name.
inline Network build_low_rank_mlp(const LowRankOptions& opt) {
  detail::check_widths(opt.widths);
  const auto& w = opt.widths;
  auto layout = std::make_shared<ParamLayout>();
  std::vector<LayerSlots> layers;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    const LfcLayerSpec spec(w[i], w[i + 1], opt.rank_ratio);
    LayerSlots s{w[i], w[i + 1], {}, {}, {}, {}};
    s.u = layout->add(detail::layer_name(i, "U"), spec.k(), w[i]);
    s.v = layout->add(detail::layer_name(i, "V"), w[i + 1], spec.k());
    s.bias = layout->add(detail::layer_name(i, "bias"), w[i + 1], 1);
    layers.push_back(s);
  }
  GraphBuilder gb(layout, w.front());
  int h = gb.input();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = gb.affine(h, detail::layer_name(i, "U"), std::nullopt);
    h = gb.affine(h, detail::layer_name(i, "V"), detail::layer_name(i, "bias"));
    if (i + 1 < layers.size()) h = gb.activation(h, opt.activation);
  }
  CompGraph graph = std::move(gb).build(h, opt.loss);
  ParamVector x(layout->dim());
  Rng rng(opt.seed);
  for (const auto& s : layers) {
    const Index k = layout->slot(*s.u).rows;
    detail::fill_uniform(*layout, x, *s.u, s.fan_in, rng);
    detail::fill_uniform(*layout, x, *s.v, k, rng);
    detail::fill_uniform(*layout, x, *s.bias, s.fan_in, rng);
  }
  return Network{layout, std::move(graph), std::move(x), NetworkKind::LowRank, w,
                 std::move(layers), std::nullopt, opt.activation, opt.loss, opt.rank_ratio};
}

// Wide-and-deep: deep MLP output plus a bias-free linear map of the raw input.
// The deep part is the core and keeps the tensor names of build_mlp.
inline Composite build_wide_deep(const MlpOptions& deep) {
  Network d = build_mlp(deep);
  auto layout = std::make_shared<ParamLayout>(*d.layout);
  const auto wide = layout->add("wide.weight", deep.widths.back(), deep.widths.front());

  GraphBuilder gb(layout, deep.widths.front());
  int h = gb.input();
  for (std::size_t i = 0; i < d.layers.size(); ++i) {
    h = gb.affine(h, detail::layer_name(i, "weight"), detail::layer_name(i, "bias"));
    if (i + 1 < d.layers.size()) h = gb.activation(h, deep.activation);
  }
  const int w = gb.affine(gb.input(), "wide.weight", std::nullopt);
  const int out = gb.sum(h, w);
  CompGraph graph = std::move(gb).build(out, deep.loss);

  ParamVector x(layout->dim());
  x.head(d.dim()) = d.params;
  Rng rng(deep.seed ^ 0x9e3779b97f4a7c15ULL);
  detail::fill_uniform(*layout, x, wide, deep.widths.front(), rng);

  std::vector<std::string> core;
  for (const auto& s : d.layout->slots()) core.push_back(s.name);
  Network net{layout, std::move(graph), std::move(x), NetworkKind::WideDeep, deep.widths,
              d.layers, wide, deep.activation, deep.loss, 1.0};
  return Composite{std::move(net), std::move(core)};
}

// p_i = 1 iff coordinate i belongs to one of the named tensors.
inline Mask core_mask(const ParamLayout& layout, const std::vector<std::string>& core_tensors) {
  detail::require(!core_tensors.empty(), "core tensor set must not be empty");
  RealVector v = RealVector::Zero(layout.dim());
  for (const auto& name : core_tensors) {
    const auto& s = layout.slot(layout.require_slot(name));
    v.segment(s.offset, s.size()).setOnes();
  }
  std::vector<int> groups(static_cast<std::size_t>(layout.dim()));
  for (std::size_t t = 0; t < layout.size(); ++t) {
    const auto& s = layout.slot(t);
    for (Index i = 0; i < s.size(); ++i) groups[static_cast<std::size_t>(s.offset + i)] = static_cast<int>(t);
  }
  return Mask::from_values(std::move(v), Granularity::PerTensor, std::move(groups));
}

inline Mask core_mask(const Composite& c) { return core_mask(*c.super.layout, c.core_tensors); }

// Copies every tensor of `dst` from the same-named tensor of `src`.
inline void copy_tensors_by_name(const ParamLayout& src_layout, const ParamVector& src,
                                 const ParamLayout& dst_layout, ParamVector& dst) {
  for (std::size_t t = 0; t < dst_layout.size(); ++t) {
    const auto& ds = dst_layout.slot(t);
    const auto sid = src_layout.require_slot(ds.name);
    const auto& ss = src_layout.slot(sid);
    detail::require(ss.rows == ds.rows && ss.cols == ds.cols, "shape mismatch for '" + ds.name + "'");
    dst.segment(ds.offset, ds.size()) = src.segment(ss.offset, ss.size());
  }
}

// Dense MLP with each LFC layer materialised as V U + W.
inline Network collapse_network(const Network& composite) {
  detail::require(composite.kind == NetworkKind::LfcComposite, "collapse needs an LFC composite");
  Network dense = build_mlp({composite.widths, composite.activation, composite.loss, 0});
  const auto& src = *composite.layout;
  for (std::size_t i = 0; i < composite.layers.size(); ++i) {
    const auto& s = composite.layers[i];
    const auto& d = dense.layers[i];
    dense.layout->view(dense.params, *d.weight) =
        collapse_lfc(src.view(composite.params, *s.u), src.view(composite.params, *s.v),
                     src.view(composite.params, *s.weight));
    dense.layout->view(dense.params, *d.bias) = src.view(composite.params, *s.bias);
  }
  return dense;
}

// For each coordinate, the hidden neurons its parameter is attached to:
// incoming weights and bias of a neuron, and its outgoing weights. Output-layer
// biases and the wide branch touch no hidden neuron.
struct NeuronIncidence {
  struct Neuron {
    int layer;
    Index index;
  };
  struct Entry {
    int count = 0;
    std::array<Neuron, 2> at{};
  };

  Index dim = 0;
  std::vector<Index> hidden_widths;
  std::vector<Entry> coords;
};

inline NeuronIncidence neuron_incidence(const Network& net) {
  for (const auto& s : net.layers) {
    detail::require(s.weight.has_value() && !s.u.has_value(),
                    "neuron groups need a network of plain affine layers");
  }
  NeuronIncidence inc;
  inc.dim = net.dim();
  inc.coords.assign(static_cast<std::size_t>(net.dim()), {});
  const auto nl = net.layers.size();
  for (std::size_t i = 0; i + 1 < nl; ++i) inc.hidden_widths.push_back(net.layers[i].fan_out);

  auto attach = [&](Index coord, int layer, Index neuron) {
    auto& e = inc.coords[static_cast<std::size_t>(coord)];
    e.at[static_cast<std::size_t>(e.count++)] = {layer, neuron};
  };
  const auto& L = *net.layout;
  for (std::size_t i = 0; i < nl; ++i) {
    const auto& W = L.slot(*net.layers[i].weight);
    const bool out_hidden = i + 1 < nl;
    const bool in_hidden = i > 0;
    for (Index c = 0; c < W.cols; ++c) {
      for (Index r = 0; r < W.rows; ++r) {
        if (out_hidden) attach(W.coord(r, c), static_cast<int>(i), r);
        if (in_hidden) attach(W.coord(r, c), static_cast<int>(i) - 1, c);
      }
    }
    if (net.layers[i].bias && out_hidden) {
      const auto& B = L.slot(*net.layers[i].bias);
      for (Index r = 0; r < B.rows; ++r) attach(B.coord(r, 0), static_cast<int>(i), r);
    }
  }
  return inc;
}

inline std::vector<Index> slim_widths(const std::vector<Index>& widths, double r) {
  detail::require(r > 0.0 && r <= 1.0, "width ratio must be in (0, 1]");
  std::vector<Index> out = widths;
  for (std::size_t i = 1; i + 1 < out.size(); ++i) {
    out[i] = std::max<Index>(1, detail::scaled_floor(r, widths[i]));
  }
  return out;
}

// Keeps the lowest-index max(1, floor(r * width)) neurons of every hidden
// layer and zeroes every parameter attached to a dropped neuron.
inline Mask slim_width_mask(const Network& net, double r) {
  detail::require(r > 0.0 && r <= 1.0, "width ratio must be in (0, 1]");
  const auto inc = neuron_incidence(net);
  const auto keep = slim_widths(net.widths, r);
  RealVector v = RealVector::Ones(net.dim());
  for (Index i = 0; i < inc.dim; ++i) {
    const auto& e = inc.coords[static_cast<std::size_t>(i)];
    for (int a = 0; a < e.count; ++a) {
      const auto& n = e.at[static_cast<std::size_t>(a)];
      if (n.index >= keep[static_cast<std::size_t>(n.layer) + 1]) v[i] = 0.0;
    }
  }
  return Mask::from_values(std::move(v), Granularity::PerNeuron);
}

// Standalone narrow network whose parameters are the kept block of `net`.
inline Network slim_core(const Network& net, double r, std::uint64_t seed = 0) {
  const auto widths = slim_widths(net.widths, r);
  Network core = build_mlp({widths, net.activation, net.loss, seed});
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& s = net.layers[i];
    const auto& d = core.layers[i];
    const Index rows = widths[i + 1], cols = widths[i];
    core.layout->view(core.params, *d.weight) =
        net.layout->view(net.params, *s.weight).topLeftCorner(rows, cols);
    core.layout->view(core.params, *d.bias) = net.layout->view(net.params, *s.bias).topRows(rows);
  }
  return core;
}

}  // namespace psgd
