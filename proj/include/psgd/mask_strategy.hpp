#pragma once

// Mask selection rules for the partial-SGD loop: all-ones, a fixed
// subnetwork, Bernoulli dropout, top-k (meProp), alternating lists and
// disjoint neuron partitions (independent subnet training).

#include "psgd/errors.hpp"
#include "psgd/mask.hpp"
#include "psgd/model_zoo.hpp"
#include "psgd/tensor.hpp"

#include <algorithm>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <variant>
#include <vector>

namespace psgd {

// Indicator of the k largest-magnitude entries; ties go to the lower index.
inline Mask top_k_mask(const RealVector& g, Index k) {
  detail::require(k >= 1 && k <= g.size(), "top-k needs 1 <= k <= d");
  std::vector<Index> order(static_cast<std::size_t>(g.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return std::abs(g[a]) > std::abs(g[b]); });
  RealVector v = RealVector::Zero(g.size());
  for (Index i = 0; i < k; ++i) v[order[static_cast<std::size_t>(i)]] = 1.0;
  return Mask::from_values(std::move(v));
}

// ||g||^2 / ||p (.) g||^2
inline double mask_overlap_ratio(const Mask& p, const RealVector& g) {
  const double masked = p.apply(g).squaredNorm();
  if (masked == 0.0) throw DegenerateError("mask removes the whole gradient");
  return g.squaredNorm() / masked;
}

// Splits the neurons of every hidden layer at random into k sets and returns
// one mask per worker. A parameter belongs to a worker when every hidden
// neuron it touches is in that worker's set; parameters touching no hidden
// neuron go to worker 0; parameters bridging two workers belong to nobody.
inline std::vector<Mask> partition_disjoint(const NeuronIncidence& inc, Index k, Rng& rng) {
  detail::require(k >= 1, "partition needs at least one worker");
  for (Index w : inc.hidden_widths) {
    detail::require(w >= k, "hidden layer of width " + std::to_string(w) + " cannot be split into " +
                                std::to_string(k) + " sets");
  }
  std::vector<std::vector<Index>> owner;
  for (Index w : inc.hidden_widths) {
    std::vector<Index> perm(static_cast<std::size_t>(w));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Index> own(static_cast<std::size_t>(w));
    for (std::size_t j = 0; j < perm.size(); ++j) own[static_cast<std::size_t>(perm[j])] = static_cast<Index>(j) % k;
    owner.push_back(std::move(own));
  }
  std::vector<RealVector> vals(static_cast<std::size_t>(k), RealVector::Zero(inc.dim));
  for (Index i = 0; i < inc.dim; ++i) {
    const auto& e = inc.coords[static_cast<std::size_t>(i)];
    Index who = 0;
    bool shared = true;
    for (int a = 0; a < e.count; ++a) {
      const auto& n = e.at[static_cast<std::size_t>(a)];
      const Index o = owner[static_cast<std::size_t>(n.layer)][static_cast<std::size_t>(n.index)];
      if (a == 0) {
        who = o;
      } else if (o != who) {
        shared = false;
      }
    }
    if (shared) vals[static_cast<std::size_t>(who)][i] = 1.0;
  }
  std::vector<Mask> out;
  for (auto& v : vals) out.push_back(Mask::from_values(std::move(v), Granularity::PerNeuron));
  return out;
}

struct AllOnesRule {};
struct FixedRule {
  Mask mask;
};
struct DropoutRule {
  double keep;
  Granularity granularity;
  std::shared_ptr<const NeuronIncidence> neurons;  // per-neuron
  std::shared_ptr<const ParamLayout> layout;       // per-tensor
};
struct TopKRule {
  Index k;
};
struct AlternatingRule {
  std::vector<Mask> masks;
};
struct PartitionRule {
  Index workers;
  Index local_steps;
  std::shared_ptr<const NeuronIncidence> neurons;
  std::vector<Mask> current;
  Index round = -1;
};

class MaskStrategy {
 public:
  static MaskStrategy all_ones() { return MaskStrategy(AllOnesRule{}); }
  static MaskStrategy fixed(Mask m) { return MaskStrategy(FixedRule{std::move(m)}); }

  static MaskStrategy dropout(double keep) {
    check_keep(keep);
    return MaskStrategy(DropoutRule{keep, Granularity::PerWeight, nullptr, nullptr});
  }
  static MaskStrategy neuron_dropout(double keep, NeuronIncidence inc) {
    check_keep(keep);
    return MaskStrategy(DropoutRule{keep, Granularity::PerNeuron,
                                    std::make_shared<const NeuronIncidence>(std::move(inc)), nullptr});
  }
  static MaskStrategy tensor_dropout(double keep, std::shared_ptr<const ParamLayout> layout) {
    check_keep(keep);
    detail::require(layout != nullptr, "per-tensor dropout needs a layout");
    return MaskStrategy(DropoutRule{keep, Granularity::PerTensor, nullptr, std::move(layout)});
  }
  static MaskStrategy top_k(Index k) {
    detail::require(k >= 1, "top-k needs k >= 1");
    return MaskStrategy(TopKRule{k});
  }
  static MaskStrategy alternating(std::vector<Mask> masks) {
    detail::require(!masks.empty(), "alternating strategy needs at least one mask");
    return MaskStrategy(AlternatingRule{std::move(masks)});
  }
  static MaskStrategy disjoint(Index workers, Index local_steps, NeuronIncidence inc) {
    detail::require(workers >= 1, "partition needs at least one worker");
    detail::require(local_steps >= 1, "partition needs at least one local step");
    return MaskStrategy(PartitionRule{workers, local_steps,
                                      std::make_shared<const NeuronIncidence>(std::move(inc)), {}, -1});
  }

  bool needs_gradient() const { return std::holds_alternative<TopKRule>(rule_); }

  std::string name() const {
    return std::visit(
        [](const auto& r) -> std::string {
          using R = std::decay_t<decltype(r)>;
          if constexpr (std::is_same_v<R, AllOnesRule>) return "all_ones";
          else if constexpr (std::is_same_v<R, FixedRule>) return "fixed";
          else if constexpr (std::is_same_v<R, DropoutRule>) return "dropout";
          else if constexpr (std::is_same_v<R, TopKRule>) return "top_k";
          else if constexpr (std::is_same_v<R, AlternatingRule>) return "alternating";
          else return "disjoint_partition";
        },
        rule_);
  }

  // Mask for step t. Only the partition rule carries state (the current
  // partition), so calls on one instance must be sequential.
  Mask next(Index t, Index dim, const ParamVector* grad, Rng& rng) {
    detail::require(t >= 0, "step index must be nonnegative");
    if (auto* r = std::get_if<AllOnesRule>(&rule_)) {
      (void)r;
      return Mask::ones(dim);
    }
    if (auto* r = std::get_if<FixedRule>(&rule_)) {
      detail::require(r->mask.dim() == dim, "fixed mask dimension mismatch");
      return r->mask;
    }
    if (auto* r = std::get_if<DropoutRule>(&rule_)) return draw_dropout(*r, dim, rng);
    if (auto* r = std::get_if<TopKRule>(&rule_)) {
      if (grad == nullptr) throw ContractError("top-k mask needs the current gradient");
      detail::require(grad->size() == dim, "gradient dimension mismatch");
      return top_k_mask(*grad, r->k);
    }
    if (auto* r = std::get_if<AlternatingRule>(&rule_)) {
      const auto& m = r->masks[static_cast<std::size_t>(t % static_cast<Index>(r->masks.size()))];
      detail::require(m.dim() == dim, "alternating mask dimension mismatch");
      return m;
    }
    auto& r = std::get<PartitionRule>(rule_);
    detail::require(r.neurons->dim == dim, "partition dimension mismatch");
    const Index round = t / (r.workers * r.local_steps);
    if (round != r.round) {
      r.current = partition_disjoint(*r.neurons, r.workers, rng);
      r.round = round;
    }
    return r.current[static_cast<std::size_t>(t % r.workers)];
  }

 private:
  using Rule = std::variant<AllOnesRule, FixedRule, DropoutRule, TopKRule, AlternatingRule, PartitionRule>;

  explicit MaskStrategy(Rule r) : rule_(std::move(r)) {}

  static void check_keep(double keep) {
    detail::require(keep > 0.0 && keep <= 1.0, "dropout keep probability must be in (0, 1]");
  }

  // All-zero draws are rejected and redrawn so the result is a valid mask.
  static Mask draw_dropout(const DropoutRule& r, Index dim, Rng& rng) {
    std::bernoulli_distribution coin(r.keep);
    for (int attempt = 0; attempt < 10000; ++attempt) {
      RealVector v(dim);
      std::vector<int> groups;
      if (r.granularity == Granularity::PerWeight) {
        for (Index i = 0; i < dim; ++i) v[i] = coin(rng) ? 1.0 : 0.0;
      } else if (r.granularity == Granularity::PerNeuron) {
        const auto& inc = *r.neurons;
        detail::require(inc.dim == dim, "neuron dropout dimension mismatch");
        std::vector<std::vector<bool>> kept;
        for (Index w : inc.hidden_widths) {
          std::vector<bool> layer(static_cast<std::size_t>(w));
          for (Index j = 0; j < w; ++j) layer[static_cast<std::size_t>(j)] = coin(rng);
          kept.push_back(std::move(layer));
        }
        for (Index i = 0; i < dim; ++i) {
          const auto& e = inc.coords[static_cast<std::size_t>(i)];
          bool on = true;
          for (int a = 0; a < e.count; ++a) {
            const auto& n = e.at[static_cast<std::size_t>(a)];
            on = on && kept[static_cast<std::size_t>(n.layer)][static_cast<std::size_t>(n.index)];
          }
          v[i] = on ? 1.0 : 0.0;
        }
      } else {
        const auto& L = *r.layout;
        detail::require(L.dim() == dim, "tensor dropout dimension mismatch");
        groups.resize(static_cast<std::size_t>(dim));
        for (std::size_t t = 0; t < L.size(); ++t) {
          const auto& s = L.slot(t);
          const double on = coin(rng) ? 1.0 : 0.0;
          v.segment(s.offset, s.size()).setConstant(on);
          std::fill_n(groups.begin() + s.offset, s.size(), static_cast<int>(t));
        }
      }
      if (v.sum() > 0.0) return Mask::from_values(std::move(v), r.granularity, std::move(groups));
    }
    throw DegenerateError("dropout produced only empty masks");
  }

  Rule rule_;
};

inline Mask next_mask(MaskStrategy& s, Index t, Index dim, const ParamVector* grad, Rng& rng) {
  return s.next(t, dim, grad, rng);
}

}  // namespace psgd
