#pragma once

#include "psgd/errors.hpp"
#include "psgd/tensor.hpp"

#include <span>
#include <string>
#include <utility>
#include <vector>

namespace psgd {

enum class Granularity { PerWeight, PerNeuron, PerTensor };

inline const char* to_string(Granularity g) {
  switch (g) {
    case Granularity::PerWeight: return "per_weight";
    case Granularity::PerNeuron: return "per_neuron";
    case Granularity::PerTensor: return "per_tensor";
  }
  return "?";
}

// Binary vector p in {0,1}^d. A valid mask has at least one nonzero entry;
// the all-zero sentinel exists only through Mask::sentinel. When a group map
// is attached the mask is constant within each group.
class Mask {
 public:
  static Mask ones(Index d, Granularity g = Granularity::PerWeight) {
    detail::require(d > 0, "mask dimension must be positive");
    return Mask(RealVector::Ones(d), g, {});
  }

  static Mask from_values(RealVector v, Granularity g = Granularity::PerWeight,
                          std::vector<int> groups = {}) {
    detail::require(v.size() > 0, "mask dimension must be positive");
    bool any = false;
    for (Index i = 0; i < v.size(); ++i) {
      detail::require(v[i] == 0.0 || v[i] == 1.0, "mask entries must be 0 or 1");
      any = any || v[i] == 1.0;
    }
    detail::require(any, "mask must have at least one nonzero entry");
    if (!groups.empty()) {
      detail::require(static_cast<Index>(groups.size()) == v.size(), "group map size mismatch");
      std::vector<std::pair<int, double>> seen;
      for (Index i = 0; i < v.size(); ++i) {
        const int gid = groups[static_cast<std::size_t>(i)];
        bool found = false;
        for (auto& [id, val] : seen) {
          if (id == gid) {
            detail::require(val == v[i], "grouped mask is not constant within group " +
                                             std::to_string(gid));
            found = true;
            break;
          }
        }
        if (!found) seen.emplace_back(gid, v[i]);
      }
    }
    return Mask(std::move(v), g, std::move(groups));
  }

  static Mask from_indices(Index d, std::span<const Index> on) {
    RealVector v = RealVector::Zero(d);
    for (Index i : on) {
      detail::require(i >= 0 && i < d, "mask index out of range");
      v[i] = 1.0;
    }
    return from_values(std::move(v));
  }

  // All-zero error sentinel.
  static Mask sentinel(Index d) { return Mask(RealVector::Zero(d), Granularity::PerWeight, {}); }

  Index dim() const { return values_.size(); }
  Index count() const { return static_cast<Index>(values_.sum()); }
  double density() const { return static_cast<double>(count()) / static_cast<double>(dim()); }
  bool is_sentinel() const { return count() == 0; }
  bool is_all_ones() const { return count() == dim(); }
  bool operator[](Index i) const { return values_[i] != 0.0; }

  const RealVector& values() const { return values_; }
  Granularity granularity() const { return granularity_; }
  const std::vector<int>& groups() const { return groups_; }

  // p (.) v
  RealVector apply(const RealVector& v) const {
    detail::require(v.size() == dim(), "mask/vector dimension mismatch");
    return values_.cwiseProduct(v);
  }

  // (1 - p) (.) v
  RealVector apply_complement(const RealVector& v) const {
    detail::require(v.size() == dim(), "mask/vector dimension mismatch");
    return (1.0 - values_.array()).matrix().cwiseProduct(v);
  }

  std::vector<Index> indices() const {
    std::vector<Index> out;
    for (Index i = 0; i < dim(); ++i) {
      if (values_[i] != 0.0) out.push_back(i);
    }
    return out;
  }

  friend bool operator==(const Mask& a, const Mask& b) { return bit_equal(a.values_, b.values_); }

 private:
  Mask(RealVector v, Granularity g, std::vector<int> groups)
      : values_(std::move(v)), granularity_(g), groups_(std::move(groups)) {}

  RealVector values_;
  Granularity granularity_ = Granularity::PerWeight;
  std::vector<int> groups_;
};

}  // namespace psgd
