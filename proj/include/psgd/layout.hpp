#pragma once

#include "psgd/errors.hpp"
#include "psgd/tensor.hpp"

#include <optional>
#include <string>
#include <vector>

namespace psgd {

// One named tensor inside the flat parameter vector, stored column-major.
struct TensorSlot {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  Index offset = 0;

  Index size() const { return rows * cols; }
  Index coord(Index r, Index c) const { return offset + c * rows + r; }
};

// Bijection between named tensors and the coordinates of a ParamVector.
// Offsets are contiguous and assigned in insertion order.
class ParamLayout {
 public:
  std::size_t add(std::string name, Index rows, Index cols) {
    detail::require(rows > 0 && cols > 0, "tensor '" + name + "' must have positive shape");
    detail::require(!find(name).has_value(), "duplicate tensor name '" + name + "'");
    slots_.push_back(TensorSlot{std::move(name), rows, cols, dim_});
    dim_ += rows * cols;
    return slots_.size() - 1;
  }

  Index dim() const { return dim_; }
  std::size_t size() const { return slots_.size(); }
  const std::vector<TensorSlot>& slots() const { return slots_; }

  const TensorSlot& slot(std::size_t id) const {
    detail::require(id < slots_.size(), "tensor slot out of range");
    return slots_[id];
  }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      if (slots_[i].name == name) return i;
    }
    return std::nullopt;
  }

  std::size_t require_slot(const std::string& name) const {
    auto id = find(name);
    if (!id) throw ContractError("unknown tensor '" + name + "'");
    return *id;
  }

  Eigen::Map<const RealMatrix> view(const ParamVector& x, std::size_t id) const {
    const auto& s = slot(id);
    return {x.data() + s.offset, s.rows, s.cols};
  }

  Eigen::Map<RealMatrix> view(ParamVector& x, std::size_t id) const {
    const auto& s = slot(id);
    return {x.data() + s.offset, s.rows, s.cols};
  }

 private:
  std::vector<TensorSlot> slots_;
  Index dim_ = 0;
};

}  // namespace psgd
