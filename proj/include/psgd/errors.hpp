#pragma once

#include <optional>
#include <stdexcept>
#include <string>

namespace psgd {

// Violated precondition: bad shapes, out-of-range parameters, unknown names.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A non-finite value appeared during evaluation. Carries the graph node id
// when the failure happened inside a computation graph.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what, std::optional<int> node = std::nullopt)
      : std::runtime_error(what), node_(node) {}

  std::optional<int> node() const noexcept { return node_; }

 private:
  std::optional<int> node_;
};

// A ratio whose denominator vanished (zero masked gradient, empty mask).
class DegenerateError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace detail
}  // namespace psgd
