#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>

namespace psgd {

using Index = Eigen::Index;

// Dense 64-bit storage. Matrices are column-major; a batch is a matrix whose
// columns are samples.
using RealVector = Eigen::VectorXd;
using RealMatrix = Eigen::MatrixXd;

// Flat parameter vector x in R^d. Its meaning comes from a ParamLayout.
using ParamVector = Eigen::VectorXd;

// Every random draw in the library goes through a caller-owned engine.
using Rng = std::mt19937_64;

inline bool all_finite(const RealVector& v) { return v.allFinite(); }

inline double squared_norm(const RealVector& v) { return v.squaredNorm(); }

// Bitwise equality, used where identical inputs must give identical results.
inline bool bit_equal(const RealVector& a, const RealVector& b) {
  if (a.size() != b.size()) return false;
  for (Index i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

}  // namespace psgd
