#pragma once

#include <Eigen/Dense>

#include <cstdint>

namespace genspec {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Row-per-sample storage for states and per-sample arrays.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using VectorRef = Eigen::Ref<Vector>;
using ConstVectorRef = Eigen::Ref<const Vector>;

/// Axis-aligned box used for domains, probe grids and oracle grids.
struct Box {
  Vector lo;
  Vector hi;

  Index dim() const { return lo.size(); }
  bool contains(const ConstVectorRef& x) const {
    for (Index k = 0; k < lo.size(); ++k) {
      if (x[k] < lo[k] || x[k] > hi[k]) return false;
    }
    return true;
  }
};

}  // namespace genspec
