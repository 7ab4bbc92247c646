#pragma once

// Weighted datasets built from (biased) trajectories, lagged pairs, splits and Kabsch alignment.

#include <genspec/dynamics.hpp>
#include <genspec/errors.hpp>
#include <genspec/potentials.hpp>
#include <genspec/types.hpp>

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

namespace genspec {

/**
 * Samples x_i with reweighting factors w_i = exp(beta V(x_i)) stored in the log domain.
 *
 * log_weights = beta V(x_i) - shift, and by default shift = max_i beta V(x_i) so the largest
 * weight is exactly one.
 */
struct WeightedDataset {
  RowMatrix states;
  Vector bias_values;
  Vector log_weights;
  double shift = 0.0;
  double beta = 1.0;

  Index size() const { return states.rows(); }
  Index dim() const { return states.cols(); }
  Vector weights() const { return log_weights.array().exp().matrix(); }
  double mean_weight() const { return size() > 0 ? log_weights.array().exp().mean() : 0.0; }

  WeightedDataset subset(const std::vector<Index>& rows) const {
    WeightedDataset out;
    out.states.resize(static_cast<Index>(rows.size()), dim());
    out.bias_values.resize(static_cast<Index>(rows.size()));
    out.log_weights.resize(static_cast<Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Index r = rows[i];
      out.states.row(static_cast<Index>(i)) = states.row(r);
      out.bias_values[static_cast<Index>(i)] = bias_values[r];
      out.log_weights[static_cast<Index>(i)] = log_weights[r];
    }
    out.shift = shift;
    out.beta = beta;
    return out;
  }

  WeightedDataset rows(Index first, Index count) const {
    WeightedDataset out;
    out.states = states.middleRows(first, count);
    out.bias_values = bias_values.segment(first, count);
    out.log_weights = log_weights.segment(first, count);
    out.shift = shift;
    out.beta = beta;
    return out;
  }
};

inline WeightedDataset weighted_dataset(RowMatrix states, Vector bias_values, double beta, bool shift_to_max = true) {
  if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  if (bias_values.size() != states.rows()) throw ConfigError("bias values and states differ in length");
  if (!bias_values.allFinite()) throw InvalidInputError("non-finite bias value");
  if (!states.allFinite()) throw InvalidInputError("non-finite state");
  WeightedDataset ds;
  ds.beta = beta;
  ds.log_weights = beta * bias_values;
  ds.shift = (shift_to_max && ds.log_weights.size() > 0) ? ds.log_weights.maxCoeff() : 0.0;
  ds.log_weights.array() -= ds.shift;
  ds.states = std::move(states);
  ds.bias_values = std::move(bias_values);
  return ds;
}

/// Weights from the bias values recorded along `traj`.
inline WeightedDataset compute_weights(const Trajectory& traj, double beta) {
  return weighted_dataset(traj.states, traj.bias_values, beta);
}

/// Per-sample grad V, one row per state.
inline RowMatrix bias_gradients(const BiasState& bias, const RowMatrix& states) {
  if (bias.dim != states.cols()) throw ConfigError("bias dimension does not match states");
  RowMatrix out = RowMatrix::Zero(states.rows(), states.cols());
  Vector g(states.cols());
  for (Index i = 0; i < states.rows(); ++i) {
    g.setZero();
    accumulate_bias(bias, states.row(i).transpose(), g);
    out.row(i) = g.transpose();
  }
  return out;
}

/// Pairs (x_i, y_i = x_{i+stride}) from one trajectory, weighted by the x-side state.
struct LaggedPairs {
  RowMatrix x;
  RowMatrix y;
  double lag = 0.0;
  Vector weights;

  Index size() const { return x.rows(); }
};

/// Lag is stride times the spacing between saved states. `weights` defaults to all ones.
inline LaggedPairs make_lagged_pairs(const Trajectory& traj, Index stride, const Vector& state_weights = {}) {
  if (stride < 1) throw ConfigError("lag stride must be >= 1");
  const Index n = traj.size();
  if (stride >= n) throw EmptyDatasetError("lag stride leaves no pairs");
  if (state_weights.size() != 0 && state_weights.size() != n) throw ConfigError("weight count mismatch");
  const double spacing = n > 1 ? traj.times[1] - traj.times[0] : traj.meta.dt;
  LaggedPairs pairs;
  pairs.x = traj.states.topRows(n - stride);
  pairs.y = traj.states.bottomRows(n - stride);
  pairs.lag = static_cast<double>(stride) * spacing;
  pairs.weights = state_weights.size() == 0 ? Vector::Ones(n - stride) : Vector(state_weights.head(n - stride));
  return pairs;
}

/// Disjoint random partition with ceil(fraction * n) training rows; rows keep their original order.
inline std::pair<WeightedDataset, WeightedDataset> split(const WeightedDataset& ds, double fraction,
                                                         std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
  const Index n = ds.size();
  if (n < 2) throw EmptyDatasetError("split needs at least two samples");
  const auto n_train = static_cast<Index>(std::ceil(static_cast<long double>(fraction) * n - 1e-9L));
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Index> train(perm.begin(), perm.begin() + n_train);
  std::vector<Index> valid(perm.begin() + n_train, perm.end());
  std::sort(train.begin(), train.end());
  std::sort(valid.begin(), valid.end());
  return {ds.subset(train), ds.subset(valid)};
}

// ---------------------------------------------------------------------------
// Kabsch superposition

namespace detail {

inline Eigen::Matrix<double, Eigen::Dynamic, 3> as_atoms(const Eigen::Ref<const Vector>& flat) {
  if (flat.size() % 3 != 0) throw ConfigError("coordinate count is not a multiple of 3");
  const Index k = flat.size() / 3;
  Eigen::Matrix<double, Eigen::Dynamic, 3> atoms(k, 3);
  for (Index a = 0; a < k; ++a) atoms.row(a) = flat.segment<3>(3 * a).transpose();
  return atoms;
}

}  // namespace detail

inline double rmsd(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  if (a.size() != b.size() || a.size() % 3 != 0) throw ConfigError("rmsd needs equal-length 3k vectors");
  return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size() / 3));
}

/// Centered copy of a flat 3k coordinate vector.
inline Vector center_coordinates(const Eigen::Ref<const Vector>& flat) {
  auto atoms = detail::as_atoms(flat);
  const Eigen::RowVector3d centroid = atoms.colwise().mean();
  atoms.rowwise() -= centroid;
  Vector out(flat.size());
  for (Index a = 0; a < atoms.rows(); ++a) out.segment<3>(3 * a) = atoms.row(a).transpose();
  return out;
}

/// Proper rotation R (det +1) minimising |R p_a - q_a| over centered point sets.
inline Eigen::Matrix3d kabsch_rotation(const Eigen::Matrix<double, Eigen::Dynamic, 3>& p,
                                       const Eigen::Matrix<double, Eigen::Dynamic, 3>& q) {
  const Eigen::Matrix3d h = p.transpose() * q;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d s = svd.singularValues();
  if (!(s[0] > 0.0) || s[1] <= 1e-12 * s[0]) throw AlignmentError("degenerate covariance in Kabsch alignment");
  const Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d v = svd.matrixV();
  const double sign = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Eigen::Matrix3d corr = Eigen::Vector3d(1.0, 1.0, sign).asDiagonal();
  return v * corr * u.transpose();
}

/// Centers each frame and rotates it onto the centered reference.
inline RowMatrix kabsch_align(const RowMatrix& frames, const Eigen::Ref<const Vector>& reference) {
  if (frames.cols() != reference.size()) throw ConfigError("frame width differs from reference");
  auto ref = detail::as_atoms(center_coordinates(reference));
  if (ref.rows() < 3) throw AlignmentError("Kabsch alignment needs at least three atoms");
  {
    Eigen::JacobiSVD<Eigen::Matrix<double, Eigen::Dynamic, 3>> ref_svd(ref);
    const Eigen::Vector3d s = ref_svd.singularValues();
    if (!(s[0] > 0.0) || s[1] <= 1e-12 * s[0]) throw AlignmentError("reference structure is collinear");
  }
  RowMatrix out(frames.rows(), frames.cols());
  for (Index f = 0; f < frames.rows(); ++f) {
    const Vector row = frames.row(f).transpose();
    auto p = detail::as_atoms(center_coordinates(row));
    const Eigen::Matrix3d r = kabsch_rotation(p, ref);
    const Eigen::Matrix<double, Eigen::Dynamic, 3> aligned = p * r.transpose();
    for (Index a = 0; a < aligned.rows(); ++a) out.row(f).segment<3>(3 * a) = aligned.row(a);
  }
  return out;
}

}  // namespace genspec
