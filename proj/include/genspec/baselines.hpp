#pragma once

// Reweighted transfer-operator ridge estimator for comparison with the generator estimator.

#include <genspec/data.hpp>
#include <genspec/errors.hpp>
#include <genspec/features.hpp>
#include <genspec/parallel.hpp>
#include <genspec/types.hpp>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <vector>

namespace genspec {

struct TransferCovariances {
  Matrix C;
  /// Symmetrised cross-covariance (C_t + C_t^T) / 2.
  Matrix C_t;
  double lag = 0.0;
  Index n = 0;
};

/// Eigenpairs of (C + gamma I)^{-1} C_t sorted by mu descending; lambda = ln(mu) / lag when mu > 0.
struct TransferEigenpairSet {
  std::vector<double> mus;
  /// NaN where the pair is invalid (mu <= 0).
  std::vector<double> lambdas;
  std::vector<bool> valid;
  Matrix coeffs;
  double lag = 0.0;
  double gamma = 0.0;

  Index size() const { return static_cast<Index>(mus.size()); }
};

namespace detail {

struct TransferSums {
  Matrix xx;
  Matrix xy;
  Index n = 0;
};

inline TransferSums transfer_block(const RowMatrix& zx, const RowMatrix& zy, const Vector& w) {
  if (!zx.allFinite() || !zy.allFinite()) throw NumericError("non-finite feature value in lagged pairs");
  const Vector sw = w.array().sqrt().matrix();
  const Matrix ax = sw.asDiagonal() * Matrix(zx);
  const Matrix ay = sw.asDiagonal() * Matrix(zy);
  return {ax.transpose() * ax, ax.transpose() * ay, zx.rows()};
}

inline TransferCovariances finish_transfer(const TransferSums& s, double lag) {
  if (s.n == 0) throw EmptyDatasetError("no lagged pairs");
  TransferCovariances out;
  const double inv_n = 1.0 / static_cast<double>(s.n);
  out.C = s.xx * inv_n;
  out.C = 0.5 * (out.C + out.C.transpose()).eval();
  const Matrix ct = s.xy * inv_n;
  out.C_t = 0.5 * (ct + ct.transpose());
  out.lag = lag;
  out.n = s.n;
  return out;
}

}  // namespace detail

/// C = (1/n) sum w z(x) z(x)^T and C_t = sym((1/n) sum w z(x) z(y)^T) from precomputed features.
inline TransferCovariances transfer_covariances(const LaggedPairs& pairs, const RowMatrix& zx, const RowMatrix& zy) {
  if (zx.rows() != pairs.size() || zy.rows() != pairs.size() || zx.cols() != zy.cols()) {
    throw ConfigError("feature blocks do not match the lagged pairs");
  }
  if (!pairs.weights.allFinite() || (pairs.weights.array() < 0.0).any()) throw NumericError("invalid pair weight");
  return detail::finish_transfer(detail::transfer_block(zx, zy, pairs.weights), pairs.lag);
}

/// Streaming variant: features are evaluated in fixed blocks and folded in order.
inline TransferCovariances transfer_covariances(const FeatureDictionary& dict, const LaggedPairs& pairs,
                                                Index chunk = 4096) {
  dict.validate();
  const Index n = pairs.size();
  if (n == 0) throw EmptyDatasetError("no lagged pairs");
  auto parts = map_chunks<detail::TransferSums>(n, chunk, [&](Index, Index first, Index count) {
    const RowMatrix x = pairs.x.middleRows(first, count);
    const RowMatrix y = pairs.y.middleRows(first, count);
    const Vector w = pairs.weights.segment(first, count);
    if (!w.allFinite() || (w.array() < 0.0).any()) throw NumericError("invalid pair weight");
    return detail::transfer_block(evaluate_values(dict, x), evaluate_values(dict, y), w);
  });
  detail::TransferSums total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    total.xx += parts[i].xx;
    total.xy += parts[i].xy;
    total.n += parts[i].n;
  }
  return detail::finish_transfer(total, pairs.lag);
}

/// Generalised symmetric problem C_t v = mu (C + gamma I) v via Cholesky whitening.
inline TransferEigenpairSet transfer_eigensolve(const TransferCovariances& cov, double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be non-negative");
  const Index m = cov.C.rows();
  if (cov.C_t.rows() != m || cov.C_t.cols() != m || cov.C.cols() != m) throw ConfigError("covariance shapes differ");
  Matrix reg = cov.C;
  reg.diagonal().array() += gamma;
  Eigen::LLT<Matrix> llt(reg);
  if (llt.info() != Eigen::Success) throw NumericError("C + gamma I is not positive definite; increase gamma");
  Matrix reduced = llt.matrixL().solve(cov.C_t);
  reduced = llt.matrixL().solve(reduced.transpose()).transpose();
  reduced = 0.5 * (reduced + reduced.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Matrix> es(reduced);
  if (es.info() != Eigen::Success) throw NumericError("transfer eigensolve did not converge");
  const Vector mu = es.eigenvalues().reverse();
  const Matrix u = es.eigenvectors().rowwise().reverse();
  Matrix v = llt.matrixU().solve(u);

  TransferEigenpairSet out;
  out.lag = cov.lag;
  out.gamma = gamma;
  out.coeffs.resize(m, m);
  for (Index i = 0; i < m; ++i) {
    if (!std::isfinite(mu[i])) throw NumericError("non-finite transfer eigenvalue");
    Vector c = v.col(i);
    const double nrm = std::sqrt(std::max(0.0, c.dot(cov.C * c)));
    if (nrm > 0.0) c /= nrm;
    Index big = 0;
    c.cwiseAbs().maxCoeff(&big);
    if (c[big] < 0.0) c = -c;
    out.coeffs.col(i) = c;
    out.mus.push_back(mu[i]);
    const bool ok = mu[i] > 0.0 && cov.lag > 0.0;
    out.valid.push_back(mu[i] > 0.0);
    out.lambdas.push_back(ok ? std::log(mu[i]) / cov.lag
                             : (mu[i] > 0.0 && cov.lag == 0.0 ? 0.0 : std::numeric_limits<double>::quiet_NaN()));
  }
  return out;
}

inline TransferEigenpairSet transfer_eigensolve(const Matrix& C, const Matrix& C_t, double gamma, double lag) {
  TransferCovariances cov;
  cov.C = C;
  cov.C_t = 0.5 * (C_t + C_t.transpose());
  cov.lag = lag;
  return transfer_eigensolve(cov, gamma);
}

/// Values of f_i = sum_j coeffs(j, i) z_j at `x`.
inline Vector evaluate_transfer_eigenfunction(const FeatureDictionary& dict, const TransferEigenpairSet& eig, Index i,
                                              const RowMatrix& x) {
  if (i < 0 || i >= eig.size()) throw IndexError("transfer eigenpair index out of range");
  return evaluate_values(dict, x) * eig.coeffs.col(i);
}

}  // namespace genspec
