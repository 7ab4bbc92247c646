#pragma once

// Reweighted resolvent ridge estimator of the Langevin generator.

#include <genspec/data.hpp>
#include <genspec/errors.hpp>
#include <genspec/features.hpp>
#include <genspec/parallel.hpp>
#include <genspec/potentials.hpp>
#include <genspec/types.hpp>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace genspec {

/**
 * How a sample enters the Dirichlet part of the energy matrix.
 *
 * reweighted:   w * (grad z_i . grad z_j), an unbiased estimate of w_bar * E_pi[grad z_i . grad z_j].
 * product_rule: grad(sqrt(w) z_i) . grad(sqrt(w) z_j) with grad sqrt(w) = (beta/2) sqrt(w) grad V.
 *               Needs bias gradients; kept for comparison, it adds bias-dependent terms that do
 *               not vanish in expectation.
 */
enum class EnergyForm { reweighted, product_rule };

/// Empirical C = (1/n) sum w z z^T and W = eta C + (1/(beta n)) sum w grad z grad z^T.
struct CovariancePair {
  Matrix C;
  Matrix W;
  double eta = 0.1;
  double beta = 1.0;
  Index n = 0;
  bool weighted = true;
  /// Mean of the (shifted) weights used; 1 for the unweighted variant.
  double mean_weight = 1.0;
};

/// Raw sums over a block of samples; folded in chunk order.
struct CovarianceSums {
  Matrix zz;
  Matrix gg;
  double weight_sum = 0.0;
  Index n = 0;

  void add(const CovarianceSums& other) {
    if (n == 0 && zz.size() == 0) {
      *this = other;
      return;
    }
    zz += other.zz;
    gg += other.gg;
    weight_sum += other.weight_sum;
    n += other.n;
  }
};

namespace detail {

inline void check_finite_rows(const FeatureEval& fe, Index first_index) {
  for (Index i = 0; i < fe.samples(); ++i) {
    if (!fe.values.row(i).allFinite() || !fe.jacobians.row(i).allFinite()) {
      throw NumericError("non-finite feature value at sample " + std::to_string(first_index + i));
    }
  }
}

/**
 * Weighted block sums. `weights` may be empty (all ones). `bias_grads` is only read for
 * EnergyForm::product_rule.
 */
inline CovarianceSums block_sums(const FeatureEval& fe, const Vector* weights, const RowMatrix* bias_grads, double beta,
                                 EnergyForm form, Index first_index) {
  check_finite_rows(fe, first_index);
  const Index n = fe.samples();
  const Index m = fe.features();
  const Index d = fe.dim();
  Vector sw = Vector::Ones(n);
  double wsum = static_cast<double>(n);
  if (weights != nullptr) {
    if (weights->size() != n) throw ConfigError("weight count does not match feature rows");
    if (!weights->allFinite() || (weights->array() < 0.0).any()) {
      throw NumericError("invalid weight in block starting at sample " + std::to_string(first_index));
    }
    sw = weights->array().sqrt().matrix();
    wsum = weights->sum();
  }
  const Matrix zs = sw.asDiagonal() * Matrix(fe.values);
  CovarianceSums out;
  out.zz = zs.transpose() * zs;
  out.gg = Matrix::Zero(m, m);
  Matrix gk(n, m);
  for (Index k = 0; k < d; ++k) {
    for (Index j = 0; j < m; ++j) gk.col(j) = fe.jacobians.col(j * d + k);
    if (form == EnergyForm::product_rule) {
      if (bias_grads == nullptr) throw ConfigError("product-rule energy needs bias gradients");
      gk += (0.5 * beta * bias_grads->col(k)).asDiagonal() * Matrix(fe.values);
    }
    const Matrix gs = sw.asDiagonal() * gk;
    out.gg.noalias() += gs.transpose() * gs;
  }
  out.weight_sum = wsum;
  out.n = n;
  return out;
}

inline CovariancePair finish(const CovarianceSums& sums, double eta, double beta, bool weighted) {
  if (sums.n == 0) throw EmptyDatasetError("no samples for covariance assembly");
  CovariancePair cov;
  const double inv_n = 1.0 / static_cast<double>(sums.n);
  Matrix c = sums.zz * inv_n;
  c = 0.5 * (c + c.transpose()).eval();
  Matrix dirichlet = sums.gg * (inv_n / beta);
  dirichlet = 0.5 * (dirichlet + dirichlet.transpose()).eval();
  cov.C = c;
  cov.W = eta * c + dirichlet;
  cov.eta = eta;
  cov.beta = beta;
  cov.n = sums.n;
  cov.weighted = weighted;
  cov.mean_weight = weighted ? sums.weight_sum * inv_n : 1.0;
  if (!cov.C.allFinite() || !cov.W.allFinite()) throw NumericError("non-finite covariance entries");
  return cov;
}

}  // namespace detail

/**
 * Covariance pair from precomputed features. With weighted = false every weight is one and
 * the bias plays no role.
 */
inline CovariancePair assemble_covariances(const FeatureEval& feval, const WeightedDataset& dataset,
                                           const RowMatrix& bias_grads, double eta, bool weighted,
                                           EnergyForm form = EnergyForm::reweighted) {
  if (!(eta > 0.0)) throw ConfigError("eta must be positive");
  if (feval.samples() != dataset.size()) throw ConfigError("feature rows do not match dataset size");
  if (weighted && form == EnergyForm::product_rule && bias_grads.rows() != dataset.size()) {
    throw ConfigError("bias gradient rows do not match dataset size");
  }
  const Vector w = dataset.weights();
  const auto sums = detail::block_sums(feval, weighted ? &w : nullptr,
                                       weighted && form == EnergyForm::product_rule ? &bias_grads : nullptr,
                                       dataset.beta, weighted ? form : EnergyForm::reweighted, 0);
  return detail::finish(sums, eta, dataset.beta, weighted);
}

inline CovariancePair assemble_covariances(const FeatureEval& feval, const WeightedDataset& dataset, double eta,
                                           bool weighted) {
  return assemble_covariances(feval, dataset, RowMatrix(), eta, weighted, EnergyForm::reweighted);
}

/// Rows per block in streamed assembly; fixed so sums do not depend on the thread count.
inline constexpr Index kAssemblyChunk = 4096;

/// Streams the dataset through the dictionary in fixed blocks; never materialises all features.
inline CovariancePair assemble_covariances(const FeatureDictionary& dict, const WeightedDataset& dataset, double eta,
                                           bool weighted, const BiasState* bias = nullptr,
                                           EnergyForm form = EnergyForm::reweighted) {
  if (!(eta > 0.0)) throw ConfigError("eta must be positive");
  dict.validate();
  if (dataset.dim() != dict.dim) throw ConfigError("dataset dimension does not match dictionary");
  const bool product = weighted && form == EnergyForm::product_rule;
  if (product && bias == nullptr) throw ConfigError("product-rule energy needs the bias");
  auto partials = map_chunks<CovarianceSums>(
      dataset.size(), kAssemblyChunk, [&](Index, Index first, Index count) {
        const RowMatrix x = dataset.states.middleRows(first, count);
        const FeatureEval fe = evaluate(dict, x);
        const Vector w = dataset.log_weights.segment(first, count).array().exp().matrix();
        RowMatrix grads;
        if (product) grads = bias_gradients(*bias, x);
        return detail::block_sums(fe, weighted ? &w : nullptr, product ? &grads : nullptr, dataset.beta,
                                  product ? form : EnergyForm::reweighted, first);
      });
  CovarianceSums total;
  for (const auto& p : partials) total.add(p);
  return detail::finish(total, eta, dataset.beta, weighted);
}

// ---------------------------------------------------------------------------
// Eigensolve

struct EigenpairSet {
  std::vector<double> nus;
  std::vector<double> lambdas;
  /// Column i holds v_i.
  Matrix coeffs;
  /// Weighted empirical L2 norm of z^T v_i before normalisation.
  std::vector<double> norms;
  double eta = 0.1;
  double gamma = 0.0;
  /// Generalised eigenvalues discarded as numerically null.
  Index dropped = 0;

  Index size() const { return static_cast<Index>(nus.size()); }
};

namespace detail {

/// Normalises columns to unit weighted norm under C / mean_weight and fixes their signs.
inline void normalise_columns(Matrix& v, const CovariancePair& cov, std::vector<double>& norms) {
  norms.clear();
  for (Index i = 0; i < v.cols(); ++i) {
    const double sq = v.col(i).dot(cov.C * v.col(i)) / cov.mean_weight;
    const double norm = std::sqrt(std::max(sq, 0.0));
    if (norm > 0.0) v.col(i) /= norm;
    norms.push_back(norm);
    Index arg = 0;
    v.col(i).cwiseAbs().maxCoeff(&arg);
    if (v(arg, i) < 0.0) v.col(i) = -v.col(i);
  }
}

inline EigenpairSet package(const Vector& nus_desc, const Matrix& vecs_desc, const CovariancePair& cov, double gamma,
                            double nu_tol_rel) {
  EigenpairSet out;
  out.eta = cov.eta;
  out.gamma = gamma;
  const double nu_max = nus_desc.size() > 0 ? nus_desc[0] : 0.0;
  const double tol = nu_tol_rel * std::max(nu_max, 0.0);
  // Rounding in the Cholesky reduction of an ill-conditioned W leaves tiny negative values.
  if (nus_desc.size() > 0 && nus_desc.minCoeff() < -1e-6 * std::max(1.0, std::abs(nu_max))) {
    throw NumericError("negative generalized eigenvalue; covariance pair is not PSD");
  }
  std::vector<Index> keep;
  for (Index i = 0; i < nus_desc.size(); ++i) {
    if (nus_desc[i] > tol) {
      keep.push_back(i);
    } else {
      ++out.dropped;
    }
  }
  Matrix v(vecs_desc.rows(), static_cast<Index>(keep.size()));
  for (std::size_t c = 0; c < keep.size(); ++c) {
    v.col(static_cast<Index>(c)) = vecs_desc.col(keep[c]);
    out.nus.push_back(nus_desc[keep[c]]);
    out.lambdas.push_back(cov.eta - 1.0 / nus_desc[keep[c]]);
  }
  normalise_columns(v, cov, out.norms);
  out.coeffs = std::move(v);
  return out;
}

}  // namespace detail

/**
 * Eigenpairs of (W + eta gamma I)^{-1} C via the symmetric-definite problem
 * C v = nu (W + eta gamma I) v, solved by Cholesky reduction. nu is sorted descending and
 * lambda_i = eta - 1/nu_i. Pairs with nu <= nu_tol_rel * nu_max are dropped and counted.
 */
inline EigenpairSet ridge_eigensolve(const CovariancePair& cov, double gamma, double nu_tol_rel = 1e-12) {
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
  const Index m = cov.C.rows();
  const Matrix b = cov.W + cov.eta * gamma * Matrix::Identity(m, m);
  Eigen::LLT<Matrix> llt(b);
  if (llt.info() != Eigen::Success) {
    throw NumericError("W + eta*gamma*I is not positive definite; increase gamma");
  }
  // L^{-1} C L^{-T}
  Matrix reduced = llt.matrixL().solve(cov.C);
  reduced = llt.matrixL().solve(reduced.transpose()).transpose();
  reduced = 0.5 * (reduced + reduced.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Matrix> es(reduced);
  if (es.info() != Eigen::Success) throw NumericError("symmetric eigensolver failed");
  const Vector ev = es.eigenvalues().reverse();
  Matrix u = es.eigenvectors().rowwise().reverse();
  const Matrix v = llt.matrixU().solve(u);
  return detail::package(ev, v, cov, gamma, nu_tol_rel);
}

/**
 * gamma = 0 solve that tolerates singular W: restricts to the range of W (eigenvalues above
 * rcond * max) and solves the reduced problem there.
 */
inline EigenpairSet ridge_eigensolve_pinv(const CovariancePair& cov, double rcond = 1e-12,
                                          double nu_tol_rel = 1e-12) {
  Eigen::SelfAdjointEigenSolver<Matrix> ws(cov.W);
  if (ws.info() != Eigen::Success) throw NumericError("eigendecomposition of W failed");
  const Vector s = ws.eigenvalues();
  const double smax = s.maxCoeff();
  if (!(smax > 0.0)) throw NumericError("W has no positive spectrum");
  std::vector<Index> cols;
  for (Index i = 0; i < s.size(); ++i) {
    if (s[i] > rcond * smax) cols.push_back(i);
  }
  Matrix t(cov.W.rows(), static_cast<Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) {
    t.col(static_cast<Index>(c)) = ws.eigenvectors().col(cols[c]) / std::sqrt(s[cols[c]]);
  }
  Matrix reduced = t.transpose() * cov.C * t;
  reduced = 0.5 * (reduced + reduced.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Matrix> es(reduced);
  if (es.info() != Eigen::Success) throw NumericError("symmetric eigensolver failed");
  const Vector ev = es.eigenvalues().reverse();
  const Matrix v = t * es.eigenvectors().rowwise().reverse();
  EigenpairSet out = detail::package(ev, v, cov, 0.0, nu_tol_rel);
  out.dropped += cov.W.rows() - static_cast<Index>(cols.size());
  return out;
}

/// f_i(x) = z(x)^T v_i at every row of x.
inline Vector evaluate_eigenfunction(const FeatureDictionary& dict, const EigenpairSet& eig, Index i,
                                     const RowMatrix& x) {
  if (i < 0 || i >= eig.size()) throw IndexError("eigenfunction index " + std::to_string(i) + " out of range");
  if (eig.coeffs.rows() != dict.size()) throw ConfigError("eigenpair coefficients do not match dictionary size");
  return evaluate_values(dict, x) * eig.coeffs.col(i);
}

/// sqrt(1 - <f,g>^2 / (|f|^2 |g|^2)) with <f,g> = sum w f g / sum w.
inline double sin_angle(const ConstVectorRef& f, const ConstVectorRef& g, const ConstVectorRef& weights) {
  if (f.size() != g.size() || f.size() != weights.size()) throw ConfigError("sin_angle inputs differ in length");
  const double wsum = weights.sum();
  if (!(wsum > 0.0)) throw InvalidInputError("sin_angle weights must have positive sum");
  const double ff = (weights.array() * f.array().square()).sum() / wsum;
  const double gg = (weights.array() * g.array().square()).sum() / wsum;
  const double fg = (weights.array() * f.array() * g.array()).sum() / wsum;
  if (!(ff > 0.0) || !(gg > 0.0)) throw InvalidInputError("sin_angle needs non-zero functions");
  const double cos2 = std::clamp(fg * fg / (ff * gg), 0.0, 1.0);
  return std::sqrt(1.0 - cos2);
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const EigenpairSet& eig) {
  nlohmann::json j;
  j["eta"] = eig.eta;
  j["gamma"] = eig.gamma;
  j["nus"] = eig.nus;
  j["lambdas"] = eig.lambdas;
  j["norms"] = eig.norms;
  j["dropped"] = eig.dropped;
  const RowMatrix c = eig.coeffs;
  j["coeffs"] = detail::rows_to_json(c);
  return j;
}

inline EigenpairSet eigenpairs_from_json(const nlohmann::json& j) {
  EigenpairSet eig;
  eig.eta = j.at("eta").get<double>();
  eig.gamma = j.at("gamma").get<double>();
  eig.nus = j.at("nus").get<std::vector<double>>();
  eig.lambdas = j.at("lambdas").get<std::vector<double>>();
  eig.norms = j.value("norms", std::vector<double>{});
  eig.dropped = j.value("dropped", Index{0});
  const auto& rows = j.at("coeffs");
  const Index cols = rows.empty() ? 0 : static_cast<Index>(rows.front().size());
  eig.coeffs = detail::rows_from_json(rows, cols);
  if (eig.coeffs.cols() != eig.size() && eig.coeffs.rows() > 0) {
    throw ConfigError("eigenpair JSON coefficient shape mismatch");
  }
  return eig;
}

}  // namespace genspec
