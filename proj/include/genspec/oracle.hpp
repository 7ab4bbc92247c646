#pragma once

// Ground-truth generator spectra: finite-volume Dirichlet-form discretisation on 1D/2D grids.

#include <genspec/errors.hpp>
#include <genspec/potentials.hpp>
#include <genspec/types.hpp>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace genspec {

/// Cell-centred tensor grid: n_points[k] cells of width (hi - lo) / n_points along axis k.
struct GridSpec {
  Vector lo;
  Vector hi;
  std::vector<Index> n_points;
  double beta = 1.0;
  /// Upper bound on the Boltzmann probability mass held by boundary cells.
  double boundary_tol = 1e-8;

  Index dim() const { return lo.size(); }
  Index total() const {
    Index t = 1;
    for (Index n : n_points) t *= n;
    return t;
  }
  double spacing(Index k) const { return (hi[k] - lo[k]) / static_cast<double>(n_points[static_cast<std::size_t>(k)]); }

  void validate() const {
    if (lo.size() != hi.size() || static_cast<Index>(n_points.size()) != lo.size()) {
      throw ConfigError("grid bounds and counts disagree in dimension");
    }
    if (dim() < 1 || dim() > 2) throw ConfigError("grid oracle supports d = 1 or 2");
    for (Index k = 0; k < dim(); ++k) {
      if (!(hi[k] > lo[k])) throw ConfigError("grid needs hi > lo");
      if (n_points[static_cast<std::size_t>(k)] < 32) throw ConfigError("grid needs at least 32 points per axis");
    }
    if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  }

  /// Row-major flattening: the last axis varies fastest.
  RowMatrix points() const {
    const Index n = total();
    RowMatrix p(n, dim());
    for (Index idx = 0; idx < n; ++idx) {
      Index rem = idx;
      for (Index k = dim() - 1; k >= 0; --k) {
        const Index nk = n_points[static_cast<std::size_t>(k)];
        const Index ik = rem % nk;
        rem /= nk;
        p(idx, k) = lo[k] + (static_cast<double>(ik) + 0.5) * spacing(k);
      }
    }
    return p;
  }
};

inline GridSpec make_grid(const Box& box, std::vector<Index> n_points, double beta) {
  GridSpec g;
  g.lo = box.lo;
  g.hi = box.hi;
  g.n_points = std::move(n_points);
  g.beta = beta;
  return g;
}

/// The discretised operator in symmetric form.
struct GridOperator {
  /// S = M^{1/2} (-L) M^{-1/2}, symmetric positive semi-definite.
  Eigen::SparseMatrix<double> S;
  /// Normalised Boltzmann masses q_i (sum one).
  Vector density;
  /// Potential at cell centres.
  Vector potential;
  RowMatrix points;
  /// Total probability mass in cells touching the box boundary.
  double boundary_mass = 0.0;
};

/**
 * Discretises E(f) = beta^{-1} sum_edges pi_e h^{d-2} vol (f_j - f_i)^2 with pi evaluated at edge
 * midpoints and zero flux through the box faces, then symmetrises with the cell masses:
 * S_ij = -exp(-beta (U_e - (U_i + U_j)/2)) / (beta h^2), S_ii = sum_e exp(-beta (U_e - U_i)) / (beta h^2).
 * Constant functions are an exact zero mode.
 */
inline GridOperator assemble_grid_operator(const PotentialSpec& potential, const GridSpec& grid) {
  grid.validate();
  if (potential.dim != grid.dim()) throw ConfigError("grid and potential dimensions differ");
  const Index n = grid.total();
  const Index d = grid.dim();
  GridOperator op;
  op.points = grid.points();
  op.potential.resize(n);
  for (Index i = 0; i < n; ++i) {
    const Vector x = op.points.row(i).transpose();
    op.potential[i] = eval_potential(potential, x).value;
  }
  const double umin = op.potential.minCoeff();
  op.density = (-grid.beta * (op.potential.array() - umin)).exp().matrix();
  op.density /= op.density.sum();

  std::vector<Index> stride(static_cast<std::size_t>(d), 1);
  for (Index k = d - 2; k >= 0; --k) {
    stride[static_cast<std::size_t>(k)] = stride[static_cast<std::size_t>(k + 1)] * grid.n_points[static_cast<std::size_t>(k + 1)];
  }

  // Cells this far above the minimum carry no mass; they become reflecting walls so the
  // exponentials below cannot overflow.
  const double wall = 250.0;
  std::vector<char> active(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) active[static_cast<std::size_t>(i)] = grid.beta * (op.potential[i] - umin) <= wall;

  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<std::size_t>(n * (2 * d + 1)));
  Vector diag = Vector::Zero(n);
  Vector mid(d);
  for (Index i = 0; i < n; ++i) {
    Index rem = i;
    std::vector<Index> ix(static_cast<std::size_t>(d));
    for (Index k = d - 1; k >= 0; --k) {
      const Index nk = grid.n_points[static_cast<std::size_t>(k)];
      ix[static_cast<std::size_t>(k)] = rem % nk;
      rem /= nk;
    }
    bool on_boundary = false;
    for (Index k = 0; k < d; ++k) {
      const Index ik = ix[static_cast<std::size_t>(k)];
      const Index nk = grid.n_points[static_cast<std::size_t>(k)];
      if (ik == 0 || ik == nk - 1) on_boundary = true;
      if (ik + 1 >= nk) continue;
      const Index j = i + stride[static_cast<std::size_t>(k)];
      if (!active[static_cast<std::size_t>(i)] || !active[static_cast<std::size_t>(j)]) continue;
      mid = op.points.row(i).transpose();
      mid[k] += 0.5 * grid.spacing(k);
      const double ue = eval_potential(potential, mid).value;
      const double h2 = grid.spacing(k) * grid.spacing(k);
      const double scale = 1.0 / (grid.beta * h2);
      const double off = scale * std::exp(-grid.beta * (ue - 0.5 * (op.potential[i] + op.potential[j])));
      trip.emplace_back(i, j, -off);
      trip.emplace_back(j, i, -off);
      diag[i] += scale * std::exp(-grid.beta * (ue - op.potential[i]));
      diag[j] += scale * std::exp(-grid.beta * (ue - op.potential[j]));
    }
    if (on_boundary) op.boundary_mass += op.density[i];
  }
  if (!diag.allFinite()) throw NumericError("non-finite entries in grid generator");
  // Inactive cells are decoupled; park them at the typical diagonal scale, above the low spectrum.
  const double park = std::max(1.0, op.density.dot(diag));
  for (Index i = 0; i < n; ++i) trip.emplace_back(i, i, active[static_cast<std::size_t>(i)] ? diag[i] : park);
  op.S.resize(n, n);
  op.S.setFromTriplets(trip.begin(), trip.end());
  return op;
}

struct OracleResult {
  /// Largest generator eigenvalues, descending (lambda_0 = 0 first).
  std::vector<double> lambdas;
  /// Column i is f_i on the grid, normalised so sum_j q_j f_i(x_j)^2 = 1.
  Matrix eigenfunctions;
  RowMatrix points;
  Vector density;
  GridSpec grid;
};

namespace detail {

/**
 * Smallest k eigenpairs of a sparse symmetric PSD matrix: subspace iteration on (S + sigma I)^{-1}
 * with Rayleigh-Ritz on S each sweep.
 */
inline std::pair<Vector, Matrix> smallest_eigenpairs(const Eigen::SparseMatrix<double>& s, const Vector& density,
                                                     Index k, int max_iter = 2000, double rel_tol = 1e-10) {
  const Index n = s.rows();
  const Index p = std::min<Index>(n, k + std::max<Index>(k, 8));
  // Typical diagonal entry where the Boltzmann mass sits; far-field cells can be astronomically stiff.
  const double scale = density.dot(s.diagonal());
  const double sigma = 1e-4 * scale;
  Eigen::SparseMatrix<double> shifted = s;
  for (Index i = 0; i < n; ++i) shifted.coeffRef(i, i) += sigma;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(shifted);
  if (solver.info() != Eigen::Success) throw NumericError("factorisation of shifted grid operator failed");

  std::mt19937_64 rng(12345);
  std::normal_distribution<double> normal;
  Matrix q(n, p);
  for (Index j = 0; j < p; ++j) {
    for (Index i = 0; i < n; ++i) q(i, j) = normal(rng);
  }
  Vector mu;
  Matrix x;
  for (int it = 0; it < max_iter; ++it) {
    Matrix y = solver.solve(q);
    Eigen::HouseholderQR<Matrix> qr(y);
    q = qr.householderQ() * Matrix::Identity(n, p);
    const Matrix sq = s * q;
    Matrix t = q.transpose() * sq;
    t = 0.5 * (t + t.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Matrix> es(t);
    mu = es.eigenvalues();
    x = q * es.eigenvectors();
    const Matrix r = sq * es.eigenvectors() - x * mu.asDiagonal();
    double worst = 0.0;
    for (Index j = 0; j < k; ++j) worst = std::max(worst, r.col(j).norm());
    q = x;
    if (worst <= rel_tol * scale) break;
  }
  return {mu.head(k), x.leftCols(k)};
}

}  // namespace detail

/// Top-k eigenpairs of L = -grad U . grad + beta^{-1} Laplacian on the grid (zero-flux boundary).
inline OracleResult grid_generator_eig(const PotentialSpec& potential, const GridSpec& grid, Index k) {
  const GridOperator op = assemble_grid_operator(potential, grid);
  if (op.boundary_mass > grid.boundary_tol) {
    throw ConfigError("grid too small: boundary cells hold probability mass " + std::to_string(op.boundary_mass));
  }
  if (k < 1 || k > grid.total()) throw ConfigError("requested eigenpair count exceeds grid size");
  auto [mu, u] = detail::smallest_eigenpairs(op.S, op.density, k);
  OracleResult out;
  out.grid = grid;
  out.points = op.points;
  out.density = op.density;
  out.eigenfunctions.resize(grid.total(), k);
  const Vector inv_sqrt_q = op.density.array().max(1e-300).rsqrt().matrix();
  for (Index i = 0; i < k; ++i) {
    out.lambdas.push_back(-mu[i]);
    Vector f = u.col(i).cwiseProduct(inv_sqrt_q);
    const double norm = std::sqrt((op.density.array() * f.array().square()).sum());
    f /= norm;
    // Sign: positive correlation with the first coordinate, falling back to the mean.
    const double c1 = (op.density.array() * f.array() * op.points.col(0).array()).sum();
    const double c0 = (op.density.array() * f.array()).sum();
    const double ref = std::abs(c0) > 1e-8 ? c0 : c1;
    if (ref < 0.0) f = -f;
    out.eigenfunctions.col(i) = f;
  }
  return out;
}

/// Largest relative change of lambda_1..lambda_{k-1} when the grid resolution is doubled.
inline double refinement_change(const PotentialSpec& potential, const GridSpec& grid, Index k) {
  GridSpec fine = grid;
  for (auto& n : fine.n_points) n *= 2;
  const auto coarse_res = grid_generator_eig(potential, grid, k);
  const auto fine_res = grid_generator_eig(potential, fine, k);
  double worst = 0.0;
  for (Index i = 1; i < k; ++i) {
    const double a = coarse_res.lambdas[static_cast<std::size_t>(i)];
    const double b = fine_res.lambdas[static_cast<std::size_t>(i)];
    worst = std::max(worst, std::abs(a - b) / std::abs(b));
  }
  return worst;
}

/// Generator spectrum of the unit-stiffness Ornstein-Uhlenbeck process: 0, -1, ..., -(k-1).
inline std::vector<double> ou_spectrum(Index k) {
  if (k < 1) throw ConfigError("ou_spectrum needs k >= 1");
  std::vector<double> out;
  for (Index j = 0; j < k; ++j) out.push_back(-static_cast<double>(j));
  return out;
}

}  // namespace genspec
