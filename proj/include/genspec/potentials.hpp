#pragma once

// Analytic potentials and bias potentials with exact gradients.

#include <genspec/errors.hpp>
#include <genspec/types.hpp>

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace genspec {

enum class PotentialKind { double_well_target, double_well_sim, mueller_brown, harmonic, sum };

inline std::string_view to_string(PotentialKind kind) {
  switch (kind) {
    case PotentialKind::double_well_target: return "double_well_target";
    case PotentialKind::double_well_sim: return "double_well_sim";
    case PotentialKind::mueller_brown: return "mueller_brown";
    case PotentialKind::harmonic: return "harmonic";
    case PotentialKind::sum: return "sum";
  }
  return "unknown";
}

inline PotentialKind potential_kind_from_string(std::string_view name) {
  if (name == "double_well_target") return PotentialKind::double_well_target;
  if (name == "double_well_sim") return PotentialKind::double_well_sim;
  if (name == "mueller_brown") return PotentialKind::mueller_brown;
  if (name == "harmonic") return PotentialKind::harmonic;
  if (name == "sum") return PotentialKind::sum;
  throw ConfigError("unknown potential kind '" + std::string(name) + "'");
}

/// Value and gradient of a scalar field at one point.
struct Evaluation {
  double value = 0.0;
  Vector gradient;
};

namespace mueller_brown_constants {
inline constexpr std::array<double, 4> A{-200.0, -100.0, -170.0, 15.0};
inline constexpr std::array<double, 4> a{-1.0, -1.0, -6.5, 0.7};
inline constexpr std::array<double, 4> b{0.0, 0.0, 11.0, 0.6};
inline constexpr std::array<double, 4> c{-10.0, -10.0, -6.5, 0.7};
inline constexpr std::array<double, 4> x0{1.0, 0.0, -0.5, -1.0};
inline constexpr std::array<double, 4> y0{0.0, 0.5, 1.5, 1.0};
}  // namespace mueller_brown_constants

/**
 * Closed-form potential U: R^d -> R.
 *
 * Parameters per kind:
 *  - double_well_target: U = 4 (1.5 exp(-80 x^2) + x^8), d = 1, no params.
 *  - double_well_sim:    U = 4 (0.5 exp(-80 x^2) + x^8), d = 1, no params.
 *  - mueller_brown:      U = scale * sum_k A_k exp(a_k dx^2 + b_k dx dy + c_k dy^2), d = 2,
 *                        params = {scale} (default 1).
 *  - harmonic:           U = k/2 |x|^2, params = {k} (default 1).
 *  - sum:                U = sum_j coeff_j U_j, params = coefficients (default all 1).
 */
struct PotentialSpec {
  PotentialKind kind = PotentialKind::harmonic;
  std::vector<double> params;
  int dim = 1;
  std::vector<PotentialSpec> terms;

  static PotentialSpec double_well_target() { return {PotentialKind::double_well_target, {}, 1, {}}; }
  static PotentialSpec double_well_sim() { return {PotentialKind::double_well_sim, {}, 1, {}}; }
  static PotentialSpec mueller_brown(double scale = 1.0) {
    return {PotentialKind::mueller_brown, {scale}, 2, {}};
  }
  static PotentialSpec harmonic(int dim = 1, double stiffness = 1.0) {
    return {PotentialKind::harmonic, {stiffness}, dim, {}};
  }
  static PotentialSpec sum(std::vector<PotentialSpec> terms, std::vector<double> coefficients = {}) {
    if (terms.empty()) throw ConfigError("sum potential needs at least one term");
    const int d = terms.front().dim;
    for (const auto& t : terms) {
      if (t.dim != d) throw ConfigError("sum potential terms have mismatched dimensions");
    }
    if (coefficients.empty()) coefficients.assign(terms.size(), 1.0);
    if (coefficients.size() != terms.size()) throw ConfigError("sum potential coefficient count mismatch");
    return {PotentialKind::sum, std::move(coefficients), d, std::move(terms)};
  }

  /// Box on which value and gradient are guaranteed finite and which the oracles use.
  Box domain() const {
    Box box{Vector(dim), Vector(dim)};
    switch (kind) {
      case PotentialKind::double_well_target:
      case PotentialKind::double_well_sim:
        box.lo.setConstant(-1.5);
        box.hi.setConstant(1.5);
        break;
      case PotentialKind::mueller_brown:
        box.lo << -1.5, -0.5;
        box.hi << 1.2, 2.0;
        break;
      case PotentialKind::harmonic:
        box.lo.setConstant(-10.0);
        box.hi.setConstant(10.0);
        break;
      case PotentialKind::sum:
        box = terms.front().domain();
        for (const auto& t : terms) {
          const Box other = t.domain();
          box.lo = box.lo.cwiseMax(other.lo);
          box.hi = box.hi.cwiseMin(other.hi);
        }
        break;
    }
    return box;
  }

  double param(std::size_t i, double fallback) const { return i < params.size() ? params[i] : fallback; }
};

namespace detail {

inline void require_finite(const ConstVectorRef& x) {
  if (!x.allFinite()) throw InvalidInputError("non-finite coordinate in potential evaluation");
}

// Accumulates coeff * U into value and coeff * grad U into grad.
inline void accumulate_potential(const PotentialSpec& spec, const ConstVectorRef& x, double coeff,
                                 double& value, VectorRef grad) {
  switch (spec.kind) {
    case PotentialKind::double_well_target:
    case PotentialKind::double_well_sim: {
      const double amp = spec.kind == PotentialKind::double_well_target ? 1.5 : 0.5;
      const double xx = x[0];
      const double g = std::exp(-80.0 * xx * xx);
      const double x2 = xx * xx;
      const double x4 = x2 * x2;
      const double x7 = x4 * x2 * xx;
      value += coeff * 4.0 * (amp * g + x4 * x4);
      grad[0] += coeff * 4.0 * (-160.0 * amp * xx * g + 8.0 * x7);
      return;
    }
    case PotentialKind::mueller_brown: {
      namespace mb = mueller_brown_constants;
      const double scale = spec.param(0, 1.0) * coeff;
      for (std::size_t k = 0; k < 4; ++k) {
        const double dx = x[0] - mb::x0[k];
        const double dy = x[1] - mb::y0[k];
        const double e = mb::A[k] * std::exp(mb::a[k] * dx * dx + mb::b[k] * dx * dy + mb::c[k] * dy * dy);
        value += scale * e;
        grad[0] += scale * e * (2.0 * mb::a[k] * dx + mb::b[k] * dy);
        grad[1] += scale * e * (mb::b[k] * dx + 2.0 * mb::c[k] * dy);
      }
      return;
    }
    case PotentialKind::harmonic: {
      const double k = spec.param(0, 1.0) * coeff;
      value += 0.5 * k * x.squaredNorm();
      grad += k * x;
      return;
    }
    case PotentialKind::sum:
      for (std::size_t j = 0; j < spec.terms.size(); ++j) {
        accumulate_potential(spec.terms[j], x, coeff * spec.param(j, 1.0), value, grad);
      }
      return;
  }
  throw ConfigError("unknown potential kind");
}

}  // namespace detail

/// Adds grad U(x) into `grad` and returns U(x). Non-allocating; used in the integrator loop.
inline double accumulate_potential(const PotentialSpec& spec, const ConstVectorRef& x, VectorRef grad) {
  double value = 0.0;
  detail::accumulate_potential(spec, x, 1.0, value, grad);
  return value;
}

inline Evaluation eval_potential(const PotentialSpec& spec, const ConstVectorRef& x) {
  if (x.size() != spec.dim) throw ConfigError("point dimension does not match potential dimension");
  detail::require_finite(x);
  Evaluation out{0.0, Vector::Zero(spec.dim)};
  out.value = accumulate_potential(spec, x, out.gradient);
  return out;
}

// ---------------------------------------------------------------------------
// Bias potentials

enum class BiasKind { none, static_analytic, metadynamics };

inline std::string_view to_string(BiasKind kind) {
  switch (kind) {
    case BiasKind::none: return "none";
    case BiasKind::static_analytic: return "static_analytic";
    case BiasKind::metadynamics: return "metadynamics";
  }
  return "unknown";
}

inline BiasKind bias_kind_from_string(std::string_view name) {
  if (name == "none") return BiasKind::none;
  if (name == "static_analytic") return BiasKind::static_analytic;
  if (name == "metadynamics") return BiasKind::metadynamics;
  throw ConfigError("unknown bias kind '" + std::string(name) + "'");
}

/**
 * Bias V added to the physical potential during sampling.
 *
 * Metadynamics: V(x) = h * sum_i exp(-|x - c_i|^2 / (2 sigma^2)) with centers appended every
 * `pace` steps up to and including `freeze_step`. Static: V is an analytic PotentialSpec.
 */
struct BiasState {
  BiasKind kind = BiasKind::none;
  int dim = 1;
  double height = 0.0;
  double sigma = 1.0;
  std::int64_t pace = 500;
  std::int64_t freeze_step = 0;
  /// Flattened centers, row-major (num_centers x dim).
  std::vector<double> centers;
  /// Only used when kind == static_analytic.
  std::vector<PotentialSpec> analytic;

  static BiasState none(int dim) {
    BiasState b;
    b.dim = dim;
    return b;
  }
  static BiasState static_potential(PotentialSpec v) {
    BiasState b;
    b.kind = BiasKind::static_analytic;
    b.dim = v.dim;
    b.analytic.push_back(std::move(v));
    return b;
  }
  static BiasState metadynamics(int dim, double height, double sigma, std::int64_t pace,
                                std::int64_t freeze_step) {
    if (!(sigma > 0.0)) throw ConfigError("metadynamics width sigma must be positive");
    if (pace < 1) throw ConfigError("metadynamics pace must be >= 1");
    BiasState b;
    b.kind = BiasKind::metadynamics;
    b.dim = dim;
    b.height = height;
    b.sigma = sigma;
    b.pace = pace;
    b.freeze_step = freeze_step;
    return b;
  }

  std::size_t num_centers() const { return dim > 0 ? centers.size() / static_cast<std::size_t>(dim) : 0; }

  void validate() const {
    if (dim < 1) throw ConfigError("bias dimension must be >= 1");
    if (kind == BiasKind::metadynamics) {
      if (!(sigma > 0.0)) throw ConfigError("metadynamics width sigma must be positive");
      if (pace < 1) throw ConfigError("metadynamics pace must be >= 1");
      if (centers.size() % static_cast<std::size_t>(dim) != 0) throw ConfigError("ragged center list");
    }
    if (kind == BiasKind::static_analytic) {
      if (analytic.size() != 1) throw ConfigError("static bias needs exactly one analytic potential");
      if (analytic.front().dim != dim) throw ConfigError("static bias dimension mismatch");
    }
  }

  /// Appends a center in place. Throws FrozenBiasError once `step` passes the freeze step.
  void deposit(const ConstVectorRef& center, std::int64_t step) {
    if (kind != BiasKind::metadynamics) throw ConfigError("deposit requires a metadynamics bias");
    if (step > freeze_step) {
      throw FrozenBiasError("bias frozen at step " + std::to_string(freeze_step) +
                            ", refusing deposit at step " + std::to_string(step));
    }
    if (center.size() != dim) throw ConfigError("center dimension mismatch");
    if (!center.allFinite()) throw InvalidInputError("non-finite metadynamics center");
    centers.insert(centers.end(), center.data(), center.data() + center.size());
  }
};

/// Adds grad V(x) into `grad` and returns V(x).
inline double accumulate_bias(const BiasState& bias, const ConstVectorRef& x, VectorRef grad) {
  switch (bias.kind) {
    case BiasKind::none: return 0.0;
    case BiasKind::static_analytic: return accumulate_potential(bias.analytic.front(), x, grad);
    case BiasKind::metadynamics: {
      const double inv_two_s2 = 1.0 / (2.0 * bias.sigma * bias.sigma);
      const double inv_s2 = 1.0 / (bias.sigma * bias.sigma);
      const std::size_t d = static_cast<std::size_t>(bias.dim);
      const std::size_t n = bias.num_centers();
      const double* c = bias.centers.data();
      double value = 0.0;
      if (d == 1) {
        double g0 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double dx = x[0] - c[i];
          const double e = std::exp(-dx * dx * inv_two_s2);
          value += e;
          g0 -= e * dx;
        }
        grad[0] += bias.height * inv_s2 * g0;
      } else if (d == 2) {
        double g0 = 0.0, g1 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double dx = x[0] - c[2 * i];
          const double dy = x[1] - c[2 * i + 1];
          const double e = std::exp(-(dx * dx + dy * dy) * inv_two_s2);
          value += e;
          g0 -= e * dx;
          g1 -= e * dy;
        }
        grad[0] += bias.height * inv_s2 * g0;
        grad[1] += bias.height * inv_s2 * g1;
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          double r2 = 0.0;
          for (std::size_t k = 0; k < d; ++k) {
            const double dk = x[static_cast<Index>(k)] - c[i * d + k];
            r2 += dk * dk;
          }
          const double e = std::exp(-r2 * inv_two_s2);
          value += e;
          for (std::size_t k = 0; k < d; ++k) {
            grad[static_cast<Index>(k)] -= bias.height * inv_s2 * e * (x[static_cast<Index>(k)] - c[i * d + k]);
          }
        }
      }
      return bias.height * value;
    }
  }
  throw ConfigError("unknown bias kind");
}

inline Evaluation eval_bias(const BiasState& bias, const ConstVectorRef& x) {
  bias.validate();
  if (x.size() != bias.dim) throw ConfigError("point dimension does not match bias dimension");
  detail::require_finite(x);
  Evaluation out{0.0, Vector::Zero(bias.dim)};
  out.value = accumulate_bias(bias, x, out.gradient);
  return out;
}

/// Value-semantic deposit: returns a copy of `bias` with one more center.
inline BiasState deposit_gaussian(BiasState bias, const ConstVectorRef& center, std::int64_t step) {
  bias.deposit(center, step);
  return bias;
}

/// Static double-well bias V = U_sim - U_target = -4 exp(-80 x^2).
inline BiasState double_well_bias() {
  return BiasState::static_potential(
      PotentialSpec::sum({PotentialSpec::double_well_sim(), PotentialSpec::double_well_target()}, {1.0, -1.0}));
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const PotentialSpec& spec) {
  nlohmann::json j;
  j["kind"] = std::string(to_string(spec.kind));
  j["dim"] = spec.dim;
  j["params"] = spec.params;
  if (spec.kind == PotentialKind::sum) {
    j["terms"] = nlohmann::json::array();
    for (const auto& t : spec.terms) j["terms"].push_back(to_json(t));
  }
  return j;
}

inline PotentialSpec potential_from_json(const nlohmann::json& j) {
  PotentialSpec spec;
  spec.kind = potential_kind_from_string(j.at("kind").get<std::string>());
  spec.params = j.value("params", std::vector<double>{});
  switch (spec.kind) {
    case PotentialKind::double_well_target:
    case PotentialKind::double_well_sim: spec.dim = 1; break;
    case PotentialKind::mueller_brown: spec.dim = 2; break;
    case PotentialKind::harmonic: spec.dim = j.value("dim", 1); break;
    case PotentialKind::sum: {
      std::vector<PotentialSpec> terms;
      for (const auto& t : j.at("terms")) terms.push_back(potential_from_json(t));
      return PotentialSpec::sum(std::move(terms), spec.params);
    }
  }
  if (j.contains("dim") && j.at("dim").get<int>() != spec.dim) {
    throw ConfigError("declared dim does not match potential kind");
  }
  if (spec.dim < 1) throw ConfigError("potential dimension must be >= 1");
  return spec;
}

inline nlohmann::json to_json(const BiasState& bias) {
  nlohmann::json j;
  j["kind"] = std::string(to_string(bias.kind));
  j["dim"] = bias.dim;
  j["height"] = bias.height;
  j["sigma"] = bias.sigma;
  j["pace"] = bias.pace;
  j["freeze_step"] = bias.freeze_step;
  nlohmann::json rows = nlohmann::json::array();
  const std::size_t d = static_cast<std::size_t>(bias.dim);
  for (std::size_t i = 0; i < bias.num_centers(); ++i) {
    rows.push_back(std::vector<double>(bias.centers.begin() + static_cast<std::ptrdiff_t>(i * d),
                                       bias.centers.begin() + static_cast<std::ptrdiff_t>((i + 1) * d)));
  }
  j["centers"] = rows;
  if (bias.kind == BiasKind::static_analytic) j["potential"] = to_json(bias.analytic.front());
  return j;
}

inline BiasState bias_from_json(const nlohmann::json& j) {
  BiasState bias;
  bias.kind = bias_kind_from_string(j.at("kind").get<std::string>());
  bias.dim = j.value("dim", 1);
  bias.height = j.value("height", 0.0);
  bias.sigma = j.value("sigma", 1.0);
  bias.pace = j.value("pace", std::int64_t{500});
  bias.freeze_step = j.value("freeze_step", std::int64_t{0});
  if (j.contains("centers")) {
    for (const auto& row : j.at("centers")) {
      const auto v = row.get<std::vector<double>>();
      if (static_cast<int>(v.size()) != bias.dim) throw ConfigError("center row has wrong length");
      bias.centers.insert(bias.centers.end(), v.begin(), v.end());
    }
  }
  if (bias.kind == BiasKind::static_analytic) {
    bias.analytic.push_back(potential_from_json(j.at("potential")));
    bias.dim = bias.analytic.front().dim;
  }
  bias.validate();
  return bias;
}

}  // namespace genspec
