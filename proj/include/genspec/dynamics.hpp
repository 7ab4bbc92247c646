#pragma once

// Euler-Maruyama integration of overdamped Langevin dynamics under U + V.

#include <genspec/errors.hpp>
#include <genspec/potentials.hpp>
#include <genspec/types.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace genspec {

struct SimulationParams {
  double beta = 1.0;
  double dt = 1e-3;
  std::int64_t n_steps = 1000;
  std::int64_t save_stride = 1;
  Vector x0 = Vector::Zero(1);
  std::uint64_t seed = 0;
  /// Abort once |x| exceeds this radius.
  double domain_radius = 1e3;
  /// Drop all stochastic increments; reduces the scheme to explicit gradient descent.
  bool zero_noise = false;

  void validate() const {
    if (!(beta > 0.0)) throw ConfigError("beta must be positive");
    if (!(dt > 0.0)) throw ConfigError("dt must be positive");
    if (n_steps < 1) throw ConfigError("n_steps must be >= 1");
    if (save_stride < 1) throw ConfigError("save_stride must be >= 1");
    if (!(domain_radius > 0.0)) throw ConfigError("domain_radius must be positive");
    if (!x0.allFinite()) throw InvalidInputError("non-finite initial point");
  }
};

struct TrajectoryMeta {
  double beta = 1.0;
  double dt = 1e-3;
  std::uint64_t seed = 0;
  std::string potential_id;
  std::string bias_id;
};

/// Saved states of one run. Row i of `states` was recorded at integrator step `steps[i]`.
struct Trajectory {
  RowMatrix states;
  std::vector<std::int64_t> steps;
  Vector times;
  Vector bias_values;
  TrajectoryMeta meta;

  Index size() const { return states.rows(); }
  Index dim() const { return states.cols(); }

  void validate() const {
    const Index n = states.rows();
    if (times.size() != n || bias_values.size() != n || static_cast<Index>(steps.size()) != n) {
      throw ConfigError("trajectory columns have unequal lengths");
    }
    for (Index i = 1; i < n; ++i) {
      if (!(times[i] > times[i - 1])) throw ConfigError("trajectory times must be strictly increasing");
    }
  }

  /// Rows [first, first + count).
  Trajectory slice(Index first, Index count) const {
    if (first < 0 || count < 0 || first + count > size()) throw IndexError("trajectory slice out of range");
    Trajectory out;
    out.states = states.middleRows(first, count);
    out.steps.assign(steps.begin() + first, steps.begin() + first + count);
    out.times = times.segment(first, count);
    out.bias_values = bias_values.segment(first, count);
    out.meta = meta;
    return out;
  }
};

/// One Euler-Maruyama update x - grad * dt + sqrt(2 dt / beta) * noise.
inline Vector em_step(const ConstVectorRef& x, const ConstVectorRef& total_gradient, double dt, double beta,
                      const ConstVectorRef& noise, std::int64_t step = 0) {
  Vector next = x - total_gradient * dt + std::sqrt(2.0 * dt / beta) * noise;
  if (!next.allFinite()) throw DivergenceError("non-finite state in Euler-Maruyama step", step);
  return next;
}

inline std::string describe(const PotentialSpec& spec) { return to_json(spec).dump(); }

inline std::string describe(const BiasState& bias) {
  std::string id(to_string(bias.kind));
  if (bias.kind == BiasKind::metadynamics) {
    id += "(h=" + std::to_string(bias.height) + ",sigma=" + std::to_string(bias.sigma) +
          ",pace=" + std::to_string(bias.pace) + ",freeze=" + std::to_string(bias.freeze_step) + ")";
  } else if (bias.kind == BiasKind::static_analytic) {
    id += to_json(bias.analytic.front()).dump();
  }
  return id;
}

/**
 * Integrates dX = -grad(U + V) dt + sqrt(2/beta) dW for params.n_steps steps.
 *
 * For a metadynamics bias a Gaussian is deposited at the new state after every step s with
 * s % pace == 0 and s <= freeze_step; `bias` is updated in place and holds the final (frozen)
 * bias on return. State x_s is recorded after step s whenever s % save_stride == 0, together
 * with V(x_s) under the bias as it stands at that moment.
 *
 * The noise stream is std::mt19937_64 seeded with params.seed feeding
 * std::normal_distribution<double>, d draws per step in coordinate order.
 */
inline Trajectory simulate(const PotentialSpec& potential, BiasState& bias, const SimulationParams& params) {
  params.validate();
  bias.validate();
  const int d = potential.dim;
  if (bias.dim != d) throw ConfigError("bias and potential dimensions differ");
  if (params.x0.size() != d) throw ConfigError("initial point has wrong dimension");

  const std::int64_t n_saved = params.n_steps / params.save_stride;
  Trajectory traj;
  traj.states.resize(n_saved, d);
  traj.steps.reserve(static_cast<std::size_t>(n_saved));
  traj.times.resize(n_saved);
  traj.bias_values.resize(n_saved);
  traj.meta = {params.beta, params.dt, params.seed, describe(potential), describe(bias)};

  std::mt19937_64 rng(params.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double noise_scale = params.zero_noise ? 0.0 : std::sqrt(2.0 * params.dt / params.beta);
  const double radius2 = params.domain_radius * params.domain_radius;
  const bool meta = bias.kind == BiasKind::metadynamics;

  Vector x = params.x0;
  Vector grad(d);
  Vector scratch(d);
  Index saved = 0;
  for (std::int64_t step = 1; step <= params.n_steps; ++step) {
    grad.setZero();
    accumulate_potential(potential, x, grad);
    accumulate_bias(bias, x, grad);
    for (int k = 0; k < d; ++k) {
      const double xi = normal(rng);
      x[k] = (x[k] - grad[k] * params.dt) + noise_scale * xi;
    }
    if (!x.allFinite() || x.squaredNorm() > radius2) {
      throw DivergenceError("trajectory left the domain", step);
    }
    if (meta && step % bias.pace == 0 && step <= bias.freeze_step) bias.deposit(x, step);
    if (step % params.save_stride == 0) {
      traj.states.row(saved) = x.transpose();
      traj.steps.push_back(step);
      traj.times[saved] = static_cast<double>(step) * params.dt;
      scratch.setZero();
      traj.bias_values[saved] = accumulate_bias(bias, x, scratch);
      ++saved;
    }
  }
  return traj;
}

/// Re-evaluates every recorded bias value under `bias` (normally the final frozen bias).
inline Trajectory reevaluate_bias(Trajectory traj, const BiasState& bias) {
  if (bias.dim != traj.dim()) throw ConfigError("bias dimension does not match trajectory");
  Vector scratch(traj.dim());
  for (Index i = 0; i < traj.size(); ++i) {
    scratch.setZero();
    traj.bias_values[i] = accumulate_bias(bias, traj.states.row(i).transpose(), scratch);
  }
  traj.meta.bias_id = describe(bias);
  return traj;
}

/// Drops rows recorded at or before `freeze_step` (the metadynamics build-up segment).
inline Trajectory drop_buildup(const Trajectory& traj, std::int64_t freeze_step) {
  Index first = 0;
  while (first < traj.size() && traj.steps[static_cast<std::size_t>(first)] <= freeze_step) ++first;
  return traj.slice(first, traj.size() - first);
}

}  // namespace genspec
