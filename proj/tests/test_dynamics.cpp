#include <genspec/dynamics.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace genspec;

TEST(EmStep, ZeroNoiseIsGradientDescent) {
  const Vector x = Vector::Constant(1, 1.0);
  const Vector g = eval_potential(PotentialSpec::harmonic(), x).gradient;
  EXPECT_NEAR(em_step(x, g, 0.1, 1.0, Vector::Zero(1))[0], 0.9, 1e-15);
}

TEST(EmStep, PureNoise) {
  const Vector noise = Vector::Constant(2, 0.37);
  const Vector next = em_step(Vector::Zero(2), Vector::Zero(2), 0.01, 2.0, noise);
  EXPECT_DOUBLE_EQ(next[0], std::sqrt(2.0 * 0.01 / 2.0) * 0.37);
}

TEST(EmStep, FreeDiffusionIncrementVariance) {
  // Sample variance of N Gaussian increments has standard error var * sqrt(2 / (N - 1)).
  const double dt = 1e-3, beta = 2.0;
  const Index n = 100000;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  Vector x = Vector::Zero(1);
  std::vector<double> inc(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const Vector next = em_step(x, Vector::Zero(1), dt, beta, Vector::Constant(1, n01(rng)));
    inc[static_cast<std::size_t>(i)] = next[0] - x[0];
    x = next;
  }
  double mean = 0.0;
  for (double v : inc) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : inc) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n - 1);
  const double expected = 2.0 * dt / beta;
  EXPECT_LE(std::abs(var - expected), 3.0 * expected * std::sqrt(2.0 / static_cast<double>(n - 1)));
}

TEST(EmStep, NonFiniteThrowsDivergence) {
  EXPECT_THROW(em_step(Vector::Constant(1, 1e308), Vector::Constant(1, -1e308), 10.0, 1.0, Vector::Zero(1)),
               DivergenceError);
}

TEST(Simulate, DeterministicForFixedSeed) {
  SimulationParams p;
  p.n_steps = 20000;
  p.save_stride = 7;
  p.seed = 42;
  p.x0 = Vector::Constant(1, -1.0);
  BiasState b1 = double_well_bias();
  BiasState b2 = double_well_bias();
  const Trajectory a = simulate(PotentialSpec::double_well_target(), b1, p);
  const Trajectory b = simulate(PotentialSpec::double_well_target(), b2, p);
  ASSERT_EQ(a.size(), 20000 / 7);
  EXPECT_EQ(a.steps, b.steps);
  EXPECT_TRUE((a.states.array() == b.states.array()).all());
  EXPECT_TRUE((a.bias_values.array() == b.bias_values.array()).all());
  EXPECT_EQ(a.steps.front(), 7);
  EXPECT_DOUBLE_EQ(a.times[1], 14 * p.dt);
}

TEST(Simulate, ZeroNoiseMatchesGradientFlow) {
  SimulationParams p;
  p.n_steps = 10;
  p.dt = 0.1;
  p.x0 = Vector::Constant(1, 1.0);
  p.zero_noise = true;
  BiasState none = BiasState::none(1);
  const Trajectory t = simulate(PotentialSpec::harmonic(), none, p);
  EXPECT_NEAR(t.states(9, 0), std::pow(0.9, 10), 1e-14);
}

TEST(Simulate, MetadynamicsDepositsUntilFreeze) {
  SimulationParams p;
  p.n_steps = 5000;
  p.save_stride = 10;
  p.seed = 5;
  p.x0 = Vector::Zero(2);
  p.x0 << -0.558, 1.442;
  BiasState bias = BiasState::metadynamics(2, 0.2, 0.1, 100, 2500);
  const Trajectory t = simulate(PotentialSpec::mueller_brown(0.1), bias, p);
  EXPECT_EQ(bias.num_centers(), 25u);
  const Trajectory prod = drop_buildup(t, bias.freeze_step);
  EXPECT_EQ(prod.size(), 250);
  EXPECT_EQ(prod.steps.front(), 2510);
  // The bias is frozen after step 2500, so recorded values equal the final bias.
  const Trajectory re = reevaluate_bias(prod, bias);
  EXPECT_LE((re.bias_values - prod.bias_values).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Simulate, DoubleWellCrossesBarrierAtLowTemperature) {
  SimulationParams p;
  p.beta = 3.0;
  p.n_steps = 1000000;
  p.save_stride = 1;
  p.seed = 11;
  p.x0 = Vector::Constant(1, -0.7);
  BiasState none = BiasState::none(1);
  const Trajectory t = simulate(PotentialSpec::double_well_sim(), none, p);
  int changes = 0;
  for (Index i = 1; i < t.size(); ++i) {
    if ((t.states(i, 0) > 0.0) != (t.states(i - 1, 0) > 0.0)) ++changes;
  }
  EXPECT_GE(changes, 10);
}

TEST(Simulate, LeavingTheDomainIsDivergence) {
  SimulationParams p;
  p.n_steps = 100;
  p.dt = 1.0;
  p.x0 = Vector::Constant(1, 2.0);
  p.domain_radius = 1e6;
  BiasState none = BiasState::none(1);
  EXPECT_THROW(simulate(PotentialSpec::double_well_target(), none, p), DivergenceError);
}

TEST(Simulate, InvalidParameters) {
  SimulationParams p;
  p.dt = -1.0;
  BiasState none = BiasState::none(1);
  EXPECT_THROW(simulate(PotentialSpec::harmonic(), none, p), ConfigError);
  p.dt = 1e-3;
  p.x0 = Vector::Zero(2);
  EXPECT_THROW(simulate(PotentialSpec::harmonic(), none, p), ConfigError);
}
