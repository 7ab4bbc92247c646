#include <genspec/deeploss.hpp>
#include <genspec/genlearn.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace genspec;

namespace {

WeightedDataset gaussian_samples(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  RowMatrix x(n, 1);
  for (Index i = 0; i < n; ++i) x(i, 0) = n01(rng);
  return weighted_dataset(std::move(x), Vector::Zero(n), 1.0);
}

LossBatch batch_of(const WeightedDataset& ds, Index first, Index count) { return make_batch(ds.rows(first, count)); }

SpectralModel constant_model(double eta, double s) {
  auto dict = make_mlp({1, 4, 1}, 1, 1, false);
  dict.set_flat_params(Vector::Zero(dict.num_params()));
  dict.heads[0].layers.back().bias[0] = 1.0;
  SpectralModel m = make_spectral_model(std::move(dict), eta, 0.0);
  m.s[0] = s;
  return m;
}

}  // namespace

TEST(Softplus, StableAndInvertible) {
  for (double y : {1e-8, 0.05, 1.0, 40.0}) EXPECT_NEAR(softplus(softplus_inverse(y)), y, 1e-12 * std::max(1.0, y));
  EXPECT_NEAR(softplus(800.0), 800.0, 1e-12);
  EXPECT_TRUE(std::isfinite(softplus(-800.0)));
  EXPECT_NEAR(sigmoid(-800.0), 0.0, 1e-300);
}

TEST(SpectralModel, InitialEigenvaluesAreSpread) {
  const auto m = make_spectral_model(make_mlp({2, 5, 1}, 3, 1, false), 0.05, 0.03);
  const Vector lam = m.lambdas();
  for (Index i = 0; i < 3; ++i) EXPECT_NEAR(lam[i], -0.05 * static_cast<double>(i + 1), 1e-12);
  EXPECT_THROW(make_spectral_model(make_rbf(RowMatrix::Zero(1, 1), 1.0, false), 0.1, 0.0), ConfigError);
}

TEST(Loss, ConstantFeatureAttainsMinusOneOverEta) {
  const double eta = 0.1;
  const auto model = constant_model(eta, -60.0);
  const auto ds = gaussian_samples(64, 1);
  EXPECT_NEAR(loss_biased(model, batch_of(ds, 0, 32), batch_of(ds, 32, 32)), -1.0 / eta, 1e-12);
}

TEST(Loss, InfiniteEigenvalueGivesZero) {
  const auto model = constant_model(0.1, 1e6);
  const auto ds = gaussian_samples(64, 1);
  EXPECT_NEAR(loss_biased(model, batch_of(ds, 0, 32), batch_of(ds, 32, 32)), 0.0, 1e-5);
}

TEST(Loss, DoublingWeightsScalesByFour) {
  auto model = make_spectral_model(make_mlp({1, 8, 8, 1}, 2, 3, true), 0.5, 0.7);
  auto ds = gaussian_samples(200, 2);
  for (Index i = 0; i < ds.size(); ++i) ds.log_weights[i] = 0.4 * std::cos(ds.states(i, 0));
  auto doubled = ds;
  doubled.log_weights.array() += std::log(2.0);
  const auto a = loss_gradient(model, batch_of(ds, 0, 100), batch_of(ds, 100, 100));
  const auto b = loss_gradient(model, batch_of(doubled, 0, 100), batch_of(doubled, 100, 100));
  EXPECT_NEAR(b.loss, 4.0 * a.loss, 1e-12 * std::abs(a.loss));
  EXPECT_LE((b.grad - 4.0 * a.grad).cwiseAbs().maxCoeff(), 1e-11 * (1.0 + a.grad.cwiseAbs().maxCoeff()));
}

TEST(LossGradient, MatchesFiniteDifferences) {
  auto ds = gaussian_samples(300, 4);
  for (Index i = 0; i < ds.size(); ++i) ds.log_weights[i] = -0.3 * ds.states(i, 0) * ds.states(i, 0);
  auto model = make_spectral_model(make_mlp({1, 10, 10, 1}, 3, 5, true), 0.2, 0.1);
  const auto chk = check_gradient(model, batch_of(ds, 0, 150), batch_of(ds, 150, 150));
  EXPECT_LE(chk.max_rel_error, 1e-6) << chk.worst_block;
}

TEST(LossGradient, ZeroWeightNetworkOutputLayer) {
  auto model = make_spectral_model(make_mlp({1, 6, 1}, 2, 7, false), 0.3, 0.0);
  Vector p = model.dict.flat_params();
  p.setZero();
  model.dict.set_flat_params(p);
  model.dict.heads[0].layers.back().bias[0] = 1.0;
  model.dict.heads[1].layers.back().bias[0] = 0.3;
  const auto ds = gaussian_samples(80, 8);
  const auto b1 = batch_of(ds, 0, 40), b2 = batch_of(ds, 40, 40);
  const auto an = loss_gradient(model, b1, b2);
  ASSERT_TRUE(an.grad.allFinite());
  // Output layer of each head: 6 weights then 1 bias, following the hidden layer (6 + 6 entries).
  const Vector theta = model.flat_params();
  const Index per_head = 6 + 6 + 6 + 1;
  for (Index h = 0; h < 2; ++h) {
    for (Index j = 0; j < 7; ++j) {
      const Index idx = h * per_head + 12 + j;
      const double step = 1e-6;
      SpectralModel probe = model;
      Vector t = theta;
      t[idx] += step;
      probe.set_flat_params(t);
      const double up = loss_biased(probe, b1, b2);
      t[idx] -= 2.0 * step;
      probe.set_flat_params(t);
      const double down = loss_biased(probe, b1, b2);
      EXPECT_NEAR(an.grad[idx], (up - down) / (2.0 * step), 1e-6);
    }
  }
}

TEST(LossGradient, ProductRuleFormMatchesFiniteDifferences) {
  RowMatrix x(200, 1);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (Index i = 0; i < 200; ++i) x(i, 0) = u(rng);
  const BiasState v = double_well_bias();
  Vector bias(200);
  for (Index i = 0; i < 200; ++i) bias[i] = eval_bias(v, x.row(i).transpose()).value;
  const auto ds = weighted_dataset(x, bias, 1.0);
  const RowMatrix g = bias_gradients(v, x);
  const auto b1 = make_batch(ds.rows(0, 100), g.topRows(100));
  const auto b2 = make_batch(ds.rows(100, 100), g.bottomRows(100));
  const auto model = make_spectral_model(make_mlp({1, 8, 1}, 2, 2, true), 0.1, 0.05);
  const auto chk = check_gradient(model, b1, b2, 1e-5, 0, 0, EnergyForm::product_rule);
  EXPECT_LE(chk.max_rel_error, 1e-6) << chk.worst_block;
}

TEST(Train, DeterministicForEqualSeeds) {
  const auto ds = gaussian_samples(4000, 1);
  const auto model = make_spectral_model(make_mlp({1, 8, 1}, 2, 1, false), 0.5, 1.0);
  TrainConfig cfg;
  cfg.max_steps = 150;
  cfg.batch_size = 64;
  cfg.seed = 4;
  cfg.eval_every = 25;
  const auto a = train(ds, model, cfg);
  const auto b = train(ds, model, cfg);
  EXPECT_EQ(a.history.loss, b.history.loss);
  EXPECT_EQ(a.model.flat_params(), b.model.flat_params());
  EXPECT_EQ(a.history.best_step, b.history.best_step);
}

TEST(Train, RejectsBadConfig) {
  const auto ds = gaussian_samples(100, 1);
  const auto model = make_spectral_model(make_mlp({1, 4, 1}, 1, 1, false), 0.5, 1.0);
  TrainConfig cfg;
  cfg.batch_size = 7;
  EXPECT_THROW(train(ds, model, cfg), ConfigError);
  cfg.batch_size = 512;
  EXPECT_THROW(train(ds, model, cfg), EmptyDatasetError);
}

TEST(Train, DivergenceCarriesLastFiniteModel) {
  // A feature of size 1e200 overflows the covariance on the first batch.
  const auto ds = gaussian_samples(200, 2);
  auto model = make_spectral_model(make_mlp({1, 8, 1}, 2, 1, false), 0.5, 1.0);
  model.dict.heads[0].layers.back().bias[0] = 1e200;
  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.eval_every = 0;
  try {
    train(ds, model, cfg);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.step(), 1);
    EXPECT_EQ(e.last_finite.flat_params(), model.flat_params());
  }
}

TEST(Train, OrnsteinUhlenbeckRecovery) {
  const auto ds = gaussian_samples(50000, 21);
  const double eta = 0.5;
  const auto model = make_spectral_model(make_mlp({1, 16, 16, 1}, 2, 3, false), eta, 1.0);
  TrainConfig cfg;
  cfg.max_steps = 20000;
  cfg.batch_size = 256;
  cfg.seed = 5;
  cfg.eval_every = 100;
  const auto res = train(ds, model, cfg);

  // Loss over the dataset against the attained minimum -(1/eta + 1/(eta + 1)).
  const auto est = estimate_loss(res.model, ds, 5000, 10, 1);
  const double attained = -(1.0 / eta + 1.0 / (eta + 1.0));
  EXPECT_LE(std::abs(est.mean - attained), 0.1 * std::abs(attained));

  // Generator fit with the learned features.
  const auto eig = ridge_eigensolve(assemble_covariances(res.model.dict, ds, eta, true), 1e-6);
  ASSERT_GE(eig.size(), 2);
  EXPECT_NEAR(eig.lambdas[0], 0.0, 0.1);
  EXPECT_NEAR(eig.lambdas[1], -1.0, 0.1);

  // First-order optimality in s on large half-batches.
  const auto lg = loss_gradient(res.model, batch_of(ds, 0, 25000), batch_of(ds, 25000, 25000));
  const Index ns = res.model.s.size();
  EXPECT_LE(lg.grad.tail(ns).cwiseAbs().maxCoeff(), 1e-3);

  // Smoothed history (window 200) is non-increasing except on at most 2% of steps.
  const auto& loss = res.history.loss;
  const std::size_t w = 200;
  std::vector<double> smooth;
  double acc = 0.0;
  for (std::size_t i = 0; i < loss.size(); ++i) {
    acc += loss[i];
    if (i >= w) acc -= loss[i - w];
    if (i + 1 >= w) smooth.push_back(acc / static_cast<double>(w));
  }
  std::size_t violations = 0;
  for (std::size_t i = w; i < smooth.size(); ++i) {
    if (smooth[i] > smooth[i - w] + 0.01 * std::abs(smooth[i - w])) ++violations;
  }
  EXPECT_LE(static_cast<double>(violations), 0.02 * static_cast<double>(smooth.size()));
}

TEST(SpectralModel, JsonRoundTrip) {
  const auto model = make_spectral_model(make_mlp({2, 5, 1}, 2, 1, true), 0.05, 0.03);
  const auto back = spectral_model_from_json(to_json(model));
  EXPECT_EQ(back.flat_params(), model.flat_params());
  EXPECT_EQ(back.eta, model.eta);
  EXPECT_EQ(back.alpha, model.alpha);
}
