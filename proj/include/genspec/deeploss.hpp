#pragma once

// Two-batch spectral loss for learning MLP features of the generator, its exact gradient, and Adam training.

#include <genspec/data.hpp>
#include <genspec/errors.hpp>
#include <genspec/features.hpp>
#include <genspec/genlearn.hpp>
#include <genspec/types.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace genspec {

inline double softplus(double s) { return s > 30.0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s)); }
inline double sigmoid(double s) { return s >= 0.0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s)); }

/// Inverse of softplus for y > 0.
inline double softplus_inverse(double y) {
  if (!(y > 0.0)) throw ConfigError("softplus inverse needs a positive argument");
  return y > 30.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

/**
 * MLP features z_1..z_m with trainable eigenvalue weights lambda_i = -softplus(s_i) < 0.
 * Lambda = diag(1 / (eta - lambda_i)) therefore has entries in (0, 1/eta).
 */
struct SpectralModel {
  FeatureDictionary dict;
  Vector s;
  double eta = 0.05;
  double alpha = 0.0;

  Index size() const { return dict.size(); }
  Vector lambdas() const {
    Vector out(s.size());
    for (Index i = 0; i < s.size(); ++i) out[i] = -softplus(s[i]);
    return out;
  }
  Vector lambda_weights() const {
    Vector out(s.size());
    for (Index i = 0; i < s.size(); ++i) out[i] = 1.0 / (eta + softplus(s[i]));
    return out;
  }

  void validate() const {
    if (dict.kind != FeatureKind::mlp) throw ConfigError("spectral model needs an MLP dictionary");
    dict.validate();
    if (s.size() != dict.size()) throw ConfigError("spectral model needs one eigenvalue weight per feature");
    if (!(eta > 0.0)) throw ConfigError("eta must be positive");
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
    if (!s.allFinite()) throw NumericError("non-finite eigenvalue parameter");
  }

  /// MLP parameters (features-module layout) followed by s.
  Index num_params() const { return dict.num_params() + s.size(); }
  Vector flat_params() const {
    Vector out(num_params());
    out << dict.flat_params(), s;
    return out;
  }
  void set_flat_params(const ConstVectorRef& p) {
    if (p.size() != num_params()) throw ConfigError("parameter vector has wrong length");
    const Index k = dict.num_params();
    dict.set_flat_params(p.head(k));
    s = p.tail(s.size());
  }
};

/// Wraps `dict` with s initialised so that lambda_i = -(i + 1) eta.
inline SpectralModel make_spectral_model(FeatureDictionary dict, double eta, double alpha) {
  SpectralModel model;
  model.eta = eta;
  model.alpha = alpha;
  model.s.resize(dict.size());
  for (Index i = 0; i < model.s.size(); ++i) model.s[i] = softplus_inverse(static_cast<double>(i + 1) * eta);
  model.dict = std::move(dict);
  model.validate();
  return model;
}

/// One half-batch: samples, their shifted weights and, for EnergyForm::product_rule, grad V.
struct LossBatch {
  RowMatrix states;
  Vector weights;
  RowMatrix bias_grads;
  double beta = 1.0;

  Index size() const { return states.rows(); }
};

inline LossBatch make_batch(const WeightedDataset& ds, const RowMatrix& bias_grads = {}) {
  return LossBatch{ds.states, ds.weights(), bias_grads, ds.beta};
}

/// Gathers rows of `ds` (and of `bias_grads` when non-empty).
inline LossBatch gather_batch(const WeightedDataset& ds, const RowMatrix& bias_grads, const Index* rows, Index count) {
  LossBatch b;
  b.beta = ds.beta;
  b.states.resize(count, ds.dim());
  b.weights.resize(count);
  if (bias_grads.rows() > 0) b.bias_grads.resize(count, ds.dim());
  for (Index i = 0; i < count; ++i) {
    const Index r = rows[i];
    b.states.row(i) = ds.states.row(r);
    b.weights[i] = std::exp(ds.log_weights[r]);
    if (bias_grads.rows() > 0) b.bias_grads.row(i) = bias_grads.row(r);
  }
  return b;
}

struct LossGradient {
  double loss = 0.0;
  /// d loss / d flat parameters, same layout as SpectralModel::flat_params.
  Vector grad;
};

namespace detail {

/// Forward quantities of one batch. Columns of zs and of each gs[k] follow the dictionary order.
struct BatchForward {
  std::vector<HeadTape> tapes;
  Vector sw;
  Matrix zs;
  std::vector<Matrix> gs;
  Matrix C;
  Matrix W;
  double wbar = 0.0;
};

inline BatchForward forward_batch(const SpectralModel& model, const LossBatch& b, EnergyForm form) {
  const Index n = b.size();
  const Index d = model.dict.dim;
  const Index m = model.size();
  const Index off = model.dict.offset();
  if (n < 1) throw EmptyDatasetError("empty loss batch");
  if (b.states.cols() != d) throw ConfigError("batch dimension does not match the model");
  if (b.weights.size() != n) throw ConfigError("batch weight count mismatch");
  if (form == EnergyForm::product_rule && (b.bias_grads.rows() != n || b.bias_grads.cols() != d)) {
    throw ConfigError("product-rule loss needs bias gradients for every sample");
  }
  BatchForward f;
  f.sw = b.weights.array().sqrt().matrix();
  f.wbar = b.weights.mean();
  Matrix z(n, m);
  std::vector<Matrix> g(static_cast<std::size_t>(d), Matrix::Zero(n, m));
  if (off == 1) z.col(0).setOnes();
  for (std::size_t h = 0; h < model.dict.heads.size(); ++h) {
    f.tapes.push_back(mlp_head_forward(model.dict.heads[h], b.states));
    const Index j = off + static_cast<Index>(h);
    z.col(j) = f.tapes.back().act.back().col(0);
    for (Index k = 0; k < d; ++k) g[static_cast<std::size_t>(k)].col(j) = f.tapes.back().jac.back()[static_cast<std::size_t>(k)].col(0);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  f.zs = f.sw.asDiagonal() * z;
  f.C = inv_n * f.zs.transpose() * f.zs;
  Matrix dir = Matrix::Zero(m, m);
  for (Index k = 0; k < d; ++k) {
    Matrix gk = g[static_cast<std::size_t>(k)];
    if (form == EnergyForm::product_rule) gk += (0.5 * b.beta * b.bias_grads.col(k)).asDiagonal() * z;
    gk = f.sw.asDiagonal() * gk;
    dir.noalias() += gk.transpose() * gk;
    f.gs.push_back(std::move(gk));
  }
  dir *= inv_n / b.beta;
  f.W = model.eta * f.C + dir;
  return f;
}

inline double loss_from(const Matrix& c1, const Matrix& w1, double wb1, const Matrix& c2, const Matrix& w2, double wb2,
                        const Vector& lam, double alpha) {
  const auto L = lam.asDiagonal();
  const Index m = lam.size();
  const Matrix I = Matrix::Identity(m, m);
  double loss = 0.5 * ((c1 * L * w2 * L).trace() + (c2 * L * w1 * L).trace());
  loss -= wb1 * (c2 * L).trace() + wb2 * (c1 * L).trace();
  loss += alpha * ((c1 - wb1 * I) * (c2 - wb2 * I)).trace();
  return loss;
}

inline std::string batch_diagnostics(const BatchForward& f, const char* label) {
  std::ostringstream os;
  os << label << ": n=" << f.zs.rows() << " mean_weight=" << f.wbar << " max|sqrt(w) z|="
     << (f.zs.size() ? f.zs.cwiseAbs().maxCoeff() : 0.0);
  return os.str();
}

inline void check_loss(double loss, const BatchForward& f1, const BatchForward& f2) {
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite loss; " + batch_diagnostics(f1, "batch 1") + "; " + batch_diagnostics(f2, "batch 2"));
  }
}

/**
 * Accumulates d loss / d theta from one batch given the symmetric adjoints of its C and of the
 * Dirichlet part D (W = eta C + D).
 */
inline void backward_batch(const SpectralModel& model, const LossBatch& b, const BatchForward& f, const Matrix& adj_c,
                           const Matrix& adj_d, EnergyForm form, Vector& grad) {
  const Index n = b.size();
  const Index d = model.dict.dim;
  const Index off = model.dict.offset();
  const double inv_n = 1.0 / static_cast<double>(n);
  // Adjoints of sqrt(w) z and sqrt(w) g_k, then of the raw values and Jacobians.
  const Matrix zs_adj = (2.0 * inv_n) * f.zs * adj_c;
  Matrix z_adj = f.sw.asDiagonal() * zs_adj;
  std::vector<Matrix> g_adj(static_cast<std::size_t>(d));
  for (Index k = 0; k < d; ++k) {
    const Matrix gs_adj = (2.0 * inv_n / b.beta) * f.gs[static_cast<std::size_t>(k)] * adj_d;
    g_adj[static_cast<std::size_t>(k)] = f.sw.asDiagonal() * gs_adj;
    if (form == EnergyForm::product_rule) {
      z_adj += (0.5 * b.beta * b.bias_grads.col(k)).asDiagonal() * g_adj[static_cast<std::size_t>(k)];
    }
  }
  Index pos = 0;
  for (std::size_t h = 0; h < model.dict.heads.size(); ++h) {
    const Index j = off + static_cast<Index>(h);
    Matrix jac_adj(n, d);
    for (Index k = 0; k < d; ++k) jac_adj.col(k) = g_adj[static_cast<std::size_t>(k)].col(j);
    const HeadGradient hg = mlp_head_backward(model.dict.heads[h], f.tapes[h], z_adj.col(j), jac_adj);
    for (const auto& layer : hg.layers) {
      for (Index r = 0; r < layer.weight.rows(); ++r) {
        for (Index c = 0; c < layer.weight.cols(); ++c) grad[pos++] += layer.weight(r, c);
      }
      for (Index r = 0; r < layer.bias.size(); ++r) grad[pos++] += layer.bias[r];
    }
  }
}

}  // namespace detail

/**
 * tr[(C1 L W2 L + C2 L W1 L)/2 - w1 C2 L - w2 C1 L + alpha (C1 - w1 I)(C2 - w2 I)] with per-batch
 * weighted covariances C, W = eta C + (1/(beta n)) sum w grad z grad z^T and mean weights w1, w2.
 */
inline double loss_biased(const SpectralModel& model, const LossBatch& b1, const LossBatch& b2,
                          EnergyForm form = EnergyForm::reweighted) {
  model.validate();
  const auto f1 = detail::forward_batch(model, b1, form);
  const auto f2 = detail::forward_batch(model, b2, form);
  const double loss = detail::loss_from(f1.C, f1.W, f1.wbar, f2.C, f2.W, f2.wbar, model.lambda_weights(), model.alpha);
  detail::check_loss(loss, f1, f2);
  return loss;
}

/// Loss and its exact gradient, including the terms that flow through the feature Jacobians.
inline LossGradient loss_gradient(const SpectralModel& model, const LossBatch& b1, const LossBatch& b2,
                                  EnergyForm form = EnergyForm::reweighted) {
  model.validate();
  const auto f1 = detail::forward_batch(model, b1, form);
  const auto f2 = detail::forward_batch(model, b2, form);
  const Vector lam = model.lambda_weights();
  const auto L = lam.asDiagonal();
  const Index m = lam.size();
  const Matrix I = Matrix::Identity(m, m);
  LossGradient out;
  out.loss = detail::loss_from(f1.C, f1.W, f1.wbar, f2.C, f2.W, f2.wbar, lam, model.alpha);
  detail::check_loss(out.loss, f1, f2);
  out.grad = Vector::Zero(model.num_params());

  // Matrix adjoints (all symmetric): dL/dW1 = L C2 L / 2 and dL/dC1 = L W2 L / 2 - w2 L + alpha (C2 - w2 I).
  const Matrix adj_w1 = 0.5 * L * f2.C * L;
  const Matrix adj_w2 = 0.5 * L * f1.C * L;
  Matrix adj_c1 = 0.5 * L * f2.W * L;
  adj_c1.diagonal() -= f2.wbar * lam;
  adj_c1 += model.alpha * (f2.C - f2.wbar * I);
  Matrix adj_c2 = 0.5 * L * f1.W * L;
  adj_c2.diagonal() -= f1.wbar * lam;
  adj_c2 += model.alpha * (f1.C - f1.wbar * I);
  detail::backward_batch(model, b1, f1, adj_c1 + model.eta * adj_w1, adj_w1, form, out.grad);
  detail::backward_batch(model, b2, f2, adj_c2 + model.eta * adj_w2, adj_w2, form, out.grad);

  const Matrix a = f1.C * L * f2.W;
  const Matrix b = f2.C * L * f1.W;
  const Index base = model.dict.num_params();
  for (Index i = 0; i < m; ++i) {
    const double dlam = a(i, i) + b(i, i) - f1.wbar * f2.C(i, i) - f2.wbar * f1.C(i, i);
    out.grad[base + i] = dlam * (-lam[i] * lam[i] * sigmoid(model.s[i]));
  }
  return out;
}

/// Worst per-block relative error between the analytic gradient and central differences.
struct GradientCheck {
  double max_rel_error = 0.0;
  std::string worst_block;
};

/**
 * Blocks are each layer weight, each layer bias and the s vector. `max_per_block` > 0 probes a
 * random subset of entries per block (the error is then relative to the probed entries).
 */
inline GradientCheck check_gradient(const SpectralModel& model, const LossBatch& b1, const LossBatch& b2,
                                    double step = 1e-5, Index max_per_block = 0, std::uint64_t seed = 0,
                                    EnergyForm form = EnergyForm::reweighted) {
  const LossGradient an = loss_gradient(model, b1, b2, form);
  const Vector theta = model.flat_params();
  SpectralModel probe = model;
  std::vector<std::pair<std::string, std::pair<Index, Index>>> blocks;
  Index pos = 0;
  for (std::size_t h = 0; h < model.dict.heads.size(); ++h) {
    for (std::size_t l = 0; l < model.dict.heads[h].layers.size(); ++l) {
      const auto& layer = model.dict.heads[h].layers[l];
      const std::string tag = "head " + std::to_string(h) + " layer " + std::to_string(l);
      blocks.push_back({tag + " weight", {pos, layer.weight.size()}});
      pos += layer.weight.size();
      blocks.push_back({tag + " bias", {pos, layer.bias.size()}});
      pos += layer.bias.size();
    }
  }
  blocks.push_back({"eigenvalue weights", {pos, model.s.size()}});
  std::mt19937_64 rng(seed);
  GradientCheck out;
  for (const auto& [name, range] : blocks) {
    std::vector<Index> idx(static_cast<std::size_t>(range.second));
    std::iota(idx.begin(), idx.end(), range.first);
    if (max_per_block > 0 && static_cast<Index>(idx.size()) > max_per_block) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(max_per_block));
    }
    double diff = 0.0;
    double scale = 0.0;
    for (Index p : idx) {
      Vector t = theta;
      const double h = step * std::max(1.0, std::abs(theta[p]));
      t[p] = theta[p] + h;
      probe.set_flat_params(t);
      const double up = loss_biased(probe, b1, b2, form);
      t[p] = theta[p] - h;
      probe.set_flat_params(t);
      const double down = loss_biased(probe, b1, b2, form);
      const double fd = (up - down) / (2.0 * h);
      diff = std::max(diff, std::abs(fd - an.grad[p]));
      scale = std::max({scale, std::abs(fd), std::abs(an.grad[p])});
    }
    // Blocks whose gradient vanishes are compared in absolute terms against the loss scale.
    const double rel = diff / std::max(scale, 1e-8 * std::max(1.0, std::abs(an.loss)));
    if (rel > out.max_rel_error) {
      out.max_rel_error = rel;
      out.worst_block = name;
    }
  }
  return out;
}

/// Mean and standard error of the loss over random disjoint batch pairs.
struct LossEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  Index pairs = 0;
};

inline LossEstimate estimate_loss(const SpectralModel& model, const WeightedDataset& ds, Index batch_size, Index pairs,
                                  std::uint64_t seed, const RowMatrix& bias_grads = {},
                                  EnergyForm form = EnergyForm::reweighted) {
  if (batch_size < 4 || batch_size % 2 != 0) throw ConfigError("batch size must be even and >= 4");
  if (ds.size() < batch_size) throw EmptyDatasetError("dataset smaller than one batch");
  if (pairs < 2) throw ConfigError("loss estimate needs at least two batch pairs");
  std::mt19937_64 rng(seed);
  std::vector<Index> perm(static_cast<std::size_t>(ds.size()));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::vector<double> vals;
  const Index half = batch_size / 2;
  for (Index p = 0; p < pairs; ++p) {
    for (Index i = 0; i < batch_size; ++i) {
      std::uniform_int_distribution<Index> pick(i, ds.size() - 1);
      std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
    }
    const auto b1 = gather_batch(ds, bias_grads, perm.data(), half);
    const auto b2 = gather_batch(ds, bias_grads, perm.data() + half, half);
    vals.push_back(loss_biased(model, b1, b2, form));
  }
  LossEstimate out;
  out.pairs = pairs;
  const double n = static_cast<double>(vals.size());
  out.mean = std::accumulate(vals.begin(), vals.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : vals) ss += (v - out.mean) * (v - out.mean);
  out.std_error = std::sqrt(ss / (n - 1.0) / n);
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 5e-3;
  Index batch_size = 512;
  std::int64_t max_steps = 10000;
  std::uint64_t seed = 0;
  /// Run a finite-difference gradient check every this many steps (0 = off).
  std::int64_t grad_check_every = 0;
  double grad_check_tol = 1e-4;
  /// Stop after this many validation evaluations without improvement (0 = off).
  std::int64_t patience = 0;
  std::int64_t eval_every = 100;
  /// Validation loss uses at most this many samples, split into two fixed halves.
  Index max_validation_samples = 20000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  EnergyForm form = EnergyForm::reweighted;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (batch_size < 4 || batch_size % 2 != 0) throw ConfigError("batch size must be even and >= 4");
    if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
    if (grad_check_every < 0 || patience < 0 || eval_every < 0) throw ConfigError("negative training interval");
  }
};

struct TrainHistory {
  std::vector<std::int64_t> step;
  std::vector<double> loss;
  /// NaN on steps without a validation evaluation.
  std::vector<double> validation_loss;
  std::vector<Vector> lambdas;
  std::int64_t best_step = 0;
  double best_validation = std::numeric_limits<double>::infinity();
  bool early_stopped = false;
};

struct TrainResult {
  SpectralModel model;
  TrainHistory history;
};

/// Thrown when the training loss stops being finite; carries the last model with a finite loss.
class TrainingDiverged : public DivergenceError {
 public:
  TrainingDiverged(const std::string& what, std::int64_t step, SpectralModel last, TrainHistory history)
      : DivergenceError(what, step), last_finite(std::move(last)), history(std::move(history)) {}
  SpectralModel last_finite;
  TrainHistory history;
};

namespace detail {

struct Adam {
  Vector m1;
  Vector m2;
  std::int64_t t = 0;

  void step(Vector& theta, const Vector& g, const TrainConfig& cfg) {
    if (m1.size() == 0) {
      m1 = Vector::Zero(theta.size());
      m2 = Vector::Zero(theta.size());
    }
    ++t;
    m1 = cfg.adam_beta1 * m1 + (1.0 - cfg.adam_beta1) * g;
    m2 = cfg.adam_beta2 * m2 + (1.0 - cfg.adam_beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
    theta.array() -= cfg.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + cfg.adam_eps);
  }
};

}  // namespace detail

/**
 * Adam on the two-batch loss. Each step draws batch_size distinct training rows (partial
 * Fisher-Yates) and splits them into two half-batches. The returned model is the one with the best
 * validation loss; without validation data (or eval_every = 0) it is the final model.
 */
inline TrainResult train(const WeightedDataset& train_set, const WeightedDataset& validation, SpectralModel model,
                         const TrainConfig& cfg, const RowMatrix& train_bias_grads = {},
                         const RowMatrix& validation_bias_grads = {}) {
  cfg.validate();
  model.validate();
  if (train_set.size() < 2 * cfg.batch_size) throw EmptyDatasetError("training set needs at least two batches");
  if (train_set.dim() != model.dict.dim) throw ConfigError("dataset dimension does not match the model");
  std::mt19937_64 rng(cfg.seed);
  std::vector<Index> perm(static_cast<std::size_t>(train_set.size()));
  std::iota(perm.begin(), perm.end(), Index{0});
  const Index half = cfg.batch_size / 2;

  const bool use_validation = cfg.eval_every > 0 && validation.size() >= 4;
  LossBatch v1;
  LossBatch v2;
  if (use_validation) {
    const Index nv = std::min(validation.size(), cfg.max_validation_samples) / 2 * 2;
    std::vector<Index> vrows(static_cast<std::size_t>(validation.size()));
    std::iota(vrows.begin(), vrows.end(), Index{0});
    std::mt19937_64 vrng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::shuffle(vrows.begin(), vrows.end(), vrng);
    v1 = gather_batch(validation, validation_bias_grads, vrows.data(), nv / 2);
    v2 = gather_batch(validation, validation_bias_grads, vrows.data() + nv / 2, nv / 2);
  }

  TrainResult out;
  out.model = model;
  detail::Adam adam;
  Vector theta = model.flat_params();
  std::int64_t since_best = 0;
  for (std::int64_t step = 1; step <= cfg.max_steps; ++step) {
    for (Index i = 0; i < cfg.batch_size; ++i) {
      std::uniform_int_distribution<Index> pick(i, train_set.size() - 1);
      std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
    }
    const auto b1 = gather_batch(train_set, train_bias_grads, perm.data(), half);
    const auto b2 = gather_batch(train_set, train_bias_grads, perm.data() + half, half);
    LossGradient lg;
    try {
      lg = loss_gradient(model, b1, b2, cfg.form);
    } catch (const NumericError& e) {
      throw TrainingDiverged(e.what(), step, model, out.history);
    }
    if (!lg.grad.allFinite()) throw TrainingDiverged("non-finite gradient", step, model, out.history);
    if (cfg.grad_check_every > 0 && step % cfg.grad_check_every == 0) {
      const auto chk = check_gradient(model, b1, b2, 1e-5, 16, cfg.seed + static_cast<std::uint64_t>(step), cfg.form);
      if (chk.max_rel_error > cfg.grad_check_tol) {
        throw NumericError("gradient check failed at step " + std::to_string(step) + " in " + chk.worst_block +
                           ": relative error " + std::to_string(chk.max_rel_error));
      }
    }
    out.history.step.push_back(step);
    out.history.loss.push_back(lg.loss);
    out.history.lambdas.push_back(model.lambdas());
    double vloss = std::numeric_limits<double>::quiet_NaN();
    if (use_validation && (step % cfg.eval_every == 0 || step == 1)) {
      try {
        vloss = loss_biased(model, v1, v2, cfg.form);
      } catch (const NumericError& e) {
        throw TrainingDiverged(e.what(), step, model, out.history);
      }
      if (vloss < out.history.best_validation) {
        out.history.best_validation = vloss;
        out.history.best_step = step;
        out.model = model;
        since_best = 0;
      } else {
        ++since_best;
      }
    }
    out.history.validation_loss.push_back(vloss);
    if (cfg.patience > 0 && since_best >= cfg.patience) {
      out.history.early_stopped = true;
      break;
    }
    adam.step(theta, lg.grad, cfg);
    model.set_flat_params(theta);
  }
  if (!use_validation) {
    out.model = model;
    out.history.best_step = out.history.step.empty() ? 0 : out.history.step.back();
  }
  return out;
}

/// Splits `dataset` with `validation_fraction` held out (seeded by cfg.seed) and trains.
inline TrainResult train(const WeightedDataset& dataset, SpectralModel model, const TrainConfig& cfg,
                         double validation_fraction = 0.2) {
  auto [tr, va] = split(dataset, 1.0 - validation_fraction, cfg.seed);
  return train(tr, va, std::move(model), cfg);
}

// ---------------------------------------------------------------------------
// Serialisation

inline nlohmann::json to_json(const SpectralModel& model) {
  nlohmann::json j;
  j["dictionary"] = to_json(model.dict);
  j["s"] = std::vector<double>(model.s.data(), model.s.data() + model.s.size());
  j["eta"] = model.eta;
  j["alpha"] = model.alpha;
  return j;
}

inline SpectralModel spectral_model_from_json(const nlohmann::json& j) {
  SpectralModel model;
  model.dict = dictionary_from_json(j.at("dictionary"));
  const auto s = j.at("s").get<std::vector<double>>();
  model.s = Eigen::Map<const Vector>(s.data(), static_cast<Index>(s.size()));
  model.eta = j.at("eta").get<double>();
  model.alpha = j.value("alpha", 0.0);
  model.validate();
  return model;
}

}  // namespace genspec
