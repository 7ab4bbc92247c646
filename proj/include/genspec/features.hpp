#pragma once

// Feature dictionaries z = (z_1..z_m) with exact input Jacobians.

#include <genspec/errors.hpp>
#include <genspec/types.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace genspec {

enum class FeatureKind { rbf, fourier, mlp };

inline std::string_view to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::rbf: return "rbf";
    case FeatureKind::fourier: return "fourier";
    case FeatureKind::mlp: return "mlp";
  }
  return "unknown";
}

inline FeatureKind feature_kind_from_string(std::string_view name) {
  if (name == "rbf") return FeatureKind::rbf;
  if (name == "fourier") return FeatureKind::fourier;
  if (name == "mlp") return FeatureKind::mlp;
  throw ConfigError("unknown dictionary kind '" + std::string(name) + "'");
}

/// Dense layer y = W x + b, W is (out x in). Hidden layers apply tanh, the last layer is linear.
struct DenseLayer {
  Matrix weight;
  Vector bias;
};

/// One single-output network.
struct MlpHead {
  std::vector<DenseLayer> layers;
};

struct FeatureDictionary {
  FeatureKind kind = FeatureKind::rbf;
  int dim = 1;
  bool include_constant = false;

  // rbf
  RowMatrix centers;
  double lengthscale = 1.0;
  // fourier: z_j = sqrt(2) cos(w_j . x + phase_j)
  RowMatrix frequencies;
  Vector phases;
  // mlp
  std::vector<MlpHead> heads;

  /// Number of non-constant features.
  Index num_varying() const {
    switch (kind) {
      case FeatureKind::rbf: return centers.rows();
      case FeatureKind::fourier: return frequencies.rows();
      case FeatureKind::mlp: return static_cast<Index>(heads.size());
    }
    return 0;
  }
  Index size() const { return num_varying() + (include_constant ? 1 : 0); }
  Index offset() const { return include_constant ? 1 : 0; }

  void validate() const {
    if (dim < 1) throw ConfigError("dictionary dimension must be >= 1");
    switch (kind) {
      case FeatureKind::rbf:
        if (!(lengthscale > 0.0)) throw ConfigError("RBF lengthscale must be positive");
        if (centers.cols() != dim) throw ConfigError("RBF centers have wrong dimension");
        break;
      case FeatureKind::fourier:
        if (frequencies.cols() != dim) throw ConfigError("Fourier frequencies have wrong dimension");
        if (phases.size() != frequencies.rows()) throw ConfigError("Fourier phase count mismatch");
        break;
      case FeatureKind::mlp:
        for (const auto& head : heads) {
          if (head.layers.empty()) throw ConfigError("MLP head without layers");
          Index in = dim;
          for (const auto& layer : head.layers) {
            if (layer.weight.cols() != in || layer.bias.size() != layer.weight.rows()) {
              throw ConfigError("MLP layer shapes are inconsistent");
            }
            in = layer.weight.rows();
          }
          if (in != 1) throw ConfigError("MLP head must have a single output");
        }
        break;
    }
    if (size() < 1) throw ConfigError("empty dictionary");
  }

  // Flattened trainable parameters (MLP only): per head, per layer, W row-major then b.
  Index num_params() const {
    Index count = 0;
    for (const auto& head : heads) {
      for (const auto& layer : head.layers) count += layer.weight.size() + layer.bias.size();
    }
    return count;
  }

  Vector flat_params() const {
    Vector out(num_params());
    Index pos = 0;
    for (const auto& head : heads) {
      for (const auto& layer : head.layers) {
        for (Index r = 0; r < layer.weight.rows(); ++r) {
          for (Index c = 0; c < layer.weight.cols(); ++c) out[pos++] = layer.weight(r, c);
        }
        for (Index r = 0; r < layer.bias.size(); ++r) out[pos++] = layer.bias[r];
      }
    }
    return out;
  }

  void set_flat_params(const ConstVectorRef& p) {
    if (p.size() != num_params()) throw ConfigError("parameter vector has wrong length");
    Index pos = 0;
    for (auto& head : heads) {
      for (auto& layer : head.layers) {
        for (Index r = 0; r < layer.weight.rows(); ++r) {
          for (Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = p[pos++];
        }
        for (Index r = 0; r < layer.bias.size(); ++r) layer.bias[r] = p[pos++];
      }
    }
  }
};

/// values(i, j) = z_j(x_i); jacobians(i, j * d + k) = d z_j / d x_k at x_i.
struct FeatureEval {
  RowMatrix values;
  RowMatrix jacobians;

  Index samples() const { return values.rows(); }
  Index features() const { return values.cols(); }
  Index dim() const { return features() > 0 ? jacobians.cols() / features() : 0; }
  double jacobian(Index i, Index j, Index k) const { return jacobians(i, j * dim() + k); }
};

// ---------------------------------------------------------------------------
// Construction

inline FeatureDictionary make_rbf(const RowMatrix& centers, double lengthscale, bool include_constant) {
  if (!(lengthscale > 0.0)) throw ConfigError("RBF lengthscale must be positive");
  if (centers.cols() < 1) throw ConfigError("RBF centers need at least one column");
  FeatureDictionary dict;
  dict.kind = FeatureKind::rbf;
  dict.dim = static_cast<int>(centers.cols());
  dict.include_constant = include_constant;
  dict.centers = centers;
  dict.lengthscale = lengthscale;
  dict.validate();
  return dict;
}

/**
 * Deterministic stratified subsample of `states`: data are binned on a regular grid over their
 * bounding box, the grid is refined until at least `count` bins are occupied, and one point per
 * bin (the sample nearest the bin center) is kept from `count` occupied bins spread evenly over
 * the bin ordering.
 */
inline RowMatrix stratified_centers(const RowMatrix& states, Index count) {
  const Index n = states.rows();
  const Index d = states.cols();
  if (n < 1 || count < 1) throw ConfigError("stratified selection needs data and a positive count");
  if (count > n) throw ConfigError("more centers requested than data points");
  const Eigen::RowVectorXd lo = states.colwise().minCoeff();
  const Eigen::RowVectorXd hi = states.colwise().maxCoeff();
  Eigen::RowVectorXd span = (hi - lo).cwiseMax(1e-300);

  std::map<std::vector<Index>, std::pair<double, Index>> bins;
  Index per_dim = std::max<Index>(1, static_cast<Index>(std::ceil(std::pow(static_cast<double>(count), 1.0 / d))));
  for (int attempt = 0; attempt < 64; ++attempt) {
    bins.clear();
    std::vector<Index> key(static_cast<std::size_t>(d));
    for (Index i = 0; i < n; ++i) {
      double dist2 = 0.0;
      for (Index k = 0; k < d; ++k) {
        const double u = (states(i, k) - lo[k]) / span[k] * static_cast<double>(per_dim);
        const Index b = std::clamp<Index>(static_cast<Index>(std::floor(u)), 0, per_dim - 1);
        key[static_cast<std::size_t>(k)] = b;
        const double off = u - (static_cast<double>(b) + 0.5);
        dist2 += off * off;
      }
      auto it = bins.find(key);
      if (it == bins.end()) {
        bins.emplace(key, std::make_pair(dist2, i));
      } else if (dist2 < it->second.first) {
        it->second = {dist2, i};
      }
    }
    if (static_cast<Index>(bins.size()) >= count) break;
    per_dim = static_cast<Index>(std::ceil(static_cast<double>(per_dim) * 1.5)) + 1;
  }
  if (static_cast<Index>(bins.size()) < count) throw ConfigError("data have too few distinct points for centers");
  std::vector<Index> reps;
  reps.reserve(bins.size());
  for (const auto& [key, entry] : bins) reps.push_back(entry.second);
  RowMatrix out(count, d);
  const double step = static_cast<double>(reps.size()) / static_cast<double>(count);
  for (Index c = 0; c < count; ++c) {
    const auto idx = static_cast<std::size_t>(std::floor((static_cast<double>(c) + 0.5) * step));
    out.row(c) = states.row(reps[std::min(idx, reps.size() - 1)]);
  }
  return out;
}

/// Random Fourier features with frequencies ~ N(0, 1/l^2) and phases ~ U(0, 2 pi).
inline FeatureDictionary make_fourier(int dim, Index count, double lengthscale, std::uint64_t seed,
                                      bool include_constant) {
  if (!(lengthscale > 0.0)) throw ConfigError("Fourier lengthscale must be positive");
  if (dim < 1 || count < 1) throw ConfigError("Fourier dictionary needs positive sizes");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / lengthscale);
  std::uniform_real_distribution<double> uniform(0.0, 2.0 * std::numbers::pi);
  FeatureDictionary dict;
  dict.kind = FeatureKind::fourier;
  dict.dim = dim;
  dict.include_constant = include_constant;
  dict.lengthscale = lengthscale;
  dict.frequencies.resize(count, dim);
  dict.phases.resize(count);
  for (Index j = 0; j < count; ++j) {
    for (int k = 0; k < dim; ++k) dict.frequencies(j, k) = normal(rng);
    dict.phases[j] = uniform(rng);
  }
  return dict;
}

/**
 * `heads` independent networks with layer widths `widths` (widths.front() = input dim,
 * widths.back() = 1). Weights are uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
 */
inline FeatureDictionary make_mlp(const std::vector<int>& widths, Index heads, std::uint64_t seed,
                                  bool include_constant) {
  if (widths.size() < 2) throw ConfigError("MLP needs at least input and output widths");
  if (widths.back() != 1) throw ConfigError("MLP heads must have one output");
  for (int w : widths) {
    if (w < 1) throw ConfigError("MLP widths must be positive");
  }
  if (heads < 1) throw ConfigError("MLP needs at least one head");
  std::mt19937_64 rng(seed);
  FeatureDictionary dict;
  dict.kind = FeatureKind::mlp;
  dict.dim = widths.front();
  dict.include_constant = include_constant;
  for (Index h = 0; h < heads; ++h) {
    MlpHead head;
    for (std::size_t l = 1; l < widths.size(); ++l) {
      const double limit = std::sqrt(6.0 / static_cast<double>(widths[l - 1] + widths[l]));
      std::uniform_real_distribution<double> uniform(-limit, limit);
      DenseLayer layer{Matrix(widths[l], widths[l - 1]), Vector::Zero(widths[l])};
      for (Index r = 0; r < layer.weight.rows(); ++r) {
        for (Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = uniform(rng);
      }
      head.layers.push_back(std::move(layer));
    }
    dict.heads.push_back(std::move(head));
  }
  return dict;
}

// ---------------------------------------------------------------------------
// MLP forward pass with layer-wise Jacobians

/**
 * Cached forward pass of one head over a batch. For layer l (1-based) with output width w_l:
 * act[l] is n x w_l, jac[l][k] is n x w_l holding d act[l] / d x_k, and for tanh layers
 * pre_jac[l][k] = jac[l-1][k] W_l^T is kept for the backward pass. act[0] is the input batch.
 */
struct HeadTape {
  std::vector<Matrix> act;
  std::vector<std::vector<Matrix>> jac;
  std::vector<std::vector<Matrix>> pre_jac;
};

inline HeadTape mlp_head_forward(const MlpHead& head, const RowMatrix& x) {
  const Index n = x.rows();
  const Index d = x.cols();
  const std::size_t depth = head.layers.size();
  HeadTape tape;
  tape.act.resize(depth + 1);
  tape.jac.resize(depth + 1);
  tape.pre_jac.resize(depth + 1);
  tape.act[0] = x;
  tape.jac[0].resize(static_cast<std::size_t>(d));
  for (Index k = 0; k < d; ++k) {
    tape.jac[0][static_cast<std::size_t>(k)] = Matrix::Zero(n, d);
    tape.jac[0][static_cast<std::size_t>(k)].col(k).setOnes();
  }
  for (std::size_t l = 1; l <= depth; ++l) {
    const DenseLayer& layer = head.layers[l - 1];
    const bool hidden = l < depth;
    Matrix pre = tape.act[l - 1] * layer.weight.transpose();
    pre.rowwise() += layer.bias.transpose();
    tape.jac[l].resize(static_cast<std::size_t>(d));
    if (hidden) {
      tape.act[l] = pre.array().tanh().matrix();
      if (!tape.act[l].allFinite()) throw NumericError("non-finite activation in MLP layer " + std::to_string(l));
      const Matrix slope = (1.0 - tape.act[l].array().square()).matrix();
      tape.pre_jac[l].resize(static_cast<std::size_t>(d));
      for (Index k = 0; k < d; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        tape.pre_jac[l][kk] = tape.jac[l - 1][kk] * layer.weight.transpose();
        tape.jac[l][kk] = slope.cwiseProduct(tape.pre_jac[l][kk]);
      }
    } else {
      tape.act[l] = std::move(pre);
      if (!tape.act[l].allFinite()) throw NumericError("non-finite activation in MLP layer " + std::to_string(l));
      for (Index k = 0; k < d; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        tape.jac[l][kk] = tape.jac[l - 1][kk] * layer.weight.transpose();
      }
    }
  }
  return tape;
}

/// Parameter gradients of one head, same layout as DenseLayer.
struct HeadGradient {
  std::vector<DenseLayer> layers;
};

/**
 * Reverse pass through the value and Jacobian computation of one head.
 * `value_adj` (n) is dLoss/d z(x_i); `jac_adj` (n x d) is dLoss/d (dz/dx_k)(x_i).
 */
inline HeadGradient mlp_head_backward(const MlpHead& head, const HeadTape& tape, const Vector& value_adj,
                                      const Matrix& jac_adj) {
  const std::size_t depth = head.layers.size();
  const Index d = static_cast<Index>(tape.jac[0].size());
  HeadGradient grad;
  grad.layers.resize(depth);
  Matrix act_adj = value_adj;  // n x 1
  std::vector<Matrix> jadj(static_cast<std::size_t>(d));
  for (Index k = 0; k < d; ++k) jadj[static_cast<std::size_t>(k)] = jac_adj.col(k);
  for (std::size_t l = depth; l >= 1; --l) {
    const DenseLayer& layer = head.layers[l - 1];
    const bool hidden = l < depth;
    Matrix pre_adj;
    std::vector<Matrix> pj_adj(static_cast<std::size_t>(d));
    if (hidden) {
      const Matrix& a = tape.act[l];
      const Matrix slope = (1.0 - a.array().square()).matrix();
      pre_adj = act_adj.cwiseProduct(slope);
      Matrix slope_adj = Matrix::Zero(a.rows(), a.cols());
      for (Index k = 0; k < d; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        pj_adj[kk] = jadj[kk].cwiseProduct(slope);
        slope_adj += jadj[kk].cwiseProduct(tape.pre_jac[l][kk]);
      }
      pre_adj.array() += slope_adj.array() * (-2.0 * a.array() * slope.array());
    } else {
      pre_adj = std::move(act_adj);
      for (Index k = 0; k < d; ++k) pj_adj[static_cast<std::size_t>(k)] = jadj[static_cast<std::size_t>(k)];
    }
    DenseLayer& g = grad.layers[l - 1];
    g.weight = pre_adj.transpose() * tape.act[l - 1];
    for (Index k = 0; k < d; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      g.weight.noalias() += pj_adj[kk].transpose() * tape.jac[l - 1][kk];
    }
    g.bias = pre_adj.colwise().sum().transpose();
    if (l > 1) {
      act_adj = pre_adj * layer.weight;
      for (Index k = 0; k < d; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        jadj[kk] = pj_adj[kk] * layer.weight;
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace detail {

inline void check_input(const FeatureDictionary& dict, const RowMatrix& x) {
  if (x.cols() != dict.dim) {
    throw ConfigError("input has " + std::to_string(x.cols()) + " columns, dictionary expects " +
                      std::to_string(dict.dim));
  }
}

}  // namespace detail

/// Forward pass and Jacobians of an MLP dictionary.
inline FeatureEval mlp_forward_jac(const FeatureDictionary& dict, const RowMatrix& x) {
  if (dict.kind != FeatureKind::mlp) throw ConfigError("mlp_forward_jac requires an MLP dictionary");
  detail::check_input(dict, x);
  const Index n = x.rows();
  const Index d = dict.dim;
  const Index m = dict.size();
  FeatureEval out{RowMatrix::Zero(n, m), RowMatrix::Zero(n, m * d)};
  const Index off = dict.offset();
  if (off == 1) out.values.col(0).setOnes();
  for (std::size_t h = 0; h < dict.heads.size(); ++h) {
    const HeadTape tape = mlp_head_forward(dict.heads[h], x);
    const Index j = off + static_cast<Index>(h);
    out.values.col(j) = tape.act.back().col(0);
    for (Index k = 0; k < d; ++k) out.jacobians.col(j * d + k) = tape.jac.back()[static_cast<std::size_t>(k)].col(0);
  }
  return out;
}

inline FeatureEval evaluate(const FeatureDictionary& dict, const RowMatrix& x) {
  dict.validate();
  detail::check_input(dict, x);
  if (dict.kind == FeatureKind::mlp) return mlp_forward_jac(dict, x);
  const Index n = x.rows();
  const Index d = dict.dim;
  const Index m = dict.size();
  const Index off = dict.offset();
  FeatureEval out{RowMatrix::Zero(n, m), RowMatrix::Zero(n, m * d)};
  if (off == 1) out.values.col(0).setOnes();
  if (dict.kind == FeatureKind::rbf) {
    const double inv_l2 = 1.0 / (dict.lengthscale * dict.lengthscale);
    for (Index i = 0; i < n; ++i) {
      for (Index c = 0; c < dict.centers.rows(); ++c) {
        const Index j = off + c;
        double r2 = 0.0;
        for (Index k = 0; k < d; ++k) {
          const double diff = x(i, k) - dict.centers(c, k);
          r2 += diff * diff;
        }
        const double v = std::exp(-0.5 * r2 * inv_l2);
        out.values(i, j) = v;
        for (Index k = 0; k < d; ++k) out.jacobians(i, j * d + k) = -v * (x(i, k) - dict.centers(c, k)) * inv_l2;
      }
    }
  } else {
    const double amp = std::numbers::sqrt2;
    for (Index i = 0; i < n; ++i) {
      for (Index c = 0; c < dict.frequencies.rows(); ++c) {
        const Index j = off + c;
        const double arg = x.row(i).dot(dict.frequencies.row(c)) + dict.phases[c];
        out.values(i, j) = amp * std::cos(arg);
        const double s = -amp * std::sin(arg);
        for (Index k = 0; k < d; ++k) out.jacobians(i, j * d + k) = s * dict.frequencies(c, k);
      }
    }
  }
  return out;
}

/// Values only, for probing eigenfunctions on large grids.
inline RowMatrix evaluate_values(const FeatureDictionary& dict, const RowMatrix& x) {
  dict.validate();
  detail::check_input(dict, x);
  const Index n = x.rows();
  const Index m = dict.size();
  const Index off = dict.offset();
  RowMatrix values = RowMatrix::Zero(n, m);
  if (off == 1) values.col(0).setOnes();
  switch (dict.kind) {
    case FeatureKind::rbf: {
      const double inv_l2 = 1.0 / (dict.lengthscale * dict.lengthscale);
      for (Index i = 0; i < n; ++i) {
        for (Index c = 0; c < dict.centers.rows(); ++c) {
          values(i, off + c) = std::exp(-0.5 * (x.row(i) - dict.centers.row(c)).squaredNorm() * inv_l2);
        }
      }
      break;
    }
    case FeatureKind::fourier:
      for (Index i = 0; i < n; ++i) {
        for (Index c = 0; c < dict.frequencies.rows(); ++c) {
          values(i, off + c) = std::numbers::sqrt2 * std::cos(x.row(i).dot(dict.frequencies.row(c)) + dict.phases[c]);
        }
      }
      break;
    case FeatureKind::mlp:
      for (std::size_t h = 0; h < dict.heads.size(); ++h) {
        Matrix a = x;
        const auto& layers = dict.heads[h].layers;
        for (std::size_t l = 0; l < layers.size(); ++l) {
          Matrix pre = a * layers[l].weight.transpose();
          pre.rowwise() += layers[l].bias.transpose();
          a = (l + 1 < layers.size()) ? Matrix(pre.array().tanh().matrix()) : pre;
        }
        values.col(off + static_cast<Index>(h)) = a.col(0);
      }
      break;
  }
  return values;
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline nlohmann::json rows_to_json(const RowMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(m.row(r).data(), m.row(r).data() + m.cols());
    rows.push_back(row);
  }
  return rows;
}

inline RowMatrix rows_from_json(const nlohmann::json& j, Index cols) {
  RowMatrix m(static_cast<Index>(j.size()), cols);
  Index r = 0;
  for (const auto& row : j) {
    const auto v = row.get<std::vector<double>>();
    if (static_cast<Index>(v.size()) != cols) throw ConfigError("matrix row has wrong length");
    for (Index c = 0; c < cols; ++c) m(r, c) = v[static_cast<std::size_t>(c)];
    ++r;
  }
  return m;
}

}  // namespace detail

inline nlohmann::json to_json(const FeatureDictionary& dict) {
  nlohmann::json j;
  j["kind"] = std::string(to_string(dict.kind));
  j["dim"] = dict.dim;
  j["include_constant"] = dict.include_constant;
  switch (dict.kind) {
    case FeatureKind::rbf:
      j["lengthscale"] = dict.lengthscale;
      j["centers"] = detail::rows_to_json(dict.centers);
      break;
    case FeatureKind::fourier:
      j["lengthscale"] = dict.lengthscale;
      j["frequencies"] = detail::rows_to_json(dict.frequencies);
      j["phases"] = std::vector<double>(dict.phases.data(), dict.phases.data() + dict.phases.size());
      break;
    case FeatureKind::mlp: {
      nlohmann::json heads = nlohmann::json::array();
      for (const auto& head : dict.heads) {
        nlohmann::json layers = nlohmann::json::array();
        for (const auto& layer : head.layers) {
          const RowMatrix w = layer.weight;
          layers.push_back({{"weight", detail::rows_to_json(w)},
                            {"bias", std::vector<double>(layer.bias.data(), layer.bias.data() + layer.bias.size())}});
        }
        heads.push_back({{"layers", layers}});
      }
      j["heads"] = heads;
      break;
    }
  }
  return j;
}

inline FeatureDictionary dictionary_from_json(const nlohmann::json& j) {
  FeatureDictionary dict;
  dict.kind = feature_kind_from_string(j.at("kind").get<std::string>());
  dict.dim = j.at("dim").get<int>();
  dict.include_constant = j.value("include_constant", false);
  switch (dict.kind) {
    case FeatureKind::rbf:
      dict.lengthscale = j.at("lengthscale").get<double>();
      dict.centers = detail::rows_from_json(j.at("centers"), dict.dim);
      break;
    case FeatureKind::fourier: {
      dict.lengthscale = j.value("lengthscale", 1.0);
      dict.frequencies = detail::rows_from_json(j.at("frequencies"), dict.dim);
      const auto ph = j.at("phases").get<std::vector<double>>();
      dict.phases = Eigen::Map<const Vector>(ph.data(), static_cast<Index>(ph.size()));
      break;
    }
    case FeatureKind::mlp:
      for (const auto& hj : j.at("heads")) {
        MlpHead head;
        for (const auto& lj : hj.at("layers")) {
          const auto b = lj.at("bias").get<std::vector<double>>();
          const auto& wj = lj.at("weight");
          const Index cols = wj.empty() ? 0 : static_cast<Index>(wj.front().size());
          DenseLayer layer{Matrix(detail::rows_from_json(wj, cols)),
                           Eigen::Map<const Vector>(b.data(), static_cast<Index>(b.size()))};
          head.layers.push_back(std::move(layer));
        }
        dict.heads.push_back(std::move(head));
      }
      break;
  }
  dict.validate();
  return dict;
}

}  // namespace genspec
