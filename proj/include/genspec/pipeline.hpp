#pragma once

// Experiment configuration and the simulate -> train -> fit -> compare stages.
//
// Every stage reads its inputs from and writes its outputs to the output directory, so running
// the stages one by one produces the same files as a single pipeline run.

#include <genspec/baselines.hpp>
#include <genspec/data.hpp>
#include <genspec/deeploss.hpp>
#include <genspec/dynamics.hpp>
#include <genspec/errors.hpp>
#include <genspec/features.hpp>
#include <genspec/genlearn.hpp>
#include <genspec/io.hpp>
#include <genspec/oracle.hpp>
#include <genspec/potentials.hpp>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#ifndef GENSPEC_VERSION
#define GENSPEC_VERSION "0.0.0"
#endif

namespace genspec {

namespace fs = std::filesystem;
using nlohmann::json;

struct InputSection {
  std::string path;
  /// "csv" (trajectory CSV) or "colvar" (whitespace table with named columns).
  std::string format = "csv";
  std::vector<std::string> columns;
  std::string time_column = "time";
  std::string bias_column;
  double beta = 1.0;
  double dt = 1e-3;
  /// Recompute bias values from the configured bias instead of using the file's column.
  bool reevaluate_bias = false;
};

struct DatasetSection {
  bool weighted = true;
  bool include_buildup = false;
  double validation_fraction = 0.2;
};

struct DictionarySection {
  std::optional<std::string> load;
  FeatureKind kind = FeatureKind::rbf;
  Index count = 100;
  double lengthscale = 0.1;
  bool include_constant = false;
  std::vector<int> widths;
  Index heads = 1;
  std::uint64_t seed = 0;
};

struct FitSection {
  double eta = 0.1;
  double gamma = 1e-5;
  Index n_eigenpairs = 4;
  EnergyForm form = EnergyForm::reweighted;
};

struct TrainingSection {
  bool enabled = false;
  /// Negative means 0.01 * m.
  double alpha = -1.0;
  /// Non-positive means fit.eta.
  double eta = 0.0;
  TrainConfig config;
};

struct BaselineSection {
  bool enabled = false;
  std::vector<double> lags;
  double gamma = 1e-5;
};

struct OracleSection {
  bool enabled = false;
  Vector lo;
  Vector hi;
  std::vector<Index> n_points;
  Index k = 4;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  PotentialSpec potential;
  BiasState bias;
  std::optional<SimulationParams> simulation;
  std::optional<InputSection> input;
  DatasetSection dataset;
  DictionarySection dictionary;
  FitSection fit;
  TrainingSection training;
  BaselineSection baseline;
  OracleSection oracle;
  std::string output_dir = "results";

  double beta() const { return simulation ? simulation->beta : input->beta; }
};

namespace detail {

inline Vector vector_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline EnergyForm energy_form_from_string(const std::string& s) {
  if (s == "reweighted") return EnergyForm::reweighted;
  if (s == "product_rule") return EnergyForm::product_rule;
  throw ConfigError("unknown energy form: " + s);
}

inline std::string to_string(EnergyForm f) { return f == EnergyForm::reweighted ? "reweighted" : "product_rule"; }

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

}  // namespace detail

/**
 * Parses and validates a config document. `seed_override` replaces the top-level seed, from which
 * every stage seed without an explicit value is derived; `output_override` replaces the output
 * directory. Relative paths inside the config resolve against `base_dir`.
 */
inline ExperimentConfig parse_config(const json& j, std::optional<std::uint64_t> seed_override = std::nullopt,
                                     std::optional<std::string> output_override = std::nullopt,
                                     const fs::path& base_dir = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig cfg;
  try {
    cfg.name = detail::get_or<std::string>(j, "name", cfg.name);
    cfg.seed = seed_override ? *seed_override : detail::get_or<std::uint64_t>(j, "seed", 0);
    if (!j.contains("potential")) throw ConfigError("config needs a potential section");
    cfg.potential = potential_from_json(j.at("potential"));
    const int d = cfg.potential.dim;
    cfg.bias = j.contains("bias") && !j.at("bias").is_null() ? bias_from_json(j.at("bias")) : BiasState::none(d);
    if (cfg.bias.dim != d) throw ConfigError("bias and potential dimensions differ");

    const bool has_sim = j.contains("simulation") && !j.at("simulation").is_null();
    const bool has_input = j.contains("input") && !j.at("input").is_null();
    if (has_sim == has_input) throw ConfigError("config needs exactly one of 'simulation' or 'input'");
    if (has_sim) {
      const auto& s = j.at("simulation");
      SimulationParams p;
      p.beta = detail::get_or(s, "beta", p.beta);
      p.dt = detail::get_or(s, "dt", p.dt);
      p.n_steps = detail::get_or(s, "n_steps", p.n_steps);
      p.save_stride = detail::get_or(s, "save_stride", p.save_stride);
      p.x0 = s.contains("x0") ? detail::vector_from_json(s.at("x0")) : Vector(Vector::Zero(d));
      p.seed = detail::get_or<std::uint64_t>(s, "seed", cfg.seed);
      p.domain_radius = detail::get_or(s, "domain_radius", p.domain_radius);
      if (p.x0.size() != d) throw ConfigError("simulation.x0 has wrong dimension");
      p.validate();
      cfg.simulation = p;
    } else {
      const auto& s = j.at("input");
      InputSection in;
      in.path = detail::get_or<std::string>(s, "path", "");
      if (in.path.empty()) throw ConfigError("input.path is required");
      if (fs::path(in.path).is_relative() && !base_dir.empty()) in.path = (base_dir / in.path).string();
      if (!fs::exists(in.path)) throw ConfigError("input file does not exist: " + in.path);
      in.format = detail::get_or(s, "format", in.format);
      if (in.format != "csv" && in.format != "colvar") throw ConfigError("input.format must be csv or colvar");
      in.columns = detail::get_or(s, "columns", in.columns);
      in.time_column = detail::get_or(s, "time_column", in.time_column);
      in.bias_column = detail::get_or(s, "bias_column", in.bias_column);
      in.beta = detail::get_or(s, "beta", in.beta);
      in.dt = detail::get_or(s, "dt", in.dt);
      in.reevaluate_bias = detail::get_or(s, "reevaluate_bias", in.reevaluate_bias);
      if (!(in.beta > 0.0) || !(in.dt > 0.0)) throw ConfigError("input beta and dt must be positive");
      cfg.input = in;
    }

    if (j.contains("dataset")) {
      const auto& s = j.at("dataset");
      cfg.dataset.weighted = detail::get_or(s, "weighted", cfg.dataset.weighted);
      cfg.dataset.include_buildup = detail::get_or(s, "include_buildup", cfg.dataset.include_buildup);
      cfg.dataset.validation_fraction = detail::get_or(s, "validation_fraction", cfg.dataset.validation_fraction);
      if (!(cfg.dataset.validation_fraction > 0.0 && cfg.dataset.validation_fraction < 1.0)) {
        throw ConfigError("dataset.validation_fraction must lie in (0, 1)");
      }
    }

    if (!j.contains("dictionary")) throw ConfigError("config needs a dictionary section");
    {
      const auto& s = j.at("dictionary");
      const bool has_build = s.contains("build") && !s.at("build").is_null();
      const bool has_load = s.contains("load") && !s.at("load").is_null();
      if (has_build == has_load) throw ConfigError("dictionary needs exactly one of 'build' or 'load'");
      auto& dc = cfg.dictionary;
      dc.seed = cfg.seed + 1;
      if (has_load) {
        std::string path = s.at("load").get<std::string>();
        if (fs::path(path).is_relative() && !base_dir.empty()) path = (base_dir / path).string();
        if (!fs::exists(path)) throw ConfigError("dictionary file does not exist: " + path);
        dc.load = path;
      } else {
        const auto& b = s.at("build");
        dc.kind = feature_kind_from_string(detail::get_or<std::string>(b, "kind", "rbf"));
        dc.count = detail::get_or(b, "count", dc.count);
        dc.lengthscale = detail::get_or(b, "lengthscale", dc.lengthscale);
        dc.include_constant = detail::get_or(b, "include_constant", dc.include_constant);
        dc.widths = detail::get_or(b, "widths", dc.widths);
        dc.heads = detail::get_or(b, "heads", dc.heads);
        dc.seed = detail::get_or<std::uint64_t>(b, "seed", dc.seed);
        if (dc.kind != FeatureKind::mlp && dc.count < 1) throw ConfigError("dictionary.build.count must be >= 1");
        if (dc.kind != FeatureKind::mlp && !(dc.lengthscale > 0.0)) throw ConfigError("lengthscale must be positive");
        if (dc.kind == FeatureKind::mlp) {
          if (dc.widths.size() < 2 || dc.widths.front() != d || dc.widths.back() != 1) {
            throw ConfigError("MLP widths must start at the state dimension and end at 1");
          }
          if (dc.heads < 1) throw ConfigError("MLP needs at least one head");
        }
      }
    }

    if (j.contains("fit")) {
      const auto& s = j.at("fit");
      cfg.fit.eta = detail::get_or(s, "eta", cfg.fit.eta);
      cfg.fit.gamma = detail::get_or(s, "gamma", cfg.fit.gamma);
      cfg.fit.n_eigenpairs = detail::get_or(s, "n_eigenpairs", cfg.fit.n_eigenpairs);
      cfg.fit.form = detail::energy_form_from_string(detail::get_or<std::string>(s, "energy_form", "reweighted"));
    }
    if (!(cfg.fit.eta > 0.0)) throw ConfigError("fit.eta must be positive");
    if (!(cfg.fit.gamma >= 0.0)) throw ConfigError("fit.gamma must be >= 0");
    if (cfg.fit.n_eigenpairs < 1) throw ConfigError("fit.n_eigenpairs must be >= 1");

    if (j.contains("training") && !j.at("training").is_null()) {
      const auto& s = j.at("training");
      auto& t = cfg.training;
      t.enabled = detail::get_or(s, "enabled", true);
      t.alpha = detail::get_or(s, "alpha", t.alpha);
      t.eta = detail::get_or(s, "eta", t.eta);
      auto& c = t.config;
      c.learning_rate = detail::get_or(s, "learning_rate", c.learning_rate);
      c.batch_size = detail::get_or(s, "batch_size", c.batch_size);
      c.max_steps = detail::get_or(s, "max_steps", c.max_steps);
      c.seed = detail::get_or<std::uint64_t>(s, "seed", cfg.seed + 2);
      c.grad_check_every = detail::get_or(s, "grad_check_every", c.grad_check_every);
      c.patience = detail::get_or(s, "patience", c.patience);
      c.eval_every = detail::get_or(s, "eval_every", c.eval_every);
      c.max_validation_samples = detail::get_or(s, "max_validation_samples", c.max_validation_samples);
      c.form = cfg.fit.form;
      c.validate();
      if (t.enabled && cfg.dictionary.load) throw ConfigError("training needs a built MLP dictionary, not a loaded one");
      if (t.enabled && cfg.dictionary.kind != FeatureKind::mlp) throw ConfigError("training requires an MLP dictionary");
    } else {
      cfg.training.config.seed = cfg.seed + 2;
    }

    if (j.contains("baseline") && !j.at("baseline").is_null()) {
      const auto& s = j.at("baseline");
      cfg.baseline.enabled = detail::get_or(s, "enabled", true);
      cfg.baseline.lags = detail::get_or(s, "lags", cfg.baseline.lags);
      cfg.baseline.gamma = detail::get_or(s, "gamma", cfg.baseline.gamma);
      if (cfg.baseline.enabled && cfg.baseline.lags.empty()) throw ConfigError("baseline.lags must not be empty");
      for (double t : cfg.baseline.lags) {
        if (!(t > 0.0)) throw ConfigError("baseline lags must be positive");
      }
    }

    if (j.contains("oracle") && !j.at("oracle").is_null()) {
      const auto& s = j.at("oracle");
      auto& o = cfg.oracle;
      o.enabled = detail::get_or(s, "enabled", true);
      const Box box = cfg.potential.domain();
      o.lo = s.contains("lo") ? detail::vector_from_json(s.at("lo")) : box.lo;
      o.hi = s.contains("hi") ? detail::vector_from_json(s.at("hi")) : box.hi;
      o.n_points = detail::get_or(s, "n_points", std::vector<Index>(static_cast<std::size_t>(d), d == 1 ? 512 : 160));
      o.k = detail::get_or(s, "k", o.k);
      if (o.enabled) {
        if (d > 2) throw ConfigError("the grid oracle supports d = 1 or 2");
        GridSpec g{o.lo, o.hi, o.n_points, cfg.beta()};
        g.validate();
      }
    }

    cfg.output_dir = output_override ? *output_override
                                     : detail::get_or<std::string>(j.value("outputs", json::object()), "directory",
                                                                  cfg.output_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  return cfg;
}

/// The fully resolved config (defaults filled in, derived seeds explicit).
inline json resolved_config(const ExperimentConfig& cfg) {
  json j;
  j["name"] = cfg.name;
  j["seed"] = cfg.seed;
  j["potential"] = to_json(cfg.potential);
  j["bias"] = to_json(cfg.bias);
  if (cfg.simulation) {
    const auto& p = *cfg.simulation;
    j["simulation"] = {{"beta", p.beta},       {"dt", p.dt},     {"n_steps", p.n_steps},
                       {"save_stride", p.save_stride}, {"x0", detail::to_std(p.x0)}, {"seed", p.seed},
                       {"domain_radius", p.domain_radius}};
  } else {
    const auto& in = *cfg.input;
    j["input"] = {{"path", in.path},       {"format", in.format}, {"columns", in.columns},
                  {"time_column", in.time_column}, {"bias_column", in.bias_column}, {"beta", in.beta},
                  {"dt", in.dt},           {"reevaluate_bias", in.reevaluate_bias}};
  }
  j["dataset"] = {{"weighted", cfg.dataset.weighted},
                  {"include_buildup", cfg.dataset.include_buildup},
                  {"validation_fraction", cfg.dataset.validation_fraction}};
  const auto& dc = cfg.dictionary;
  if (dc.load) {
    j["dictionary"] = {{"load", *dc.load}};
  } else {
    j["dictionary"]["build"] = {{"kind", std::string(to_string(dc.kind))},
                                {"count", dc.count},
                                {"lengthscale", dc.lengthscale},
                                {"include_constant", dc.include_constant},
                                {"widths", dc.widths},
                                {"heads", dc.heads},
                                {"seed", dc.seed}};
  }
  j["fit"] = {{"eta", cfg.fit.eta},
              {"gamma", cfg.fit.gamma},
              {"n_eigenpairs", cfg.fit.n_eigenpairs},
              {"energy_form", detail::to_string(cfg.fit.form)}};
  const auto& t = cfg.training;
  j["training"] = {{"enabled", t.enabled},
                   {"alpha", t.alpha},
                   {"eta", t.eta},
                   {"learning_rate", t.config.learning_rate},
                   {"batch_size", t.config.batch_size},
                   {"max_steps", t.config.max_steps},
                   {"seed", t.config.seed},
                   {"grad_check_every", t.config.grad_check_every},
                   {"patience", t.config.patience},
                   {"eval_every", t.config.eval_every},
                   {"max_validation_samples", t.config.max_validation_samples}};
  j["baseline"] = {{"enabled", cfg.baseline.enabled}, {"lags", cfg.baseline.lags}, {"gamma", cfg.baseline.gamma}};
  j["oracle"] = {{"enabled", cfg.oracle.enabled},
                 {"lo", detail::to_std(cfg.oracle.lo)},
                 {"hi", detail::to_std(cfg.oracle.hi)},
                 {"n_points", cfg.oracle.n_points},
                 {"k", cfg.oracle.k}};
  j["outputs"] = {{"directory", cfg.output_dir}};
  return j;
}

inline json version_info() {
  return {{"genspec", GENSPEC_VERSION},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
}

/// A module error annotated with the stage that raised it and the matching exit code.
class StageError : public Error {
 public:
  StageError(const std::string& stage, int code, const std::string& what)
      : Error("stage " + stage + ": " + what), stage_(stage), code_(code) {}
  const std::string& stage() const noexcept { return stage_; }
  int exit_code() const noexcept { return code_; }

 private:
  std::string stage_;
  int code_;
};

/// 2 configuration / input problems, 3 numerical failure, 4 divergence, 1 anything else.
inline int exit_code_for(const std::exception& e) {
  if (const auto* s = dynamic_cast<const StageError*>(&e)) return s->exit_code();
  if (dynamic_cast<const DivergenceError*>(&e)) return 4;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const AlignmentError*>(&e)) return 3;
  if (dynamic_cast<const Error*>(&e)) return 2;
  return 1;
}

// ---------------------------------------------------------------------------
// Workspace files

struct Workspace {
  fs::path dir;

  fs::path trajectory() const { return dir / "trajectory.csv"; }
  fs::path bias() const { return dir / "bias.json"; }
  fs::path dictionary() const { return dir / "dictionary.json"; }
  fs::path model() const { return dir / "model.json"; }
  fs::path history() const { return dir / "history.csv"; }
  fs::path eigenpairs() const { return dir / "eigenpairs.json"; }
  fs::path oracle_json() const { return dir / "oracle.json"; }
  fs::path oracle_csv() const { return dir / "oracle.csv"; }
  fs::path eigenfunctions() const { return dir / "eigenfunctions.csv"; }
  fs::path comparison() const { return dir / "comparison.csv"; }
  fs::path results() const { return dir / "results.json"; }
};

namespace detail {

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Merges one stage section into results.json, refreshing the config, versions and timestamp.
inline void record_stage(const ExperimentConfig& cfg, const Workspace& ws, const std::string& stage, const json& body) {
  json results = fs::exists(ws.results()) ? io::read_json(ws.results()) : json::object();
  results["config"] = resolved_config(cfg);
  results["versions"] = version_info();
  results["created_at"] = utc_timestamp();
  results["stages"][stage] = body;
  if (results.contains("error") && results["error"].value("stage", "") == stage) results.erase("error");
  io::write_json(ws.results(), results);
}

inline void record_error(const ExperimentConfig& cfg, const Workspace& ws, const std::string& stage,
                         const std::string& message) {
  try {
    json results = fs::exists(ws.results()) ? io::read_json(ws.results()) : json::object();
    results["config"] = resolved_config(cfg);
    results["versions"] = version_info();
    results["created_at"] = utc_timestamp();
    results["error"] = {{"stage", stage}, {"message", message}};
    io::write_json(ws.results(), results);
  } catch (...) {
    // The original error is more useful than a failure to report it.
  }
}

template <class Fn>
auto run_stage(const ExperimentConfig& cfg, const Workspace& ws, const std::string& stage, Fn&& fn) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    record_error(cfg, ws, stage, e.what());
    throw StageError(stage, exit_code_for(e), e.what());
  }
}

inline BiasState load_bias(const ExperimentConfig& cfg, const Workspace& ws) {
  return fs::exists(ws.bias()) ? bias_from_json(io::read_json(ws.bias())) : cfg.bias;
}

}  // namespace detail

/// Trajectory and frozen bias, restricted to the production segment unless configured otherwise.
struct LoadedData {
  Trajectory trajectory;
  BiasState bias;
  WeightedDataset dataset;
};

inline LoadedData load_data(const ExperimentConfig& cfg, const Workspace& ws) {
  if (!fs::exists(ws.trajectory())) throw ConfigError("no trajectory in " + ws.dir.string() + "; run simulate first");
  LoadedData out;
  out.trajectory = io::read_trajectory_csv(ws.trajectory());
  out.bias = detail::load_bias(cfg, ws);
  if (out.bias.kind == BiasKind::metadynamics) {
    out.trajectory = reevaluate_bias(std::move(out.trajectory), out.bias);
    if (!cfg.dataset.include_buildup) out.trajectory = drop_buildup(out.trajectory, out.bias.freeze_step);
  }
  if (out.trajectory.size() < 2) throw EmptyDatasetError("trajectory has fewer than two usable states");
  out.dataset = weighted_dataset(out.trajectory.states, out.trajectory.bias_values, cfg.beta());
  if (!cfg.dataset.weighted) {
    out.dataset.log_weights.setZero();
    out.dataset.shift = 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stages

inline json stage_simulate(const ExperimentConfig& cfg) {
  const Workspace ws{cfg.output_dir};
  return detail::run_stage(cfg, ws, "simulate", [&] {
    fs::create_directories(ws.dir);
    BiasState bias = cfg.bias;
    Trajectory traj;
    json body;
    if (cfg.simulation) {
      traj = simulate(cfg.potential, bias, *cfg.simulation);
      body["source"] = "simulation";
    } else {
      const auto& in = *cfg.input;
      traj = in.format == "csv" ? io::read_trajectory_csv(in.path)
                                : io::read_colvar(in.path, in.columns, in.time_column, in.bias_column, in.beta, in.dt);
      if (traj.dim() != cfg.potential.dim) throw ConfigError("input trajectory dimension differs from the potential");
      traj.meta.beta = in.beta;
      if (in.reevaluate_bias) traj = reevaluate_bias(std::move(traj), bias);
      body["source"] = in.path;
    }
    io::write_trajectory_csv(ws.trajectory(), traj);
    io::write_json(ws.bias(), to_json(bias));
    body["states"] = traj.size();
    body["dim"] = traj.dim();
    body["bias_centers"] = bias.num_centers();
    body["final_state"] = detail::to_std(traj.states.row(traj.size() - 1).transpose());
    detail::record_stage(cfg, ws, "simulate", body);
    return body;
  });
}

inline double resolved_alpha(const ExperimentConfig& cfg, Index m) {
  return cfg.training.alpha >= 0.0 ? cfg.training.alpha : 0.01 * static_cast<double>(m);
}

inline json stage_train(const ExperimentConfig& cfg) {
  const Workspace ws{cfg.output_dir};
  return detail::run_stage(cfg, ws, "train", [&] {
    if (!cfg.training.enabled) throw ConfigError("training is not enabled in the config");
    const LoadedData data = load_data(cfg, ws);
    const auto& dc = cfg.dictionary;
    FeatureDictionary dict = make_mlp(dc.widths, dc.heads, dc.seed, dc.include_constant);
    const double eta = cfg.training.eta > 0.0 ? cfg.training.eta : cfg.fit.eta;
    const double alpha = resolved_alpha(cfg, dict.size());
    SpectralModel model = make_spectral_model(std::move(dict), eta, alpha);
    auto [tr, va] = split(data.dataset, 1.0 - cfg.dataset.validation_fraction, cfg.training.config.seed);
    RowMatrix gtr;
    RowMatrix gva;
    if (cfg.fit.form == EnergyForm::product_rule) {
      gtr = bias_gradients(data.bias, tr.states);
      gva = bias_gradients(data.bias, va.states);
    }
    TrainResult res;
    try {
      res = train(tr, va, model, cfg.training.config, gtr, gva);
    } catch (const TrainingDiverged& e) {
      io::write_json(ws.model(), to_json(e.last_finite));
      io::write_history_csv(ws.history(), e.history);
      throw;
    }
    io::write_json(ws.model(), to_json(res.model));
    io::write_json(ws.dictionary(), to_json(res.model.dict));
    io::write_history_csv(ws.history(), res.history);
    json body;
    body["steps_run"] = res.history.step.size();
    body["best_step"] = res.history.best_step;
    body["best_validation_loss"] = res.history.best_validation;
    body["final_loss"] = res.history.loss.empty() ? 0.0 : res.history.loss.back();
    body["model_lambdas"] = detail::to_std(res.model.lambdas());
    body["alpha"] = res.model.alpha;
    body["eta"] = res.model.eta;
    body["early_stopped"] = res.history.early_stopped;
    detail::record_stage(cfg, ws, "train", body);
    return body;
  });
}

/// Dictionary used by the fit: a loaded file, the trained one in the workspace, or a fresh build.
inline FeatureDictionary fit_dictionary(const ExperimentConfig& cfg, const Workspace& ws, const WeightedDataset& ds) {
  const auto& dc = cfg.dictionary;
  if (dc.load) return dictionary_from_json(io::read_json(*dc.load));
  if (cfg.training.enabled) {
    if (!fs::exists(ws.model())) throw ConfigError("no trained model in " + ws.dir.string() + "; run train first");
    return spectral_model_from_json(io::read_json(ws.model())).dict;
  }
  switch (dc.kind) {
    case FeatureKind::rbf: return make_rbf(stratified_centers(ds.states, dc.count), dc.lengthscale, dc.include_constant);
    case FeatureKind::fourier:
      return make_fourier(static_cast<int>(ds.dim()), dc.count, dc.lengthscale, dc.seed, dc.include_constant);
    case FeatureKind::mlp: return make_mlp(dc.widths, dc.heads, dc.seed, dc.include_constant);
  }
  throw ConfigError("unknown dictionary kind");
}

inline json stage_fit(const ExperimentConfig& cfg) {
  const Workspace ws{cfg.output_dir};
  return detail::run_stage(cfg, ws, "fit", [&] {
    const LoadedData data = load_data(cfg, ws);
    const FeatureDictionary dict = fit_dictionary(cfg, ws, data.dataset);
    io::write_json(ws.dictionary(), to_json(dict));
    const auto cov = assemble_covariances(dict, data.dataset, cfg.fit.eta, cfg.dataset.weighted, &data.bias,
                                          cfg.fit.form);
    const EigenpairSet eig = cfg.fit.gamma > 0.0 ? ridge_eigensolve(cov, cfg.fit.gamma) : ridge_eigensolve_pinv(cov);
    io::write_json(ws.eigenpairs(), to_json(eig));
    json body;
    const auto k = static_cast<std::size_t>(std::min<Index>(cfg.fit.n_eigenpairs, eig.size()));
    body["lambdas"] = std::vector<double>(eig.lambdas.begin(), eig.lambdas.begin() + static_cast<std::ptrdiff_t>(k));
    body["nus"] = std::vector<double>(eig.nus.begin(), eig.nus.begin() + static_cast<std::ptrdiff_t>(k));
    body["dropped"] = eig.dropped;
    body["dictionary_size"] = dict.size();
    body["samples"] = cov.n;
    body["mean_weight"] = cov.mean_weight;
    if (cfg.fit.gamma > 0.0) {
      // Ridge biases the spectrum by O(gamma); the unregularised pseudo-inverse solve is reported alongside.
      try {
        const EigenpairSet pinv = ridge_eigensolve_pinv(cov);
        const auto kp = static_cast<std::ptrdiff_t>(std::min<Index>(cfg.fit.n_eigenpairs, pinv.size()));
        body["lambdas_gamma0"] = std::vector<double>(pinv.lambdas.begin(), pinv.lambdas.begin() + kp);
      } catch (const NumericError& e) {
        body["lambdas_gamma0"] = nullptr;
        body["gamma0_error"] = e.what();
      }
    }
    detail::record_stage(cfg, ws, "fit", body);
    return body;
  });
}

inline OracleResult run_oracle(const ExperimentConfig& cfg) {
  GridSpec g{cfg.oracle.lo, cfg.oracle.hi, cfg.oracle.n_points, cfg.beta()};
  return grid_generator_eig(cfg.potential, g, cfg.oracle.k);
}

namespace detail {

inline json write_oracle(const ExperimentConfig& cfg, const Workspace& ws, const OracleResult& res) {
  fs::create_directories(ws.dir);
  const Index d = res.points.cols();
  const Index k = static_cast<Index>(res.lambdas.size());
  std::vector<std::string> header;
  for (Index c = 0; c < d; ++c) header.push_back("x" + std::to_string(c));
  header.push_back("density");
  for (Index i = 0; i < k; ++i) header.push_back("f" + std::to_string(i));
  Matrix table(res.points.rows(), d + 1 + k);
  table.leftCols(d) = res.points;
  table.col(d) = res.density;
  table.rightCols(k) = res.eigenfunctions;
  io::write_csv(ws.oracle_csv(), header, table);
  json body;
  body["lambdas"] = res.lambdas;
  body["grid"] = {{"lo", to_std(cfg.oracle.lo)}, {"hi", to_std(cfg.oracle.hi)}, {"n_points", cfg.oracle.n_points}};
  io::write_json(ws.oracle_json(), body);
  record_stage(cfg, ws, "oracle", body);
  return body;
}

}  // namespace detail

inline json stage_oracle(const ExperimentConfig& cfg) {
  const Workspace ws{cfg.output_dir};
  return detail::run_stage(cfg, ws, "oracle", [&] {
    if (!cfg.oracle.enabled) throw ConfigError("oracle is not enabled in the config");
    return detail::write_oracle(cfg, ws, run_oracle(cfg));
  });
}

/// Density-weighted fraction of grid cells where f and g have the same sign, maximised over a global flip.
inline double sign_agreement(const Vector& f, const Vector& g, const Vector& density) {
  double same = 0.0;
  for (Index i = 0; i < f.size(); ++i) {
    if ((f[i] > 0.0) == (g[i] > 0.0)) same += density[i];
  }
  const double total = density.sum();
  return std::max(same, total - same) / total;
}

inline json stage_compare(const ExperimentConfig& cfg) {
  const Workspace ws{cfg.output_dir};
  return detail::run_stage(cfg, ws, "compare", [&] {
    if (!fs::exists(ws.eigenpairs()) || !fs::exists(ws.dictionary())) {
      throw ConfigError("no fitted eigenpairs in " + ws.dir.string() + "; run fit first");
    }
    const FeatureDictionary dict = dictionary_from_json(io::read_json(ws.dictionary()));
    const EigenpairSet eig = eigenpairs_from_json(io::read_json(ws.eigenpairs()));
    const Index k_fit = std::min<Index>(cfg.fit.n_eigenpairs, eig.size());

    std::optional<OracleResult> orc;
    if (cfg.oracle.enabled) {
      // Recomputed rather than parsed back: the solve is deterministic and cheap next to the fit.
      orc = run_oracle(cfg);
      if (!fs::exists(ws.oracle_json())) detail::write_oracle(cfg, ws, *orc);
    }

    json body;
    std::vector<std::string> rows{"method,lag,index,lambda,oracle_lambda,sin_angle,sign_agreement"};
    auto fmt = [](double v) { return io::detail::fmt17(v); };
    auto lag_label = [](double v) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.10g", v);
      return std::string(buf);
    };
    RowMatrix points;
    Vector density;
    if (orc) {
      points = orc->points;
      density = orc->density;
    } else {
      const LoadedData data = load_data(cfg, ws);
      const Index n = std::min<Index>(data.dataset.size(), 2000);
      const Index step = std::max<Index>(1, data.dataset.size() / n);
      std::vector<Index> pick;
      for (Index i = 0; i < data.dataset.size() && static_cast<Index>(pick.size()) < n; i += step) pick.push_back(i);
      const auto sub = data.dataset.subset(pick);
      points = sub.states;
      density = sub.weights();
    }

    std::vector<std::string> ef_header;
    for (Index c = 0; c < points.cols(); ++c) ef_header.push_back("x" + std::to_string(c));
    std::vector<Vector> ef_cols;

    json gen = json::array();
    for (Index i = 0; i < k_fit; ++i) {
      const Vector f = evaluate_eigenfunction(dict, eig, i, points);
      ef_header.push_back("generator_f" + std::to_string(i));
      ef_cols.push_back(f);
      json e{{"index", i}, {"lambda", eig.lambdas[static_cast<std::size_t>(i)]}};
      std::string line = "generator,0," + std::to_string(i) + "," + fmt(eig.lambdas[static_cast<std::size_t>(i)]);
      if (orc && i < static_cast<Index>(orc->lambdas.size())) {
        const Vector g = orc->eigenfunctions.col(i);
        const double s = i == 0 ? 0.0 : sin_angle(f, g, density);
        const double a = sign_agreement(f, g, density);
        e["oracle_lambda"] = orc->lambdas[static_cast<std::size_t>(i)];
        e["sin_angle"] = s;
        e["sign_agreement"] = a;
        line += "," + fmt(orc->lambdas[static_cast<std::size_t>(i)]) + "," + fmt(s) + "," + fmt(a);
      } else {
        line += ",,,";
      }
      rows.push_back(line);
      gen.push_back(e);
    }
    body["generator"] = gen;

    if (cfg.baseline.enabled) {
      const LoadedData data = load_data(cfg, ws);
      const double spacing = data.trajectory.size() > 1 ? data.trajectory.times[1] - data.trajectory.times[0]
                                                        : data.trajectory.meta.dt;
      json base = json::array();
      for (double lag : cfg.baseline.lags) {
        const double ratio = lag / spacing;
        const auto stride = static_cast<Index>(std::llround(ratio));
        if (stride < 1 || std::abs(ratio - static_cast<double>(stride)) > 1e-6 * ratio) {
          throw ConfigError("baseline lag " + lag_label(lag) + " is not a multiple of the saved-state spacing");
        }
        const Vector w = cfg.dataset.weighted ? data.dataset.weights() : Vector(Vector::Ones(data.dataset.size()));
        const LaggedPairs pairs = make_lagged_pairs(data.trajectory, stride, w);
        const auto tc = transfer_covariances(dict, pairs);
        const auto te = transfer_eigensolve(tc, cfg.baseline.gamma);
        json entries = json::array();
        for (Index i = 0; i < std::min<Index>(k_fit, te.size()); ++i) {
          const Vector f = evaluate_transfer_eigenfunction(dict, te, i, points);
          ef_header.push_back("transfer_lag" + lag_label(lag) + "_f" + std::to_string(i));
          ef_cols.push_back(f);
          const double lam = te.lambdas[static_cast<std::size_t>(i)];
          json e{{"index", i}, {"mu", te.mus[static_cast<std::size_t>(i)]}, {"valid", static_cast<bool>(te.valid[static_cast<std::size_t>(i)])}};
          e["lambda"] = std::isfinite(lam) ? json(lam) : json(nullptr);
          std::string line = "transfer," + lag_label(lag) + "," + std::to_string(i) + "," + (std::isfinite(lam) ? fmt(lam) : "");
          if (orc && i < static_cast<Index>(orc->lambdas.size())) {
            const Vector g = orc->eigenfunctions.col(i);
            const double s = i == 0 ? 0.0 : sin_angle(f, g, density);
            const double a = sign_agreement(f, g, density);
            e["oracle_lambda"] = orc->lambdas[static_cast<std::size_t>(i)];
            e["sin_angle"] = s;
            e["sign_agreement"] = a;
            line += "," + fmt(orc->lambdas[static_cast<std::size_t>(i)]) + "," + fmt(s) + "," + fmt(a);
          } else {
            line += ",,,";
          }
          rows.push_back(line);
          entries.push_back(e);
        }
        base.push_back({{"lag", lag}, {"eigenpairs", entries}});
      }
      body["transfer"] = base;
    }
    if (orc) body["oracle_lambdas"] = orc->lambdas;

    {
      auto out = io::detail::open_out(ws.comparison());
      for (const auto& r : rows) out << r << "\n";
    }
    Matrix table(points.rows(), points.cols() + static_cast<Index>(ef_cols.size()));
    table.leftCols(points.cols()) = points;
    for (std::size_t c = 0; c < ef_cols.size(); ++c) table.col(points.cols() + static_cast<Index>(c)) = ef_cols[c];
    io::write_csv(ws.eigenfunctions(), ef_header, table);
    detail::record_stage(cfg, ws, "compare", body);
    return body;
  });
}

/// simulate -> train (when enabled) -> fit -> compare.
inline json run_pipeline(const ExperimentConfig& cfg) {
  json out;
  out["simulate"] = stage_simulate(cfg);
  if (cfg.training.enabled) out["train"] = stage_train(cfg);
  out["fit"] = stage_fit(cfg);
  out["compare"] = stage_compare(cfg);
  return out;
}

}  // namespace genspec
