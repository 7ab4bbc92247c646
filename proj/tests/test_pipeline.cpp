#include <genspec/io.hpp>
#include <genspec/pipeline.hpp>

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace genspec;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("genspec_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json small_config(const fs::path& out) {
  json j = json::parse(R"({
    "name": "ou_small",
    "seed": 7,
    "potential": {"kind": "harmonic", "dim": 1, "params": [1.0]},
    "simulation": {"beta": 1.0, "dt": 0.001, "n_steps": 400000, "save_stride": 20, "x0": [0.0]},
    "dictionary": {"build": {"kind": "mlp", "widths": [1, 8, 1], "heads": 2}},
    "fit": {"eta": 0.5, "gamma": 1e-6, "n_eigenpairs": 2},
    "training": {"alpha": 1.0, "learning_rate": 0.005, "batch_size": 128, "max_steps": 300, "eval_every": 50},
    "baseline": {"lags": [0.1, 0.2], "gamma": 1e-6},
    "oracle": {"lo": [-6.0], "hi": [6.0], "n_points": [256], "k": 3}
  })");
  j["outputs"]["directory"] = out.string();
  return j;
}

json without_timestamp(json j) {
  j.erase("created_at");
  return j;
}

}  // namespace

TEST(Io, TrajectoryCsvRoundTrip) {
  const fs::path dir = scratch_dir("csv");
  SimulationParams p;
  p.n_steps = 500;
  p.save_stride = 5;
  p.seed = 3;
  p.x0 = Vector::Zero(2);
  BiasState bias = BiasState::metadynamics(2, 0.1, 0.2, 50, 200);
  const Trajectory t = simulate(PotentialSpec::mueller_brown(0.1), bias, p);
  io::write_trajectory_csv(dir / "t.csv", t);
  const Trajectory r = io::read_trajectory_csv(dir / "t.csv");
  EXPECT_EQ(r.states, t.states);
  EXPECT_EQ(r.bias_values, t.bias_values);
  EXPECT_EQ(r.times, t.times);
  EXPECT_EQ(r.steps, t.steps);
  EXPECT_EQ(r.meta.seed, t.meta.seed);
  EXPECT_DOUBLE_EQ(r.meta.dt, t.meta.dt);
}

TEST(Io, ColvarWithFieldsHeader) {
  const fs::path dir = scratch_dir("colvar");
  {
    std::ofstream out(dir / "COLVAR");
    out << "#! FIELDS time phi psi metad.bias\n";
    out << "#! SET min_phi -pi\n";
    out << "0.0 -1.5 2.0 0.1\n0.5 -1.4 2.1 0.3\n1.0 -1.2 2.2 0.2\n";
  }
  const Trajectory t = io::read_colvar(dir / "COLVAR", {"phi", "psi"}, "time", "metad.bias", 2.5, 0.002);
  ASSERT_EQ(t.size(), 3);
  EXPECT_EQ(t.dim(), 2);
  EXPECT_DOUBLE_EQ(t.states(1, 1), 2.1);
  EXPECT_DOUBLE_EQ(t.bias_values[2], 0.2);
  EXPECT_DOUBLE_EQ(t.times[2], 1.0);
  EXPECT_THROW(io::read_colvar(dir / "COLVAR", {"chi"}, "time", "", 1.0, 0.002), IoError);
}

TEST(Io, MalformedFilesAreIoErrors) {
  const fs::path dir = scratch_dir("bad");
  {
    std::ofstream out(dir / "m.csv");
    out << "1,2\n3,x\n";
  }
  EXPECT_THROW(io::read_matrix(dir / "m.csv"), IoError);
  EXPECT_THROW(io::read_json(dir / "missing.json"), IoError);
}

TEST(Config, NeedsExactlyOneDataSource) {
  json j = small_config(scratch_dir("cfg1"));
  j.erase("simulation");
  EXPECT_THROW(parse_config(j), ConfigError);
  j = small_config(scratch_dir("cfg1"));
  j["input"] = {{"path", "x.csv"}};
  EXPECT_THROW(parse_config(j), ConfigError);
}

TEST(Config, Validation) {
  const fs::path dir = scratch_dir("cfg2");
  auto bad = [&](const std::function<void(json&)>& edit) {
    json j = small_config(dir);
    edit(j);
    return j;
  };
  EXPECT_NO_THROW(parse_config(small_config(dir)));
  EXPECT_THROW(parse_config(bad([](json& j) { j["fit"]["eta"] = 0.0; })), ConfigError);
  EXPECT_THROW(parse_config(bad([](json& j) { j["dictionary"]["load"] = "dict.json"; })), ConfigError);
  EXPECT_THROW(parse_config(bad([](json& j) { j["dictionary"] = {{"load", "/nonexistent/dict.json"}}; })), ConfigError);
  EXPECT_THROW(parse_config(bad([](json& j) { j["input"] = {{"path", "/nonexistent.csv"}}; j.erase("simulation"); })),
               ConfigError);
  EXPECT_THROW(parse_config(bad([](json& j) { j["simulation"]["dt"] = -1.0; })), ConfigError);
  EXPECT_THROW(parse_config(bad([](json& j) { j["training"]["batch_size"] = 5; })), ConfigError);
  EXPECT_THROW(parse_config(bad([](json& j) { j["baseline"]["lags"] = json::array(); })), ConfigError);
  EXPECT_THROW(parse_config(bad([](json& j) { j["fit"]["eta"] = "fast"; })), ConfigError);
  EXPECT_THROW(parse_config(bad([](json& j) { j["dictionary"]["build"]["widths"] = {2, 8, 1}; })), ConfigError);
}

TEST(Config, SeedsDeriveFromTheGlobalSeed) {
  const auto a = parse_config(small_config(scratch_dir("cfg3")));
  const auto b = parse_config(small_config(scratch_dir("cfg3")), 99);
  EXPECT_EQ(a.seed, 7u);
  EXPECT_EQ(b.seed, 99u);
  EXPECT_EQ(b.simulation->seed, 99u);
  EXPECT_EQ(b.dictionary.seed, 100u);
  EXPECT_EQ(b.training.config.seed, 101u);
  EXPECT_NEAR(resolved_alpha(a, 3), 1.0, 0.0);
  json j = small_config(scratch_dir("cfg3"));
  j["training"].erase("alpha");
  EXPECT_NEAR(resolved_alpha(parse_config(j), 3), 0.03, 1e-15);
}

TEST(Config, ResolvedConfigRoundTrips) {
  const auto a = parse_config(small_config(scratch_dir("cfg4")));
  const auto b = parse_config(resolved_config(a));
  EXPECT_EQ(resolved_config(a).dump(), resolved_config(b).dump());
}

TEST(Pipeline, StagesComposeAndRerunsAreIdentical) {
  const fs::path one = scratch_dir("pipe_one");
  const fs::path two = scratch_dir("pipe_two");
  const fs::path staged = scratch_dir("pipe_staged");
  const auto cfg_one = parse_config(small_config(one));
  const auto cfg_two = parse_config(small_config(two));
  const auto cfg_staged = parse_config(small_config(staged));

  run_pipeline(cfg_one);
  run_pipeline(cfg_two);
  stage_simulate(cfg_staged);
  stage_train(cfg_staged);
  stage_fit(cfg_staged);
  stage_compare(cfg_staged);

  for (const char* f : {"trajectory.csv", "bias.json", "model.json", "dictionary.json", "history.csv",
                        "eigenpairs.json", "comparison.csv", "eigenfunctions.csv", "oracle.csv", "oracle.json"}) {
    ASSERT_TRUE(fs::exists(one / f)) << f;
    EXPECT_EQ(slurp(one / f), slurp(two / f)) << f;
    EXPECT_EQ(slurp(one / f), slurp(staged / f)) << f;
  }
  const json r1 = io::read_json(one / "results.json");
  const json r2 = io::read_json(two / "results.json");
  const json rs = io::read_json(staged / "results.json");
  // The output directory is part of the embedded config; compare everything else.
  auto strip = [](json j) {
    j = without_timestamp(j);
    j["config"]["outputs"].erase("directory");
    return j;
  };
  EXPECT_EQ(strip(r1).dump(), strip(r2).dump());
  EXPECT_EQ(strip(r1)["stages"].dump(), strip(rs)["stages"].dump());
  EXPECT_TRUE(r1.contains("versions"));
  EXPECT_EQ(r1["config"]["seed"], 7);

  const auto& gen = r1["stages"]["compare"]["generator"];
  ASSERT_EQ(gen.size(), 2u);
  EXPECT_NEAR(gen[0]["lambda"].get<double>(), 0.0, 0.05);
  EXPECT_LT(gen[1]["lambda"].get<double>(), -0.5);
  EXPECT_EQ(r1["stages"]["compare"]["transfer"].size(), 2u);
}

TEST(Pipeline, FailureNamesTheStageAndIsRecorded) {
  const fs::path dir = scratch_dir("pipe_fail");
  json j = small_config(dir);
  j["baseline"]["lags"] = {0.0105};
  j.erase("training");
  j["dictionary"] = {{"build", {{"kind", "rbf"}, {"count", 20}, {"lengthscale", 0.5}}}};
  const auto cfg = parse_config(j);
  try {
    run_pipeline(cfg);
    FAIL() << "expected a stage error";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "compare");
    EXPECT_EQ(e.exit_code(), 2);
  }
  const json r = io::read_json(dir / "results.json");
  EXPECT_EQ(r["error"]["stage"], "compare");
  EXPECT_TRUE(r["stages"].contains("fit"));
  EXPECT_TRUE(fs::exists(dir / "eigenpairs.json"));
}

TEST(Pipeline, MissingInputsForLaterStages) {
  const auto cfg = parse_config(small_config(scratch_dir("pipe_missing")));
  try {
    stage_fit(cfg);
    FAIL() << "expected a stage error";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "fit");
    EXPECT_EQ(e.exit_code(), 2);
  }
}

TEST(Pipeline, ImportedTrajectoryMatchesSimulated) {
  const fs::path sim = scratch_dir("pipe_sim");
  const fs::path imp = scratch_dir("pipe_imp");
  json j = small_config(sim);
  j.erase("training");
  j.erase("baseline");
  j["dictionary"] = {{"build", {{"kind", "rbf"}, {"count", 20}, {"lengthscale", 0.5}, {"include_constant", true}}}};
  const auto a = parse_config(j);
  stage_simulate(a);
  const json fa = stage_fit(a);
  json k = j;
  k.erase("simulation");
  k["input"] = {{"path", (sim / "trajectory.csv").string()}, {"beta", 1.0}, {"dt", 0.001}};
  k["outputs"]["directory"] = imp.string();
  const auto b = parse_config(k);
  stage_simulate(b);
  const json fb = stage_fit(b);
  EXPECT_EQ(fa["lambdas"].dump(), fb["lambdas"].dump());
}

TEST(ExitCodes, Mapping) {
  EXPECT_EQ(exit_code_for(ConfigError("x")), 2);
  EXPECT_EQ(exit_code_for(IoError("x")), 2);
  EXPECT_EQ(exit_code_for(NumericError("x")), 3);
  EXPECT_EQ(exit_code_for(AlignmentError("x")), 3);
  EXPECT_EQ(exit_code_for(DivergenceError("x", 3)), 4);
  EXPECT_EQ(exit_code_for(StageError("fit", 3, "x")), 3);
  EXPECT_EQ(exit_code_for(std::runtime_error("x")), 1);
}

#ifdef GENSPEC_CLI_PATH
TEST(Cli, ExitCodes) {
  const fs::path dir = scratch_dir("cli");
  json j = small_config(dir);
  j.erase("simulation");
  io::write_json(dir / "bad.json", j);
  const std::string cli = GENSPEC_CLI_PATH;
  auto run = [&](const std::string& args) {
    const int status = std::system((cli + " " + args + " > /dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  EXPECT_EQ(run("fit --config " + (dir / "bad.json").string()), 2);
  EXPECT_EQ(run("fit --config " + (dir / "nope.json").string()), 2);
  EXPECT_EQ(run("--version"), 0);
  j = small_config(dir);
  j["oracle"]["lo"] = {-2.0};
  j["oracle"]["hi"] = {2.0};
  io::write_json(dir / "small_box.json", j);
  EXPECT_EQ(run("oracle --config " + (dir / "small_box.json").string()), 2);
  j = small_config(dir);
  io::write_json(dir / "ok.json", j);
  EXPECT_EQ(run("oracle --threads 2 --seed 3 --output " + (dir / "out").string() + " --config " +
                (dir / "ok.json").string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "out" / "oracle.json"));
  EXPECT_EQ(io::read_json(dir / "out" / "results.json")["config"]["seed"], 3);
}
#endif
