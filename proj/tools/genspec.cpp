// Command-line runner: simulate, train, fit, oracle, compare, pipeline.

#include <genspec/parallel.hpp>
#include <genspec/pipeline.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  int threads = 0;
};

genspec::ExperimentConfig load(const Options& opt) {
  namespace fs = std::filesystem;
  if (!fs::exists(opt.config)) throw genspec::ConfigError("config file does not exist: " + opt.config);
  const auto j = genspec::io::read_json(opt.config);
  return genspec::parse_config(j, opt.seed, opt.output, fs::path(opt.config).parent_path());
}

int run(const std::string& command, const Options& opt) {
  if (opt.threads > 0) genspec::set_max_threads(opt.threads);
  const auto cfg = load(opt);
  const auto start = std::chrono::steady_clock::now();
  nlohmann::json out;
  if (command == "simulate") out = genspec::stage_simulate(cfg);
  else if (command == "train") out = genspec::stage_train(cfg);
  else if (command == "fit") out = genspec::stage_fit(cfg);
  else if (command == "oracle") out = genspec::stage_oracle(cfg);
  else if (command == "compare") out = genspec::stage_compare(cfg);
  else out = genspec::run_pipeline(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << out.dump(2) << "\n";
  std::fprintf(stderr, "%s finished in %.2f s; outputs in %s\n", command.c_str(), secs, cfg.output_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spectral estimation of the infinitesimal generator from biased Langevin trajectories"};
  app.set_version_flag("--version", std::string(GENSPEC_VERSION));
  app.require_subcommand(1);

  Options opt;
  std::uint64_t seed = 0;
  std::string output;
  app.add_option("--config", opt.config, "experiment config (JSON)")->required();
  auto* seed_opt = app.add_option("--seed", seed, "overrides the config seed");
  auto* out_opt = app.add_option("--output", output, "output directory");
  app.add_option("--threads", opt.threads, "worker thread cap")->check(CLI::PositiveNumber);

  const char* commands[][2] = {{"simulate", "run the biased simulation (or import a trajectory)"},
                               {"train", "learn MLP features with the deep loss"},
                               {"fit", "build or load the dictionary and solve the ridge eigenproblem"},
                               {"oracle", "grid reference eigenpairs"},
                               {"compare", "join fitted, baseline and oracle eigenpairs"},
                               {"pipeline", "simulate, train, fit and compare"}};
  for (const auto& c : commands) app.add_subcommand(c[0], c[1])->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  if (*seed_opt) opt.seed = seed;
  if (*out_opt) opt.output = output;

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, opt);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return genspec::exit_code_for(e);
  }
}
