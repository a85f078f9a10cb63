#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ressfl/error.hpp"
#include "ressfl/runner.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigFailure = 1;
constexpr int kRuntimeFailure = 2;

void print_summary(const ressfl::RunReport& report) {
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << ressfl::summary_csv(report);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ressfl: split federated learning with model-inversion attack and defenses"};
  std::string mode_text, config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  app.add_option("mode", mode_text, "pretrain | transfer | attack | compare-defenses | end-to-end")->required();
  app.add_option("--config", config_path, "experiment JSON")->required();
  app.add_option("--seed", seed, "overrides the config seed");
  app.add_option("--out", out_dir, "output directory (overrides output_dir)");
  app.add_option("--threads", threads, "worker threads (default RESSFL_THREADS or 1)")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigFailure;
  }

  ressfl::ExperimentConfig cfg;
  std::size_t k = 1;
  try {
    const ressfl::Mode mode = ressfl::parse_mode(mode_text);
    cfg = ressfl::load_config(config_path, seed);
    cfg.mode = mode;
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    cfg.validate();
    k = threads ? *threads : ressfl::threads_from_env(1);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigFailure;
  }

  try {
    print_summary(ressfl::run_experiment(cfg, k));
  } catch (const ressfl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  return kOk;
}
