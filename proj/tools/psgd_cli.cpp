// psgd: train, verify, measure and sweep partial SGD experiments.

#include "psgd/experiment/commands.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

int main(int argc, char** argv) {
  using namespace psgd::experiment;
  CLI::App app{"Partial SGD experiments: train, verify, measure, sweep"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  std::string path;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  std::string suite;

  auto add_run_flags = [&](CLI::App* sub, const char* what) {
    sub->add_option("config", path, what)->required();
    sub->add_option("--out-dir", out_dir, "Output directory (default: $PSGD_OUTPUT_ROOT or ./runs)");
    sub->add_option("--seed", seed, "Override the config seed");
  };
  auto* train = app.add_subcommand("train", "Run one training configuration");
  add_run_flags(train, "YAML config or manifest.json");
  auto* measure = app.add_subcommand("measure", "Record criteria series for a measurement scenario");
  add_run_flags(measure, "YAML config or manifest.json with a 'measure' section");
  auto* sweep = app.add_subcommand("sweep", "Run a parameter grid over seeds");
  add_run_flags(sweep, "YAML config or manifest.json with a 'sweep' section");
  auto* verify = app.add_subcommand("verify", "Run a property suite");
  verify->add_option("suite", suite, "Suite name or 'all'")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  CommandOptions opt;
  opt.out_dir = out_dir;
  opt.seed = seed;
  if (*train) return cmd_train(path, opt);
  if (*measure) return cmd_measure(path, opt);
  if (*sweep) return cmd_sweep(path, opt);
  return cmd_verify(suite, opt);
}
