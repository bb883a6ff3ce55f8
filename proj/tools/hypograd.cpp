#include "hypograd/runner.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"hypograd: Monte Carlo gradients of hypoelliptic diffusion semigroups"};
  app.require_subcommand(1);

  std::optional<int> threads;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  app.add_option("--threads", threads, "worker threads (default: HYPOGRAD_THREADS, then the config)")
      ->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "master seed, overriding the config");
  app.add_option("--out", out, "output directory, overriding the config");

  std::string config_path;
  CLI::App* run = app.add_subcommand("run", "run one experiment config");
  run->add_option("config", config_path, "experiment config (JSON)")->required();
  run->fallthrough();

  app.add_subcommand("list-builtins", "list builtin models and their parameters");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (app.got_subcommand("list-builtins")) {
    std::cout << hypograd::format_builtins();
    return 0;
  }
  return hypograd::run_config_file(config_path, {threads, seed, out}, std::cout);
}
