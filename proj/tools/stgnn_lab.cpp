#include <iostream>

#include "CLI11.hpp"
#include "lab.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

}  // namespace

int main(int argc, char** argv) {
  using namespace stgnn::lab;
  CLI::App app{"stgnn-lab: data generation, training, evaluation and sweeps for space-time graph networks"};
  app.require_subcommand(1);

  std::string config_path;
  std::size_t jobs = stgnn::default_jobs();
  std::uint64_t seed = 0;
  std::string task_name;

  const auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", config_path, "Experiment config (JSON)");
    if (config_required) opt->required();
    sub->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--seed", seed, "Override the config seed");
  };
  auto* gen = app.add_subcommand("gen-data", "Generate train/validation/test datasets");
  auto* train = app.add_subcommand("train", "Train by imitation of the teacher controller");
  auto* eval = app.add_subcommand("eval", "Evaluate trained parameters on the test split");
  auto* sweep = app.add_subcommand("sweep", "Run a perturbation sweep");
  auto* defaults = app.add_subcommand("print-defaults", "Print a complete config for a task");
  for (auto* sub : {gen, train, eval, sweep}) add_common(sub, true);
  add_common(defaults, false);
  defaults->add_option("--task", task_name, "Task name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  ExperimentConfig cfg;
  try {
    if (defaults->parsed()) {
      if (config_path.empty() && task_name.empty())
        throw stgnn::ConfigError("print-defaults needs --task or --config");
      cfg = config_path.empty() ? default_config(task_from_string(task_name)) : load_config(config_path);
    } else {
      cfg = load_config(config_path);
    }
    if (seed != 0) cfg.seed = seed;
    if (defaults->parsed()) {
      std::cout << to_json(cfg).dump(2) << "\n";
      return 0;
    }
  } catch (const stgnn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(cfg, jobs);
    if (train->parsed()) return cmd_train(cfg, jobs);
    if (eval->parsed()) return cmd_eval(cfg, jobs);
    return cmd_sweep(cfg, jobs);
  } catch (const stgnn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
