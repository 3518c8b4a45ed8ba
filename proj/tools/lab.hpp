#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "stgnn/flocking.hpp"
#include "stgnn/motion_planning.hpp"
#include "stgnn/stgnn.hpp"

namespace stgnn::lab {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

enum class Task { flocking_static, flocking_dynamic, motion_planning, stability_sweep, density_sweep, ts_sweep };

std::string to_string(Task t);
Task task_from_string(const std::string& s);

struct NetworkConfig {
  std::vector<int> features;  // F_0 .. F_L
  std::vector<int> taps;      // K_1 .. K_L
  Activation final_activation = Activation::identity;
};

struct DataConfig {
  int n_train = 0;
  int n_validation = 0;
  int n_test = 0;
};

struct SweepConfig {
  std::vector<double> eps;
  int n_signals = 20;
  std::vector<double> densities;
  double rho_ref = 2.0;
  std::vector<double> delta_ts;
  std::vector<int> delta_m;
  int n_instances = 50;
  bool plot = true;
};

struct EvalConfig {
  int n_rollouts = 20;
  std::string predictor = "network";  // or "teacher"
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  Task task = Task::flocking_static;
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
  std::string dataset_dir;  // empty: <output_dir>/dataset
  std::string params_path;  // empty: <output_dir>/params.bin
  FlockingConfig flocking;
  PlanningConfig planning;
  NetworkConfig network;
  TrainConfig train;
  DataConfig data;
  SweepConfig sweep;
  EvalConfig eval;

  fs::path dataset_path() const;
  fs::path params_file() const;
  void validate() const;
};

/// Defaults for a task (simulation parameters follow the two parameter tables).
ExperimentConfig default_config(Task task);
json to_json(const ExperimentConfig& cfg);
/// Unknown keys are rejected; missing keys keep the task defaults.
ExperimentConfig config_from_json(const json& j);
ExperimentConfig load_config(const std::string& path);

/// Experiment kind behind a task that trains on flocking data.
FlockingExperiment flocking_experiment_of(Task task);

/// Git blob id (SHA-1 of "blob <size>\0" + bytes).
std::string git_blob_hash(const std::string& bytes);
std::string read_file(const fs::path& p);
/// Writes via a temporary sibling and rename.
void write_file_atomic(const fs::path& p, const std::string& bytes);

struct LoadedSplit {
  std::vector<Example> examples;
  std::vector<std::string> names;
  std::vector<PlanningInstance> instances;  // motion planning only
};

void write_example(const fs::path& dir, const Example& ex, const json& meta,
                   const PlanningInstance* instance = nullptr);
LoadedSplit load_split(const fs::path& dir, bool with_instances);

struct Series {
  std::string name;
  std::vector<double> x, y;
};

/// Self-contained SVG line chart.
std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series);

int cmd_gen_data(const ExperimentConfig& cfg, std::size_t jobs);
int cmd_train(const ExperimentConfig& cfg, std::size_t jobs);
int cmd_eval(const ExperimentConfig& cfg, std::size_t jobs);
int cmd_sweep(const ExperimentConfig& cfg, std::size_t jobs);

}  // namespace stgnn::lab
