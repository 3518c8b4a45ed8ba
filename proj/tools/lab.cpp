#include "lab.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "stgnn/stability.hpp"

namespace stgnn::lab {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

const char* kSplits[] = {"train", "validation", "test"};

// Seed of example `index` in split `split`.
std::uint64_t example_seed(std::uint64_t seed, int split, int index) {
  return derive_seed(seed, (static_cast<std::uint64_t>(split + 1) << 32) | static_cast<std::uint64_t>(index));
}

std::string example_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "example_%05d", i);
  return buf;
}

std::string activation_name(Activation a) { return a == Activation::tanh ? "tanh" : "identity"; }

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + s + "' (expected tanh or identity)");
}

// Strict view of a JSON object: every key must be consumed.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path(key) + ": " + e.what());
    }
  }

  void get_string(const std::string& key, std::string& out) { get(key, out); }

  bool has(const std::string& key) const { return j_.contains(key); }

  Reader child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Reader(j_.contains(key) ? j_.at(key) : empty, path(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + path(it.key()) + "'");
  }

  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json flocking_json(const FlockingConfig& c) {
  return {{"n_agents", c.n_agents},
          {"density_rho0", c.density_rho0},
          {"comm_range_r", c.comm_range_r},
          {"mu_max_accel", c.mu_max_accel},
          {"t_steps", c.t_steps},
          {"ts_seconds", c.ts_seconds},
          {"ref_initial_norm", c.ref_initial_norm},
          {"ref_increment_norm", c.ref_increment_norm},
          {"obs_noise_norm", c.obs_noise_norm},
          {"vel_noise_norm", c.vel_noise_norm},
          {"chi_potential", c.chi_potential},
          {"k_hops", c.k_hops},
          {"min_spacing", c.min_spacing},
          {"normalize_gso", c.normalize_gso}};
}

void read_flocking(Reader r, FlockingConfig& c) {
  r.get("n_agents", c.n_agents);
  r.get("density_rho0", c.density_rho0);
  r.get("comm_range_r", c.comm_range_r);
  r.get("mu_max_accel", c.mu_max_accel);
  r.get("t_steps", c.t_steps);
  r.get("ts_seconds", c.ts_seconds);
  r.get("ref_initial_norm", c.ref_initial_norm);
  r.get("ref_increment_norm", c.ref_increment_norm);
  r.get("obs_noise_norm", c.obs_noise_norm);
  r.get("vel_noise_norm", c.vel_noise_norm);
  r.get("chi_potential", c.chi_potential);
  r.get("k_hops", c.k_hops);
  r.get("min_spacing", c.min_spacing);
  r.get("normalize_gso", c.normalize_gso);
  r.finish();
}

json planning_json(const PlanningConfig& c) {
  return {{"n_agents", c.n_agents},
          {"m_neighbors", c.m_neighbors},
          {"min_spacing", c.min_spacing},
          {"initial_speed", c.initial_speed},
          {"mu_max_accel", c.mu_max_accel},
          {"t_steps", c.t_steps},
          {"ts_seconds", c.ts_seconds},
          {"arena_side", c.arena_side},
          {"max_displacement", c.max_displacement},
          {"max_attempts", c.max_attempts},
          {"absolute_features", c.absolute_features}};
}

void read_planning(Reader r, PlanningConfig& c) {
  r.get("n_agents", c.n_agents);
  r.get("m_neighbors", c.m_neighbors);
  r.get("min_spacing", c.min_spacing);
  r.get("initial_speed", c.initial_speed);
  r.get("mu_max_accel", c.mu_max_accel);
  r.get("t_steps", c.t_steps);
  r.get("ts_seconds", c.ts_seconds);
  r.get("arena_side", c.arena_side);
  r.get("max_displacement", c.max_displacement);
  r.get("max_attempts", c.max_attempts);
  r.get("absolute_features", c.absolute_features);
  r.finish();
}

void write_text(const fs::path& p, const std::string& s) { write_file_atomic(p, s); }

template <typename WriteFn>
std::string to_text(WriteFn&& fn) {
  std::ostringstream os;
  fn(os);
  return os.str();
}

struct Manifest {
  std::string command;
  json config;
  std::string input_hash;
  json stages = json::array();
  json artifacts = json::array();
  json extra = json::object();

  void stage(const std::string& name, double secs) { stages.push_back({{"name", name}, {"seconds", secs}}); }

  void write(const fs::path& p) const {
    json j = {{"command", command},   {"schema_version", kSchemaVersion}, {"config", config},
              {"input_hash", input_hash}, {"stages", stages},          {"artifacts", artifacts}};
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    write_file_atomic(p, j.dump(2) + "\n");
  }
};

std::string config_hash(const ExperimentConfig& cfg) { return git_blob_hash(to_json(cfg).dump()); }

// Hash over every regular file below `dir`, in path order.
std::string tree_hash(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string listing;
  for (const auto& f : files)
    listing += fs::relative(f, dir).generic_string() + " " + git_blob_hash(read_file(f)) + "\n";
  return git_blob_hash(listing);
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw Error("cannot create directory " + p.string() + ": " + ec.message());
}

bool is_flocking(Task t) { return t == Task::flocking_static || t == Task::flocking_dynamic; }

void require_params_fit(const StgnnParams& p, const Example& ex, const std::string& name) {
  if (p.input_features() != ex.input.features() || p.output_features() != ex.target.features())
    throw Error("shape mismatch: network maps " + std::to_string(p.input_features()) + " -> " +
                std::to_string(p.output_features()) + " features, but " + name + " has input " +
                ex.input.shape_string() + " and target " + ex.target.shape_string());
}

StgnnParams load_network(const ExperimentConfig& cfg) {
  return load_params(cfg.params_file().string(), cfg.network.final_activation);
}

std::string csv_number(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

std::string to_string(Task t) {
  switch (t) {
    case Task::flocking_static: return "flocking_static";
    case Task::flocking_dynamic: return "flocking_dynamic";
    case Task::motion_planning: return "motion_planning";
    case Task::stability_sweep: return "stability_sweep";
    case Task::density_sweep: return "density_sweep";
    case Task::ts_sweep: return "ts_sweep";
  }
  return "?";
}

Task task_from_string(const std::string& s) {
  for (Task t : {Task::flocking_static, Task::flocking_dynamic, Task::motion_planning, Task::stability_sweep,
                 Task::density_sweep, Task::ts_sweep})
    if (to_string(t) == s) return t;
  throw ConfigError("unknown task '" + s + "'");
}

FlockingExperiment flocking_experiment_of(Task task) {
  switch (task) {
    case Task::flocking_static:
    case Task::stability_sweep: return FlockingExperiment::static_grid;
    case Task::flocking_dynamic:
    case Task::density_sweep:
    case Task::ts_sweep: return FlockingExperiment::dynamic;
    default: throw ConfigError("task " + to_string(task) + " does not use flocking data");
  }
}

fs::path ExperimentConfig::dataset_path() const {
  return dataset_dir.empty() ? fs::path(output_dir) / "dataset" : fs::path(dataset_dir);
}

fs::path ExperimentConfig::params_file() const {
  return params_path.empty() ? fs::path(output_dir) / "params.bin" : fs::path(params_path);
}

void ExperimentConfig::validate() const {
  if (schema_version != kSchemaVersion)
    throw ConfigError("unsupported schema_version " + std::to_string(schema_version) + " (expected " +
                      std::to_string(kSchemaVersion) + ")");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  flocking.validate();
  planning.validate();
  train.validate();
  if (network.features.size() != network.taps.size() + 1 || network.taps.empty())
    throw ConfigError("network: need L taps entries and L + 1 feature entries");
  for (int f : network.features)
    if (f < 1) throw ConfigError("network: feature counts must be >= 1");
  for (int k : network.taps)
    if (k < 1) throw ConfigError("network: taps must be >= 1");
  if (data.n_train < 0 || data.n_validation < 0 || data.n_test < 0)
    throw ConfigError("data: counts must be nonnegative");
  if (sweep.n_signals < 1 || sweep.n_instances < 1) throw ConfigError("sweep: counts must be >= 1");
  if (eval.n_rollouts < 0) throw ConfigError("eval: n_rollouts must be nonnegative");
  if (eval.predictor != "network" && eval.predictor != "teacher")
    throw ConfigError("eval.predictor must be 'network' or 'teacher'");
  if (task == Task::motion_planning && network.features.front() != planning.feature_count())
    throw ConfigError("network: motion planning needs " + std::to_string(planning.feature_count()) +
                      " input features (6M + 4), got " + std::to_string(network.features.front()));
  if (is_flocking(task) || task == Task::stability_sweep || task == Task::density_sweep || task == Task::ts_sweep) {
    const int need = flocking_feature_count(flocking_experiment_of(task));
    if (network.features.front() != need)
      throw ConfigError("network: task " + to_string(task) + " needs " + std::to_string(need) +
                        " input features, got " + std::to_string(network.features.front()));
  }
  if (network.features.back() != 2) throw ConfigError("network: output must have 2 features (accelerations)");
}

ExperimentConfig default_config(Task task) {
  ExperimentConfig c;
  c.task = task;
  c.output_dir = "runs/" + to_string(task);
  switch (task) {
    case Task::flocking_static:
    case Task::stability_sweep:
      c.flocking.n_agents = 100;
      c.network = {{4, 16, 2}, {4, 1}, Activation::identity};
      c.data = {460, 20, 20};
      c.sweep.eps = {0.0, 0.0125, 0.025, 0.05, 0.1, 0.15, 0.2};
      break;
    case Task::flocking_dynamic:
    case Task::density_sweep:
    case Task::ts_sweep:
      c.flocking.n_agents = 50;
      c.network = {{6, 64, 2}, {4, 1}, Activation::identity};
      c.data = {800, 100, 100};
      c.sweep.n_signals = 50;
      c.sweep.densities = {2.0, 0.5, 0.125, 1.0 / 32, 1.0 / 128, 1.0 / 512};
      c.sweep.delta_ts = {-0.05, -0.02, -0.01, 0.0, 0.01, 0.02, 0.05, 0.1};
      break;
    case Task::motion_planning:
      c.network = {{34, 64, 2}, {3, 1}, Activation::identity};
      c.data = {2000, 125, 100};
      c.train.learning_rate = 0.0005;
      c.train.epochs = 60;
      c.train.selection_metric = SelectionMetric::final_goal_distance;
      c.sweep.delta_m = {-4, -3, -2, -1, 0, 1, 2, 3, 4, 5, 6};
      c.sweep.delta_ts = {-0.04, -0.03, -0.02, -0.01, 0.0, 0.01, 0.02, 0.03, 0.04};
      c.sweep.n_instances = 50;
      break;
  }
  return c;
}

json to_json(const ExperimentConfig& c) {
  return {{"schema_version", c.schema_version},
          {"task", to_string(c.task)},
          {"seed", c.seed},
          {"output_dir", c.output_dir},
          {"dataset_dir", c.dataset_dir},
          {"params_path", c.params_path},
          {"flocking", flocking_json(c.flocking)},
          {"planning", planning_json(c.planning)},
          {"network",
           {{"features", c.network.features},
            {"taps", c.network.taps},
            {"final_activation", activation_name(c.network.final_activation)}}},
          {"train",
           {{"learning_rate", c.train.learning_rate},
            {"beta1", c.train.beta1},
            {"beta2", c.train.beta2},
            {"epochs", c.train.epochs},
            {"batch_size", c.train.batch_size},
            {"selection_metric", to_string(c.train.selection_metric)}}},
          {"data", {{"n_train", c.data.n_train}, {"n_validation", c.data.n_validation}, {"n_test", c.data.n_test}}},
          {"sweep",
           {{"eps", c.sweep.eps},
            {"n_signals", c.sweep.n_signals},
            {"densities", c.sweep.densities},
            {"rho_ref", c.sweep.rho_ref},
            {"delta_ts", c.sweep.delta_ts},
            {"delta_m", c.sweep.delta_m},
            {"n_instances", c.sweep.n_instances},
            {"plot", c.sweep.plot}}},
          {"eval", {{"n_rollouts", c.eval.n_rollouts}, {"predictor", c.eval.predictor}}}};
}

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  if (!j.contains("task")) throw ConfigError("config: missing required key 'task'");
  std::string task_name;
  try {
    task_name = j.at("task").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("task: ") + e.what());
  }
  ExperimentConfig c = default_config(task_from_string(task_name));
  Reader r(j, "");
  r.get("schema_version", c.schema_version);
  std::string ignored;
  r.get("task", ignored);
  r.get("seed", c.seed);
  r.get("output_dir", c.output_dir);
  r.get("dataset_dir", c.dataset_dir);
  r.get("params_path", c.params_path);
  read_flocking(r.child("flocking"), c.flocking);
  read_planning(r.child("planning"), c.planning);
  {
    Reader n = r.child("network");
    n.get("features", c.network.features);
    n.get("taps", c.network.taps);
    std::string act = activation_name(c.network.final_activation);
    n.get("final_activation", act);
    c.network.final_activation = activation_from_string(act);
    n.finish();
  }
  {
    Reader t = r.child("train");
    t.get("learning_rate", c.train.learning_rate);
    t.get("beta1", c.train.beta1);
    t.get("beta2", c.train.beta2);
    t.get("epochs", c.train.epochs);
    t.get("batch_size", c.train.batch_size);
    std::string metric = to_string(c.train.selection_metric);
    t.get("selection_metric", metric);
    c.train.selection_metric = selection_metric_from_string(metric);
    t.finish();
  }
  {
    Reader d = r.child("data");
    d.get("n_train", c.data.n_train);
    d.get("n_validation", c.data.n_validation);
    d.get("n_test", c.data.n_test);
    d.finish();
  }
  {
    Reader s = r.child("sweep");
    s.get("eps", c.sweep.eps);
    s.get("n_signals", c.sweep.n_signals);
    s.get("densities", c.sweep.densities);
    s.get("rho_ref", c.sweep.rho_ref);
    s.get("delta_ts", c.sweep.delta_ts);
    s.get("delta_m", c.sweep.delta_m);
    s.get("n_instances", c.sweep.n_instances);
    s.get("plot", c.sweep.plot);
    s.finish();
  }
  {
    Reader e = r.child("eval");
    e.get("n_rollouts", c.eval.n_rollouts);
    e.get("predictor", c.eval.predictor);
    e.finish();
  }
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

std::string git_blob_hash(const std::string& bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("SHA-1 digest failed");
  }
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot read " + p.string());
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

void write_file_atomic(const fs::path& p, const std::string& bytes) {
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + p.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("failed writing " + p.string());
  }
  std::error_code ec;
  fs::rename(tmp, p, ec);
  if (ec) throw Error("cannot move " + tmp.string() + " to " + p.string() + ": " + ec.message());
}

void write_example(const fs::path& dir, const Example& ex, const json& meta, const PlanningInstance* instance) {
  ensure_dir(dir);
  write_text(dir / "input.csv", to_text([&](std::ostream& os) { write_signal_csv(os, ex.input); }));
  write_text(dir / "target.csv", to_text([&](std::ostream& os) { write_signal_csv(os, ex.target); }));
  write_text(dir / "graphs.txt", to_text([&](std::ostream& os) {
               for (const auto& g : ex.graphs) write_graph(os, g);
             }));
  write_text(dir / "meta.json", meta.dump(2) + "\n");
  if (instance) {
    write_text(dir / "goals.csv", to_text([&](std::ostream& os) {
                 os << "agent,goal_x,goal_y,start_x,start_y,v0_x,v0_y\n" << std::setprecision(17);
                 for (int i = 0; i < instance->n_agents(); ++i)
                   os << i << ',' << instance->goals(i, 0) << ',' << instance->goals(i, 1) << ','
                      << instance->starts(i, 0) << ',' << instance->starts(i, 1) << ','
                      << instance->initial_velocities(i, 0) << ',' << instance->initial_velocities(i, 1) << '\n';
               }));
  }
}

namespace {

PlanningInstance read_instance(const fs::path& dir, const json& meta) {
  std::istringstream is(read_file(dir / "goals.csv"));
  std::string line;
  if (!std::getline(is, line) || line != "agent,goal_x,goal_y,start_x,start_y,v0_x,v0_y")
    throw Error((dir / "goals.csv").string() + ": missing header");
  std::vector<std::array<double, 6>> rows;
  int expected = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    int agent = -1;
    char c = 0;
    std::array<double, 6> v{};
    ls >> agent;
    for (double& x : v) ls >> c >> x;
    if (!ls || agent != expected)
      throw Error((dir / "goals.csv").string() + ": malformed row for agent " + std::to_string(expected));
    rows.push_back(v);
    ++expected;
  }
  PlanningInstance inst;
  const int n = static_cast<int>(rows.size());
  inst.goals.resize(n, 2);
  inst.starts.resize(n, 2);
  inst.initial_velocities.resize(n, 2);
  for (int i = 0; i < n; ++i) {
    inst.goals.row(i) << rows[i][0], rows[i][1];
    inst.starts.row(i) << rows[i][2], rows[i][3];
    inst.initial_velocities.row(i) << rows[i][4], rows[i][5];
  }
  inst.t_steps = meta.at("t_steps").get<int>();
  inst.ts = meta.at("ts_seconds").get<double>();
  inst.min_spacing = meta.at("min_spacing").get<double>();
  return inst;
}

}  // namespace

LoadedSplit load_split(const fs::path& dir, bool with_instances) {
  if (!fs::is_directory(dir)) throw Error("dataset split not found: " + dir.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  LoadedSplit out;
  for (const auto& d : dirs) {
    try {
      Example ex;
      ex.input = load_signal_csv((d / "input.csv").string());
      ex.target = load_signal_csv((d / "target.csv").string());
      std::istringstream gs(read_file(d / "graphs.txt"));
      for (int t = 0; t < ex.input.steps(); ++t) ex.graphs.push_back(read_graph(gs));
      const json meta = json::parse(read_file(d / "meta.json"));
      ex.seed = meta.at("seed").get<std::uint64_t>();
      if (with_instances) out.instances.push_back(read_instance(d, meta));
      out.examples.push_back(std::move(ex));
      out.names.push_back(d.filename().string());
    } catch (const json::exception& e) {
      throw Error(d.string() + ": " + e.what());
    } catch (const Error& e) {
      throw Error(d.string() + ": " + e.what());
    }
  }
  return out;
}

std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series) {
  constexpr double W = 640, H = 420, L = 70, R = 150, T = 40, B = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  const auto esc = [](const std::string& s) {
    std::string o;
    for (char c : s) {
      if (c == '<') o += "&lt;";
      else if (c == '>') o += "&gt;";
      else if (c == '&') o += "&amp;";
      else o += c;
    }
    return o;
  };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
     << esc(title) << "</text>\n"
     << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << xv << "</text>\n"
       << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << yv << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" << esc(x_label) << "</text>\n"
     << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 16 " << (T + H - B) / 2
     << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" << esc(y_label) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = colors[s % 6];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[s].x.size() && i < series[s].y.size(); ++i) {
      if (!std::isfinite(series[s].x[i]) || !std::isfinite(series[s].y[i])) continue;
      os << px(series[s].x[i]) << ',' << py(series[s].y[i]) << ' ';
    }
    os << "\"/>\n";
    const double ly = T + 10 + 18.0 * s;
    os << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
       << "<text x=\"" << W - R + 36 << "\" y=\"" << ly + 4 << "\" font-family=\"sans-serif\" font-size=\"11\">"
       << esc(series[s].name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

int cmd_gen_data(const ExperimentConfig& cfg, std::size_t jobs) {
  cfg.validate();
  if (!is_flocking(cfg.task) && cfg.task != Task::motion_planning)
    throw ConfigError("gen-data supports flocking_static, flocking_dynamic and motion_planning, not " +
                      to_string(cfg.task));
  const auto t0 = Clock::now();
  const fs::path root = cfg.dataset_path();
  ensure_dir(root);
  Manifest man{"gen-data", to_json(cfg), config_hash(cfg)};
  const int counts[] = {cfg.data.n_train, cfg.data.n_validation, cfg.data.n_test};
  long rejected = 0, generated = 0;
  for (int s = 0; s < 3; ++s) {
    const auto ts = Clock::now();
    const fs::path split_dir = root / kSplits[s];
    std::error_code ec;
    fs::remove_all(split_dir, ec);
    if (ec) throw Error("cannot clear " + split_dir.string() + ": " + ec.message());
    ensure_dir(split_dir);
    std::vector<GenerationStats> stats(counts[s]);
    parallel_for(static_cast<std::size_t>(counts[s]), jobs, [&](std::size_t i) {
      const std::uint64_t seed = example_seed(cfg.seed, s, static_cast<int>(i));
      json meta = {{"task", to_string(cfg.task)}, {"split", kSplits[s]}, {"index", i}, {"seed", seed}};
      const fs::path dir = split_dir / example_name(static_cast<int>(i));
      if (cfg.task == Task::motion_planning) {
        const auto inst = generate_instance(cfg.planning, seed, &stats[i]);
        const auto ex = planning_example(cfg.planning, inst, seed);
        meta["n_agents"] = cfg.planning.n_agents;
        meta["t_steps"] = cfg.planning.t_steps;
        meta["ts_seconds"] = cfg.planning.ts_seconds;
        meta["min_spacing"] = cfg.planning.min_spacing;
        meta["features"] = ex.input.features();
        meta["rejected_instances"] = stats[i].rejected;
        meta["config"] = planning_json(cfg.planning);
        write_example(dir, ex, meta, &inst);
      } else {
        const auto ex = flocking_example(cfg.flocking, flocking_experiment_of(cfg.task), seed);
        double degree = 0.0;
        for (const auto& g : ex.graphs) degree += g.mean_degree();
        meta["n_agents"] = cfg.flocking.n_agents;
        meta["t_steps"] = cfg.flocking.t_steps;
        meta["ts_seconds"] = cfg.flocking.ts_seconds;
        meta["features"] = ex.input.features();
        meta["mean_degree"] = degree / static_cast<double>(ex.graphs.size());
        meta["config"] = flocking_json(cfg.flocking);
        write_example(dir, ex, meta);
      }
    });
    for (const auto& st : stats) {
      rejected += st.rejected;
      generated += st.generated;
    }
    man.stage(std::string("generate_") + kSplits[s], seconds_since(ts));
    man.artifacts.push_back((fs::path(kSplits[s])).generic_string());
  }
  if (cfg.task == Task::motion_planning) {
    const double rate = generated + rejected > 0 ? static_cast<double>(rejected) / (generated + rejected) : 0.0;
    man.extra["rejected_instances"] = rejected;
    man.extra["rejection_rate"] = rate;
  }
  man.stage("total", seconds_since(t0));
  man.write(root / "manifest.json");
  std::cout << "wrote " << counts[0] + counts[1] + counts[2] << " examples to " << root.string() << "\n";
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, std::size_t jobs) {
  cfg.validate();
  if (!is_flocking(cfg.task) && cfg.task != Task::motion_planning)
    throw ConfigError("train supports flocking_static, flocking_dynamic and motion_planning, not " +
                      to_string(cfg.task));
  const auto t0 = Clock::now();
  const bool planning = cfg.task == Task::motion_planning;
  const fs::path root = cfg.dataset_path();
  Dataset data;
  auto train = load_split(root / "train", false);
  auto val = load_split(root / "validation", planning);
  data.train = std::move(train.examples);
  data.validation = std::move(val.examples);
  Manifest man{"train", to_json(cfg), git_blob_hash(config_hash(cfg) + " " + tree_hash(root / "train") + " " +
                                                     tree_hash(root / "validation"))};
  man.stage("load", seconds_since(t0));

  const StgnnParams init = make_params(cfg.network.features, cfg.network.taps, cfg.network.final_activation,
                                       derive_seed(cfg.seed, 0x1417));
  for (std::size_t i = 0; i < data.train.size(); ++i) require_params_fit(init, data.train[i], train.names[i]);
  for (std::size_t i = 0; i < data.validation.size(); ++i) require_params_fit(init, data.validation[i], val.names[i]);

  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, 0x7121);
  Evaluator evaluator;
  if (tc.selection_metric == SelectionMetric::final_goal_distance) {
    if (!planning) throw ConfigError("selection metric final_goal_distance needs the motion_planning task");
    evaluator = [&](const StgnnParams& p) {
      return mean_final_distance(p, cfg.planning, val.instances, cfg.planning.m_neighbors, cfg.planning.ts_seconds,
                                 jobs);
    };
  } else if (tc.selection_metric == SelectionMetric::validation_cost) {
    throw ConfigError("selection metric validation_cost is not supported by train; use validation_mse");
  }

  ensure_dir(cfg.output_dir);
  const fs::path log_path = fs::path(cfg.output_dir) / "train_log.csv";
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  if (!log) throw Error("cannot write " + log_path.string());
  log << "epoch,train_loss,val_metric\n" << std::setprecision(17);
  log.flush();
  const auto tt = Clock::now();
  const auto result = train_imitation(data, init, tc, evaluator, jobs, [&](const EpochLog& e) {
    log << e.epoch << ',' << e.train_loss << ',' << e.val_metric << '\n';
    log.flush();
    std::cout << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_metric " << e.val_metric << "\n";
  });
  man.stage("train", seconds_since(tt));
  write_file_atomic(cfg.params_file(), serialize_params(result.best_params));
  man.artifacts = {log_path.generic_string(), cfg.params_file().generic_string()};
  man.extra["best_epoch"] = result.best_epoch;
  man.extra["best_metric"] = result.best_metric;
  man.stage("total", seconds_since(t0));
  man.write(fs::path(cfg.output_dir) / "manifest_train.json");
  std::cout << "best epoch " << result.best_epoch << " (" << to_string(tc.selection_metric) << " "
            << result.best_metric << "), parameters in " << cfg.params_file().string() << "\n";
  return 0;
}

int cmd_eval(const ExperimentConfig& cfg, std::size_t jobs) {
  cfg.validate();
  if (!is_flocking(cfg.task) && cfg.task != Task::motion_planning)
    throw ConfigError("eval supports flocking_static, flocking_dynamic and motion_planning, not " +
                      to_string(cfg.task));
  const auto t0 = Clock::now();
  const bool planning = cfg.task == Task::motion_planning;
  const bool teacher = cfg.eval.predictor == "teacher";
  const auto test = load_split(cfg.dataset_path() / "test", planning);
  StgnnParams params;
  std::string input_hash = config_hash(cfg) + " " + tree_hash(cfg.dataset_path() / "test");
  if (!teacher) {
    params = load_network(cfg);
    input_hash += " " + git_blob_hash(read_file(cfg.params_file()));
    for (std::size_t i = 0; i < test.examples.size(); ++i) require_params_fit(params, test.examples[i], test.names[i]);
  }
  Manifest man{"eval", to_json(cfg), git_blob_hash(input_hash)};

  std::ostringstream csv;
  csv << "scope,id,metric,value\n";
  const auto row = [&](const std::string& scope, const std::string& id, const std::string& metric, double v) {
    csv << scope << ',' << id << ',' << metric << ',' << csv_number(v) << '\n';
  };

  std::vector<double> mse(test.examples.size());
  parallel_for(mse.size(), jobs, [&](std::size_t i) {
    const auto& ex = test.examples[i];
    const SpaceTimeSignal pred = teacher ? ex.target : forward(params, ex.graphs, ex.input).output;
    mse[i] = mse_loss(pred, ex.target).value;
  });
  for (std::size_t i = 0; i < mse.size(); ++i) row("test", test.names[i], "mse", mse[i]);
  row("aggregate", "test", "mse_mean", mean(mse));

  if (!teacher && planning) {
    std::vector<FinalDistance> fd(test.instances.size());
    parallel_for(fd.size(), jobs,
                 [&](std::size_t i) { fd[i] = planning_final_distance(params, cfg.planning, test.instances[i]); });
    std::vector<double> means;
    for (std::size_t i = 0; i < fd.size(); ++i) {
      row("test", test.names[i], "d_pg", fd[i].mean);
      means.push_back(fd[i].mean);
    }
    row("aggregate", "test", "d_pg_mean", mean(means));
    row("aggregate", "test", "d_pg_population_variance", population_variance(means));
    row("aggregate", "test", "d_pg_sample_variance", sample_variance(means));
  }
  if (!teacher && cfg.task == Task::flocking_dynamic && cfg.eval.n_rollouts > 0) {
    for (PolicyKind kind : {PolicyKind::centralized, PolicyKind::decentralized, PolicyKind::stgnn}) {
      std::vector<double> fq(cfg.eval.n_rollouts), fc(cfg.eval.n_rollouts);
      parallel_for(fq.size(), jobs, [&](std::size_t i) {
        const auto tr = rollout_policy(kind, cfg.flocking, FlockingExperiment::dynamic,
                                       example_seed(cfg.seed, 3, static_cast<int>(i)), &params);
        fq[i] = final_quarter_cost(tr);
        fc[i] = final_consensus_cost(tr);
      });
      for (std::size_t i = 0; i < fq.size(); ++i) {
        row("rollout", to_string(kind) + "/" + std::to_string(i), "final_quarter_cost", fq[i]);
        row("rollout", to_string(kind) + "/" + std::to_string(i), "final_cost", fc[i]);
      }
      row("aggregate", to_string(kind), "final_quarter_cost_mean", mean(fq));
      row("aggregate", to_string(kind), "final_cost_mean", mean(fc));
    }
  }
  ensure_dir(cfg.output_dir);
  const fs::path out = fs::path(cfg.output_dir) / "eval_metrics.csv";
  write_file_atomic(out, csv.str());
  man.artifacts = {out.generic_string()};
  man.stage("total", seconds_since(t0));
  man.write(fs::path(cfg.output_dir) / "manifest_eval.json");
  std::cout << "test mse " << mean(mse) << "; metrics in " << out.string() << "\n";
  return 0;
}

int cmd_sweep(const ExperimentConfig& cfg, std::size_t jobs) {
  cfg.validate();
  const auto t0 = Clock::now();
  if (is_flocking(cfg.task))
    throw ConfigError("sweep needs task stability_sweep, density_sweep, ts_sweep or motion_planning");
  const StgnnParams params = load_network(cfg);
  Manifest man{"sweep", to_json(cfg), git_blob_hash(config_hash(cfg) + " " + git_blob_hash(read_file(cfg.params_file())))};
  std::string csv;
  std::vector<Series> series;
  std::string title, x_label, y_label;

  switch (cfg.task) {
    case Task::stability_sweep: {
      if (cfg.sweep.eps.empty()) throw ConfigError("sweep.eps must not be empty");
      const auto exp = FlockingExperiment::static_grid;
      std::vector<SpaceTimeSignal> signals(cfg.sweep.n_signals);
      std::vector<Graph> graph(1);
      parallel_for(signals.size(), jobs, [&](std::size_t i) {
        auto ex = flocking_example(cfg.flocking, exp, example_seed(cfg.seed, 4, static_cast<int>(i)));
        signals[i] = std::move(ex.input);
        if (i == 0) graph[0] = ex.graphs.front();
      });
      const auto rows = stability_sweep(params, graph[0], signals, cfg.sweep.eps, derive_seed(cfg.seed, 0x57ab),
                                        cfg.flocking.ts_seconds, jobs);
      csv = to_text([&](std::ostream& os) { write_sweep_csv(os, rows); });
      Series s{"mean relative RMSE", {}, {}}, b{"first-order bound", {}, {}};
      for (const auto& r : rows) {
        s.x.push_back(r.eps);
        s.y.push_back(r.mean_rel_rmse);
        b.x.push_back(r.eps);
        b.y.push_back(r.bound_first_order);
      }
      series = {s, b};
      title = "Output deviation under joint graph/time perturbation";
      x_label = "eps";
      y_label = "relative RMSE";
      break;
    }
    case Task::density_sweep:
    case Task::ts_sweep: {
      const bool density = cfg.task == Task::density_sweep;
      const auto& values = density ? cfg.sweep.densities : cfg.sweep.delta_ts;
      if (values.empty()) throw ConfigError(density ? "sweep.densities must not be empty" : "sweep.delta_ts must not be empty");
      const auto rows = density ? density_sweep(params, cfg.flocking, values, cfg.sweep.n_signals,
                                                derive_seed(cfg.seed, 0xde75), cfg.sweep.rho_ref, jobs)
                                : ts_sweep(params, cfg.flocking, values, cfg.sweep.n_signals,
                                           derive_seed(cfg.seed, 0xde75), jobs);
      csv = to_text([&](std::ostream& os) { write_relative_cost_csv(os, density ? "density" : "delta_ts", rows); });
      Series s{"relative cost", {}, {}};
      for (const auto& r : rows) {
        s.x.push_back(density ? std::log2(r.value) : r.value);
        s.y.push_back(r.relative_cost);
      }
      series = {s};
      title = density ? "Relative final cost vs initial density" : "Relative final cost vs sampling-time change";
      x_label = density ? "log2 density (agents/m^2)" : "delta Ts (s)";
      y_label = "relative cost";
      break;
    }
    case Task::motion_planning: {
      const auto instances =
          generate_instances(cfg.planning, cfg.sweep.n_instances, derive_seed(cfg.seed, 0x5e75), nullptr, jobs);
      const auto rows = sensitivity_sweep(params, cfg.planning, cfg.sweep.delta_m, cfg.sweep.delta_ts, instances, jobs);
      csv = to_text([&](std::ostream& os) { write_sensitivity_csv(os, rows); });
      Series m{"delta M", {}, {}}, t{"delta Ts x 100", {}, {}};
      for (const auto& r : rows) {
        if (!r.note.empty()) continue;
        if (r.sweep == "delta_m") {
          m.x.push_back(r.delta);
          m.y.push_back(r.relative_error);
        } else {
          t.x.push_back(100.0 * r.delta);
          t.y.push_back(r.relative_error);
        }
      }
      series = {m, t};
      title = "Relative error of final goal distance";
      x_label = "perturbation";
      y_label = "relative error";
      break;
    }
    default: break;
  }
  ensure_dir(cfg.output_dir);
  const fs::path out = fs::path(cfg.output_dir) / "sweep.csv";
  write_file_atomic(out, csv);
  man.artifacts.push_back(out.generic_string());
  if (cfg.sweep.plot) {
    const fs::path svg = fs::path(cfg.output_dir) / "sweep.svg";
    write_file_atomic(svg, line_plot_svg(title, x_label, y_label, series));
    man.artifacts.push_back(svg.generic_string());
  }
  man.stage("total", seconds_since(t0));
  man.write(fs::path(cfg.output_dir) / "manifest_sweep.json");
  std::cout << "sweep written to " << out.string() << "\n";
  return 0;
}

}  // namespace stgnn::lab
