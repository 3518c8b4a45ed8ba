#pragma once

#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "stgnn/common.hpp"
#include "stgnn/graph.hpp"
#include "stgnn/signal.hpp"
#include "stgnn/stgnn.hpp"

namespace stgnn {

enum class FlockingExperiment { static_grid, dynamic };

inline std::string to_string(FlockingExperiment e) {
  return e == FlockingExperiment::static_grid ? "static_grid" : "dynamic";
}

/// Input features per agent: (v, r~) on a frozen grid, (v, r~, q) when moving.
inline int flocking_feature_count(FlockingExperiment e) {
  return e == FlockingExperiment::static_grid ? 4 : 6;
}

struct FlockingConfig {
  int n_agents = 50;
  double density_rho0 = 0.5;   // agents / m^2
  double comm_range_r = 2.0;   // m
  double mu_max_accel = 3.0;   // m/s^2
  int t_steps = 100;
  double ts_seconds = 0.1;
  double ref_initial_norm = 1.0;    // E||r_0||
  double ref_increment_norm = 1.0;  // E||dr_n||
  double obs_noise_norm = 1.0;      // E||dr~_i||
  double vel_noise_norm = 1.0;      // E||dv||
  double chi_potential = 1.0;       // m
  int k_hops = 4;
  double min_spacing = 0.1;         // m, initial positions
  bool normalize_gso = true;        // divide each adjacency by its spectral norm
  std::uint64_t seed = 0;

  void validate() const {
    if (n_agents < 1) throw ConfigError("flocking: n_agents must be >= 1");
    if (!(density_rho0 > 0) || !(comm_range_r > 0) || !(mu_max_accel > 0) || !(ts_seconds > 0) ||
        !(chi_potential > 0))
      throw ConfigError("flocking: density, range, mu, ts and chi must be positive");
    if (t_steps < 1) throw ConfigError("flocking: t_steps must be >= 1");
    if (ref_initial_norm < 0 || ref_increment_norm < 0 || obs_noise_norm < 0 || vel_noise_norm < 0 ||
        min_spacing < 0)
      throw ConfigError("flocking: noise scales and spacing must be nonnegative");
    if (k_hops < 0) throw ConfigError("flocking: k_hops must be >= 0");
  }
};

struct SwarmState {
  Points positions;
  Points velocities;
  int step = 0;
};

namespace detail {

// Independent stream per purpose, so e.g. changing the density leaves the
// reference process untouched.
inline Rng stream(std::uint64_t seed, std::uint32_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), purpose};
  return Rng(seq);
}

}  // namespace detail

/// r_{n+1} = r_n + ts dr_n with Gaussian r_0 and increments.
inline std::vector<Vec2> generate_reference(const FlockingConfig& cfg, std::uint64_t seed) {
  auto rng = detail::stream(seed, 1);
  std::vector<Vec2> r(cfg.t_steps);
  r[0] = gaussian_with_expected_norm(rng, cfg.ref_initial_norm);
  for (int n = 0; n + 1 < cfg.t_steps; ++n)
    r[n + 1] = r[n] + cfg.ts_seconds * gaussian_with_expected_norm(rng, cfg.ref_increment_norm);
  return r;
}

/// Per-agent observation bias, constant over a trajectory.
inline Points sample_observation_bias(int n_agents, double noise_norm, std::uint64_t seed) {
  auto rng = detail::stream(seed, 2);
  Points b(n_agents, 2);
  for (int i = 0; i < n_agents; ++i) b.row(i) = gaussian_with_expected_norm(rng, noise_norm).transpose();
  return b;
}

/// r~_{i,n} = r_n + dr~_i.
inline Points observe_reference(const Vec2& r_n, const Points& bias) {
  Points out = bias;
  out.rowwise() += r_n.transpose();
  return out;
}

inline Points observe_reference(const Vec2& r_n, double noise_norm, std::uint64_t seed, int n_agents) {
  return observe_reference(r_n, sample_observation_bias(n_agents, noise_norm, seed));
}

/// Exact kinematic update with each acceleration clipped to norm mu.
inline SwarmState step_mobility(const SwarmState& s, const Points& accel, double ts,
                                double mu = std::numeric_limits<double>::infinity()) {
  if (accel.rows() != s.positions.rows()) throw Error("step_mobility: acceleration count mismatch");
  SwarmState next = s;
  for (int i = 0; i < accel.rows(); ++i) {
    const Vec2 u = clip_norm(accel.row(i).transpose(), mu);
    next.velocities.row(i) = s.velocities.row(i) + ts * u.transpose();
    next.positions.row(i) = s.positions.row(i) + ts * s.velocities.row(i) + 0.5 * ts * ts * u.transpose();
  }
  next.step = s.step + 1;
  return next;
}

/// C(p_i, p_j) = 1/||p_ij||^2 - log ||p_ij||^2 inside chi, constant outside.
inline double collision_potential(const Vec2& p_i, const Vec2& p_j, double chi) {
  const double d2 = std::min((p_i - p_j).squaredNorm(), chi * chi);
  if (d2 == 0.0) throw Error("collision_potential: coincident agents");
  return 1.0 / d2 - std::log(d2);
}

/// Gradient of C with respect to p_i.
inline Vec2 potential_gradient(const Vec2& p_i, const Vec2& p_j, double chi) {
  const Vec2 d = p_i - p_j;
  const double d2 = d.squaredNorm();
  if (d2 == 0.0) throw Error("potential_gradient: coincident agents");
  if (d2 > chi * chi) return Vec2::Zero();
  return (-2.0 / (d2 * d2) - 2.0 / d2) * d;
}

inline Vec2 mean_row(const Points& p) { return p.colwise().mean().transpose(); }

/// Optimal centralized accelerations with direction-preserving clip to mu.
inline Points centralized_controller(const SwarmState& s, const Points& r_tilde, const FlockingConfig& cfg) {
  const int n = static_cast<int>(s.positions.rows());
  const Vec2 r_bar = mean_row(r_tilde);
  const double c = -1.0 / (2.0 * cfg.ts_seconds);
  Points u(n, 2);
  for (int i = 0; i < n; ++i) {
    Vec2 grad = Vec2::Zero();
    const Vec2 p_i = s.positions.row(i).transpose();
    for (int j = 0; j < n; ++j)
      if (j != i) grad += potential_gradient(p_i, s.positions.row(j).transpose(), cfg.chi_potential);
    const Vec2 ui = c * (s.velocities.row(i).transpose() - r_bar) + c * grad;
    u.row(i) = clip_norm(ui, cfg.mu_max_accel).transpose();
  }
  return u;
}

/// Recorded closed-loop run; entry n of every sequence belongs to step n.
struct FlockingTrajectory {
  std::vector<Points> positions;
  std::vector<Points> velocities;
  std::vector<Points> r_tilde;
  std::vector<Points> accels;  // applied (clipped)
  std::vector<Graph> graphs;
  std::vector<Vec2> reference;
  std::vector<double> costs;
  std::vector<double> consensus;  // mean_i ||v_{i,n} - r_n||

  int steps() const { return static_cast<int>(positions.size()); }
};

/// Hop sets N^k_{i,n}, k = 0..k_hops: N^0 = {i} and
/// N^k_{i,n} = union over j in N_{i,n} of N^{k-1}_{j,n-1}. Hop k uses the graphs
/// at steps n, n-1, ..., n-k+1; hops with k > n are omitted.
inline std::vector<std::vector<int>> hop_sets(std::span<const Graph> graphs, int n, int i, int k_hops) {
  if (n < 0 || n >= static_cast<int>(graphs.size())) throw Error("hop_sets: step out of range");
  const int nodes = graphs[n].n_nodes();
  std::vector<std::vector<int>> sets{{i}};
  std::vector<char> frontier(nodes, 0);
  frontier[i] = 1;
  for (int k = 1; k <= std::min(k_hops, n); ++k) {
    const Matrix& s = graphs[n - k + 1].gso();
    std::vector<char> next(nodes, 0);
    for (int a = 0; a < nodes; ++a)
      if (frontier[a])
        for (int b = 0; b < nodes; ++b)
          if (s(a, b) != 0.0) next[b] = 1;
    std::vector<int> members;
    for (int b = 0; b < nodes; ++b)
      if (next[b]) members.push_back(b);
    sets.push_back(std::move(members));
    frontier = std::move(next);
  }
  return sets;
}

/// Delayed decentralized baseline at step n from the history in `hist`
/// (steps 0..n recorded). The reference estimate averages, over nonempty hop
/// sets, the k-step-old observations of the k-hop neighbors; the potential
/// term uses their k-step-old positions.
inline Points decentralized_controller(const FlockingTrajectory& hist, int n, const FlockingConfig& cfg) {
  if (n < 0 || n >= hist.steps() || static_cast<int>(hist.graphs.size()) <= n ||
      static_cast<int>(hist.r_tilde.size()) <= n)
    throw Error("decentralized_controller: history does not reach step " + std::to_string(n));
  const Points& pos = hist.positions[n];
  const Points& vel = hist.velocities[n];
  const int agents = static_cast<int>(pos.rows());
  const double c = -1.0 / (2.0 * cfg.ts_seconds);
  Points u(agents, 2);
  for (int i = 0; i < agents; ++i) {
    const auto sets = hop_sets(hist.graphs, n, i, cfg.k_hops);
    Vec2 r_est = Vec2::Zero();
    int used = 0;
    Vec2 grad = Vec2::Zero();
    const Vec2 p_i = pos.row(i).transpose();
    for (std::size_t k = 0; k < sets.size(); ++k) {
      if (sets[k].empty()) continue;
      const Points& obs = hist.r_tilde[n - k];
      Vec2 acc = Vec2::Zero();
      for (int j : sets[k]) acc += obs.row(j).transpose();
      r_est += acc / static_cast<double>(sets[k].size());
      ++used;
      if (k == 0) continue;
      for (int j : sets[k]) {
        if (j == i) continue;
        grad += potential_gradient(p_i, hist.positions[n - k].row(j).transpose(), cfg.chi_potential);
      }
    }
    r_est /= static_cast<double>(used);
    const Vec2 ui = c * (vel.row(i).transpose() - r_est) + c * grad;
    u.row(i) = clip_norm(ui, cfg.mu_max_accel).transpose();
  }
  return u;
}

/// c(u_n) = 1/(2N) sum ||v_i - mean r~||^2 + 1/(2N) sum ||ts u_i||^2.
inline double step_cost(const SwarmState& s, const Points& r_tilde, const Points& accel, double ts) {
  const int n = static_cast<int>(s.velocities.rows());
  const Vec2 r_bar = mean_row(r_tilde);
  double a = 0.0, b = 0.0;
  for (int i = 0; i < n; ++i) {
    a += (s.velocities.row(i).transpose() - r_bar).squaredNorm();
    b += (ts * accel.row(i)).squaredNorm();
  }
  return (a + b) / (2.0 * n);
}

/// Velocity disagreement term only (the cost with zero acceleration).
inline double consensus_cost(const Points& velocities, const Points& r_tilde) {
  const Vec2 r_bar = mean_row(r_tilde);
  double a = 0.0;
  for (int i = 0; i < velocities.rows(); ++i) a += (velocities.row(i).transpose() - r_bar).squaredNorm();
  return a / (2.0 * velocities.rows());
}

/// Unit-spacing sqrt(N) x sqrt(N) lattice.
inline Points mesh_grid_positions(int n_agents) {
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n_agents))));
  if (side * side != n_agents)
    throw ConfigError("mesh grid needs a square agent count, got " + std::to_string(n_agents));
  Points p(n_agents, 2);
  for (int a = 0; a < side; ++a)
    for (int b = 0; b < side; ++b) p.row(a * side + b) << a, b;
  return p;
}

/// Uniform positions in a square of area N / rho with a minimum spacing.
inline Points uniform_positions(int n_agents, double density, double min_spacing, Rng& rng) {
  const double side = std::sqrt(n_agents / density);
  Points p(n_agents, 2);
  constexpr int kMaxAttempts = 100000;
  for (int i = 0; i < n_agents; ++i) {
    int attempt = 0;
    for (;; ++attempt) {
      if (attempt == kMaxAttempts)
        throw Error("uniform_positions: cannot place agents with spacing " + std::to_string(min_spacing));
      const Vec2 c(uniform(rng, 0.0, side), uniform(rng, 0.0, side));
      bool ok = true;
      for (int j = 0; j < i && ok; ++j) ok = (p.row(j).transpose() - c).norm() >= min_spacing;
      if (ok) {
        p.row(i) = c.transpose();
        break;
      }
    }
  }
  return p;
}

/// Everything random about one trajectory.
struct FlockingScenario {
  std::vector<Vec2> reference;
  Points bias;
  SwarmState initial;
};

inline FlockingScenario make_scenario(const FlockingConfig& cfg, FlockingExperiment experiment,
                                      std::uint64_t seed) {
  cfg.validate();
  FlockingScenario sc;
  sc.reference = generate_reference(cfg, seed);
  sc.bias = sample_observation_bias(cfg.n_agents, cfg.obs_noise_norm, seed);
  // One velocity offset shared by the whole swarm.
  auto vel_rng = detail::stream(seed, 3);
  const Vec2 v0 = sc.reference[0] + gaussian_with_expected_norm(vel_rng, cfg.vel_noise_norm);
  sc.initial.velocities = v0.transpose().replicate(cfg.n_agents, 1);
  if (experiment == FlockingExperiment::static_grid) {
    sc.initial.positions = mesh_grid_positions(cfg.n_agents);
  } else {
    auto pos_rng = detail::stream(seed, 4);
    sc.initial.positions = uniform_positions(cfg.n_agents, cfg.density_rho0, cfg.min_spacing, pos_rng);
  }
  return sc;
}

/// Per-agent input features at one step as an F x N matrix:
/// rows (v_x, v_y, r~_x, r~_y[, q_x, q_y]) with q_i = sum_{j in N_i} (p_i - p_j).
inline Matrix flocking_features(FlockingExperiment experiment, const SwarmState& s, const Points& r_tilde,
                                const Graph& graph) {
  const int n = static_cast<int>(s.positions.rows());
  Matrix x(flocking_feature_count(experiment), n);
  x.row(0) = s.velocities.col(0).transpose();
  x.row(1) = s.velocities.col(1).transpose();
  x.row(2) = r_tilde.col(0).transpose();
  x.row(3) = r_tilde.col(1).transpose();
  if (experiment == FlockingExperiment::dynamic) {
    for (int i = 0; i < n; ++i) {
      Vec2 q = Vec2::Zero();
      for (int j : graph.neighbors(i)) q += (s.positions.row(i) - s.positions.row(j)).transpose();
      x(4, i) = q.x();
      x(5, i) = q.y();
    }
  }
  return x;
}

/// Pre-clip accelerations for step n given the history through step n.
using FlockingPolicy = std::function<Points(const FlockingTrajectory&, int)>;

/// Closed loop over cfg.t_steps steps. On the static grid positions stay
/// frozen (velocities still integrate the accelerations) and the graph is
/// fixed; otherwise the range graph is rebuilt from positions every step.
inline FlockingTrajectory simulate_flocking(const FlockingConfig& cfg, FlockingExperiment experiment,
                                            const FlockingScenario& sc, const FlockingPolicy& policy) {
  FlockingTrajectory tr;
  tr.reference = sc.reference;
  SwarmState state = sc.initial;
  const auto graph_at = [&](const Points& p) {
    Graph g = build_range_graph(p, cfg.comm_range_r);
    return cfg.normalize_gso ? spectrally_normalized(g) : g;
  };
  std::optional<Graph> fixed;
  if (experiment == FlockingExperiment::static_grid) fixed = graph_at(state.positions);
  for (int n = 0; n < cfg.t_steps; ++n) {
    tr.positions.push_back(state.positions);
    tr.velocities.push_back(state.velocities);
    tr.r_tilde.push_back(observe_reference(sc.reference[n], sc.bias));
    tr.graphs.push_back(fixed ? *fixed : graph_at(state.positions));
    Points u = policy(tr, n);
    for (int i = 0; i < u.rows(); ++i) u.row(i) = clip_norm(u.row(i).transpose(), cfg.mu_max_accel).transpose();
    if (!u.allFinite()) throw Error("simulate_flocking: non-finite acceleration at step " + std::to_string(n));
    tr.accels.push_back(u);
    tr.costs.push_back(step_cost(state, tr.r_tilde.back(), u, cfg.ts_seconds));
    double dev = 0.0;
    for (int i = 0; i < cfg.n_agents; ++i) dev += (state.velocities.row(i).transpose() - sc.reference[n]).norm();
    tr.consensus.push_back(dev / cfg.n_agents);
    SwarmState next = step_mobility(state, u, cfg.ts_seconds, cfg.mu_max_accel);
    if (experiment == FlockingExperiment::static_grid) next.positions = state.positions;
    state = std::move(next);
  }
  return tr;
}

inline FlockingPolicy centralized_policy(const FlockingConfig& cfg) {
  return [cfg](const FlockingTrajectory& tr, int n) {
    return centralized_controller({tr.positions[n], tr.velocities[n], n}, tr.r_tilde[n], cfg);
  };
}

inline FlockingPolicy decentralized_policy(const FlockingConfig& cfg) {
  return [cfg](const FlockingTrajectory& tr, int n) { return decentralized_controller(tr, n, cfg); };
}

/// Runs the network causally: the features at step n enter together with G_n.
inline FlockingPolicy stgnn_policy(const StgnnParams& params, FlockingExperiment experiment) {
  if (params.input_features() != flocking_feature_count(experiment) || params.output_features() != 2)
    throw Error("stgnn_policy: network maps " + std::to_string(params.input_features()) + " -> " +
                std::to_string(params.output_features()) + " features, task needs " +
                std::to_string(flocking_feature_count(experiment)) + " -> 2");
  auto net = std::make_shared<OnlineStgnn>(params);
  return [net, experiment](const FlockingTrajectory& tr, int n) {
    if (n == 0) net->reset();
    const Matrix x = flocking_features(experiment, {tr.positions[n], tr.velocities[n], n}, tr.r_tilde[n],
                                       tr.graphs[n]);
    return Points(net->step(tr.graphs[n], x).transpose());
  };
}

/// Teacher rollout packed as a training example (targets = applied u*).
inline Example flocking_example(const FlockingConfig& cfg, FlockingExperiment experiment, std::uint64_t seed,
                                FlockingTrajectory* trajectory = nullptr) {
  const auto sc = make_scenario(cfg, experiment, seed);
  auto tr = simulate_flocking(cfg, experiment, sc, centralized_policy(cfg));
  const int f = flocking_feature_count(experiment);
  Example ex;
  ex.seed = seed;
  ex.input = SpaceTimeSignal(f, cfg.n_agents, cfg.t_steps);
  ex.target = SpaceTimeSignal(2, cfg.n_agents, cfg.t_steps);
  for (int n = 0; n < cfg.t_steps; ++n) {
    const Matrix x = flocking_features(experiment, {tr.positions[n], tr.velocities[n], n}, tr.r_tilde[n],
                                       tr.graphs[n]);
    for (int g = 0; g < f; ++g) ex.input.feature(g).col(n) = x.row(g).transpose();
    ex.target.feature(0).col(n) = tr.accels[n].col(0);
    ex.target.feature(1).col(n) = tr.accels[n].col(1);
  }
  ex.graphs = tr.graphs;
  if (trajectory) *trajectory = std::move(tr);
  return ex;
}

/// n_examples teacher rollouts with seeds derive_seed(seed, index).
inline std::vector<Example> generate_flocking_dataset(const FlockingConfig& cfg, int n_examples,
                                                      FlockingExperiment experiment, std::uint64_t seed,
                                                      std::size_t jobs = 1) {
  std::vector<Example> out(n_examples);
  parallel_for(out.size(), jobs,
               [&](std::size_t i) { out[i] = flocking_example(cfg, experiment, derive_seed(seed, i)); });
  return out;
}

enum class PolicyKind { centralized, decentralized, stgnn };

inline std::string to_string(PolicyKind p) {
  switch (p) {
    case PolicyKind::centralized: return "centralized";
    case PolicyKind::decentralized: return "decentralized";
    case PolicyKind::stgnn: return "stgnn";
  }
  return "?";
}

inline FlockingTrajectory rollout_policy(PolicyKind kind, const FlockingConfig& cfg,
                                         FlockingExperiment experiment, std::uint64_t seed,
                                         const StgnnParams* params = nullptr) {
  const auto sc = make_scenario(cfg, experiment, seed);
  switch (kind) {
    case PolicyKind::centralized: return simulate_flocking(cfg, experiment, sc, centralized_policy(cfg));
    case PolicyKind::decentralized: return simulate_flocking(cfg, experiment, sc, decentralized_policy(cfg));
    case PolicyKind::stgnn:
      if (!params) throw Error("rollout_policy: stgnn policy needs parameters");
      return simulate_flocking(cfg, experiment, sc, stgnn_policy(*params, experiment));
  }
  throw Error("rollout_policy: unknown policy");
}

/// Mean of the per-step costs over the last quarter of the horizon.
inline double final_quarter_cost(const FlockingTrajectory& tr) {
  const int t = static_cast<int>(tr.costs.size());
  const int start = t - std::max(1, t / 4);
  return mean(std::vector<double>(tr.costs.begin() + start, tr.costs.end()));
}

/// Velocity disagreement at the last recorded step.
inline double final_consensus_cost(const FlockingTrajectory& tr) {
  return consensus_cost(tr.velocities.back(), tr.r_tilde.back());
}

struct RelativeCostRow {
  double value = 0.0;  // density or delta_ts
  double mean_final_cost = 0.0;
  double relative_cost = 0.0;
};

namespace detail {

inline double mean_final_cost(const StgnnParams& params, const FlockingConfig& cfg, int n_signals,
                              std::uint64_t seed, std::size_t jobs) {
  std::vector<double> costs(n_signals);
  parallel_for(costs.size(), jobs, [&](std::size_t i) {
    costs[i] = final_consensus_cost(
        rollout_policy(PolicyKind::stgnn, cfg, FlockingExperiment::dynamic, derive_seed(seed, i), &params));
  });
  return mean(costs);
}

}  // namespace detail

/// ST-GNN rollouts at several initial densities; relative cost with respect
/// to the cost at rho_ref.
inline std::vector<RelativeCostRow> density_sweep(const StgnnParams& params, const FlockingConfig& base,
                                                  const std::vector<double>& densities, int n_signals,
                                                  std::uint64_t seed, double rho_ref = 2.0,
                                                  std::size_t jobs = 1) {
  FlockingConfig cfg = base;
  cfg.density_rho0 = rho_ref;
  const double ref = detail::mean_final_cost(params, cfg, n_signals, seed, jobs);
  std::vector<RelativeCostRow> rows;
  for (double rho : densities) {
    cfg.density_rho0 = rho;
    const double c = rho == rho_ref ? ref : detail::mean_final_cost(params, cfg, n_signals, seed, jobs);
    rows.push_back({rho, c, (c - ref) / ref});
  }
  return rows;
}

/// ST-GNN rollouts re-simulated with sampling period ts + delta over the same
/// duration; relative cost with respect to delta = 0.
inline std::vector<RelativeCostRow> ts_sweep(const StgnnParams& params, const FlockingConfig& base,
                                             const std::vector<double>& delta_ts, int n_signals,
                                             std::uint64_t seed, std::size_t jobs = 1) {
  const double ref = detail::mean_final_cost(params, base, n_signals, seed, jobs);
  const double duration = (base.t_steps - 1) * base.ts_seconds;
  std::vector<RelativeCostRow> rows;
  for (double d : delta_ts) {
    FlockingConfig cfg = base;
    cfg.ts_seconds = base.ts_seconds + d;
    if (!(cfg.ts_seconds > 0)) throw ConfigError("ts_sweep: ts + delta must stay positive");
    cfg.t_steps = static_cast<int>(std::floor(duration / cfg.ts_seconds + 1e-9)) + 1;
    const double c = d == 0.0 ? ref : detail::mean_final_cost(params, cfg, n_signals, seed, jobs);
    rows.push_back({d, c, (c - ref) / ref});
  }
  return rows;
}

inline void write_relative_cost_csv(std::ostream& os, const std::string& key,
                                    const std::vector<RelativeCostRow>& rows) {
  os << key << ",mean_final_cost,relative_cost\n" << std::setprecision(17);
  for (const auto& r : rows) os << r.value << ',' << r.mean_final_cost << ',' << r.relative_cost << '\n';
}

}  // namespace stgnn
