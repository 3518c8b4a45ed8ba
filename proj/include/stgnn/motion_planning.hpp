#pragma once

#include <algorithm>
#include <ostream>
#include <string>
#include <vector>

#include "stgnn/common.hpp"
#include "stgnn/flocking.hpp"
#include "stgnn/graph.hpp"
#include "stgnn/hungarian.hpp"
#include "stgnn/signal.hpp"
#include "stgnn/stgnn.hpp"

namespace stgnn {

struct PlanningConfig {
  int n_agents = 12;
  int m_neighbors = 5;
  double min_spacing = 1.5;      // m, between starts and between goals
  double initial_speed = 0.0;    // m/s, random heading per agent
  double mu_max_accel = 5.0;     // m/s^2
  int t_steps = 30;
  double ts_seconds = 0.1;
  double arena_side = 0.0;       // m; 0 = 2 d sqrt(N)
  double max_displacement = 1.4; // m, goal offset from a start when sampling
  int max_attempts = 1000;       // rejected instances tolerated per generated one
  bool absolute_features = false;

  int feature_count() const { return 6 * m_neighbors + 4; }

  double side() const {
    return arena_side > 0 ? arena_side : 2.0 * min_spacing * std::sqrt(static_cast<double>(n_agents));
  }

  void validate() const {
    if (n_agents < 1) throw ConfigError("planning: n_agents must be >= 1");
    if (m_neighbors < 0) throw ConfigError("planning: m_neighbors must be >= 0");
    if (t_steps < 2) throw ConfigError("planning: t_steps must be >= 2");
    if (!(ts_seconds > 0) || !(mu_max_accel > 0) || min_spacing < 0 || initial_speed < 0 ||
        arena_side < 0 || max_displacement < 0)
      throw ConfigError("planning: ts and mu must be positive, lengths nonnegative");
    if (max_attempts < 1) throw ConfigError("planning: max_attempts must be >= 1");
  }
};

struct PlanningInstance {
  Points starts;
  Points goals;
  Points initial_velocities;
  double min_spacing = 0.0;
  int t_steps = 0;
  double ts = 0.1;

  int n_agents() const { return static_cast<int>(starts.rows()); }
};

/// Goal index phi[i] for every agent, minimizing the summed squared distance;
/// ties go to the lexicographically smallest phi.
inline std::vector<int> capt_assignment(const Points& starts, const Points& goals) {
  if (starts.rows() != goals.rows())
    throw Error("capt_assignment: " + std::to_string(starts.rows()) + " starts vs " +
                std::to_string(goals.rows()) + " goals");
  const int n = static_cast<int>(starts.rows());
  Matrix cost(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) cost(i, j) = (starts.row(i) - goals.row(j)).squaredNorm();
  return solve_assignment_lexicographic(cost);
}

/// Per-step N x 2 positions, velocities and accelerations.
struct CaptPlan {
  std::vector<Points> positions, velocities, accels;
};

/// Constant-speed straight lines start_i -> goal_phi(i) over T - 1 steps.
/// v_n = (p_{n+1} - p_n) / ts and u_n = (v_n - v_{n-1}) / ts with v_{-1} the
/// initial velocity; the last step repeats the final difference.
inline CaptPlan capt_trajectories(const PlanningInstance& inst, const std::vector<int>& phi) {
  const int n = inst.n_agents(), t = inst.t_steps;
  if (static_cast<int>(phi.size()) != n) throw Error("capt_trajectories: assignment size mismatch");
  if (t < 2) throw Error("capt_trajectories: need at least two steps");
  CaptPlan plan;
  Points goal(n, 2);
  for (int i = 0; i < n; ++i) goal.row(i) = inst.goals.row(phi[i]);
  for (int k = 0; k < t; ++k) {
    const double a = static_cast<double>(k) / (t - 1);
    plan.positions.push_back((1.0 - a) * inst.starts + a * goal);
  }
  for (int k = 0; k + 1 < t; ++k) plan.velocities.push_back((plan.positions[k + 1] - plan.positions[k]) / inst.ts);
  plan.velocities.push_back(plan.velocities.back());
  for (int k = 0; k + 1 < t; ++k) {
    const Points& prev = k == 0 ? inst.initial_velocities : plan.velocities[k - 1];
    plan.accels.push_back((plan.velocities[k] - prev) / inst.ts);
  }
  plan.accels.push_back(plan.accels.back());
  return plan;
}

namespace detail {

inline std::vector<int> nearest_points(const Points& targets, const Vec2& from, int m) {
  std::vector<int> idx(targets.rows());
  std::iota(idx.begin(), idx.end(), 0);
  const auto d2 = [&](int j) { return (targets.row(j).transpose() - from).squaredNorm(); };
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return d2(a) < d2(b); });
  if (static_cast<int>(idx.size()) > m) idx.resize(m);
  return idx;
}

}  // namespace detail

/// (6M + 4) x N features at one step. Rows: own p (2), own v (2), positions of
/// the M nearest agents (2M), their velocities (2M), the M nearest goals (2M);
/// neighbors and goals closest first, zero padded. In relative mode positions
/// are taken from the owning agent and own p from the goal centroid.
inline Matrix planning_features(const Points& positions, const Points& velocities, const Points& goals, int m,
                                bool absolute = false) {
  const int n = static_cast<int>(positions.rows());
  Matrix x = Matrix::Zero(6 * m + 4, n);
  const Vec2 centroid = absolute ? Vec2::Zero() : mean_row(goals);
  for (int i = 0; i < n; ++i) {
    const Vec2 p = positions.row(i).transpose();
    const Vec2 origin = absolute ? Vec2::Zero() : p;
    x.block<2, 1>(0, i) = p - centroid;
    x.block<2, 1>(2, i) = velocities.row(i).transpose();
    const auto nbrs = nearest_neighbors(positions, i, m);
    for (std::size_t a = 0; a < nbrs.size(); ++a) {
      x.block<2, 1>(4 + 2 * a, i) = positions.row(nbrs[a]).transpose() - origin;
      x.block<2, 1>(4 + 2 * m + 2 * a, i) = velocities.row(nbrs[a]).transpose();
    }
    const auto near_goals = detail::nearest_points(goals, p, m);
    for (std::size_t a = 0; a < near_goals.size(); ++a)
      x.block<2, 1>(4 + 4 * m + 2 * a, i) = goals.row(near_goals[a]).transpose() - origin;
  }
  return x;
}

/// Features over a whole run, one step per time sample.
inline SpaceTimeSignal assemble_features(const std::vector<Points>& positions, const std::vector<Points>& velocities,
                                         const Points& goals, int m, bool absolute = false) {
  if (positions.empty() || positions.size() != velocities.size())
    throw Error("assemble_features: need matching nonempty position/velocity sequences");
  const int n = static_cast<int>(positions.front().rows());
  const int t = static_cast<int>(positions.size());
  SpaceTimeSignal s(6 * m + 4, n, t);
  for (int k = 0; k < t; ++k) {
    const Matrix x = planning_features(positions[k], velocities[k], goals, m, absolute);
    for (int f = 0; f < x.rows(); ++f) s.feature(f).col(k) = x.row(f).transpose();
  }
  return s;
}

struct FinalDistance {
  double mean = 0.0;
  double population_variance = 0.0;
  double sample_variance = 0.0;
};

/// Distances between final positions and goals under the assignment that
/// minimizes their sum (agents are unlabeled).
inline FinalDistance evaluate_final_distance(const Points& final_positions, const Points& goals) {
  if (final_positions.rows() != goals.rows()) throw Error("evaluate_final_distance: count mismatch");
  const int n = static_cast<int>(goals.rows());
  Matrix cost(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) cost(i, j) = (final_positions.row(i) - goals.row(j)).norm();
  const auto col = solve_assignment(cost);
  std::vector<double> d(n);
  for (int i = 0; i < n; ++i) d[i] = cost(i, col[i]);
  return {mean(d), population_variance(d), sample_variance(d)};
}

/// Communication graph among agents: M-nearest neighbors, clamped to N - 1.
inline Graph planning_graph(const Points& positions, int m) {
  const int n = static_cast<int>(positions.rows());
  if (n < 2) return Graph::empty(n);
  return build_knn_graph(positions, std::clamp(m, 1, n - 1));
}

struct GenerationStats {
  long generated = 0;
  long rejected = 0;
};

namespace detail {

inline bool spaced(const Points& p, int upto, const Vec2& c, double d) {
  for (int j = 0; j < upto; ++j)
    if ((p.row(j).transpose() - c).norm() < d) return false;
  return true;
}

inline double first_step_accel(const PlanningInstance& inst) {
  const auto plan = capt_trajectories(inst, capt_assignment(inst.starts, inst.goals));
  return plan.accels.front().rowwise().norm().maxCoeff();
}

}  // namespace detail

/// Starts uniform in the arena with minimum spacing; goals displaced from the
/// starts by at most max_displacement, also spaced, then shuffled. Instances
/// whose CAPT first-step acceleration exceeds mu are rejected and redrawn.
inline PlanningInstance generate_instance(const PlanningConfig& cfg, std::uint64_t seed,
                                          GenerationStats* stats = nullptr) {
  cfg.validate();
  auto rng = make_rng(seed);
  const int n = cfg.n_agents;
  const double side = cfg.side();
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    PlanningInstance inst;
    inst.min_spacing = cfg.min_spacing;
    inst.t_steps = cfg.t_steps;
    inst.ts = cfg.ts_seconds;
    inst.starts = uniform_positions(n, n / (side * side), cfg.min_spacing, rng);
    inst.goals.resize(n, 2);
    bool ok = true;
    for (int i = 0; i < n && ok; ++i) {
      ok = false;
      for (int tries = 0; tries < 1000 && !ok; ++tries) {
        const double r = cfg.max_displacement * std::sqrt(uniform(rng, 0.0, 1.0));
        const double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        const Vec2 g = inst.starts.row(i).transpose() + r * Vec2(std::cos(a), std::sin(a));
        if (detail::spaced(inst.goals, i, g, cfg.min_spacing)) {
          inst.goals.row(i) = g.transpose();
          ok = true;
        }
      }
    }
    inst.initial_velocities = Points::Zero(n, 2);
    for (int i = 0; i < n; ++i) {
      const double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      inst.initial_velocities.row(i) << cfg.initial_speed * std::cos(a), cfg.initial_speed * std::sin(a);
    }
    if (ok) {
      std::vector<int> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      const Points g = inst.goals;
      for (int i = 0; i < n; ++i) inst.goals.row(i) = g.row(order[i]);
      ok = detail::first_step_accel(inst) <= cfg.mu_max_accel * (1.0 + 1e-12);
    }
    if (ok) {
      if (stats) ++stats->generated;
      return inst;
    }
    if (stats) ++stats->rejected;
  }
  throw Error("generate_instance: no feasible instance within " + std::to_string(cfg.max_attempts) +
              " attempts (seed " + std::to_string(seed) + ")");
}

/// State sequence of a planning run (T entries).
struct PlanningRun {
  std::vector<Points> positions, velocities, accels;
  std::vector<Graph> graphs;
};

/// Teacher run: mobility driven by the CAPT accelerations, packed with the
/// features observed along the way.
inline Example planning_example(const PlanningConfig& cfg, const PlanningInstance& inst, std::uint64_t seed) {
  const auto plan = capt_trajectories(inst, capt_assignment(inst.starts, inst.goals));
  SwarmState s{inst.starts, inst.initial_velocities, 0};
  PlanningRun run;
  for (int k = 0; k < inst.t_steps; ++k) {
    run.positions.push_back(s.positions);
    run.velocities.push_back(s.velocities);
    run.graphs.push_back(planning_graph(s.positions, cfg.m_neighbors));
    if (k + 1 < inst.t_steps) s = step_mobility(s, plan.accels[k], inst.ts, cfg.mu_max_accel);
  }
  Example ex;
  ex.seed = seed;
  ex.input = assemble_features(run.positions, run.velocities, inst.goals, cfg.m_neighbors, cfg.absolute_features);
  ex.target = SpaceTimeSignal(2, inst.n_agents(), inst.t_steps);
  for (int k = 0; k < inst.t_steps; ++k) {
    ex.target.feature(0).col(k) = plan.accels[k].col(0);
    ex.target.feature(1).col(k) = plan.accels[k].col(1);
  }
  ex.graphs = std::move(run.graphs);
  return ex;
}

/// Closed-loop network run over T - 1 moves. `graph_m` sets the communication
/// graph (features always use cfg.m_neighbors); `ts` is the physics period.
inline PlanningRun rollout_planning(const StgnnParams& params, const PlanningConfig& cfg,
                                    const PlanningInstance& inst, int graph_m, double ts) {
  if (params.input_features() != cfg.feature_count() || params.output_features() != 2)
    throw Error("rollout_planning: network maps " + std::to_string(params.input_features()) + " -> " +
                std::to_string(params.output_features()) + " features, task needs " +
                std::to_string(cfg.feature_count()) + " -> 2");
  OnlineStgnn net(params);
  SwarmState s{inst.starts, inst.initial_velocities, 0};
  PlanningRun run;
  for (int k = 0; k < inst.t_steps; ++k) {
    run.positions.push_back(s.positions);
    run.velocities.push_back(s.velocities);
    run.graphs.push_back(planning_graph(s.positions, graph_m));
    const Matrix x = planning_features(s.positions, s.velocities, inst.goals, cfg.m_neighbors, cfg.absolute_features);
    Points u = net.step(run.graphs.back(), x).transpose();
    for (int i = 0; i < u.rows(); ++i) u.row(i) = clip_norm(u.row(i).transpose(), cfg.mu_max_accel).transpose();
    if (!u.allFinite()) throw Error("rollout_planning: non-finite acceleration at step " + std::to_string(k));
    run.accels.push_back(u);
    if (k + 1 < inst.t_steps) s = step_mobility(s, u, ts, cfg.mu_max_accel);
  }
  return run;
}

inline FinalDistance planning_final_distance(const StgnnParams& params, const PlanningConfig& cfg,
                                             const PlanningInstance& inst) {
  return evaluate_final_distance(rollout_planning(params, cfg, inst, cfg.m_neighbors, cfg.ts_seconds).positions.back(),
                                 inst.goals);
}

/// Mean d_pg over instances (each instance's mean final distance, averaged).
inline double mean_final_distance(const StgnnParams& params, const PlanningConfig& cfg,
                                  const std::vector<PlanningInstance>& instances, int graph_m, double ts,
                                  std::size_t jobs = 1) {
  std::vector<double> d(instances.size());
  parallel_for(instances.size(), jobs, [&](std::size_t i) {
    d[i] = evaluate_final_distance(rollout_planning(params, cfg, instances[i], graph_m, ts).positions.back(),
                                   instances[i].goals).mean;
  });
  return mean(d);
}

inline std::vector<PlanningInstance> generate_instances(const PlanningConfig& cfg, int count, std::uint64_t seed,
                                                        GenerationStats* stats = nullptr, std::size_t jobs = 1) {
  std::vector<PlanningInstance> out(count);
  std::vector<GenerationStats> per(count);
  parallel_for(out.size(), jobs, [&](std::size_t i) { out[i] = generate_instance(cfg, derive_seed(seed, i), &per[i]); });
  if (stats)
    for (const auto& s : per) {
      stats->generated += s.generated;
      stats->rejected += s.rejected;
    }
  return out;
}

struct SensitivityRow {
  std::string sweep;  // "delta_m" or "delta_ts"
  double delta = 0.0;
  double mean_dpg = 0.0;
  double relative_error = 0.0;
  std::string note;
};

/// Relative change of d_pg when the graph uses M + dM neighbors or the physics
/// runs at ts + dTs, against the unperturbed rollout on the same instances.
inline std::vector<SensitivityRow> sensitivity_sweep(const StgnnParams& params, const PlanningConfig& cfg,
                                                     const std::vector<int>& delta_m,
                                                     const std::vector<double>& delta_ts,
                                                     const std::vector<PlanningInstance>& instances,
                                                     std::size_t jobs = 1) {
  const double base = mean_final_distance(params, cfg, instances, cfg.m_neighbors, cfg.ts_seconds, jobs);
  std::vector<SensitivityRow> rows;
  for (int dm : delta_m) {
    const int m = cfg.m_neighbors + dm;
    if (m < 1 || m > cfg.n_agents - 1) {
      rows.push_back({"delta_m", static_cast<double>(dm), 0.0, 0.0,
                      "skipped: M + dM = " + std::to_string(m) + " outside 1..N-1"});
      continue;
    }
    const double d = dm == 0 ? base : mean_final_distance(params, cfg, instances, m, cfg.ts_seconds, jobs);
    rows.push_back({"delta_m", static_cast<double>(dm), d, (d - base) / base, ""});
  }
  for (double dt : delta_ts) {
    const double ts = cfg.ts_seconds + dt;
    if (!(ts > 0)) {
      rows.push_back({"delta_ts", dt, 0.0, 0.0, "skipped: ts + dTs must be positive"});
      continue;
    }
    const double d = dt == 0.0 ? base : mean_final_distance(params, cfg, instances, cfg.m_neighbors, ts, jobs);
    rows.push_back({"delta_ts", dt, d, (d - base) / base, ""});
  }
  return rows;
}

inline void write_sensitivity_csv(std::ostream& os, const std::vector<SensitivityRow>& rows) {
  os << "sweep,delta,mean_dpg,relative_error,note\n" << std::setprecision(17);
  for (const auto& r : rows)
    os << r.sweep << ',' << r.delta << ',' << r.mean_dpg << ',' << r.relative_error << ',' << r.note << '\n';
}

}  // namespace stgnn
