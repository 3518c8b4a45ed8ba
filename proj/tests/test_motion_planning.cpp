#include <gtest/gtest.h>

#include "oracles.hpp"
#include "stgnn/motion_planning.hpp"

using namespace stgnn;

namespace {

Points points(std::initializer_list<std::pair<double, double>> xy) {
  Points p(static_cast<int>(xy.size()), 2);
  int i = 0;
  for (auto [x, y] : xy) p.row(i++) << x, y;
  return p;
}

Points random_points(int n, Rng& rng, double side = 5.0) {
  Points p(n, 2);
  for (int i = 0; i < n; ++i) p.row(i) << uniform(rng, 0, side), uniform(rng, 0, side);
  return p;
}

// Multiples of 1/8 in [0, 8): sums and differences stay exact.
Points dyadic_points(int n, Rng& rng) {
  std::uniform_int_distribution<int> d(0, 63);
  Points p(n, 2);
  for (int i = 0; i < n; ++i) p.row(i) << d(rng) / 8.0, d(rng) / 8.0;
  return p;
}

Matrix squared_costs(const Points& a, const Points& b) {
  Matrix c(a.rows(), b.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.rows(); ++j) c(i, j) = (a.row(i) - b.row(j)).squaredNorm();
  return c;
}

PlanningInstance line_instance(const Points& starts, const Points& goals, int t, double ts) {
  PlanningInstance inst;
  inst.starts = starts;
  inst.goals = goals;
  inst.initial_velocities = Points::Zero(starts.rows(), 2);
  inst.t_steps = t;
  inst.ts = ts;
  return inst;
}

}  // namespace

TEST(CaptAssignment, CoincidentGoalsGiveIdentity) {
  Rng rng(1);
  const Points p = random_points(5, rng);
  EXPECT_EQ(capt_assignment(p, p), identity_permutation(5));
}

TEST(CaptAssignment, CrossedPairIsSwapped) {
  const Points starts = points({{0, 0}, {4, 0}});
  const Points goals = points({{4, 1}, {0, 1}});
  const auto phi = capt_assignment(starts, goals);
  EXPECT_EQ(phi, (std::vector<int>{1, 0}));
  const Matrix c = squared_costs(starts, goals);
  EXPECT_LT(c(0, 1) + c(1, 0), c(0, 0) + c(1, 1));
}

TEST(CaptAssignment, TiesGoToLexicographicallySmallest) {
  // Both pairings of a unit square's diagonals cost 2.
  EXPECT_EQ(capt_assignment(points({{0, 0}, {1, 1}}), points({{1, 0}, {0, 1}})), (std::vector<int>{0, 1}));
  EXPECT_EQ(capt_assignment(points({{0, 0}, {1, 1}}), points({{0, 1}, {1, 0}})), (std::vector<int>{0, 1}));
  // Four agents on the corners of a square, goals on the same corners rotated:
  // many optimal pairings, the first in lexicographic order wins.
  const Points sq = points({{0, 0}, {1, 0}, {1, 1}, {0, 1}});
  const auto phi = capt_assignment(sq, sq);
  EXPECT_EQ(phi, identity_permutation(4));
}

TEST(CaptAssignment, MatchesBruteForce) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + trial % 6;
    const Points s = random_points(n, rng), g = random_points(n, rng);
    EXPECT_EQ(capt_assignment(s, g), oracle::brute_force_assignment(squared_costs(s, g))) << "trial " << trial;
  }
}

TEST(CaptAssignment, TiedDyadicInstancesMatchBruteForce) {
  // Coarse integer grids produce many exact ties.
  Rng rng(3);
  std::uniform_int_distribution<int> d(0, 2);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 3 + trial % 4;
    Points s(n, 2), g(n, 2);
    for (int i = 0; i < n; ++i) s.row(i) << d(rng), d(rng), g.row(i) << d(rng), d(rng);
    EXPECT_EQ(capt_assignment(s, g), oracle::brute_force_assignment(squared_costs(s, g))) << "trial " << trial;
  }
}

TEST(CaptAssignment, NoWorseThanIdentity) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const Points s = random_points(8, rng), g = random_points(8, rng);
    const Matrix c = squared_costs(s, g);
    EXPECT_LE(assignment_cost(c, capt_assignment(s, g)), assignment_cost(c, identity_permutation(8)));
  }
}

TEST(CaptAssignment, RejectsCountMismatch) {
  EXPECT_THROW(capt_assignment(Points::Zero(2, 2), Points::Zero(3, 2)), Error);
}

TEST(CaptTrajectories, StationaryAgent) {
  const Points p = points({{1, 2}});
  const auto plan = capt_trajectories(line_instance(p, p, 10, 0.1), {0});
  for (int k = 0; k < 10; ++k) {
    EXPECT_EQ(plan.positions[k], p);
    EXPECT_EQ(plan.velocities[k], Points::Zero(1, 2));
    EXPECT_EQ(plan.accels[k], Points::Zero(1, 2));
  }
}

TEST(CaptTrajectories, UnitSegmentHasUnitSpeed) {
  const auto plan = capt_trajectories(line_instance(points({{0, 0}}), points({{0.6, 0.8}}), 11, 0.1), {0});
  ASSERT_EQ(plan.velocities.size(), 11u);
  for (const auto& v : plan.velocities) EXPECT_NEAR(v.row(0).norm(), 1.0, 1e-12);
  EXPECT_EQ(Vec2(plan.positions.back().row(0).transpose()), Vec2(0.6, 0.8));
}

TEST(CaptTrajectories, AccelerationOnlyOnFirstStep) {
  Rng rng(5);
  const Points s = random_points(4, rng), g = random_points(4, rng);
  const auto inst = line_instance(s, g, 30, 0.1);
  const auto plan = capt_trajectories(inst, capt_assignment(s, g));
  EXPECT_LE((plan.accels[0] - plan.velocities[0] / 0.1).cwiseAbs().maxCoeff(), 1e-12);
  for (std::size_t k = 1; k < plan.accels.size(); ++k) EXPECT_LE(plan.accels[k].cwiseAbs().maxCoeff(), 1e-9);
}

TEST(CaptTrajectories, FirstStepAccountsForInitialVelocity) {
  auto inst = line_instance(points({{0, 0}}), points({{2.9, 0}}), 30, 0.1);
  inst.initial_velocities = points({{0, 1}});
  const auto plan = capt_trajectories(inst, {0});
  EXPECT_NEAR(plan.accels[0](0, 0), 10.0, 1e-9);
  EXPECT_NEAR(plan.accels[0](0, 1), -10.0, 1e-9);
}

TEST(CaptTrajectories, ParallelLinesKeepSpacing) {
  const double d = 1.5;
  const auto inst = line_instance(points({{0, 0}, {0, d}}), points({{3, 0}, {3, d}}), 20, 0.1);
  const auto plan = capt_trajectories(inst, capt_assignment(inst.starts, inst.goals));
  for (const auto& p : plan.positions) EXPECT_GE((p.row(0) - p.row(1)).norm(), d - 1e-12);
}

TEST(PlanningFeatures, SingleAgentWithoutNeighbors) {
  const Points p = points({{1, 2}}), v = points({{0.5, -0.5}}), g = points({{3, 3}});
  const Matrix x = planning_features(p, v, g, 0);
  ASSERT_EQ(x.rows(), 4);
  EXPECT_EQ(x(0, 0), -2.0);
  EXPECT_EQ(x(1, 0), -1.0);
  EXPECT_EQ(x(2, 0), 0.5);
  EXPECT_EQ(x(3, 0), -0.5);
}

TEST(PlanningFeatures, SingleAgentIsZeroPadded) {
  const Matrix x = planning_features(points({{1, 2}}), points({{0, 0}}), points({{3, 3}}), 2);
  ASSERT_EQ(x.rows(), 16);
  // Neighbor slots stay empty; the only goal fills the first goal slot.
  EXPECT_EQ(x.block(4, 0, 8, 1), Matrix::Zero(8, 1));
  EXPECT_EQ(x(12, 0), 2.0);
  EXPECT_EQ(x(13, 0), 1.0);
  EXPECT_EQ(x.block(14, 0, 2, 1), Matrix::Zero(2, 1));
}

TEST(PlanningFeatures, TwoAgentsSeeEachOther) {
  const Points p = points({{0, 0}, {2, 0}}), v = points({{1, 0}, {0, 1}}), g = points({{0, 1}, {2, 3}});
  const Matrix x = planning_features(p, v, g, 1);
  ASSERT_EQ(x.rows(), 10);
  // Agent 0: centroid (1, 2); neighbor at +2 x with velocity (0, 1); nearest goal (0, 1).
  EXPECT_EQ(x.col(0), (Vector(10) << -1, -2, 1, 0, 2, 0, 0, 1, 0, 1).finished());
  // Agent 1: goal (0, 1) at sqrt(5) beats (2, 3) at 3.
  EXPECT_EQ(x.col(1), (Vector(10) << 1, -2, 0, 1, -2, 0, 1, 0, -2, 1).finished());
  const Matrix abs = planning_features(p, v, g, 1, true);
  EXPECT_EQ(abs(4, 1), 0.0);
  EXPECT_EQ(abs(0, 1), 2.0);
}

TEST(PlanningFeatures, PermutationEquivariant) {
  Rng rng(6);
  const int n = 7;
  const Points p = random_points(n, rng), v = random_points(n, rng), g = random_points(n, rng);
  const auto perm = oracle::random_permutation(n, rng);
  const Matrix pm = permutation_matrix(perm);
  const Matrix x = planning_features(p, v, g, 3);
  const Matrix y = planning_features(pm * p, pm * v, g, 3);
  for (int i = 0; i < n; ++i) EXPECT_EQ(y.col(perm[i]), x.col(i));
}

TEST(PlanningFeatures, TranslationInvariant) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    // Eight agents keep the centroid division exact.
    const int n = 8;
    const Points p = dyadic_points(n, rng), v = dyadic_points(n, rng);
    const Points g = dyadic_points(n, rng);
    Points p2 = p, g2 = g;
    p2.rowwise() += Vec2(16, -32).transpose();
    g2.rowwise() += Vec2(16, -32).transpose();
    EXPECT_EQ(planning_features(p, v, g, 2), planning_features(p2, v, g2, 2));
  }
}

TEST(PlanningFeatures, AssembleStacksSteps) {
  Rng rng(8);
  std::vector<Points> ps, vs;
  for (int k = 0; k < 4; ++k) ps.push_back(random_points(3, rng)), vs.push_back(random_points(3, rng));
  const Points g = random_points(3, rng);
  const auto s = assemble_features(ps, vs, g, 1);
  ASSERT_EQ(s.features(), 10);
  for (int k = 0; k < 4; ++k) {
    const Matrix x = planning_features(ps[k], vs[k], g, 1);
    for (int f = 0; f < 10; ++f)
      for (int i = 0; i < 3; ++i) EXPECT_EQ(s(f, i, k), x(f, i));
  }
  EXPECT_THROW(assemble_features({}, {}, g, 1), Error);
}

TEST(FinalDistance, Examples) {
  Rng rng(9);
  const Points g = random_points(5, rng);
  const auto zero = evaluate_final_distance(g, g);
  EXPECT_EQ(zero.mean, 0.0);
  EXPECT_EQ(zero.population_variance, 0.0);
  // Goals far apart, each agent 1 m from its own goal.
  const Points goals = points({{0, 0}, {10, 0}, {0, 10}});
  Points fin = goals;
  fin(0, 0) += 1, fin(1, 1) += 1, fin(2, 0) -= 1;
  const auto r = evaluate_final_distance(fin, goals);
  EXPECT_NEAR(r.mean, 1.0, 1e-15);
  EXPECT_NEAR(r.population_variance, 0.0, 1e-15);
}

TEST(FinalDistance, MatchesBruteForceOracle) {
  Rng rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 2 + trial % 5;
    const Points f = random_points(n, rng), g = random_points(n, rng);
    Matrix c(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) c(i, j) = (f.row(i) - g.row(j)).norm();
    const auto col = oracle::brute_force_assignment(c);
    double m = 0;
    for (int i = 0; i < n; ++i) m += c(i, col[i]);
    m /= n;
    double var = 0;
    for (int i = 0; i < n; ++i) var += (c(i, col[i]) - m) * (c(i, col[i]) - m);
    const auto r = evaluate_final_distance(f, g);
    EXPECT_NEAR(r.mean, m, 1e-12);
    EXPECT_NEAR(r.population_variance, var / n, 1e-12);
    EXPECT_NEAR(r.sample_variance, var / (n - 1), 1e-12);
  }
}

TEST(FinalDistance, InvariantToAgentOrder) {
  Rng rng(11);
  const Points f = random_points(6, rng), g = random_points(6, rng);
  const Matrix pm = permutation_matrix(oracle::random_permutation(6, rng));
  EXPECT_NEAR(evaluate_final_distance(pm * f, g).mean, evaluate_final_distance(f, g).mean, 1e-12);
}

TEST(PlanningGraph, KnnClampedToSwarm) {
  Rng rng(12);
  EXPECT_EQ(planning_graph(points({{0, 0}}), 5).n_nodes(), 1);
  const Points p = random_points(4, rng);
  // M beyond N - 1 connects everyone.
  EXPECT_EQ(planning_graph(p, 10).n_edges(), 6);
  EXPECT_EQ(planning_graph(p, 1).gso(), build_knn_graph(p, 1).gso());
}

TEST(InstanceGeneration, RespectsConstraints) {
  PlanningConfig cfg;
  GenerationStats stats;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto inst = generate_instance(cfg, seed, &stats);
    ASSERT_EQ(inst.n_agents(), cfg.n_agents);
    for (int i = 0; i < cfg.n_agents; ++i)
      for (int j = 0; j < i; ++j) {
        EXPECT_GE((inst.starts.row(i) - inst.starts.row(j)).norm(), cfg.min_spacing);
        EXPECT_GE((inst.goals.row(i) - inst.goals.row(j)).norm(), cfg.min_spacing);
      }
    const auto plan = capt_trajectories(inst, capt_assignment(inst.starts, inst.goals));
    for (const auto& u : plan.accels) EXPECT_LE(u.rowwise().norm().maxCoeff(), cfg.mu_max_accel * (1 + 1e-12));
  }
  EXPECT_EQ(stats.generated, 10);
  const auto a = generate_instance(cfg, 77), b = generate_instance(cfg, 77);
  EXPECT_EQ(a.starts, b.starts);
  EXPECT_EQ(a.goals, b.goals);
}

TEST(InstanceGeneration, InfeasibleConfigFails) {
  PlanningConfig cfg;
  cfg.mu_max_accel = 1e-6;
  cfg.max_attempts = 3;
  GenerationStats stats;
  EXPECT_THROW(generate_instance(cfg, 1, &stats), Error);
  EXPECT_EQ(stats.rejected, 3);
}

TEST(PlanningExample, TeacherRunEndsNearGoals) {
  PlanningConfig cfg;
  const auto inst = generate_instance(cfg, 5);
  const auto ex = planning_example(cfg, inst, 5);
  EXPECT_EQ(ex.input.features(), cfg.feature_count());
  EXPECT_EQ(ex.target.features(), 2);
  EXPECT_EQ(static_cast<int>(ex.graphs.size()), cfg.t_steps);
  // The mobility update integrates the trapezoid of the velocities, so the
  // run lags the straight line by half a step.
  const auto plan = capt_trajectories(inst, capt_assignment(inst.starts, inst.goals));
  const Points expect = plan.positions.back() - 0.5 * cfg.ts_seconds * plan.velocities.back();
  const Vec2 centroid = mean_row(inst.goals);
  for (int i = 0; i < cfg.n_agents; ++i) {
    EXPECT_NEAR(ex.input(0, i, cfg.t_steps - 1) + centroid.x(), expect(i, 0), 1e-9);
    EXPECT_NEAR(ex.input(1, i, cfg.t_steps - 1) + centroid.y(), expect(i, 1), 1e-9);
  }
}

TEST(PlanningRollout, ShapesAndDeterminism) {
  PlanningConfig cfg;
  cfg.n_agents = 5;
  cfg.m_neighbors = 2;
  cfg.min_spacing = 1.0;
  const auto params = make_params({cfg.feature_count(), 6, 2}, {2, 1}, Activation::identity, 3);
  const auto inst = generate_instance(cfg, 8);
  const auto a = rollout_planning(params, cfg, inst, cfg.m_neighbors, cfg.ts_seconds);
  const auto b = rollout_planning(params, cfg, inst, cfg.m_neighbors, cfg.ts_seconds);
  ASSERT_EQ(static_cast<int>(a.positions.size()), cfg.t_steps);
  EXPECT_EQ(a.positions.back(), b.positions.back());
  for (const auto& u : a.accels) EXPECT_LE(u.rowwise().norm().maxCoeff(), cfg.mu_max_accel * (1 + 1e-12));
  const auto wrong = make_params({5, 6, 2}, {2, 1}, Activation::identity, 3);
  EXPECT_THROW(rollout_planning(wrong, cfg, inst, 2, 0.1), Error);
}

TEST(SensitivitySweep, ZeroDeltasGiveZeroError) {
  PlanningConfig cfg;
  cfg.n_agents = 5;
  cfg.m_neighbors = 2;
  cfg.min_spacing = 1.0;
  const auto params = make_params({cfg.feature_count(), 6, 2}, {2, 1}, Activation::identity, 3);
  const auto instances = generate_instances(cfg, 3, 9);
  const auto rows = sensitivity_sweep(params, cfg, {-2, 0, 1, 3}, {0.0, 0.02, -0.2}, instances);
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[1].relative_error, 0.0);
  EXPECT_EQ(rows[4].relative_error, 0.0);
  EXPECT_FALSE(rows[0].note.empty());  // M = 0
  EXPECT_FALSE(rows[3].note.empty());  // M = 5 > N - 1
  EXPECT_TRUE(rows[2].note.empty());
  EXPECT_FALSE(rows[6].note.empty());  // negative period
  std::ostringstream os;
  write_sensitivity_csv(os, rows);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "sweep,delta,mean_dpg,relative_error,note");
}
