#pragma once

#include <functional>
#include <limits>
#include <ostream>
#include <span>
#include <vector>

#include "stgnn/common.hpp"
#include "stgnn/graph.hpp"
#include "stgnn/signal.hpp"
#include "stgnn/stfilter.hpp"
#include "stgnn/stgnn.hpp"
#include "stgnn/timeline.hpp"

namespace stgnn {

/// Matrix-free linear map on F x N x T signals together with its adjoint.
struct LinearStOperator {
  int features = 1;
  int nodes = 0;
  int steps = 0;
  std::function<SpaceTimeSignal(const SpaceTimeSignal&)> apply;
  std::function<SpaceTimeSignal(const SpaceTimeSignal&)> adjoint;

  SpaceTimeSignal operator()(const SpaceTimeSignal& x) const { return apply(x); }
  SpaceTimeSignal zero_signal() const { return SpaceTimeSignal(features, nodes, steps); }
};

/// Dense (F N T) x (F N T) matrix of an operator, in the signal's storage order.
inline Matrix materialize(const LinearStOperator& op) {
  const Eigen::Index dim = static_cast<Eigen::Index>(op.features) * op.nodes * op.steps;
  Matrix m(dim, dim);
  SpaceTimeSignal e = op.zero_signal();
  for (Eigen::Index j = 0; j < dim; ++j) {
    e.raw()[j] = 1.0;
    const auto col = op.apply(e);
    for (Eigen::Index i = 0; i < dim; ++i) m(i, j) = col.raw()[i];
    e.raw()[j] = 0.0;
  }
  return m;
}

inline LinearStOperator filter_operator(const FirFilter& filter, const Graph& graph, int steps,
                                        int features = 1) {
  return {features, graph.n_nodes(), steps,
          [filter, graph](const SpaceTimeSignal& x) { return apply_static(filter, graph, x); },
          [filter, graph](const SpaceTimeSignal& y) { return apply_static_adjoint(filter, graph, y); }};
}

/// sum_k h_k e^{-k ts S} x_{n-k}: the filter whose spectrum is `frequency_response`.
inline LinearStOperator exponential_filter_operator(const FirFilter& filter, const Graph& graph,
                                                    int steps, int features = 1) {
  return filter_operator(filter, exponential_gso(graph, filter.ts), steps, features);
}

/// Observation on a warped timeline (linear interpolation, clamped), as a matrix.
inline Matrix warp_matrix(const SamplingGrid& grid, const WarpFunction& warp) {
  const int t = grid.n_steps;
  Matrix w = Matrix::Zero(t, t);
  for (int k = 0; k < t; ++k) {
    const double pos = std::clamp(k + warp.z(grid.time(k)) / grid.ts, 0.0, static_cast<double>(t - 1));
    const int lo = std::min(static_cast<int>(std::floor(pos)), t - 1);
    const double frac = pos - lo;
    if (lo >= t - 1 || frac == 0.0) {
      w(k, lo) = 1.0;
    } else {
      w(k, lo) = 1.0 - frac;
      w(k, lo + 1) = frac;
    }
  }
  return w;
}

inline LinearStOperator warp_operator(const SamplingGrid& grid, const WarpFunction& warp, int nodes,
                                      int features = 1) {
  const Matrix w = warp_matrix(grid, warp);
  const auto act = [](const Matrix& m, const SpaceTimeSignal& x) {
    SpaceTimeSignal y(x.features(), x.nodes(), x.steps());
    for (int f = 0; f < x.features(); ++f) y.feature(f).noalias() = x.feature(f) * m.transpose();
    return y;
  };
  const Matrix wt = w.transpose();
  return {features, nodes, grid.n_steps,
          [w, act](const SpaceTimeSignal& x) { return act(w, x); },
          [wt, act](const SpaceTimeSignal& y) { return act(wt, y); }};
}

/// a o b
inline LinearStOperator compose(const LinearStOperator& a, const LinearStOperator& b) {
  return {a.features, a.nodes, a.steps,
          [a, b](const SpaceTimeSignal& x) { return a.apply(b.apply(x)); },
          [a, b](const SpaceTimeSignal& y) { return b.adjoint(a.adjoint(y)); }};
}

inline LinearStOperator difference(const LinearStOperator& a, const LinearStOperator& b) {
  return {a.features, a.nodes, a.steps,
          [a, b](const SpaceTimeSignal& x) { return a.apply(x) - b.apply(x); },
          [a, b](const SpaceTimeSignal& y) { return a.adjoint(y) - b.adjoint(y); }};
}

/// (P x): node i moves to label perm[i].
inline SpaceTimeSignal permute_nodes(const SpaceTimeSignal& x, const std::vector<int>& perm) {
  SpaceTimeSignal y(x.features(), x.nodes(), x.steps());
  for (int f = 0; f < x.features(); ++f)
    for (int t = 0; t < x.steps(); ++t)
      for (int i = 0; i < x.nodes(); ++i) y(f, perm[i], t) = x(f, i, t);
  return y;
}

/// (P^T y): inverse relabeling.
inline SpaceTimeSignal unpermute_nodes(const SpaceTimeSignal& y, const std::vector<int>& perm) {
  SpaceTimeSignal x(y.features(), y.nodes(), y.steps());
  for (int f = 0; f < y.features(); ++f)
    for (int t = 0; t < y.steps(); ++t)
      for (int i = 0; i < y.nodes(); ++i) x(f, i, t) = y(f, perm[i], t);
  return x;
}

/// P^T op P
inline LinearStOperator permuted(const LinearStOperator& op, const std::vector<int>& perm) {
  return {op.features, op.nodes, op.steps,
          [op, perm](const SpaceTimeSignal& x) { return unpermute_nodes(op.apply(permute_nodes(x, perm)), perm); },
          [op, perm](const SpaceTimeSignal& y) {
            return unpermute_nodes(op.adjoint(permute_nodes(y, perm)), perm);
          }};
}

/// Delay by m >= 0 samples with zero fill.
inline SpaceTimeSignal delay_signal(const SpaceTimeSignal& x, int m) {
  SpaceTimeSignal y(x.features(), x.nodes(), x.steps());
  if (m >= x.steps()) return y;
  for (int f = 0; f < x.features(); ++f)
    y.feature(f).rightCols(x.steps() - m) = x.feature(f).leftCols(x.steps() - m);
  return y;
}

inline SpaceTimeSignal advance_signal(const SpaceTimeSignal& x, int m) {
  SpaceTimeSignal y(x.features(), x.nodes(), x.steps());
  if (m >= x.steps()) return y;
  for (int f = 0; f < x.features(); ++f)
    y.feature(f).leftCols(x.steps() - m) = x.feature(f).rightCols(x.steps() - m);
  return y;
}

inline LinearStOperator delayed(const LinearStOperator& op, int m) {
  if (m < 0) throw Error("delayed: negative delay");
  if (m == 0) return op;
  return {op.features, op.nodes, op.steps,
          [op, m](const SpaceTimeSignal& x) { return delay_signal(op.apply(x), m); },
          [op, m](const SpaceTimeSignal& y) { return op.adjoint(advance_signal(y, m)); }};
}

struct PowerIterationOptions {
  int restarts = 20;
  int iterations = 200;
  double tolerance = 1e-8;
  std::uint64_t seed = 0x5eed;
};

/// Largest singular value of `op` by power iteration on op^T op. Every
/// intermediate estimate is a lower bound, nondecreasing within a restart; if
/// an estimate reaches `stop_at` the routine returns it immediately.
inline double operator_norm_power(const LinearStOperator& op, const PowerIterationOptions& opt = {},
                                  double stop_at = std::numeric_limits<double>::infinity()) {
  double best = 0.0;
  auto rng = make_rng(opt.seed);
  for (int r = 0; r < opt.restarts; ++r) {
    SpaceTimeSignal x = random_signal(op.features, op.nodes, op.steps, rng);
    double xn = x.norm();
    if (xn == 0.0) continue;
    x *= 1.0 / xn;
    double prev = 0.0;
    for (int it = 0; it < opt.iterations; ++it) {
      const SpaceTimeSignal y = op.apply(x);
      const double est = y.norm();
      best = std::max(best, est);
      if (best >= stop_at) return best;
      if (est == 0.0) break;
      SpaceTimeSignal z = op.adjoint(y);
      const double zn = z.norm();
      if (zn == 0.0) break;
      z *= 1.0 / zn;
      x = std::move(z);
      if (it > 0 && std::abs(est - prev) <= opt.tolerance * std::max(est, 1e-300)) break;
      prev = est;
    }
  }
  return best;
}

enum class PermutationStrategy { brute_force, identity_only };

struct DistanceResult {
  double distance = 0.0;
  std::vector<int> permutation;
  double shift_seconds = 0.0;
};

struct DistanceOptions {
  PowerIterationOptions power{};
  /// Quick pre-pass iterations used to order candidates; pruning stays exact.
  int screening_iterations = 8;
};

namespace detail {

inline std::vector<std::vector<int>> candidate_permutations(int n, PermutationStrategy strategy) {
  if (strategy == PermutationStrategy::identity_only) return {identity_permutation(n)};
  if (n > 8)
    throw Error("brute-force permutation search limited to N <= 8 (got " + std::to_string(n) +
                "); use identity_only");
  std::vector<std::vector<int>> out;
  auto p = identity_permutation(n);
  do out.push_back(p);
  while (std::next_permutation(p.begin(), p.end()));
  return out;
}

// A positive shift means op_hat lags op: compare delay(op) with op_hat.
inline LinearStOperator shifted_difference(const LinearStOperator& op, const LinearStOperator& op_hat,
                                           const std::vector<int>& perm, int shift) {
  const auto aligned = permuted(op_hat, perm);
  if (shift >= 0) return difference(delayed(op, shift), aligned);
  return difference(op, delayed(aligned, -shift));
}

inline DistanceResult minimize_distance(const LinearStOperator& op, const LinearStOperator& op_hat,
                                        const std::vector<std::vector<int>>& perms,
                                        const std::vector<double>& s_grid, double ts,
                                        const DistanceOptions& opt) {
  if (op.nodes != op_hat.nodes || op.steps != op_hat.steps || op.features != op_hat.features)
    throw Error("operator distance: operators act on different signal shapes");
  if (s_grid.empty()) throw Error("operator distance: empty translation grid");
  struct Candidate {
    std::size_t perm;
    double s;
    int shift;
    double screen;
  };
  std::vector<Candidate> cands;
  for (std::size_t p = 0; p < perms.size(); ++p)
    for (double s : s_grid) cands.push_back({p, s, static_cast<int>(std::lround(s / ts)), 0.0});

  PowerIterationOptions quick = opt.power;
  quick.restarts = 1;
  quick.iterations = opt.screening_iterations;
  if (cands.size() > 1)
    for (auto& c : cands)
      c.screen = operator_norm_power(shifted_difference(op, op_hat, perms[c.perm], c.shift), quick);
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& b) { return a.screen < b.screen; });

  DistanceResult best;
  best.distance = std::numeric_limits<double>::infinity();
  for (const auto& c : cands) {
    const double d = operator_norm_power(shifted_difference(op, op_hat, perms[c.perm], c.shift),
                                         opt.power, best.distance);
    if (d < best.distance) {
      best.distance = d;
      best.permutation = perms[c.perm];
      best.shift_seconds = c.s;
    }
  }
  return best;
}

}  // namespace detail

/// Translation grid {-span .. +span} in steps of ts.
inline std::vector<double> default_translation_grid(double ts, int span = 4) {
  std::vector<double> g;
  for (int m = -span; m <= span; ++m) g.push_back(m * ts);
  return g;
}

/// min over P of ||A - P^T A_hat P||.
inline DistanceResult distance_mod_permutation(const LinearStOperator& a, const LinearStOperator& a_hat,
                                               PermutationStrategy strategy,
                                               const DistanceOptions& opt = {}) {
  return detail::minimize_distance(a, a_hat, detail::candidate_permutations(a.nodes, strategy), {0.0},
                                   1.0, opt);
}

/// min over s in s_grid of the distance between B and B_hat translated by s;
/// shifts are rounded to whole samples of length ts.
inline DistanceResult distance_mod_translation(const LinearStOperator& b, const LinearStOperator& b_hat,
                                               const std::vector<double>& s_grid, double ts,
                                               const DistanceOptions& opt = {}) {
  return detail::minimize_distance(b, b_hat, {identity_permutation(b.nodes)}, s_grid, ts, opt);
}

/// Joint minimization over permutations and translations.
inline DistanceResult distance_mod_joint(const LinearStOperator& op, const LinearStOperator& op_hat,
                                         PermutationStrategy strategy, const std::vector<double>& s_grid,
                                         double ts, const DistanceOptions& opt = {}) {
  return detail::minimize_distance(op, op_hat, detail::candidate_permutations(op.nodes, strategy), s_grid,
                                   ts, opt);
}

struct StabilityBoundInputs {
  double lipschitz_c = 0.0;
  double eps_s = 0.0;
  double delta = 0.0;
  int n_nodes = 1;
  double kappa = 0.0;
  double eps_u = 0.0;
  int layers = 1;
  int f0 = 1;
  int f = 1;
  int f_l = 1;

  void validate() const {
    if (lipschitz_c < 0 || eps_s < 0 || delta < 0 || kappa < 0 || eps_u < 0 || n_nodes < 1 || layers < 1 ||
        f0 < 1 || f < 1 || f_l < 1)
      throw Error("StabilityBoundInputs: arguments must be nonnegative with L >= 1");
  }
};

/// First-order filter bound 2 C eps_s (1 + delta sqrt(N)) + C kappa eps_u.
inline double bound_filter(const StabilityBoundInputs& in) {
  in.validate();
  return 2.0 * in.lipschitz_c * in.eps_s * (1.0 + in.delta * std::sqrt(static_cast<double>(in.n_nodes))) +
         in.lipschitz_c * in.kappa * in.eps_u;
}

/// Size of the neglected second-order term, max(eps_s, eps_u)^2.
inline double second_order_scale(const StabilityBoundInputs& in) {
  const double e = std::max(in.eps_s, in.eps_u);
  return e * e;
}

/// Single-feature L-layer network: L times the filter bound.
inline double bound_gnn(const StabilityBoundInputs& in) { return in.layers * bound_filter(in); }

/// Multi-feature network: sqrt(F_L) (F^{L-1} F_0 + sum_{l=1}^{L-1} F^l) times the filter bound.
inline double bound_mimo(const StabilityBoundInputs& in) {
  double factor = std::pow(in.f, in.layers - 1) * in.f0;
  for (int l = 1; l <= in.layers - 1; ++l) factor += std::pow(in.f, l);
  return std::sqrt(static_cast<double>(in.f_l)) * factor * bound_filter(in);
}

/// ||y - y_hat||_F / ||y||_F.
inline double relative_rmse(const SpaceTimeSignal& y, const SpaceTimeSignal& y_hat) {
  const double ref = y.norm();
  if (ref == 0.0) throw Error("relative_rmse: reference signal has zero norm");
  return (y - y_hat).norm() / ref;
}

struct SweepRow {
  double eps = 0.0;
  double mean_rel_rmse = 0.0;
  double std_rel_rmse = 0.0;
  double bound_first_order = 0.0;
  double delta_measured = 0.0;
  double c_used = 0.0;
};

/// Largest integral-Lipschitz constant among all filters of all layers.
inline double network_lipschitz(const StgnnParams& params, const Graph& graph, double ts, int grid_pts = 64) {
  const auto spec = sym_eigendecomposition(graph);
  const double lo = spec.eigenvalues.minCoeff();
  const double hi = spec.eigenvalues.maxCoeff();
  double c = 0.0;
  for (const auto& layer : params.layers)
    for (int f = 0; f < layer.f_out; ++f)
      for (int g = 0; g < layer.f_in; ++g)
        c = std::max(c, estimate_lipschitz(layer.filter(f, g, ts), lo, hi, std::numbers::pi / ts, grid_pts));
  return c;
}

/// Joint graph/time perturbation sweep on a fixed graph. For every eps and
/// signal: a diagonal relative graph error of norm eps and the exponential-
/// cosine warp of size eps; rows report the mean relative RMSE of the network
/// output and the first-order network bound with the measured delta.
inline std::vector<SweepRow> stability_sweep(const StgnnParams& params, const Graph& graph,
                                             const std::vector<SpaceTimeSignal>& signals,
                                             const std::vector<double>& eps_list, std::uint64_t seed,
                                             double ts, std::size_t jobs = 1) {
  if (signals.empty()) throw Error("stability_sweep: no signals");
  const int steps = signals.front().steps();
  const SamplingGrid grid(ts, steps);
  const std::vector<Graph> nominal(steps, graph);
  std::vector<SpaceTimeSignal> reference(signals.size());
  parallel_for(signals.size(), jobs,
               [&](std::size_t i) { reference[i] = forward(params, nominal, signals[i]).output; });
  const double c = network_lipschitz(params, graph, ts);

  std::vector<SweepRow> rows;
  for (std::size_t e = 0; e < eps_list.size(); ++e) {
    const double eps = eps_list[e];
    const auto warp = warp_exponential_cosine(eps);
    std::vector<double> rmse(signals.size()), delta(signals.size());
    parallel_for(signals.size(), jobs, [&](std::size_t i) {
      const auto pert = sample_diagonal_error(graph.n_nodes(), eps,
                                              derive_seed(seed, e * 1000003ull + i));
      const Graph perturbed = apply_relative_perturbation(graph, pert);
      const std::vector<Graph> seq(steps, perturbed);
      const auto y_hat = forward(params, seq, resample_warped(signals[i], grid, warp)).output;
      rmse[i] = relative_rmse(reference[i], y_hat);
      delta[i] = eps == 0.0 ? 0.0 : eigenvector_misalignment(graph, pert);
    });
    SweepRow row;
    row.eps = eps;
    row.mean_rel_rmse = mean(rmse);
    row.std_rel_rmse = std::sqrt(population_variance(rmse));
    row.delta_measured = *std::max_element(delta.begin(), delta.end());
    row.c_used = c;
    StabilityBoundInputs in;
    in.lipschitz_c = c;
    in.eps_s = eps;
    in.eps_u = eps;
    in.delta = row.delta_measured;
    in.n_nodes = graph.n_nodes();
    in.kappa = warp.kappa;
    in.layers = static_cast<int>(params.layers.size());
    row.bound_first_order = bound_gnn(in);
    rows.push_back(row);
  }
  return rows;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "eps,mean_rel_rmse,std_rel_rmse,bound_first_order,delta_measured,C_used\n" << std::setprecision(17);
  for (const auto& r : rows)
    os << r.eps << ',' << r.mean_rel_rmse << ',' << r.std_rel_rmse << ',' << r.bound_first_order << ','
       << r.delta_measured << ',' << r.c_used << '\n';
}

}  // namespace stgnn
