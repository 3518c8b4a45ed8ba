#pragma once

#include <complex>
#include <span>
#include <vector>

#include "stgnn/common.hpp"
#include "stgnn/graph.hpp"
#include "stgnn/signal.hpp"

namespace stgnn {

/// FIR space-time graph filter sum_k h_k (S o L)^k, where L is a one-sample delay.
struct FirFilter {
  std::vector<double> taps;
  double ts = 0.1;

  FirFilter() = default;
  FirFilter(std::vector<double> h, double ts_) : taps(std::move(h)), ts(ts_) { validate(); }

  int size() const { return static_cast<int>(taps.size()); }

  void validate() const {
    if (taps.empty()) throw Error("FirFilter: need at least one tap");
    for (double h : taps)
      if (!std::isfinite(h)) throw Error("FirFilter: non-finite tap");
    if (!(ts > 0.0)) throw Error("FirFilter: ts must be positive");
  }
};

/// Diffused copies W_k[n] = S_{n-1} S_{n-2} ... S_{n-k} x_{n-k} (zero for n < k)
/// of one N x T feature, for k = 0 .. K-1. `shift(n)` yields the GSO at step n.
template <typename ShiftAt>
std::vector<Matrix> diffuse(const Eigen::Ref<const Matrix>& x, int taps, const ShiftAt& shift) {
  const int n_nodes = static_cast<int>(x.rows());
  const int steps = static_cast<int>(x.cols());
  std::vector<Matrix> w(taps);
  if (taps == 0) return w;
  w[0] = x;
  for (int k = 1; k < taps; ++k) {
    w[k] = Matrix::Zero(n_nodes, steps);
    for (int n = k; n < steps; ++n) w[k].col(n).noalias() = shift(n - 1) * w[k - 1].col(n - 1);
  }
  return w;
}

/// Adjoint of x -> sum_k W_k[x] weighted by per-k cotangents g[k], via a
/// backward Horner recursion: B_k[m] = g_k[m] + S_m B_{k+1}[m+1].
template <typename ShiftAt>
Matrix diffuse_adjoint(const std::vector<Matrix>& g, const ShiftAt& shift) {
  const int taps = static_cast<int>(g.size());
  Matrix acc = g[taps - 1];
  for (int k = taps - 2; k >= 0; --k) {
    Matrix next = g[k];
    for (int m = 0; m + 1 < next.cols(); ++m) next.col(m).noalias() += shift(m) * acc.col(m + 1);
    acc = std::move(next);
  }
  return acc;
}

namespace detail {

template <typename ShiftAt>
SpaceTimeSignal apply_filter(const FirFilter& filter, const SpaceTimeSignal& x, const ShiftAt& shift) {
  filter.validate();
  SpaceTimeSignal y(x.features(), x.nodes(), x.steps());
  for (int f = 0; f < x.features(); ++f) {
    const auto w = diffuse(x.feature(f), filter.size(), shift);
    auto out = y.feature(f);
    for (int k = 0; k < filter.size(); ++k) out.noalias() += filter.taps[k] * w[k];
  }
  return y;
}

template <typename ShiftAt>
SpaceTimeSignal apply_filter_adjoint(const FirFilter& filter, const SpaceTimeSignal& y,
                                     const ShiftAt& shift) {
  filter.validate();
  SpaceTimeSignal x(y.features(), y.nodes(), y.steps());
  for (int f = 0; f < y.features(); ++f) {
    std::vector<Matrix> g(filter.size());
    for (int k = 0; k < filter.size(); ++k) g[k] = filter.taps[k] * y.feature(f);
    x.feature(f) = diffuse_adjoint(g, shift);
  }
  return x;
}

inline void check_graph_sequence(std::span<const Graph> graphs, const SpaceTimeSignal& x) {
  if (static_cast<int>(graphs.size()) != x.steps())
    throw Error("graph sequence length " + std::to_string(graphs.size()) + " != T = " +
                std::to_string(x.steps()));
  for (const auto& g : graphs)
    if (g.n_nodes() != x.nodes()) throw Error("graph node count does not match signal");
}

}  // namespace detail

/// y_n = sum_k h_k S^k x_{n-k} with zero prehistory.
inline SpaceTimeSignal apply_static(const FirFilter& filter, const Graph& graph,
                                    const SpaceTimeSignal& x) {
  if (graph.n_nodes() != x.nodes()) throw Error("apply_static: graph/signal node mismatch");
  const Matrix& s = graph.gso();
  return detail::apply_filter(filter, x, [&](int) -> const Matrix& { return s; });
}

/// y_n = h_0 x_n + sum_{k>=1} h_k (S_{n-1} ... S_{n-k}) x_{n-k}, one graph per step.
inline SpaceTimeSignal apply_dynamic(const FirFilter& filter, std::span<const Graph> graphs,
                                     const SpaceTimeSignal& x) {
  detail::check_graph_sequence(graphs, x);
  return detail::apply_filter(filter, x, [&](int n) -> const Matrix& { return graphs[n].gso(); });
}

inline SpaceTimeSignal apply_static_adjoint(const FirFilter& filter, const Graph& graph,
                                            const SpaceTimeSignal& y) {
  if (graph.n_nodes() != y.nodes()) throw Error("apply_static_adjoint: graph/signal node mismatch");
  const Matrix& s = graph.gso();
  return detail::apply_filter_adjoint(filter, y, [&](int) -> const Matrix& { return s; });
}

inline SpaceTimeSignal apply_dynamic_adjoint(const FirFilter& filter, std::span<const Graph> graphs,
                                             const SpaceTimeSignal& y) {
  detail::check_graph_sequence(graphs, y);
  return detail::apply_filter_adjoint(filter, y,
                                      [&](int n) -> const Matrix& { return graphs[n].gso(); });
}

/// The space factor e^{-ts S} of the exponential shift e^{-ts S o L}.
inline Graph exponential_gso(const Graph& graph, double ts) {
  const auto spec = sym_eigendecomposition(graph);
  const Vector d = (-ts * spec.eigenvalues.array()).exp().matrix();
  return Graph::from_matrix(spec.eigenvectors * d.asDiagonal() * spec.eigenvectors.transpose());
}

/// Filter in the exponential form sum_k h_k e^{-k ts S} x_{n-k}, whose spectrum
/// is exactly `frequency_response`.
inline SpaceTimeSignal apply_static_exponential(const FirFilter& filter, const Graph& graph,
                                                const SpaceTimeSignal& x) {
  return apply_static(filter, exponential_gso(graph, filter.ts), x);
}

/// h~(lambda, j omega) = sum_k h_k e^{-k ts (lambda + j omega)}.
inline std::complex<double> frequency_response(const FirFilter& filter, double lambda, double omega) {
  const std::complex<double> s(lambda, omega);
  std::complex<double> acc(0.0, 0.0);
  for (int k = 0; k < filter.size(); ++k)
    acc += filter.taps[k] * std::exp(-static_cast<double>(k) * filter.ts * s);
  return acc;
}

/// Response of the GSO-shift implementation: sum_k h_k lambda^k e^{-j omega k ts}.
inline std::complex<double> frequency_response_shift(const FirFilter& filter, double lambda,
                                                     double omega) {
  std::complex<double> acc(0.0, 0.0);
  double lam_k = 1.0;
  for (int k = 0; k < filter.size(); ++k) {
    acc += filter.taps[k] * lam_k * std::exp(std::complex<double>(0.0, -omega * k * filter.ts));
    lam_k *= lambda;
  }
  return acc;
}

/// d h~ / d lambda, which equals d h~ / d(j omega) for this response.
inline std::complex<double> frequency_response_derivative(const FirFilter& filter, double lambda,
                                                          double omega) {
  const std::complex<double> s(lambda, omega);
  std::complex<double> acc(0.0, 0.0);
  for (int k = 1; k < filter.size(); ++k) {
    const double kt = static_cast<double>(k) * filter.ts;
    acc += -kt * filter.taps[k] * std::exp(-kt * s);
  }
  return acc;
}

/// Integral-Lipschitz constant: max of |lambda + j omega| |d h~/d zeta| over a
/// grid_pts x grid_pts grid on [lambda_min, lambda_max] x [0, omega_max].
inline double estimate_lipschitz(const FirFilter& filter, double lambda_min, double lambda_max,
                                 double omega_max, int grid_pts) {
  if (grid_pts < 16) throw Error("estimate_lipschitz: grid_pts must be >= 16");
  double c = 0.0;
  for (int a = 0; a < grid_pts; ++a) {
    const double lam = lambda_min + (lambda_max - lambda_min) * a / (grid_pts - 1);
    for (int b = 0; b < grid_pts; ++b) {
      const double om = omega_max * b / (grid_pts - 1);
      const double v = std::abs(std::complex<double>(lam, om)) *
                       std::abs(frequency_response_derivative(filter, lam, om));
      c = std::max(c, v);
    }
  }
  return c;
}

/// Same, with the default ranges [lambda_min(S), lambda_max(S)] x [0, pi/ts].
inline double estimate_lipschitz(const FirFilter& filter, const Graph& graph, int grid_pts = 64) {
  const auto spec = sym_eigendecomposition(graph);
  return estimate_lipschitz(filter, spec.eigenvalues.minCoeff(), spec.eigenvalues.maxCoeff(),
                            std::numbers::pi / filter.ts, grid_pts);
}

/// max over the graph eigenvalues and a 512-point grid on [0, omega_max] of |h~|.
inline double operator_norm(const FirFilter& filter, const Graph& graph, double omega_max) {
  const auto spec = sym_eigendecomposition(graph);
  double best = 0.0;
  constexpr int kOmegaPts = 512;
  for (int i = 0; i < spec.eigenvalues.size(); ++i)
    for (int b = 0; b < kOmegaPts; ++b) {
      const double om = omega_max * b / (kOmegaPts - 1);
      best = std::max(best, std::abs(frequency_response(filter, spec.eigenvalues(i), om)));
    }
  return best;
}

}  // namespace stgnn
