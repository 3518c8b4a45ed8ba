#pragma once

#include <istream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "stgnn/common.hpp"
#include "stgnn/hungarian.hpp"

namespace stgnn {

/// Undirected graph held through its symmetric graph shift operator (GSO).
class Graph {
 public:
  Graph() = default;

  /// Accepts any square matrix that is symmetric up to rounding; the stored
  /// GSO is exactly symmetric.
  static Graph from_matrix(const Matrix& s) {
    if (s.rows() != s.cols() || s.rows() == 0)
      throw Error("Graph: GSO must be a non-empty square matrix");
    if (!s.allFinite()) throw Error("Graph: GSO has non-finite entries");
    const double scale = std::max(1.0, s.cwiseAbs().maxCoeff());
    if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
      throw Error("Graph: GSO is not symmetric");
    Graph g;
    g.gso_ = 0.5 * (s + s.transpose());
    return g;
  }

  static Graph empty(int n) { return from_matrix(Matrix::Zero(n, n)); }

  int n_nodes() const { return static_cast<int>(gso_.rows()); }
  const Matrix& gso() const { return gso_; }

  int n_edges() const {
    int count = 0;
    for (int i = 0; i < n_nodes(); ++i)
      for (int j = i + 1; j < n_nodes(); ++j)
        if (gso_(i, j) != 0.0) ++count;
    return count;
  }

  std::vector<int> neighbors(int i) const {
    std::vector<int> out;
    for (int j = 0; j < n_nodes(); ++j)
      if (j != i && gso_(i, j) != 0.0) out.push_back(j);
    return out;
  }

  double mean_degree() const {
    return n_nodes() == 0 ? 0.0 : 2.0 * n_edges() / n_nodes();
  }

  friend bool operator==(const Graph& a, const Graph& b) {
    return a.gso_.rows() == b.gso_.rows() && a.gso_ == b.gso_;
  }

 private:
  Matrix gso_;
};

struct SpectralDecomposition {
  Vector eigenvalues;   // ascending
  Matrix eigenvectors;  // column i pairs with eigenvalues(i)
};

/// Relative perturbation P0^T S_hat P0 = S + S E + E S.
/// `permutation[i]` is the new label of node i, i.e. P0 e_i = e_{permutation[i]}.
struct GraphPerturbation {
  Matrix error;
  std::vector<int> permutation;
  double eps_s = 0.0;
};

inline Matrix permutation_matrix(const std::vector<int>& perm) {
  const int n = static_cast<int>(perm.size());
  Matrix p = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) p(perm[i], i) = 1.0;
  return p;
}

inline std::vector<int> identity_permutation(int n) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  return p;
}

inline double spectral_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  if (m.rows() == m.cols() && (m - m.transpose()).cwiseAbs().maxCoeff() == 0.0) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
    return es.eigenvalues().cwiseAbs().maxCoeff();
  }
  Eigen::JacobiSVD<Matrix> svd(m);
  return svd.singularValues()(0);
}

inline void check_positions(const Points& positions) {
  if (!positions.allFinite()) throw Error("positions must be finite");
  for (int i = 0; i < positions.rows(); ++i)
    for (int j = i + 1; j < positions.rows(); ++j)
      if (positions.row(i) == positions.row(j))
        throw Error("duplicate positions for nodes " + std::to_string(i) +
                    " and " + std::to_string(j));
}

/// The `m` nearest other nodes of `i`, closest first, ties by lower index.
inline std::vector<int> nearest_neighbors(const Points& positions, int i, int m) {
  std::vector<int> others;
  for (int j = 0; j < positions.rows(); ++j)
    if (j != i) others.push_back(j);
  const auto dist2 = [&](int j) {
    return (positions.row(i) - positions.row(j)).squaredNorm();
  };
  std::stable_sort(others.begin(), others.end(),
                   [&](int a, int b) { return dist2(a) < dist2(b); });
  if (static_cast<int>(others.size()) > m) others.resize(m);
  return others;
}

/// Binary M-nearest-neighbor graph: (i, j) is an edge iff j is among the M
/// nearest of i or i is among the M nearest of j.
inline Graph build_knn_graph(const Points& positions, int m_neighbors) {
  const int n = static_cast<int>(positions.rows());
  if (n < 2) throw Error("build_knn_graph: need at least 2 nodes");
  if (m_neighbors < 1 || m_neighbors >= n)
    throw Error("build_knn_graph: m_neighbors must lie in [1, N-1]");
  check_positions(positions);
  Matrix s = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j : nearest_neighbors(positions, i, m_neighbors)) {
      s(i, j) = 1.0;
      s(j, i) = 1.0;
    }
  return Graph::from_matrix(s);
}

/// Binary disk graph: (i, j) is an edge iff ||p_i - p_j|| < range_r.
inline Graph build_range_graph(const Points& positions, double range_r) {
  const int n = static_cast<int>(positions.rows());
  if (n < 1) throw Error("build_range_graph: need at least 1 node");
  if (!(range_r > 0.0)) throw Error("build_range_graph: range must be positive");
  Matrix s = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if ((positions.row(i) - positions.row(j)).norm() < range_r) {
        s(i, j) = 1.0;
        s(j, i) = 1.0;
      }
  return Graph::from_matrix(s);
}

namespace detail {

// Largest-magnitude entry positive; ties resolved at the lowest index.
inline void canonicalize_signs(Matrix& vecs) {
  for (int c = 0; c < vecs.cols(); ++c) {
    int best = 0;
    double best_abs = -1.0;
    for (int r = 0; r < vecs.rows(); ++r) {
      const double a = std::abs(vecs(r, c));
      if (a > best_abs * (1.0 + 1e-12) + 1e-300) {
        best_abs = a;
        best = r;
      }
    }
    if (vecs(best, c) < 0.0) vecs.col(c) *= -1.0;
  }
}

}  // namespace detail

inline SpectralDecomposition sym_eigendecomposition(const Matrix& s) {
  if (s.rows() != s.cols()) throw Error("sym_eigendecomposition: not square");
  Eigen::SelfAdjointEigenSolver<Matrix> es(s);
  if (es.info() != Eigen::Success)
    throw Error("sym_eigendecomposition: eigensolver did not converge");
  SpectralDecomposition out{es.eigenvalues(), es.eigenvectors()};
  detail::canonicalize_signs(out.eigenvectors);
  return out;
}

inline SpectralDecomposition sym_eigendecomposition(const Graph& g) {
  return sym_eigendecomposition(g.gso());
}

/// Returns S_hat = P0 (S + S E + E S) P0^T.
inline Graph apply_relative_perturbation(const Graph& g, const GraphPerturbation& pert) {
  const int n = g.n_nodes();
  if (pert.error.rows() != n || pert.error.cols() != n ||
      static_cast<int>(pert.permutation.size()) != n)
    throw Error("apply_relative_perturbation: dimension mismatch");
  const Matrix& s = g.gso();
  const Matrix se = s * pert.error;
  // E S = (S E)^T for symmetric S and E; using the transpose keeps the sum
  // exactly symmetric.
  const Matrix inner = s + se + se.transpose();
  const Matrix p0 = permutation_matrix(pert.permutation);
  return Graph::from_matrix(p0 * inner * p0.transpose());
}

/// Diagonal error with i.i.d. uniform entries in [-eps, eps], rescaled so the
/// largest magnitude is exactly eps. P0 is the identity.
inline GraphPerturbation sample_diagonal_error(int n, double eps, std::uint64_t seed) {
  if (eps < 0.0) throw Error("sample_diagonal_error: eps must be nonnegative");
  GraphPerturbation out;
  out.error = Matrix::Zero(n, n);
  out.permutation = identity_permutation(n);
  out.eps_s = eps;
  if (eps == 0.0 || n == 0) return out;
  auto rng = make_rng(seed);
  Vector d(n);
  for (int i = 0; i < n; ++i) d(i) = uniform(rng, -eps, eps);
  const double peak = d.cwiseAbs().maxCoeff();
  if (peak == 0.0) d.setConstant(eps);
  else d *= eps / peak;
  out.error.diagonal() = d;
  return out;
}

/// E = V D V^T with V the eigenvectors of S and a random diagonal D scaled to
/// spectral norm eps. Such E shares its eigenbasis with S.
inline GraphPerturbation sample_shared_eigenbasis_error(const Graph& g, double eps,
                                                        std::uint64_t seed) {
  const int n = g.n_nodes();
  auto base = sample_diagonal_error(n, eps, seed);
  const auto spec = sym_eigendecomposition(g);
  const Matrix e = spec.eigenvectors * base.error * spec.eigenvectors.transpose();
  base.error = 0.5 * (e + e.transpose());
  return base;
}

namespace detail {

// Orthogonal polar factor of m (the Procrustes rotation).
inline Matrix polar_factor(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

inline std::vector<std::vector<int>> eigen_clusters(const Vector& values, double gap) {
  std::vector<std::vector<int>> clusters;
  for (int i = 0; i < values.size(); ++i) {
    if (clusters.empty() || values(i) - values(clusters.back().back()) >= gap)
      clusters.push_back({i});
    else
      clusters.back().push_back(i);
  }
  return clusters;
}

// Rotates the columns `cols` of `basis` towards the same columns of `target`.
inline void procrustes_align(Matrix& basis, const Matrix& target, const std::vector<int>& cols) {
  const int k = static_cast<int>(cols.size());
  Matrix b(basis.rows(), k), t(target.rows(), k);
  for (int c = 0; c < k; ++c) {
    b.col(c) = basis.col(cols[c]);
    t.col(c) = target.col(cols[c]);
  }
  const Matrix r = polar_factor(b.transpose() * t);
  const Matrix aligned = b * r;
  for (int c = 0; c < k; ++c) basis.col(cols[c]) = aligned.col(c);
}

}  // namespace detail

/// Eigenvector misalignment delta = (||U - V|| + 1)^2 - 1 between the
/// eigenbasis U of the error matrix and V of the GSO (spectral norm).
///
/// Both bases are only defined up to column order, sign and rotations inside
/// degenerate eigenspaces. U's columns are paired with V's by a maximum-overlap
/// assignment on |U^T V|; then V is rotated inside each GSO eigenvalue cluster
/// and U inside each error eigenvalue cluster (gap < 1e-8) by orthogonal
/// Procrustes. Singleton clusters reduce to sign matching.
inline double eigenvector_misalignment(const Graph& g, const GraphPerturbation& pert) {
  const int n = g.n_nodes();
  if (pert.error.rows() != n || pert.error.cols() != n)
    throw Error("eigenvector_misalignment: dimension mismatch");
  constexpr double kClusterGap = 1e-8;
  const auto s_spec = sym_eigendecomposition(g);
  const auto e_spec = sym_eigendecomposition(0.5 * (pert.error + pert.error.transpose()));
  Matrix v = s_spec.eigenvectors;

  // Pair columns: maximize sum |u_i^T v_pi(i)|.
  const Matrix overlap = (e_spec.eigenvectors.transpose() * v).cwiseAbs();
  const auto pairing = solve_assignment(-overlap);  // U column i -> V column pairing[i]
  Matrix u(n, n);
  Vector u_values(n);
  for (int i = 0; i < n; ++i) {
    u.col(pairing[i]) = e_spec.eigenvectors.col(i);
    u_values(pairing[i]) = e_spec.eigenvalues(i);
  }

  for (const auto& cluster : detail::eigen_clusters(s_spec.eigenvalues, kClusterGap))
    if (cluster.size() > 1) detail::procrustes_align(v, u, cluster);

  // Error-matrix clusters, expressed in V's column positions.
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return u_values(a) < u_values(b); });
  std::vector<int> current{order[0]};
  const auto flush = [&] {
    detail::procrustes_align(u, v, current);
    current.clear();
  };
  for (int i = 1; i < n; ++i) {
    if (u_values(order[i]) - u_values(current.back()) >= kClusterGap) flush();
    current.push_back(order[i]);
  }
  flush();

  // Both factors are orthogonal, so ||U - V|| <= 2; the clamp only removes rounding.
  const double dist = std::min(spectral_norm(u - v), 2.0);
  return (dist + 1.0) * (dist + 1.0) - 1.0;
}

/// S / ||S||_2; an edgeless graph is returned unchanged.
inline Graph spectrally_normalized(const Graph& g) {
  const double r = spectral_norm(g.gso());
  if (r == 0.0) return g;
  return Graph::from_matrix(g.gso() / r);
}

/// Text form: "N" on the first line, then N rows of N entries (17 significant digits).
inline void write_graph(std::ostream& os, const Graph& g) {
  const int n = g.n_nodes();
  os << n << '\n';
  os << std::setprecision(17);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (j) os << ' ';
      os << g.gso()(i, j);
    }
    os << '\n';
  }
}

inline Graph read_graph(std::istream& is) {
  int n = 0;
  if (!(is >> n) || n <= 0) throw Error("read_graph: missing or invalid node count");
  Matrix s(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (!(is >> s(i, j)))
        throw Error("read_graph: truncated matrix at row " + std::to_string(i));
  return Graph::from_matrix(s);
}

inline std::string graph_to_string(const Graph& g) {
  std::ostringstream os;
  write_graph(os, g);
  return os.str();
}

}  // namespace stgnn
