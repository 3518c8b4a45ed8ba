#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "stgnn/graph.hpp"
#include "oracles.hpp"

using namespace stgnn;

namespace {

Points points(std::initializer_list<std::pair<double, double>> xy) {
  Points p(static_cast<int>(xy.size()), 2);
  int i = 0;
  for (auto [x, y] : xy) p.row(i++) << x, y;
  return p;
}

Points random_points(int n, Rng& rng) {
  Points p(n, 2);
  for (int i = 0; i < n; ++i) p.row(i) << uniform(rng, 0, 5), uniform(rng, 0, 5);
  return p;
}

}  // namespace

TEST(KnnGraph, TwoNodes) {
  const auto g = build_knn_graph(points({{0, 0}, {1, 0}}), 1);
  Matrix expect(2, 2);
  expect << 0, 1, 1, 0;
  EXPECT_EQ(g.gso(), expect);
}

TEST(KnnGraph, OrRuleOnCollinearNodes) {
  const auto g = build_knn_graph(points({{0, 0}, {1, 0}, {3, 0}}), 1);
  EXPECT_EQ(g.gso()(0, 1), 1.0);
  EXPECT_EQ(g.gso()(1, 2), 1.0);
  EXPECT_EQ(g.gso()(0, 2), 0.0);
  EXPECT_EQ(g.n_edges(), 2);
}

TEST(KnnGraph, MatchesSortOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_points(5, rng);
    EXPECT_EQ(build_knn_graph(p, 2).gso(), oracle::knn_adjacency(p, 2)) << "trial " << trial;
  }
}

TEST(KnnGraph, TiesBrokenByLowerIndex) {
  // Nodes 1 and 2 are equidistant from node 0.
  const auto p = points({{0, 0}, {1, 0}, {-1, 0}, {5, 0}});
  EXPECT_EQ(nearest_neighbors(p, 0, 1), std::vector<int>{1});
  EXPECT_EQ(nearest_neighbors(p, 0, 2), (std::vector<int>{1, 2}));
}

TEST(KnnGraph, RejectsBadInput) {
  EXPECT_THROW(build_knn_graph(points({{0, 0}, {0, 0}, {1, 1}}), 1), Error);
  EXPECT_THROW(build_knn_graph(points({{0, 0}, {1, 0}}), 2), Error);
  EXPECT_THROW(build_knn_graph(points({{0, 0}, {1, 0}}), 0), Error);
}

TEST(RangeGraph, Examples) {
  EXPECT_EQ(build_range_graph(points({{0, 0}, {3, 0}}), 2.0).n_edges(), 0);
  EXPECT_EQ(build_range_graph(points({{0, 0}, {1, 0}}), 2.0).n_edges(), 1);
  Points grid(9, 2);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) grid.row(3 * a + b) << a, b;
  // 12 axis-aligned pairs at distance 1 plus 8 diagonal pairs at sqrt(2).
  EXPECT_EQ(build_range_graph(grid, 1.5).n_edges(), 20);
}

TEST(RangeGraph, StrictInequality) {
  EXPECT_EQ(build_range_graph(points({{0, 0}, {2, 0}}), 2.0).n_edges(), 0);
  EXPECT_THROW(build_range_graph(points({{0, 0}}), 0.0), Error);
}

TEST(Graph, RejectsAsymmetricMatrix) {
  Matrix s(2, 2);
  s << 0, 1, 0, 0;
  EXPECT_THROW(Graph::from_matrix(s), Error);
}

TEST(Eigendecomposition, TwoNodeSpectrum) {
  Matrix s(2, 2);
  s << 0, 1, 1, 0;
  const auto d = sym_eigendecomposition(Graph::from_matrix(s));
  EXPECT_NEAR(d.eigenvalues(0), -1.0, 1e-12);
  EXPECT_NEAR(d.eigenvalues(1), 1.0, 1e-12);
  const double r = 1.0 / std::sqrt(2.0);
  // Largest-magnitude entry positive, ties resolved at the lowest index.
  EXPECT_NEAR(d.eigenvectors(0, 0), r, 1e-12);
  EXPECT_NEAR(d.eigenvectors(1, 0), -r, 1e-12);
  EXPECT_NEAR(d.eigenvectors(0, 1), r, 1e-12);
  EXPECT_NEAR(d.eigenvectors(1, 1), r, 1e-12);
}

TEST(Eigendecomposition, ZeroMatrix) {
  const auto d = sym_eigendecomposition(Graph::empty(4));
  EXPECT_EQ(d.eigenvalues, Vector::Zero(4));
  EXPECT_EQ(d.eigenvectors, Matrix::Identity(4, 4));
}

TEST(Eigendecomposition, ReconstructsAndIsOrthonormal) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix s = oracle::random_symmetric(6, rng);
    const auto d = sym_eigendecomposition(Graph::from_matrix(s));
    const Matrix& v = d.eigenvectors;
    EXPECT_LE((v * d.eigenvalues.asDiagonal() * v.transpose() - s).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE((v * v.transpose() - Matrix::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-9);
    for (int i = 0; i < 6; ++i)
      EXPECT_LE((s * v.col(i) - d.eigenvalues(i) * v.col(i)).norm(), 1e-8 * std::max(1.0, std::abs(d.eigenvalues(i))));
    for (int i = 1; i < 6; ++i) EXPECT_LE(d.eigenvalues(i - 1), d.eigenvalues(i));
  }
}

TEST(Eigendecomposition, EigenvaluesInvariantUnderRelabeling) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix s = oracle::random_symmetric(7, rng);
    const auto perm = oracle::random_permutation(7, rng);
    const Matrix p = permutation_matrix(perm);
    const auto a = sym_eigendecomposition(Graph::from_matrix(s));
    const auto b = sym_eigendecomposition(Graph::from_matrix(p.transpose() * s * p));
    EXPECT_LE((a.eigenvalues - b.eigenvalues).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(RelativePerturbation, ZeroErrorIsIdentity) {
  Rng rng(1);
  const auto g = Graph::from_matrix(oracle::random_symmetric(5, rng));
  const auto pert = sample_diagonal_error(5, 0.0, 1);
  EXPECT_EQ(apply_relative_perturbation(g, pert).gso(), g.gso());
}

TEST(RelativePerturbation, ZeroErrorWithPermutationRelabels) {
  Rng rng(2);
  const auto g = Graph::from_matrix(oracle::random_symmetric(5, rng));
  GraphPerturbation pert{Matrix::Zero(5, 5), oracle::random_permutation(5, rng), 0.0};
  const Matrix p0 = permutation_matrix(pert.permutation);
  EXPECT_EQ(apply_relative_perturbation(g, pert).gso(), p0 * g.gso() * p0.transpose());
}

TEST(RelativePerturbation, DilationScalesEdges) {
  Rng rng(4);
  const auto g = build_range_graph(random_points(6, rng), 2.5);
  const double eps = 0.1;
  GraphPerturbation pert{(eps / 2) * Matrix::Identity(6, 6), identity_permutation(6), eps / 2};
  EXPECT_LE((apply_relative_perturbation(g, pert).gso() - (1 + eps) * g.gso()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(RelativePerturbation, MatchesDirectProduct) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix s = oracle::random_symmetric(4, rng);
    const Matrix e = oracle::random_symmetric(4, rng) * 0.1;
    GraphPerturbation pert{e, oracle::random_permutation(4, rng), spectral_norm(e)};
    const Matrix p0 = permutation_matrix(pert.permutation);
    const Matrix s_hat = apply_relative_perturbation(Graph::from_matrix(s), pert).gso();
    EXPECT_LE((p0.transpose() * s_hat * p0 - (s + s * e + e * s)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(DiagonalError, NormAndDeterminism) {
  EXPECT_EQ(sample_diagonal_error(5, 0.0, 9).error, Matrix::Zero(5, 5));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto p = sample_diagonal_error(7, 0.3, seed);
    EXPECT_NEAR(spectral_norm(p.error), 0.3, 1e-12);
    EXPECT_NEAR(p.eps_s, 0.3, 1e-12);
    EXPECT_EQ(p.error, Matrix(p.error.diagonal().asDiagonal()));
  }
  EXPECT_EQ(sample_diagonal_error(5, 0.1, 42).error, sample_diagonal_error(5, 0.1, 42).error);
}

TEST(DiagonalError, TriangleInequalityOnPerturbedGso) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto g = build_range_graph(random_points(8, rng), 2.0);
    const double eps = 0.05 * (trial + 1);
    const auto pert = sample_diagonal_error(8, eps, trial);
    const double diff = spectral_norm(apply_relative_perturbation(g, pert).gso() - g.gso());
    EXPECT_LE(diff, 2 * eps * spectral_norm(g.gso()) + 1e-12);
  }
}

TEST(Misalignment, ScaledIdentityIsAligned) {
  Rng rng(10);
  const auto g = Graph::from_matrix(oracle::random_symmetric(6, rng));
  for (double c : {-0.3, 0.0, 0.05}) {
    GraphPerturbation pert{c * Matrix::Identity(6, 6), identity_permutation(6), std::abs(c)};
    EXPECT_LE(eigenvector_misalignment(g, pert), 1e-12);
  }
}

TEST(Misalignment, SharedEigenbasisIsAligned) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const auto g = Graph::from_matrix(oracle::random_symmetric(6, rng));
    EXPECT_LE(eigenvector_misalignment(g, sample_shared_eigenbasis_error(g, 0.1, trial)), 1e-6);
  }
}

TEST(Misalignment, SharedEigenbasisOnDegenerateGraph) {
  // The 4-cycle has a repeated eigenvalue 0.
  Matrix s = Matrix::Zero(4, 4);
  for (int i = 0; i < 4; ++i) s(i, (i + 1) % 4) = s((i + 1) % 4, i) = 1;
  const auto g = Graph::from_matrix(s);
  EXPECT_LE(eigenvector_misalignment(g, sample_shared_eigenbasis_error(g, 0.2, 3)), 1e-6);
}

TEST(Misalignment, BoundedByEight) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const auto g = Graph::from_matrix(oracle::random_symmetric(5, rng));
    const Matrix e = oracle::random_symmetric(5, rng);
    const double d = eigenvector_misalignment(g, {e, identity_permutation(5), spectral_norm(e)});
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 8.0 + 1e-12);
  }
}

TEST(Misalignment, InvariantUnderJointRelabeling) {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix s = oracle::random_symmetric(5, rng);
    const Matrix e = oracle::random_symmetric(5, rng);
    const Matrix p = permutation_matrix(oracle::random_permutation(5, rng));
    const double a = eigenvector_misalignment(Graph::from_matrix(s), {e, identity_permutation(5), 0});
    const double b = eigenvector_misalignment(Graph::from_matrix(p.transpose() * s * p),
                                              {p.transpose() * e * p, identity_permutation(5), 0});
    EXPECT_NEAR(a, b, 1e-9);
  }
}

TEST(SpectralNormalization, UnitNorm) {
  Rng rng(15);
  const auto g = build_range_graph(random_points(10, rng), 2.0);
  EXPECT_NEAR(spectral_norm(spectrally_normalized(g).gso()), 1.0, 1e-12);
  EXPECT_EQ(spectrally_normalized(Graph::empty(3)).gso(), Matrix::Zero(3, 3));
}

TEST(GraphText, RoundTripIsExact) {
  Rng rng(16);
  const auto g = Graph::from_matrix(oracle::random_symmetric(5, rng));
  std::istringstream is(graph_to_string(g));
  EXPECT_EQ(read_graph(is), g);
  std::istringstream bad("3\n0 1 0\n1 0");
  EXPECT_THROW(read_graph(bad), Error);
}

TEST(Assignment, MatchesExhaustiveSearch) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + trial % 6;
    Matrix c(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) c(i, j) = uniform(rng, 0, 10);
    const auto best = oracle::brute_force_assignment(c);
    EXPECT_NEAR(assignment_cost(c, solve_assignment(c)), assignment_cost(c, best), 1e-12);
    EXPECT_EQ(solve_assignment_lexicographic(c), best);
  }
}
