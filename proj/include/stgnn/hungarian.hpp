#pragma once

#include <limits>
#include <vector>

#include "stgnn/common.hpp"

namespace stgnn {

/// Minimum-cost perfect assignment on a square cost matrix (Hungarian method
/// with row/column potentials, O(n^3)). Returns col[i], the column assigned to
/// row i.
inline std::vector<int> solve_assignment(const Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw Error("solve_assignment: cost matrix must be square");
  if (n == 0) return {};
  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; index 0 is the virtual column.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> col(n, -1);
  for (int j = 1; j <= n; ++j) col[p[j] - 1] = j - 1;
  return col;
}

inline double assignment_cost(const Matrix& cost, const std::vector<int>& col) {
  double total = 0.0;
  for (std::size_t i = 0; i < col.size(); ++i) total += cost(static_cast<int>(i), col[i]);
  return total;
}

/// Optimal assignment with ties broken towards the lexicographically smallest
/// column sequence. Costs within `tol` (relative) of the optimum count as ties.
inline std::vector<int> solve_assignment_lexicographic(const Matrix& cost, double tol = 1e-12) {
  const int n = static_cast<int>(cost.rows());
  auto best = solve_assignment(cost);
  if (n <= 1) return best;
  const double optimum = assignment_cost(cost, best);
  const double slack = tol * std::max(1.0, std::abs(optimum));
  const double big = 1.0 + 4.0 * (cost.cwiseAbs().sum() + 1.0);

  std::vector<int> fixed(n, -1);
  Matrix work = cost;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      bool taken = false;
      for (int r = 0; r < i; ++r) taken = taken || fixed[r] == j;
      if (taken) continue;
      // Force row i onto column j and re-solve.
      Matrix trial = work;
      for (int c = 0; c < n; ++c)
        if (c != j) trial(i, c) = big;
      const auto cols = solve_assignment(trial);
      if (assignment_cost(cost, cols) <= optimum + slack && cols[i] == j) {
        fixed[i] = j;
        work = trial;
        break;
      }
    }
    if (fixed[i] < 0) fixed[i] = best[i];
  }
  return fixed;
}

}  // namespace stgnn
