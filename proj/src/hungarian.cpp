#include "planeformer/hungarian.hpp"

#include <limits>
#include <stdexcept>

namespace pf {

// Potentials formulation. Rows/cols are 1-indexed internally; p0 holds the
// column currently being inserted.
std::vector<int> solve_assignment(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw std::invalid_argument("assignment matrix must be square");
  if (n == 0) return {};

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  std::vector<int> row_of_col(n);
  for (int j = 1; j <= n; ++j) row_of_col[j - 1] = p[j] - 1;
  return row_of_col;
}

std::vector<int> solve_assignment_rect(const Eigen::MatrixXd& cost) {
  const int rows = static_cast<int>(cost.rows());
  const int cols = static_cast<int>(cost.cols());
  const int n = rows > cols ? rows : cols;
  if (n == 0) return {};
  Eigen::MatrixXd padded = Eigen::MatrixXd::Zero(n, n);
  padded.topLeftCorner(rows, cols) = cost;
  std::vector<int> row_of_col = solve_assignment(padded);
  std::vector<int> col_of_row(rows, -1);
  for (int j = 0; j < n; ++j) {
    int i = row_of_col[j];
    if (i < rows) col_of_row[i] = j;
  }
  return col_of_row;
}

}  // namespace pf
