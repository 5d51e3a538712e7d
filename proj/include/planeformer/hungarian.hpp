#pragma once

#include <Eigen/Dense>
#include <vector>

namespace pf {

// Exact minimum-cost assignment on a square cost matrix (Kuhn-Munkres with
// potentials, O(n^3)). Returns row_of_col: for each column j the assigned row.
std::vector<int> solve_assignment(const Eigen::MatrixXd& cost);

// Convenience: minimum-cost assignment for a rectangular matrix, padded square
// with zero-cost dummies. Returns col_of_row (length rows); entries >= cols
// mean the row went to a dummy column.
std::vector<int> solve_assignment_rect(const Eigen::MatrixXd& cost);

}  // namespace pf
