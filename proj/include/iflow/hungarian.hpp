#pragma once

// Kuhn-Munkres with potentials, O(n^3), square matrices.

#include <Eigen/Dense>

#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

namespace iflow {

struct Assignment {
  std::vector<std::size_t> row_to_col;
  double total = 0.0;
};

inline Assignment min_cost_assignment(const Eigen::MatrixXd& cost) {
  const auto n = static_cast<std::size_t>(cost.rows());
  if (cost.cols() != cost.rows()) throw std::invalid_argument("min_cost_assignment: matrix must be square");
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is a virtual start column.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment a;
  a.row_to_col.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) {
    if (match[j] != 0) a.row_to_col[match[j] - 1] = j - 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    a.total += cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a.row_to_col[i]));
  }
  return a;
}

inline Assignment max_weight_assignment(const Eigen::MatrixXd& weight) {
  Assignment a = min_cost_assignment(-weight);
  a.total = -a.total;
  return a;
}

}  // namespace iflow
