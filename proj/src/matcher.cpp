#include "hopseg/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace hopseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Shortest-augmenting-path assignment (Jonker-Volgenant style) for a
// rectangular matrix with rows <= cols. Returns col index per row.
std::vector<int> solve_rows_leq_cols(const std::vector<std::vector<double>>& a) {
  const int n = static_cast<int>(a.size());
  const int m = n == 0 ? 0 : static_cast<int>(a[0].size());
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
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
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

// Minimal achievable total over a sub-problem given by surviving row/col ids,
// re-summed directly from matrix entries (no potentials in the reported sum).
double min_cost_of(const std::vector<std::vector<double>>& cost, const std::vector<int>& rows,
                   const std::vector<int>& cols) {
  const int k = static_cast<int>(std::min(rows.size(), cols.size()));
  if (k == 0) return 0.0;
  const bool transpose = rows.size() > cols.size();
  const auto& rr = transpose ? cols : rows;
  const auto& cc = transpose ? rows : cols;
  std::vector<std::vector<double>> sub(rr.size(), std::vector<double>(cc.size()));
  for (size_t i = 0; i < rr.size(); ++i)
    for (size_t j = 0; j < cc.size(); ++j)
      sub[i][j] = transpose ? cost[cc[j]][rr[i]] : cost[rr[i]][cc[j]];
  auto match = solve_rows_leq_cols(sub);
  double total = 0.0;
  for (size_t i = 0; i < match.size(); ++i) total += sub[i][match[i]];
  return total;
}

}  // namespace

MatchResult hungarian_match(const std::vector<std::vector<double>>& cost_matrix) {
  const int n = static_cast<int>(cost_matrix.size());
  const int m = n == 0 ? 0 : static_cast<int>(cost_matrix[0].size());
  double max_abs = 0.0;
  for (const auto& row : cost_matrix) {
    if (static_cast<int>(row.size()) != m) throw std::invalid_argument("ragged cost matrix");
    for (double c : row) {
      if (!std::isfinite(c)) throw std::invalid_argument("cost matrix entries must be finite");
      max_abs = std::max(max_abs, std::abs(c));
    }
  }
  MatchResult result;
  if (n == 0 || m == 0) {
    for (int i = 0; i < n; ++i) result.unmatched_predictions.push_back(i);
    return result;
  }

  const double eps = 1e-9 * (1.0 + max_abs);
  std::vector<int> all_rows(n), all_cols(m);
  for (int i = 0; i < n; ++i) all_rows[i] = i;
  for (int j = 0; j < m; ++j) all_cols[j] = j;
  double remaining_budget = min_cost_of(cost_matrix, all_rows, all_cols);

  // Lexicographic fixing: walk preds in order and commit the smallest gt (or
  // "unmatched" when forced) that keeps the global minimum attainable.
  std::vector<int> free_cols = all_cols;
  std::vector<int> free_rows = all_rows;
  for (int i = 0; i < n; ++i) {
    std::vector<int> rows_after;
    for (int r : free_rows)
      if (r != i) rows_after.push_back(r);
    bool fixed = false;
    for (size_t cj = 0; cj < free_cols.size() && !fixed; ++cj) {
      const int g = free_cols[cj];
      std::vector<int> cols_after;
      for (int c : free_cols)
        if (c != g) cols_after.push_back(c);
      const double total = cost_matrix[i][g] + min_cost_of(cost_matrix, rows_after, cols_after);
      if (total <= remaining_budget + eps) {
        result.assignment.emplace_back(i, g);
        remaining_budget -= cost_matrix[i][g];
        free_cols = std::move(cols_after);
        fixed = true;
      }
    }
    if (!fixed) result.unmatched_predictions.push_back(i);
    free_rows = std::move(rows_after);
  }

  result.total_cost = 0.0;
  for (const auto& [pi, gi] : result.assignment) result.total_cost += cost_matrix[pi][gi];
  return result;
}

}  // namespace hopseg
