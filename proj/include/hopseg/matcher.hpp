#pragma once

#include <cstdint>
#include <utility>
#include <vector>

namespace hopseg {

struct MatchResult {
  std::vector<std::pair<int64_t, int64_t>> assignment;  // (prediction index, ground-truth index)
  std::vector<int64_t> unmatched_predictions;
  double total_cost = 0.0;
};

// Globally minimal-cost injective assignment of min(n_pred, n_gt) pairs.
// Tie-break: the lexicographically smallest assignment among all minima, with
// the assignment read as the pred-index-ordered pair sequence. Costs must be
// finite; NaN or Inf throws std::invalid_argument.
MatchResult hungarian_match(const std::vector<std::vector<double>>& cost_matrix);

}  // namespace hopseg
