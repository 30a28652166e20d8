#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "hopseg/matcher.hpp"

using hopseg::MatchResult;
using hopseg::hungarian_match;

namespace {

// Exhaustive oracle: enumerates every injective assignment of min(n, m) pairs
// and keeps the cheapest; ties resolved by the lexicographically smallest
// pred-index-ordered pair sequence. Total cost is summed in pred-index order,
// like the implementation, so equality can be exact.
struct BruteForce {
  const std::vector<std::vector<double>>& cost;
  size_t n, m, need;
  std::vector<bool> gt_used;
  std::vector<std::pair<int64_t, int64_t>> current, best;
  double best_cost = std::numeric_limits<double>::infinity();
  bool found = false;

  explicit BruteForce(const std::vector<std::vector<double>>& c)
      : cost(c), n(c.size()), m(n ? c[0].size() : 0), need(std::min(n, m)), gt_used(m, false) {}

  void consider() {
    double total = 0.0;
    for (const auto& [i, j] : current)
      total += cost[static_cast<size_t>(i)][static_cast<size_t>(j)];
    if (!found || total < best_cost - 1e-12 ||
        (std::abs(total - best_cost) <= 1e-12 && current < best)) {
      // re-sum so the winning total matches the implementation bit for bit
      best_cost = total;
      best = current;
      found = true;
    }
  }

  void search(size_t pred) {
    if (current.size() == need) {
      consider();
      return;
    }
    if (pred == n || n - pred < need - current.size()) return;
    for (size_t j = 0; j < m; ++j) {
      if (gt_used[j]) continue;
      gt_used[j] = true;
      current.emplace_back(static_cast<int64_t>(pred), static_cast<int64_t>(j));
      search(pred + 1);
      current.pop_back();
      gt_used[j] = false;
    }
    search(pred + 1);  // leave this prediction unmatched
  }
};

MatchResult brute_force(const std::vector<std::vector<double>>& cost) {
  BruteForce bf(cost);
  bf.search(0);
  MatchResult result;
  result.assignment = bf.best;
  result.total_cost = bf.found ? bf.best_cost : 0.0;
  std::vector<bool> matched(bf.n, false);
  for (const auto& [i, j] : result.assignment) matched[static_cast<size_t>(i)] = true;
  for (size_t i = 0; i < bf.n; ++i)
    if (!matched[i]) result.unmatched_predictions.push_back(static_cast<int64_t>(i));
  return result;
}

}  // namespace

TEST_CASE("hungarian matches the exhaustive oracle on random matrices") {
  std::mt19937_64 rng(12345);
  auto uniform = [&](double lo, double hi) {
    return lo + (static_cast<double>(rng() >> 11) * 0x1.0p-53) * (hi - lo);
  };
  for (int trial = 0; trial < 200; ++trial) {
    const size_t n = 1 + rng() % 6, m = 1 + rng() % 6;
    std::vector<std::vector<double>> cost(n, std::vector<double>(m));
    for (auto& row : cost)
      for (auto& c : row) c = uniform(-5.0, 5.0);

    const auto expected = brute_force(cost);
    const auto actual = hungarian_match(cost);
    CAPTURE(trial);
    REQUIRE(actual.assignment.size() == expected.assignment.size());
    CHECK(actual.total_cost == expected.total_cost);  // exact, not approximate
    CHECK(actual.assignment == expected.assignment);
    CHECK(actual.unmatched_predictions == expected.unmatched_predictions);
  }
}

TEST_CASE("hungarian picks the lexicographically smallest optimum on ties") {
  // two optima: {(0,0),(1,1)} and {(0,1),(1,0)} both cost 2
  std::vector<std::vector<double>> cost = {{1.0, 1.0}, {1.0, 1.0}};
  auto result = hungarian_match(cost);
  REQUIRE(result.assignment.size() == 2);
  CHECK(result.assignment[0] == std::pair<int64_t, int64_t>{0, 0});
  CHECK(result.assignment[1] == std::pair<int64_t, int64_t>{1, 1});

  // forcing pred 0 to the later gt must flip the rest
  cost = {{5.0, 1.0}, {1.0, 5.0}, {3.0, 3.0}};
  result = hungarian_match(cost);
  REQUIRE(result.assignment.size() == 2);
  CHECK(result.assignment == std::vector<std::pair<int64_t, int64_t>>{{0, 1}, {1, 0}});
  CHECK(result.unmatched_predictions == std::vector<int64_t>{2});
}

TEST_CASE("hungarian handles rectangular shapes") {
  // more predictions than ground truth
  std::vector<std::vector<double>> cost = {{3.0}, {1.0}, {2.0}};
  auto result = hungarian_match(cost);
  REQUIRE(result.assignment.size() == 1);
  CHECK(result.assignment[0] == std::pair<int64_t, int64_t>{1, 0});
  CHECK(result.unmatched_predictions == std::vector<int64_t>{0, 2});
  CHECK(result.total_cost == 1.0);

  // more ground truth than predictions
  cost = {{3.0, 1.0, 2.0}};
  result = hungarian_match(cost);
  REQUIRE(result.assignment.size() == 1);
  CHECK(result.assignment[0] == std::pair<int64_t, int64_t>{0, 1});
  CHECK(result.unmatched_predictions.empty());
}

TEST_CASE("hungarian rejects non-finite costs") {
  CHECK_THROWS_AS(hungarian_match({{1.0, std::nan("")}}), std::invalid_argument);
  CHECK_THROWS_AS(hungarian_match({{std::numeric_limits<double>::infinity()}}),
                  std::invalid_argument);
}

TEST_CASE("hungarian on empty input") {
  auto result = hungarian_match({});
  CHECK(result.assignment.empty());
  CHECK(result.total_cost == 0.0);
}
