//------------------------------------------------------------------------------
//
//   Copyright 2026 The CMKD Authors
//
//   Licensed under the Apache License, Version 2.0 (the "License");
//   you may not use this file except in compliance with the License.
//   You may obtain a copy of the License at
//
//       http://www.apache.org/licenses/LICENSE-2.0
//
//   Unless required by applicable law or agreed to in writing, software
//   distributed under the License is distributed on an "AS IS" BASIS,
//   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
//   See the License for the specific language governing permissions and
//   limitations under the License.
//
//------------------------------------------------------------------------------

#include "cmkd/softrank.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "cmkd/errors.hpp"

namespace cmkd {

namespace {

struct Pool {
  std::size_t start;  // first sorted position in the pool
  std::size_t count;
  double sum;
};

// Pool-adjacent-violators for the non-increasing constraint: walk left to
// right keeping a stack of pools; whenever a new pool's mean exceeds its
// left neighbour's, the two merge. Each element enters and leaves the stack
// at most once, so the whole pass is O(n).
std::vector<Pool> pav_non_increasing(std::span<const double> s) {
  std::vector<Pool> stack;
  stack.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    stack.push_back({i, 1, s[i]});
    while (stack.size() > 1) {
      const Pool& right = stack[stack.size() - 1];
      const Pool& left = stack[stack.size() - 2];
      if (right.sum * static_cast<double>(left.count) <=
          left.sum * static_cast<double>(right.count)) {
        break;  // means already ordered left >= right
      }
      Pool merged{left.start, left.count + right.count, left.sum + right.sum};
      stack.pop_back();
      stack.back() = merged;
    }
  }
  return stack;
}

}  // namespace

std::vector<double> isotonic_regression(std::span<const double> s) {
  if (s.empty()) throw ContractError("isotonic_regression: empty input");
  const std::vector<Pool> pools = pav_non_increasing(s);
  std::vector<double> fit(s.size());
  for (const Pool& p : pools) {
    const double value = p.sum / static_cast<double>(p.count);
    for (std::size_t i = p.start; i < p.start + p.count; ++i) fit[i] = value;
  }
  return fit;
}

SoftRankResult soft_rank(std::span<const double> scores, double epsilon) {
  const std::size_t n = scores.size();
  if (n < 2) {
    throw ContractError("soft_rank: need at least 2 scores, got " + std::to_string(n));
  }
  if (!(epsilon > 0.0)) {
    throw ParameterError("soft_rank: epsilon must be > 0, got " + std::to_string(epsilon));
  }

  SoftRankResult result;
  result.epsilon = epsilon;
  result.order.resize(n);
  std::iota(result.order.begin(), result.order.end(), std::size_t{0});
  std::stable_sort(result.order.begin(), result.order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  // Projection of s = z/eps onto the permutahedron of w = (n, n-1, ..., 1)
  // in descending-sorted coordinates: ranks_sorted = s_sorted - v where v is
  // the non-increasing isotonic fit of (s_sorted - w).
  std::vector<double> diff(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double s_k = scores[result.order[k]] / epsilon;
    const double w_k = static_cast<double>(n - k);
    diff[k] = s_k - w_k;
  }
  const std::vector<Pool> pools = pav_non_increasing(diff);

  result.ranks.resize(n);
  result.pools.reserve(pools.size());
  for (const Pool& p : pools) {
    result.pools.emplace_back(p.start, p.start + p.count);
    const double v = p.sum / static_cast<double>(p.count);
    for (std::size_t k = p.start; k < p.start + p.count; ++k) {
      const double s_k = scores[result.order[k]] / epsilon;
      result.ranks[result.order[k]] = s_k - v;
    }
  }
  return result;
}

std::vector<double> soft_rank_backward(const SoftRankResult& result,
                                       std::span<const double> upstream) {
  const std::size_t n = result.ranks.size();
  if (upstream.size() != n) {
    throw DimensionError("soft_rank_backward: upstream size " + std::to_string(upstream.size()) +
                         " does not match rank count " + std::to_string(n));
  }
  // In sorted coordinates the Jacobian is (I - B)/eps with B the pool
  // block-averaging matrix, and it is symmetric, so the vector-Jacobian
  // product is: subtract each pool's mean from the upstream slice and scale.
  std::vector<double> sorted_up(n);
  for (std::size_t k = 0; k < n; ++k) sorted_up[k] = upstream[result.order[k]];

  std::vector<double> grad(n);
  for (const auto& [start, end] : result.pools) {
    double pool_mean = 0.0;
    for (std::size_t k = start; k < end; ++k) pool_mean += sorted_up[k];
    pool_mean /= static_cast<double>(end - start);
    for (std::size_t k = start; k < end; ++k) {
      grad[result.order[k]] = (sorted_up[k] - pool_mean) / result.epsilon;
    }
  }
  return grad;
}

}  // namespace cmkd
