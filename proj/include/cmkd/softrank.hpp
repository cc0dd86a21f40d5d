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

// Differentiable ranking. soft_rank(z, eps) is the Euclidean projection of
// z/eps onto the permutahedron spanned by permutations of (1, ..., n): as
// eps -> 0 the result saturates to the hard ascending ranks (largest score
// gets rank n), as eps -> infinity every entry flattens to (n+1)/2. The
// projection reduces, after sorting, to an isotonic regression solved by
// pool-adjacent-violators, and the Jacobian is determined by the PAV pool
// structure: in sorted coordinates d(ranks)/d(z) = (I - B)/eps where B
// block-averages over each pool.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace cmkd {

// argmin_v ||v - s||^2 subject to v non-increasing, in O(n). Each output
// block carries the mean of the inputs it pooled. Empty input -> ContractError.
std::vector<double> isotonic_regression(std::span<const double> s);

struct SoftRankResult {
  std::vector<double> ranks;  // same order as the input scores
  // Sorting permutation used internally: order[k] is the index into the
  // original input of the k-th largest score (ties broken by index).
  std::vector<std::size_t> order;
  // Contiguous PAV pools over sorted positions, as [start, end) pairs.
  std::vector<std::pair<std::size_t, std::size_t>> pools;
  double epsilon = 1.0;
};

// Requires n >= 2 (ContractError) and eps > 0 (ParameterError).
SoftRankResult soft_rank(std::span<const double> scores, double epsilon);

// Vector-Jacobian product: upstream is d(loss)/d(ranks), the result is
// d(loss)/d(scores). Both in original input order.
std::vector<double> soft_rank_backward(const SoftRankResult& result,
                                       std::span<const double> upstream);

}  // namespace cmkd
