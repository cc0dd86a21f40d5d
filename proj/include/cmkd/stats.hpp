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

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace cmkd {

// Pearson correlation coefficient, two-pass (center first, then accumulate).
// Requires n >= 2 and matching lengths; a constant input has no variance and
// raises DegenerateInputError.
double pearson(std::span<const double> x, std::span<const double> y);

// Ascending 1-based ranks; tied values share the average of their positions,
// e.g. [3, 1, 3] -> [2.5, 1, 2.5].
std::vector<double> hard_ranks(std::span<const double> x);

// Pearson correlation of the rank vectors. Identical rank vectors short-cut
// to exactly 1 (they are mathematically perfectly correlated). On tie-free
// inputs this coincides with the classic 1 - 6*sum(d^2)/(n(n^2-1)) form.
double spearman(std::span<const double> x, std::span<const double> y);

// Shannon entropy in nats with the 0*log(0) = 0 convention. p must be a
// probability vector: entries >= 0 and sum within 1e-6 of 1 (DomainError).
double entropy(std::span<const double> p);

// Mean row entropy of a row-major [rows x cols] probability matrix.
double batch_mean_entropy(std::span<const double> probs, std::size_t rows, std::size_t cols);

// Standardization with the sample standard deviation (n - 1 divisor).
// Requires n >= 2; constant input -> DegenerateInputError.
std::vector<double> zscore(std::span<const double> x);

}  // namespace cmkd
