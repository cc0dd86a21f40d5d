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

#include "cmkd/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cmkd/errors.hpp"

namespace cmkd {

namespace {

void check_pair(std::span<const double> x, std::span<const double> y, const char* what) {
  if (x.size() != y.size()) {
    throw DimensionError(std::string(what) + ": lengths differ, " + std::to_string(x.size()) +
                         " vs " + std::to_string(y.size()));
  }
  if (x.size() < 2) {
    throw ContractError(std::string(what) + ": need at least 2 samples, got " +
                        std::to_string(x.size()));
  }
}

double mean_of(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

}  // namespace

double pearson(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, "pearson");
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0) throw DegenerateInputError("pearson: first input is constant");
  if (syy == 0.0) throw DegenerateInputError("pearson: second input is constant");
  return sxy / (std::sqrt(sxx) * std::sqrt(syy));
}

std::vector<double> hard_ranks(std::span<const double> x) {
  if (x.empty()) throw ContractError("hard_ranks: empty input");
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    // Positions i..j (0-based) are tied; each gets the average 1-based rank.
    const double avg = static_cast<double>(i + j + 2) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, "spearman");
  const std::vector<double> rx = hard_ranks(x);
  const std::vector<double> ry = hard_ranks(y);
  if (rx == ry) return 1.0;
  return pearson(rx, ry);
}

double entropy(std::span<const double> p) {
  if (p.empty()) throw ContractError("entropy: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0) {
      throw DomainError("entropy: negative probability " + std::to_string(p[i]) + " at index " +
                        std::to_string(i));
    }
    total += p[i];
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw DomainError("entropy: probabilities sum to " + std::to_string(total) + ", expected 1");
  }
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

double batch_mean_entropy(std::span<const double> probs, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0 || probs.size() != rows * cols) {
    throw DimensionError("batch_mean_entropy: buffer of " + std::to_string(probs.size()) +
                         " values is not [" + std::to_string(rows) + " x " + std::to_string(cols) +
                         "]");
  }
  double s = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    s += entropy(probs.subspan(r * cols, cols));
  }
  return s / static_cast<double>(rows);
}

std::vector<double> zscore(std::span<const double> x) {
  if (x.size() < 2) {
    throw ContractError("zscore: need at least 2 samples, got " + std::to_string(x.size()));
  }
  const double mu = mean_of(x);
  double ss = 0.0;
  for (double v : x) {
    const double d = v - mu;
    ss += d * d;
  }
  if (ss == 0.0) throw DegenerateInputError("zscore: constant input has zero variance");
  const double sigma = std::sqrt(ss / static_cast<double>(x.size() - 1));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mu) / sigma;
  return out;
}

}  // namespace cmkd
