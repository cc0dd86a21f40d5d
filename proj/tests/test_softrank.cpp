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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "cmkd/errors.hpp"
#include "cmkd/rng.hpp"
#include "cmkd/softrank.hpp"
#include "cmkd/stats.hpp"

using namespace cmkd;

namespace {

// Independent projection oracle for small n. The Euclidean projection of a
// descending-sorted point s onto the convex hull of permutations of
// (1, ..., n) lies on a face described by a contiguous partition of the
// sorted positions into pools. Projecting onto such a face's affine hull
// gives, per pool B: v_i = s_i - mean_B(s) + mean_B(rho), with rho the
// descending target (n, ..., 1). Enumerating all 2^(n-1) partitions, keeping
// the feasible candidates (non-increasing, prefix sums dominated by rho's),
// and taking the closest to s recovers the exact projection.
std::vector<double> brute_force_projection(std::vector<double> z, double eps) {
  const std::size_t n = z.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (z[a] != z[b]) return z[a] > z[b];
    return a < b;
  });
  std::vector<double> s(n);
  for (std::size_t k = 0; k < n; ++k) s[k] = z[order[k]] / eps;
  std::vector<double> rho(n);
  for (std::size_t k = 0; k < n; ++k) rho[k] = static_cast<double>(n - k);

  double best_dist = std::numeric_limits<double>::infinity();
  std::vector<double> best(n, 0.0);
  const std::size_t masks = static_cast<std::size_t>(1) << (n - 1);
  for (std::size_t mask = 0; mask < masks; ++mask) {
    // Bit k set = a pool boundary between sorted positions k and k+1.
    std::vector<double> v(n);
    std::size_t start = 0;
    for (std::size_t k = 0; k <= n - 1; ++k) {
      const bool cut = (k == n - 1) || ((mask >> k) & 1u);
      if (!cut) continue;
      double ms = 0, mr = 0;
      for (std::size_t i = start; i <= k; ++i) {
        ms += s[i];
        mr += rho[i];
      }
      const double count = static_cast<double>(k - start + 1);
      ms /= count;
      mr /= count;
      for (std::size_t i = start; i <= k; ++i) v[i] = s[i] - ms + mr;
      start = k + 1;
    }
    bool feasible = true;
    for (std::size_t i = 0; i + 1 < n && feasible; ++i) {
      if (v[i] < v[i + 1] - 1e-12) feasible = false;
    }
    double prefix_v = 0, prefix_r = 0;
    for (std::size_t i = 0; i < n && feasible; ++i) {
      prefix_v += v[i];
      prefix_r += rho[i];
      if (prefix_v > prefix_r + 1e-9) feasible = false;
    }
    if (!feasible) continue;
    double dist = 0;
    for (std::size_t i = 0; i < n; ++i) dist += (v[i] - s[i]) * (v[i] - s[i]);
    if (dist < best_dist) {
      best_dist = dist;
      best = v;
    }
  }
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) out[order[k]] = best[k];
  return out;
}

}  // namespace

TEST_CASE("isotonic regression pools adjacent violators to block means") {
  // Already non-increasing input is untouched.
  std::vector<double> flat{5, 3, 1};
  CHECK(isotonic_regression(flat) == std::vector<double>{5, 3, 1});

  // A single violating pair pools to its mean.
  std::vector<double> pair{1, 3};
  auto fit = isotonic_regression(pair);
  CHECK(fit[0] == doctest::Approx(2.0));
  CHECK(fit[1] == doctest::Approx(2.0));

  // Everything increasing collapses to the global mean.
  std::vector<double> inc{1, 2, 3, 4};
  for (double v : isotonic_regression(inc)) CHECK(v == doctest::Approx(2.5));

  CHECK_THROWS_AS(isotonic_regression(std::vector<double>{}), ContractError);
}

TEST_CASE("isotonic regression output is non-increasing and mass preserving") {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.index(20);
    std::vector<double> s(n);
    for (auto& v : s) v = rng.uniform(-5, 5);
    auto fit = isotonic_regression(s);
    REQUIRE(fit.size() == n);
    double sum_in = 0, sum_out = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sum_in += s[i];
      sum_out += fit[i];
      if (i > 0) CHECK(fit[i] <= fit[i - 1] + 1e-12);
    }
    CHECK(sum_out == doctest::Approx(sum_in).epsilon(1e-12));
  }
}

TEST_CASE("soft ranks always sum to n(n+1)/2") {
  Rng rng(22);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 2 + rng.index(63);
    std::vector<double> z(n);
    for (auto& v : z) v = rng.uniform(-10, 10);
    const double eps = std::pow(10.0, rng.uniform(-3, 1));
    auto result = soft_rank(z, eps);
    const double total = std::accumulate(result.ranks.begin(), result.ranks.end(), 0.0);
    const double expected = static_cast<double>(n) * static_cast<double>(n + 1) / 2.0;
    CHECK(std::fabs(total - expected) <= 1e-9);
  }
}

TEST_CASE("small epsilon recovers hard ranks on well separated inputs") {
  Rng rng(33);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.index(15);
    // Build values with pairwise gaps of at least 0.1.
    std::vector<double> z(n);
    double acc = rng.uniform(-5, 0);
    for (auto& v : z) {
      acc += 0.1 + rng.uniform(0, 1);
      v = acc;
    }
    rng.shuffle(z);
    auto result = soft_rank(z, 1e-3);
    auto hard = hard_ranks(z);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::fabs(result.ranks[i] - hard[i]) <= 1e-2);
    }
  }
}

TEST_CASE("large epsilon flattens every rank toward the midpoint") {
  std::vector<double> z{0.3, -0.2, 0.9, 0.1};
  auto result = soft_rank(z, 1e6);
  for (double r : result.ranks) CHECK(r == doctest::Approx(2.5).epsilon(1e-4));
}

TEST_CASE("tied inputs share identical soft ranks") {
  std::vector<double> z{1.0, 2.0, 1.0, 2.0};
  auto result = soft_rank(z, 0.5);
  CHECK(result.ranks[0] == doctest::Approx(result.ranks[2]).epsilon(1e-15));
  CHECK(result.ranks[1] == doctest::Approx(result.ranks[3]).epsilon(1e-15));
  CHECK(result.ranks[1] > result.ranks[0]);
}

TEST_CASE("soft ranking preserves the input ordering") {
  Rng rng(44);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.index(10);
    std::vector<double> z(n);
    for (auto& v : z) v = rng.uniform(-3, 3);
    auto result = soft_rank(z, 0.3);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (z[i] > z[j]) CHECK(result.ranks[i] >= result.ranks[j] - 1e-12);
      }
    }
  }
}

TEST_CASE("projection matches the brute-force face enumeration for n <= 6") {
  Rng rng(55);
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 2 + rng.index(5);
    std::vector<double> z(n);
    for (auto& v : z) v = rng.uniform(-4, 4);
    // Mix in clustered values so multi-element pools actually occur.
    if (t % 3 == 0 && n >= 3) z[1] = z[0] + rng.uniform(-0.05, 0.05);
    const double eps = std::pow(10.0, rng.uniform(-1, 1));
    auto result = soft_rank(z, eps);
    auto oracle = brute_force_projection(z, eps);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::fabs(result.ranks[i] - oracle[i]) <= 1e-8);
    }
  }
}

TEST_CASE("reported pools cover the sequence and match rank plateaus") {
  std::vector<double> z{0.52, 0.50, 0.48, -1.0, 2.0};
  auto result = soft_rank(z, 1.0);
  REQUIRE_FALSE(result.pools.empty());
  std::size_t covered = 0;
  for (auto [lo, hi] : result.pools) {
    CHECK(lo < hi);
    CHECK(lo == covered);
    covered = hi;
  }
  CHECK(covered == z.size());
  // Positions inside one pool carry a shared rank offset from their scores:
  // within a pool, rank_i - s_i is constant.
  for (auto [lo, hi] : result.pools) {
    const double base =
        result.ranks[result.order[lo]] - z[result.order[lo]] / result.epsilon;
    for (std::size_t k = lo; k < hi; ++k) {
      const double off = result.ranks[result.order[k]] - z[result.order[k]] / result.epsilon;
      CHECK(off == doctest::Approx(base).epsilon(1e-12));
    }
  }
}

TEST_CASE("backward matches central finite differences") {
  Rng rng(66);
  const double h = 1e-6;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 3 + rng.index(8);
    std::vector<double> z(n);
    for (auto& v : z) v = rng.uniform(-2, 2);
    // Keep a safety margin away from ties so the pool structure is stable
    // under the finite-difference probes.
    std::sort(z.begin(), z.end());
    bool ok = true;
    for (std::size_t i = 1; i < n; ++i) ok = ok && (z[i] - z[i - 1] > 1e-3);
    if (!ok) continue;
    rng.shuffle(z);

    std::vector<double> w(n);
    for (auto& v : w) v = rng.uniform(-1, 1);
    const double eps = 0.5;

    auto result = soft_rank(z, eps);
    auto grad = soft_rank_backward(result, w);

    for (std::size_t i = 0; i < n; ++i) {
      auto zp = z, zm = z;
      zp[i] += h;
      zm[i] -= h;
      auto rp = soft_rank(zp, eps).ranks;
      auto rm = soft_rank(zm, eps).ranks;
      double fp = 0, fm = 0;
      for (std::size_t k = 0; k < n; ++k) {
        fp += w[k] * rp[k];
        fm += w[k] * rm[k];
      }
      const double numeric = (fp - fm) / (2 * h);
      CHECK(std::fabs(grad[i] - numeric) <= 1e-5);
    }
  }
}

TEST_CASE("gradient of the rank sum is exactly zero") {
  // The ranks always sum to the same constant, so a constant upstream
  // vector must map to a zero input gradient.
  std::vector<double> z{0.4, -1.2, 0.9, 0.0, 0.3};
  auto result = soft_rank(z, 0.7);
  auto grad = soft_rank_backward(result, std::vector<double>(z.size(), 1.0));
  for (double g : grad) CHECK(g == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("degenerate soft rank inputs are rejected") {
  CHECK_THROWS_AS(soft_rank(std::vector<double>{1.0}, 1.0), ContractError);
  CHECK_THROWS_AS(soft_rank(std::vector<double>{1.0, 2.0}, 0.0), ParameterError);
  CHECK_THROWS_AS(soft_rank(std::vector<double>{1.0, 2.0}, -1.0), ParameterError);
}
