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
#include <vector>

#include "cmkd/errors.hpp"
#include "cmkd/rng.hpp"
#include "cmkd/stats.hpp"

using namespace cmkd;

TEST_CASE("pearson reproduces a hand-computed coefficient") {
  // x = [1,2,3,4], y = [1,3,2,4]: cov = 2, var_x = var_y = 5/3 (sample),
  // so r = 2 / (5/3 * 3/5 ... ) -> worked through, exactly 0.8.
  std::vector<double> x{1, 2, 3, 4};
  std::vector<double> y{1, 3, 2, 4};
  CHECK(pearson(x, y) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(pearson(x, x) == doctest::Approx(1.0).epsilon(1e-15));
  std::vector<double> neg{4, 3, 2, 1};
  CHECK(pearson(x, neg) == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("pearson is invariant under positive affine maps of either input") {
  Rng rng(101);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 3 + rng.index(30);
    std::vector<double> x(n), y(n);
    for (auto& v : x) v = rng.normal();
    for (auto& v : y) v = rng.normal();
    const double base = pearson(x, y);
    const double a = rng.uniform(0.1, 5.0);
    const double b = rng.uniform(-10, 10);
    std::vector<double> xs(n);
    for (std::size_t i = 0; i < n; ++i) xs[i] = a * x[i] + b;
    CHECK(std::fabs(pearson(xs, y) - base) <= 1e-12);
    // A negative slope flips the sign exactly.
    for (std::size_t i = 0; i < n; ++i) xs[i] = -a * x[i] + b;
    CHECK(std::fabs(pearson(xs, y) + base) <= 1e-12);
  }
}

TEST_CASE("pearson stays within [-1, 1] and is symmetric") {
  Rng rng(102);
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 2 + rng.index(20);
    std::vector<double> x(n), y(n);
    for (auto& v : x) v = rng.uniform(-100, 100);
    for (auto& v : y) v = rng.uniform(-100, 100);
    if (std::adjacent_find(x.begin(), x.end(), std::not_equal_to<>()) == x.end()) continue;
    if (std::adjacent_find(y.begin(), y.end(), std::not_equal_to<>()) == y.end()) continue;
    const double r = pearson(x, y);
    CHECK(r <= 1.0 + 1e-12);
    CHECK(r >= -1.0 - 1e-12);
    CHECK(pearson(y, x) == doctest::Approx(r).epsilon(1e-15));
  }
}

TEST_CASE("pearson rejects degenerate inputs") {
  std::vector<double> ok{1, 2, 3};
  std::vector<double> flat{5, 5, 5};
  std::vector<double> one{1};
  std::vector<double> mismatched{1, 2};
  CHECK_THROWS_AS(pearson(flat, ok), DegenerateInputError);
  CHECK_THROWS_AS(pearson(ok, flat), DegenerateInputError);
  CHECK_THROWS_AS(pearson(one, one), ContractError);
  CHECK_THROWS_AS(pearson(ok, mismatched), DimensionError);
}

TEST_CASE("hard ranks average tied positions") {
  std::vector<double> x{3, 1, 3};
  auto r = hard_ranks(x);
  CHECK(r[0] == doctest::Approx(2.5));
  CHECK(r[1] == doctest::Approx(1.0));
  CHECK(r[2] == doctest::Approx(2.5));

  std::vector<double> all_tied{7, 7, 7, 7};
  for (double v : hard_ranks(all_tied)) CHECK(v == doctest::Approx(2.5));

  std::vector<double> distinct{10, -5, 0.5, 2};
  auto rd = hard_ranks(distinct);
  CHECK(rd == std::vector<double>{4, 1, 2, 3});
}

TEST_CASE("spearman reproduces a hand-computed coefficient") {
  // Ranks of [1,2,3] are [1,2,3]; ranks of [3,1,2] are [3,1,2].
  // 1 - 6*(4+1+1)/(3*8) = 1 - 36/24 = -0.5.
  std::vector<double> x{1, 2, 3};
  std::vector<double> y{3, 1, 2};
  CHECK(spearman(x, y) == doctest::Approx(-0.5).epsilon(1e-12));
}

TEST_CASE("spearman matches the classic closed form on tie-free data") {
  Rng rng(103);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 3 + rng.index(30);
    std::vector<double> x(n), y(n);
    for (auto& v : x) v = rng.normal();
    for (auto& v : y) v = rng.normal();
    auto rx = hard_ranks(x);
    auto ry = hard_ranks(y);
    double d2 = 0;
    for (std::size_t i = 0; i < n; ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
    const double nn = static_cast<double>(n);
    const double closed = 1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0));
    CHECK(spearman(x, y) == doctest::Approx(closed).epsilon(1e-12));
  }
}

TEST_CASE("spearman is exactly one under strictly monotone transforms") {
  Rng rng(104);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 3 + rng.index(20);
    std::vector<double> x(n);
    for (auto& v : x) v = rng.uniform(-4, 4);
    std::vector<double> warped(n);
    for (std::size_t i = 0; i < n; ++i) warped[i] = std::exp(0.5 * x[i]) + x[i] * x[i] * x[i];
    const bool distinct = [&] {
      auto s = x;
      std::sort(s.begin(), s.end());
      return std::adjacent_find(s.begin(), s.end()) == s.end();
    }();
    if (!distinct) continue;
    CHECK(spearman(x, warped) == 1.0);  // identical ranks short-cut exactly
    for (auto& v : warped) v = -v;
    CHECK(spearman(x, warped) == doctest::Approx(-1.0).epsilon(1e-12));
  }
}

TEST_CASE("spearman depends only on ranks") {
  std::vector<double> x{0.1, 5.0, 2.0, 3.0};
  std::vector<double> y{-7, 0.4, 0.1, 0.2};
  std::vector<double> x2{-100, 100, 0, 1};  // same rank order as x
  CHECK(spearman(x, y) == doctest::Approx(spearman(x2, y)).epsilon(1e-15));
}

TEST_CASE("entropy matches hand-computed values and conventions") {
  // -(0.75*ln 0.75 + 0.25*ln 0.25) = 0.5623351446188083.
  std::vector<double> p{0.75, 0.25};
  CHECK(entropy(p) == doctest::Approx(0.5623351446188083).epsilon(1e-12));

  std::vector<double> onehot{0, 0, 1, 0};
  CHECK(entropy(onehot) == 0.0);  // 0*log 0 treated as 0

  std::vector<double> uniform(8, 0.125);
  CHECK(entropy(uniform) == doctest::Approx(std::log(8.0)).epsilon(1e-12));

  std::vector<double> not_normalized{0.5, 0.4};
  CHECK_THROWS_AS(entropy(not_normalized), DomainError);
  std::vector<double> negative{1.25, -0.25};
  CHECK_THROWS_AS(entropy(negative), DomainError);
}

TEST_CASE("uniform distribution maximizes entropy") {
  Rng rng(105);
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 2 + rng.index(12);
    std::vector<double> p(n);
    double total = 0;
    for (auto& v : p) {
      v = rng.uniform(0.01, 1.0);
      total += v;
    }
    for (auto& v : p) v /= total;
    CHECK(entropy(p) <= std::log(static_cast<double>(n)) + 1e-12);
    CHECK(entropy(p) >= 0.0);
  }
}

TEST_CASE("batch mean entropy averages row entropies") {
  std::vector<double> probs{0.75, 0.25, 0.5, 0.5};
  const double expected = (0.5623351446188083 + std::log(2.0)) / 2.0;
  CHECK(batch_mean_entropy(probs, 2, 2) == doctest::Approx(expected).epsilon(1e-12));
  CHECK_THROWS_AS(batch_mean_entropy(probs, 3, 2), DimensionError);
}

TEST_CASE("zscore matches a hand-computed standardization") {
  // [2,4,6]: mean 4, sample std 2 -> [-1, 0, 1].
  std::vector<double> x{2, 4, 6};
  auto z = zscore(x);
  CHECK(z[0] == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(z[1] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(z[2] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("zscore output has zero mean and unit sample variance") {
  Rng rng(106);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 2 + rng.index(40);
    std::vector<double> x(n);
    for (auto& v : x) v = rng.uniform(-50, 50);
    bool constant = true;
    for (double v : x) constant = constant && (v == x[0]);
    if (constant) continue;
    auto z = zscore(x);
    double mean = 0;
    for (double v : z) mean += v;
    mean /= static_cast<double>(n);
    double var = 0;
    for (double v : z) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n - 1);
    CHECK(std::fabs(mean) <= 1e-12);
    CHECK(std::fabs(var - 1.0) <= 1e-12);
  }
}

TEST_CASE("zscore removes affine structure") {
  Rng rng(107);
  std::vector<double> x(16);
  for (auto& v : x) v = rng.normal();
  auto z = zscore(x);
  std::vector<double> shifted(16);
  for (std::size_t i = 0; i < 16; ++i) shifted[i] = 3.5 * x[i] - 42.0;
  auto zs = zscore(shifted);
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(zs[i] == doctest::Approx(z[i]).epsilon(1e-12));
  }
}

TEST_CASE("zscore rejects degenerate inputs") {
  CHECK_THROWS_AS(zscore(std::vector<double>{3.0, 3.0, 3.0}), DegenerateInputError);
  CHECK_THROWS_AS(zscore(std::vector<double>{1.0}), ContractError);
}
