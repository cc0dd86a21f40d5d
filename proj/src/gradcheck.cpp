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

#include "cmkd/gradcheck.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "cmkd/errors.hpp"
#include "cmkd/io_util.hpp"
#include "cmkd/losses.hpp"

namespace cmkd {

double fd_relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-2});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult run_case(const GradCheckCase& c, double tolerance, std::uint64_t seed,
                         double step) {
  if (!(step > 0.0)) throw ParameterError("finite-difference step must be positive");
  if (c.trials < 1) throw ParameterError("gradcheck case needs at least one trial");
  std::size_t count = 1;
  for (std::size_t d : c.shape) count *= d;

  // Per-case stream so adding or reordering cases cannot shift another
  // case's draws.
  const auto* name_bytes = reinterpret_cast<const unsigned char*>(c.name.data());
  Rng rng(Rng::mix(seed, fnv1a64({name_bytes, c.name.size()})));

  GradCheckResult res;
  res.name = c.name;
  for (int trial = 0; trial < c.trials; ++trial) {
    const std::vector<double> x = c.sample(rng);
    if (x.size() != count) {
      throw ContractError("gradcheck case '" + c.name + "' sampled " +
                          std::to_string(x.size()) + " values for a " + std::to_string(count) +
                          "-element input");
    }

    std::vector<double> analytic;
    {
      Tape tape;
      Tensor in(c.shape, x, /*requires_grad=*/true);
      Tensor loss = c.build_loss(in);
      if (loss.size() != 1) {
        throw ContractError("gradcheck case '" + c.name + "' loss is not scalar");
      }
      backward(loss);
      analytic = in.grad();
    }

    // Central differences on tape-free forwards.
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<double> xp = x;
      std::vector<double> xm = x;
      xp[i] += step;
      xm[i] -= step;
      const double fp = c.build_loss(Tensor(c.shape, std::move(xp))).item();
      const double fm = c.build_loss(Tensor(c.shape, std::move(xm))).item();
      const double numeric = (fp - fm) / (2.0 * step);
      res.max_rel_error = std::max(res.max_rel_error, fd_relative_error(analytic[i], numeric));
    }
  }
  res.pass = res.max_rel_error <= tolerance;
  return res;
}

//--------------------------------------------------------------------------
// Case construction
//--------------------------------------------------------------------------

namespace {

std::size_t shape_count(const std::vector<std::size_t>& shape) {
  std::size_t count = 1;
  for (std::size_t d : shape) count *= d;
  return count;
}

// Fixed pseudo-random constants; every case builds its own so cases stay
// independent of each other.
Tensor fixed_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  std::vector<double> values(shape_count(shape));
  for (double& v : values) v = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(values));
}

std::function<std::vector<double>(Rng&)> uniform_sampler(std::size_t count, double lo,
                                                         double hi) {
  return [count, lo, hi](Rng& rng) {
    std::vector<double> v(count);
    for (double& x : v) x = rng.uniform(lo, hi);
    return v;
  };
}

// Uniform on [-hi, hi] but pushed at least min_abs away from zero; for ops
// with a kink or pole at the origin.
std::function<std::vector<double>(Rng&)> nonzero_sampler(std::size_t count, double hi,
                                                         double min_abs) {
  return [count, hi, min_abs](Rng& rng) {
    std::vector<double> v(count);
    for (double& x : v) {
      x = rng.uniform(-hi, hi);
      if (std::abs(x) < min_abs) x = x < 0.0 ? x - min_abs : x + min_abs;
    }
    return v;
  };
}

// Uniform plus a per-coordinate deterministic offset; keeps argmax ties (and
// near-ties inside the finite-difference step) away from max/maxpool cases.
std::function<std::vector<double>(Rng&)> jittered_sampler(std::size_t count, double lo,
                                                          double hi) {
  return [count, lo, hi](Rng& rng) {
    std::vector<double> v(count);
    for (std::size_t i = 0; i < count; ++i) {
      v[i] = rng.uniform(lo, hi) + static_cast<double>(i) * 1e-3;
    }
    return v;
  };
}

// Scalar weighted sum that turns any tensor into a scalar loss with
// non-trivial per-element weighting.
Tensor weighted_sum(const Tensor& t, std::uint64_t weight_seed) {
  return sum(mul(t, fixed_tensor(t.shape(), weight_seed, -1.5, 1.5)));
}

GradCheckCase make_case(std::string name, std::vector<std::size_t> shape,
                        std::function<Tensor(const Tensor&)> build_loss,
                        std::function<std::vector<double>(Rng&)> sample) {
  GradCheckCase c;
  c.name = std::move(name);
  c.shape = std::move(shape);
  c.build_loss = std::move(build_loss);
  c.sample = std::move(sample);
  return c;
}

}  // namespace

std::vector<GradCheckCase> standard_cases() {
  std::vector<GradCheckCase> cases;
  const std::vector<std::size_t> mat{3, 10};
  const std::size_t mat_n = shape_count(mat);

  // ---- elementwise binaries -------------------------------------------------
  cases.push_back(make_case(
      "add_lhs", mat,
      [](const Tensor& x) { return weighted_sum(add(x, fixed_tensor({3, 10}, 11, -2, 2)), 12); },
      uniform_sampler(mat_n, -2, 2)));
  cases.push_back(make_case(
      "add_rhs", mat,
      [](const Tensor& x) { return weighted_sum(add(fixed_tensor({3, 10}, 13, -2, 2), x), 14); },
      uniform_sampler(mat_n, -2, 2)));
  cases.push_back(make_case(
      "add_scalar_broadcast", {1},
      [](const Tensor& x) { return weighted_sum(add(fixed_tensor({3, 10}, 15, -2, 2), x), 16); },
      uniform_sampler(1, -2, 2)));
  cases.push_back(make_case(
      "sub_lhs", mat,
      [](const Tensor& x) { return weighted_sum(sub(x, fixed_tensor({3, 10}, 17, -2, 2)), 18); },
      uniform_sampler(mat_n, -2, 2)));
  cases.push_back(make_case(
      "sub_rhs", mat,
      [](const Tensor& x) { return weighted_sum(sub(fixed_tensor({3, 10}, 19, -2, 2), x), 20); },
      uniform_sampler(mat_n, -2, 2)));
  cases.push_back(make_case(
      "mul_lhs", mat,
      [](const Tensor& x) { return weighted_sum(mul(x, fixed_tensor({3, 10}, 21, -2, 2)), 22); },
      uniform_sampler(mat_n, -2, 2)));
  cases.push_back(make_case(
      "mul_rhs", mat,
      [](const Tensor& x) { return weighted_sum(mul(fixed_tensor({3, 10}, 23, -2, 2), x), 24); },
      uniform_sampler(mat_n, -2, 2)));
  cases.push_back(make_case(
      "mul_same_input_twice", mat,
      [](const Tensor& x) { return weighted_sum(mul(x, x), 25); },
      uniform_sampler(mat_n, -2, 2)));
  cases.push_back(make_case(
      "div_lhs", mat,
      [](const Tensor& x) {
        return weighted_sum(div(x, fixed_tensor({3, 10}, 26, 0.5, 2.0)), 27);
      },
      uniform_sampler(mat_n, -2, 2)));
  cases.push_back(make_case(
      "div_rhs", mat,
      [](const Tensor& x) {
        return weighted_sum(div(fixed_tensor({3, 10}, 28, -2, 2), x), 29);
      },
      nonzero_sampler(mat_n, 2.0, 0.3)));
  cases.push_back(make_case(
      "div_scalar_broadcast", {1},
      [](const Tensor& x) {
        return weighted_sum(div(fixed_tensor({3, 10}, 30, -2, 2), x), 31);
      },
      nonzero_sampler(1, 2.0, 0.3)));

  // ---- elementwise unaries ---------------------------------------------------
  cases.push_back(make_case(
      "exp", mat, [](const Tensor& x) { return weighted_sum(exp(x), 32); },
      uniform_sampler(mat_n, -2, 1.5)));
  cases.push_back(make_case(
      "log", mat, [](const Tensor& x) { return weighted_sum(log(x), 33); },
      uniform_sampler(mat_n, 0.2, 3.0)));
  cases.push_back(make_case(
      "relu", mat, [](const Tensor& x) { return weighted_sum(relu(x), 34); },
      nonzero_sampler(mat_n, 2.0, 0.05)));
  cases.push_back(make_case(
      "negate", mat, [](const Tensor& x) { return weighted_sum(negate(x), 35); },
      uniform_sampler(mat_n, -2, 2)));

  // ---- linear algebra ---------------------------------------------------------
  cases.push_back(make_case(
      "matmul_lhs", {4, 6},
      [](const Tensor& x) {
        return weighted_sum(matmul(x, fixed_tensor({6, 5}, 36, -1, 1)), 37);
      },
      uniform_sampler(24, -2, 2)));
  cases.push_back(make_case(
      "matmul_rhs", {6, 5},
      [](const Tensor& x) {
        return weighted_sum(matmul(fixed_tensor({4, 6}, 38, -1, 1), x), 39);
      },
      uniform_sampler(30, -2, 2)));
  cases.push_back(make_case(
      "conv2d_input", {2, 2, 5, 5},
      [](const Tensor& x) {
        return weighted_sum(conv2d(x, fixed_tensor({3, 2, 3, 3}, 40, -1, 1), 1, 1), 41);
      },
      uniform_sampler(100, -2, 2)));
  cases.push_back(make_case(
      "conv2d_kernel", {3, 2, 3, 3},
      [](const Tensor& x) {
        return weighted_sum(conv2d(fixed_tensor({2, 2, 5, 5}, 42, -1, 1), x, 1, 1), 43);
      },
      uniform_sampler(54, -2, 2)));
  cases.push_back(make_case(
      "conv2d_stride2_input", {2, 2, 5, 5},
      [](const Tensor& x) {
        return weighted_sum(conv2d(x, fixed_tensor({3, 2, 3, 3}, 44, -1, 1), 2, 0), 45);
      },
      uniform_sampler(100, -2, 2)));
  cases.push_back(make_case(
      "add_row_bias_input", {4, 7},
      [](const Tensor& x) {
        return weighted_sum(add_row_bias(x, fixed_tensor({7}, 46, -1, 1)), 47);
      },
      uniform_sampler(28, -2, 2)));
  cases.push_back(make_case(
      "add_row_bias_bias", {7},
      [](const Tensor& x) {
        return weighted_sum(add_row_bias(fixed_tensor({4, 7}, 48, -1, 1), x), 49);
      },
      uniform_sampler(7, -2, 2)));
  cases.push_back(make_case(
      "add_channel_bias_input", {2, 3, 4, 4},
      [](const Tensor& x) {
        return weighted_sum(add_channel_bias(x, fixed_tensor({3}, 50, -1, 1)), 51);
      },
      uniform_sampler(96, -2, 2)));
  cases.push_back(make_case(
      "add_channel_bias_bias", {3},
      [](const Tensor& x) {
        return weighted_sum(add_channel_bias(fixed_tensor({2, 3, 4, 4}, 52, -1, 1), x), 53);
      },
      uniform_sampler(3, -2, 2)));

  // ---- reductions and shape ----------------------------------------------------
  cases.push_back(make_case(
      "sum_all", {4, 10}, [](const Tensor& x) { return mul(sum(x), 1.7); },
      uniform_sampler(40, -2, 2)));
  cases.push_back(make_case(
      "sum_axis0", {4, 10},
      [](const Tensor& x) { return weighted_sum(sum(x, 0), 54); },
      uniform_sampler(40, -2, 2)));
  cases.push_back(make_case(
      "sum_axis1", {4, 10},
      [](const Tensor& x) { return weighted_sum(sum(x, 1), 55); },
      uniform_sampler(40, -2, 2)));
  cases.push_back(make_case(
      "mean_all", {4, 10}, [](const Tensor& x) { return mul(mean(x), 2.3); },
      uniform_sampler(40, -2, 2)));
  cases.push_back(make_case(
      "mean_axis0", {4, 10},
      [](const Tensor& x) { return weighted_sum(mean(x, 0), 56); },
      uniform_sampler(40, -2, 2)));
  cases.push_back(make_case(
      "mean_axis1", {4, 10},
      [](const Tensor& x) { return weighted_sum(mean(x, 1), 57); },
      uniform_sampler(40, -2, 2)));
  cases.push_back(make_case(
      "max_all", {4, 10}, [](const Tensor& x) { return mul(max(x), 1.3); },
      jittered_sampler(40, -2, 2)));
  cases.push_back(make_case(
      "maxpool2x2", {1, 2, 4, 4},
      [](const Tensor& x) { return weighted_sum(maxpool2x2(x), 58); },
      jittered_sampler(32, -2, 2)));
  cases.push_back(make_case(
      "reshape", {2, 12},
      [](const Tensor& x) { return weighted_sum(reshape(x, {4, 6}), 59); },
      uniform_sampler(24, -2, 2)));

  // ---- softmax and the fused row ops ----------------------------------------------
  cases.push_back(make_case(
      "softmax_rows_t1", {4, 10},
      [](const Tensor& x) { return weighted_sum(softmax_rows(x, 1.0), 60); },
      uniform_sampler(40, -3, 3)));
  cases.push_back(make_case(
      "softmax_rows_t4", {4, 10},
      [](const Tensor& x) { return weighted_sum(softmax_rows(x, 4.0), 61); },
      uniform_sampler(40, -3, 3)));
  cases.push_back(make_case(
      "zscore_rows", {4, 10},
      [](const Tensor& x) { return weighted_sum(zscore_rows(x), 62); },
      uniform_sampler(40, -3, 3)));
  cases.push_back(make_case(
      "pearson_rows_vs_const", {4, 10},
      [y = fixed_tensor({4, 10}, 63, -2, 2)](const Tensor& x) {
        return weighted_sum(pearson_rows_vs_const(x, y.values()), 64);
      },
      uniform_sampler(40, -3, 3)));
  cases.push_back(make_case(
      "soft_rank_rows_eps1", {4, 10},
      [](const Tensor& x) { return weighted_sum(soft_rank_rows(x, 1.0), 65); },
      uniform_sampler(40, -3, 3)));
  cases.push_back(make_case(
      "soft_rank_rows_eps_half", {4, 10},
      [](const Tensor& x) { return weighted_sum(soft_rank_rows(x, 0.5), 66); },
      uniform_sampler(40, -3, 3)));

  // ---- losses -------------------------------------------------------------------
  const std::vector<int> labels5{3, 0, 7, 1, 9};
  cases.push_back(make_case(
      "cross_entropy", {5, 10},
      [labels5](const Tensor& x) { return cross_entropy(x, labels5); },
      uniform_sampler(50, -3, 3)));

  {
    DistillConfig kd_cfg;
    kd_cfg.temperature = 4.0;
    cases.push_back(make_case(
        "kd_kl_t4", {5, 10},
        [teacher = fixed_tensor({5, 10}, 67, -3, 3), kd_cfg](const Tensor& x) {
          return kd_kl(x, teacher, kd_cfg);
        },
        uniform_sampler(50, -3, 3)));
  }
  {
    DistillConfig kd_cfg;
    kd_cfg.temperature = 1.0;
    cases.push_back(make_case(
        "kd_kl_t1", {5, 10},
        [teacher = fixed_tensor({5, 10}, 68, -3, 3), kd_cfg](const Tensor& x) {
          return kd_kl(x, teacher, kd_cfg);
        },
        uniform_sampler(50, -3, 3)));
  }
  {
    DistillConfig cfg;
    cases.push_back(make_case(
        "pearson_loss_raw", {5, 10},
        [teacher = fixed_tensor({5, 10}, 69, -3, 3), cfg](const Tensor& x) {
          return pearson_loss(x, teacher, cfg, /*use_zscore=*/false);
        },
        uniform_sampler(50, -3, 3)));
    cases.push_back(make_case(
        "pearson_loss_zscore", {5, 10},
        [teacher = fixed_tensor({5, 10}, 70, -3, 3), cfg](const Tensor& x) {
          return pearson_loss(x, teacher, cfg, /*use_zscore=*/true);
        },
        uniform_sampler(50, -3, 3)));
    cases.push_back(make_case(
        "spearman_loss_zscored_logits", {5, 10},
        [teacher = fixed_tensor({5, 10}, 71, -3, 3), cfg](const Tensor& x) {
          return spearman_loss(x, teacher, cfg);
        },
        uniform_sampler(50, -3, 3)));
  }
  {
    DistillConfig cfg;
    cfg.spearman_input = DistillConfig::SpearmanInput::softened_probs;
    cases.push_back(make_case(
        "spearman_loss_softened_probs", {5, 10},
        [teacher = fixed_tensor({5, 10}, 72, -3, 3), cfg](const Tensor& x) {
          return spearman_loss(x, teacher, cfg);
        },
        uniform_sampler(50, -3, 3)));
  }
  {
    DistillConfig cfg;  // method cmkd, defaults alpha=1 beta=4 gamma=1 T=4
    const std::vector<int> labels6{0, 4, 2, 9, 5, 7};
    // Teacher rows with a spread of scales so the entropy gate splits the
    // batch both ways.
    Tensor teacher = fixed_tensor({6, 10}, 73, -1, 1);
    {
      auto& tv = teacher.values();
      for (std::size_t r = 0; r < 6; ++r) {
        const double scale = 0.5 + 1.5 * static_cast<double>(r);
        for (std::size_t j = 0; j < 10; ++j) tv[r * 10 + j] *= scale;
      }
    }
    cases.push_back(make_case(
        "cmkd_loss", {6, 10},
        [teacher, labels6, cfg](const Tensor& x) {
          return cmkd_loss(x, teacher, labels6, cfg);
        },
        uniform_sampler(60, -3, 3)));
  }

  return cases;
}

std::vector<GradCheckResult> run_standard_suite(double tolerance, std::uint64_t seed) {
  std::vector<GradCheckResult> results;
  for (const auto& c : standard_cases()) {
    results.push_back(run_case(c, tolerance, seed));
  }
  return results;
}

std::vector<KdIdentityCheck> kd_gradient_identity(std::uint64_t seed) {
  std::vector<KdIdentityCheck> checks;
  constexpr std::size_t kRows = 8;
  constexpr std::size_t kCols = 10;
  for (double temperature : {1.0, 2.0, 4.0}) {
    Rng rng(Rng::mix(seed, std::bit_cast<std::uint64_t>(temperature)));
    std::vector<double> s_values(kRows * kCols);
    std::vector<double> t_values(kRows * kCols);
    for (double& v : s_values) v = rng.uniform(-3, 3);
    for (double& v : t_values) v = rng.uniform(-3, 3);
    Tensor teacher({kRows, kCols}, t_values);

    DistillConfig cfg;
    cfg.temperature = temperature;
    std::vector<double> grad;
    {
      Tape tape;
      Tensor student({kRows, kCols}, s_values, /*requires_grad=*/true);
      backward(kd_kl(student, teacher, cfg));
      grad = student.grad();
    }
    const Tensor analytic =
        kd_grad_analytic(Tensor({kRows, kCols}, s_values), teacher, temperature);

    KdIdentityCheck check;
    check.temperature = temperature;
    for (std::size_t i = 0; i < grad.size(); ++i) {
      // kd_kl is the batch mean, so its gradient carries a 1/rows factor
      // relative to the per-sample closed form.
      const double err = std::abs(static_cast<double>(kRows) * grad[i] - analytic.values()[i]);
      check.max_abs_error = std::max(check.max_abs_error, err);
    }
    checks.push_back(check);
  }
  return checks;
}

}  // namespace cmkd
