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

// Finite-difference verification of every backward rule. Each case wraps a
// scalar loss built from the op under test; the harness compares the tape's
// gradient against central differences over randomized inputs. Samplers are
// case-specific so kinked ops (relu, max, division, ranking) are probed away
// from their non-differentiable sets.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cmkd/rng.hpp"
#include "cmkd/tensor.hpp"

namespace cmkd {

struct GradCheckCase {
  std::string name;
  std::vector<std::size_t> shape;                     // shape of the checked input
  std::function<Tensor(const Tensor&)> build_loss;    // must yield a scalar
  std::function<std::vector<double>(Rng&)> sample;    // draws one input
  int trials = 20;
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  bool pass = false;
};

// |analytic - numeric| / max(|analytic|, |numeric|, 1e-2); the floor keeps
// near-zero gradients from amplifying finite-difference round-off.
double fd_relative_error(double analytic, double numeric);

// Runs one case: per trial, the tape gradient of the loss at a sampled input
// is compared coordinate-wise against (f(x+h) - f(x-h)) / 2h.
GradCheckResult run_case(const GradCheckCase& c, double tolerance, std::uint64_t seed,
                         double step = 1e-6);

// One case per differentiable primitive and per loss, 10-class shaped inputs.
std::vector<GradCheckCase> standard_cases();

std::vector<GradCheckResult> run_standard_suite(double tolerance,
                                                std::uint64_t seed = 20260214);

// Checks the closed-form softened-KL gradient against the tape: for random
// 8x10 batches, batch_size * d(kd_kl)/d(student) must equal
// (1/T)(p_student - p_teacher) entrywise.
struct KdIdentityCheck {
  double temperature = 0.0;
  double max_abs_error = 0.0;
};

std::vector<KdIdentityCheck> kd_gradient_identity(std::uint64_t seed = 424242);

}  // namespace cmkd
