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

// Distillation losses. The correlation family treats each sample's logit
// row as a series: rows are standardized, softened through a temperature
// softmax, and penalized by 1 - correlation against the teacher's row. The
// combined loss gates the Pearson/Spearman weights per sample on the
// teacher's softened-distribution entropy relative to the batch mean.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

#include "cmkd/tensor.hpp"

namespace cmkd {

struct DistillConfig {
  enum class Method { ce_only, kd, pearson, pearson_z, cmkd };
  enum class SpearmanInput { zscored_logits, softened_probs };

  double temperature = 4.0;  // softening temperature T
  double alpha = 1.0;        // cross-entropy weight
  double beta = 4.0;         // emphasized correlation weight
  double gamma = 1.0;        // de-emphasized correlation weight
  double epsilon = 1.0;      // soft-rank regularization strength
  SpearmanInput spearman_input = SpearmanInput::zscored_logits;
  Method method = Method::cmkd;
  // The gate's entropies are computed at `temperature` by default; this
  // switches the gate (only) to unsoftened probabilities.
  bool gate_at_unit_temperature = false;

  void validate() const;  // ParameterError on out-of-range knobs
};

DistillConfig::Method method_from_string(const std::string& name);
std::string to_string(DistillConfig::Method method);
DistillConfig::SpearmanInput spearman_input_from_string(const std::string& name);
std::string to_string(DistillConfig::SpearmanInput input);

// Row-major probability matrix with validated rows (entries >= 0, each row
// sums to 1 within 1e-9).
struct ProbBatch {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  // Temperature softmax of a row-major logit matrix (plain math, no tape).
  static ProbBatch softened(std::span<const double> logits, std::size_t rows, std::size_t cols,
                            double temperature);
  std::span<const double> row(std::size_t r) const;
  void validate() const;
};

// What to do when a sample's logits are constant and a correlation over the
// row is undefined: `error` raises DegenerateInputError naming the sample;
// `skip_with_warning` makes the row contribute zero loss and logs a warning
// (the trainer's choice, so one pathological sample cannot abort a batch).
enum class DegenerateRowPolicy { error, skip_with_warning };

// Per-sample record of the entropy gate's decision.
struct GateReport {
  struct Sample {
    std::size_t index = 0;  // position within the batch
    double entropy = 0.0;
    bool high_entropy = false;  // entropy >= batch mean (ties gate high)
  };

  double mean_entropy = 0.0;
  double temperature = 0.0;  // temperature the gate probabilities used
  std::vector<Sample> samples;

  std::size_t high_count() const;
  std::size_t low_count() const;
  nlohmann::json to_json() const;
};

// ---- differentiable row-wise building blocks --------------------------------
// All operate on [b, c] tensors and record on the active tape. `active_rows`
// (when given, length b) marks rows to process; inactive rows produce a
// neutral output with no gradient.

// Standardizes each row with the sample (n-1) standard deviation. A constant
// active row raises DegenerateInputError naming the row; inactive rows
// come out all-zero.
Tensor zscore_rows(const Tensor& x, const std::vector<unsigned char>* active_rows = nullptr);

// Pearson correlation of each row of x against the matching row of the
// constant matrix y (row-major, same extent). Returns a [b] vector; inactive
// rows yield exactly 1 (zero loss under the 1 - r construction).
Tensor pearson_rows_vs_const(const Tensor& x, const std::vector<double>& y,
                             const std::vector<unsigned char>* active_rows = nullptr);

// Soft ranks of each row (see softrank.hpp), recorded with the PAV-structure
// Jacobian as the backward rule.
Tensor soft_rank_rows(const Tensor& x, double epsilon);

// ---- losses ------------------------------------------------------------------

// Mean cross-entropy of [b, c] logits at temperature 1 against integer
// labels. Out-of-range label -> IndexError naming the sample.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Mean KL(teacher || student) between the two softened distributions at
// cfg.temperature. Composed from primitive ops so its gradient arises from
// the chain rule; no gradient reaches the teacher.
Tensor kd_kl(const Tensor& student_logits, const Tensor& teacher_logits,
             const DistillConfig& cfg);

// Closed-form gradient of the per-sample softened KL w.r.t. student logits:
// (1/T) * (p_student(T) - p_teacher(T)) per entry. Test oracle only; kd_kl's
// autodiff gradient equals this divided by the batch size (the batch mean).
Tensor kd_grad_analytic(const Tensor& student_logits, const Tensor& teacher_logits,
                        double temperature);

// Batch mean of 1 - pearson over softened probability rows. use_zscore
// standardizes both logit rows before softening.
Tensor pearson_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                    const DistillConfig& cfg, bool use_zscore,
                    DegenerateRowPolicy policy = DegenerateRowPolicy::error);

// Batch mean of 1 - pearson between the student's soft ranks and the
// teacher's hard ranks. Ranks are taken over Z-scored logits by default, or
// over softened probabilities when cfg.spearman_input says so.
Tensor spearman_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                     const DistillConfig& cfg,
                     DegenerateRowPolicy policy = DegenerateRowPolicy::error);

// Full combined loss: alpha * CE + batch mean of the entropy-gated
// correlation terms. Samples whose teacher entropy is >= the batch mean get
// (beta * pearson_term + gamma * spearman_term), the rest get the swapped
// weights. When `report` is non-null it receives the gate's decisions.
Tensor cmkd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                 const std::vector<int>& labels, const DistillConfig& cfg,
                 GateReport* report = nullptr,
                 DegenerateRowPolicy policy = DegenerateRowPolicy::error);

// Per-batch training objective for each ablation arm:
//   ce_only:   alpha * CE
//   kd:        alpha * CE + T^2 * kd_kl        (temperature-gradient compensation;
//                                               the correlation losses are never
//                                               T^2-scaled)
//   pearson:   alpha * CE + beta * pearson_loss without Z-score
//   pearson_z: alpha * CE + beta * pearson_loss with Z-score
//   cmkd:      cmkd_loss
struct MethodLossResult {
  Tensor loss;
  GateReport gate;  // filled for cmkd only
  bool has_gate = false;
};

MethodLossResult method_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                             const std::vector<int>& labels, const DistillConfig& cfg,
                             DegenerateRowPolicy policy = DegenerateRowPolicy::error);

}  // namespace cmkd
