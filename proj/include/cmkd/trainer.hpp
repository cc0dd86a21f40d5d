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

// Training loops (teacher pretraining and distillation), evaluation, and the
// diagnostics that track how closely a student's logits follow its teacher:
// per-epoch correlation curves, the class-conditioned logit-difference
// matrix, gate statistics, and the corruption robustness table.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cmkd/data.hpp"
#include "cmkd/losses.hpp"
#include "cmkd/models.hpp"

namespace cmkd {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // Zero-based epochs at which lr is multiplied by lr_decay_factor.
  std::vector<std::size_t> lr_decay_epochs = {15, 22, 27};
  double lr_decay_factor = 0.1;
  std::uint64_t seed = 0;
  DistillConfig distill;

  void validate() const;  // ParameterError on out-of-range knobs
};

// Learning rate in force at a given zero-based epoch under the step schedule.
double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch);

struct MetricsRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  // Mean per-sample correlation between teacher and student logits on the
  // held-out slice; zero when there is no teacher (plain CE training).
  double mean_pearson_ts = 0.0;
  double mean_spearman_ts = 0.0;
  // Fraction of training samples the entropy gate sent down the
  // high-entropy branch this epoch; zero for ungated methods.
  double gate_high_entropy_fraction = 0.0;
};

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path);

struct TrainResult {
  Model model;
  CheckpointMeta meta;
  std::vector<MetricsRecord> metrics;  // one record per epoch
  // Per-epoch gate decisions (populated only when requested): an array of
  // {"epoch": e, "batches": [{"indices": [...], "report": {...}}, ...]}.
  nlohmann::json gate_log = nlohmann::json::array();
};

// Plain cross-entropy training of a fresh model; equivalent to distillation
// with method ce_only and no teacher.
TrainResult train_teacher(const ModelSpec& spec, const Dataset& train, const Dataset& test,
                          const TrainConfig& cfg);

// Distills `teacher` into a fresh student. The teacher is frozen for the
// duration (its parameters are never written; a hash check before and after
// holds) and runs outside the tape. Correlation metrics are measured on a
// fixed slice of the test split, min(1000, test.n) samples chosen once per
// run from the seed.
TrainResult distill(const Model& teacher, const ModelSpec& student_spec, const Dataset& train,
                    const Dataset& test, const TrainConfig& cfg,
                    bool collect_gate_log = false);

struct EvalResult {
  double top1 = 0.0;
  double top5 = 0.0;  // populated when num_classes >= 5, else equals top1
  std::vector<double> per_class_accuracy;
  std::vector<bool> class_present;  // false = no samples of that class
};

EvalResult evaluate(const Model& model, const Dataset& ds, std::size_t eval_batch = 256);

// Class-conditioned logit gap: entry [i][j] is the mean of |teacher logit j -
// student logit j| over samples whose true label is i. Rows for classes with
// no samples are flagged absent rather than zero.
struct ConfusionDiff {
  std::size_t classes = 0;
  std::vector<double> values;  // classes * classes, row-major
  std::vector<bool> row_present;

  double at(std::size_t i, std::size_t j) const { return values[i * classes + j]; }
  // Mean over all entries of present rows.
  double overall_mean() const;
};

ConfusionDiff logit_confusion_diff(const Model& teacher, const Model& student,
                                   const Dataset& ds, std::size_t eval_batch = 256);

void write_confusion_diff_csv(const std::filesystem::path& path, const ConfusionDiff& diff);

// Clean accuracy plus, per corruption kind, accuracy averaged over the given
// severities. Corruption seeds are derived from (seed, kind, severity) so
// different students face identical corrupted pixels.
struct RobustnessTable {
  double clean = 0.0;
  std::vector<std::pair<std::string, double>> per_kind;

  double corruption_mean() const;
};

RobustnessTable robustness_eval(const Model& model, const Dataset& ds,
                                const std::vector<CorruptionKind>& kinds,
                                const std::vector<int>& severities, std::uint64_t seed);

void write_robustness_csv(const std::filesystem::path& path, const RobustnessTable& table);

}  // namespace cmkd
