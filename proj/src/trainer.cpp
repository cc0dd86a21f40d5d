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

#include "cmkd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cmkd/errors.hpp"
#include "cmkd/io_util.hpp"
#include "cmkd/rng.hpp"
#include "cmkd/stats.hpp"

namespace cmkd {

void TrainConfig::validate() const {
  if (epochs == 0) throw ParameterError("epochs must be at least 1");
  if (batch_size == 0) throw ParameterError("batch_size must be at least 1");
  if (!(lr > 0.0)) throw ParameterError("lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ParameterError("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ParameterError("weight_decay must be non-negative");
  if (!(lr_decay_factor > 0.0) || lr_decay_factor > 1.0) {
    throw ParameterError("lr_decay_factor must lie in (0, 1]");
  }
  for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
    if (lr_decay_epochs[i] >= epochs) {
      throw ParameterError("lr decay epoch " + std::to_string(lr_decay_epochs[i]) +
                           " is not below epochs " + std::to_string(epochs));
    }
    if (i > 0 && lr_decay_epochs[i] <= lr_decay_epochs[i - 1]) {
      throw ParameterError("lr_decay_epochs must be strictly increasing");
    }
  }
  distill.validate();
}

double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
  double lr = cfg.lr;
  for (std::size_t d : cfg.lr_decay_epochs) {
    if (epoch >= d) lr *= cfg.lr_decay_factor;
  }
  return lr;
}

//--------------------------------------------------------------------------
// Metrics CSV
//--------------------------------------------------------------------------

namespace {

constexpr const char* kMetricsHeader =
    "epoch,train_loss,test_accuracy,mean_pearson_ts,mean_spearman_ts,"
    "gate_high_entropy_fraction";

}  // namespace

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricsRecord>& records) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : records) {
    out += std::to_string(r.epoch);
    out += ',';
    out += format_double(r.train_loss);
    out += ',';
    out += format_double(r.test_accuracy);
    out += ',';
    out += format_double(r.mean_pearson_ts);
    out += ',';
    out += format_double(r.mean_spearman_ts);
    out += ',';
    out += format_double(r.gate_high_entropy_fraction);
    out += '\n';
  }
  write_text_file(path, out);
}

std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty metrics file " + path.string());
  if (line != kMetricsHeader) {
    throw FormatError("unexpected metrics header in " + path.string() + ": " + line);
  }
  std::vector<MetricsRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 6) {
      throw FormatError("metrics row with " + std::to_string(fields.size()) + " fields in " +
                        path.string());
    }
    MetricsRecord r;
    try {
      r.epoch = static_cast<std::size_t>(std::stoull(fields[0]));
      r.train_loss = std::stod(fields[1]);
      r.test_accuracy = std::stod(fields[2]);
      r.mean_pearson_ts = std::stod(fields[3]);
      r.mean_spearman_ts = std::stod(fields[4]);
      r.gate_high_entropy_fraction = std::stod(fields[5]);
    } catch (const std::exception&) {
      throw FormatError("unparsable metrics row in " + path.string() + ": " + line);
    }
    records.push_back(r);
  }
  return records;
}

//--------------------------------------------------------------------------
// Evaluation
//--------------------------------------------------------------------------

namespace {

// Indices of the top k logits, ties broken toward the lower class id.
std::vector<std::size_t> top_k(std::span<const double> row, std::size_t k) {
  std::vector<std::size_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

std::vector<std::vector<std::size_t>> sequential_batches(std::size_t n, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t end = std::min(n, start + batch);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    out.push_back(std::move(idx));
  }
  return out;
}

}  // namespace

EvalResult evaluate(const Model& model, const Dataset& ds, std::size_t eval_batch) {
  if (!model.defined()) throw ContractError("evaluate on an unbuilt model");
  if (eval_batch == 0) throw ParameterError("eval_batch must be at least 1");
  const std::size_t classes = model.spec().num_classes;
  if (ds.num_classes > classes) {
    throw ConfigError("dataset '" + ds.name + "' has " + std::to_string(ds.num_classes) +
                      " classes but the model only emits " + std::to_string(classes));
  }

  EvalResult res;
  res.per_class_accuracy.assign(classes, 0.0);
  res.class_present.assign(classes, false);
  std::vector<std::size_t> class_count(classes, 0);
  std::vector<std::size_t> class_correct(classes, 0);
  std::size_t correct1 = 0;
  std::size_t correct5 = 0;

  NoGradGuard guard;
  for (const auto& idx : sequential_batches(ds.n, eval_batch)) {
    Batch batch = make_batch(ds, idx);
    Tensor logits = model.forward(batch.images);
    const auto& values = logits.values();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::span<const double> row(values.data() + r * classes, classes);
      const int label = batch.labels[r];
      ++class_count[static_cast<std::size_t>(label)];
      const auto top = top_k(row, std::min<std::size_t>(5, classes));
      if (static_cast<int>(top.front()) == label) {
        ++correct1;
        ++class_correct[static_cast<std::size_t>(label)];
      }
      for (std::size_t t : top) {
        if (static_cast<int>(t) == label) {
          ++correct5;
          break;
        }
      }
    }
  }

  if (ds.n == 0) return res;
  res.top1 = static_cast<double>(correct1) / static_cast<double>(ds.n);
  res.top5 = classes >= 5 ? static_cast<double>(correct5) / static_cast<double>(ds.n)
                          : res.top1;
  for (std::size_t c = 0; c < classes; ++c) {
    res.class_present[c] = class_count[c] > 0;
    if (class_count[c] > 0) {
      res.per_class_accuracy[c] =
          static_cast<double>(class_correct[c]) / static_cast<double>(class_count[c]);
    }
  }
  return res;
}

//--------------------------------------------------------------------------
// Logit diagnostics
//--------------------------------------------------------------------------

double ConfusionDiff::overall_mean() const {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < classes; ++i) {
    if (!row_present[i]) continue;
    for (std::size_t j = 0; j < classes; ++j) {
      sum += values[i * classes + j];
      ++count;
    }
  }
  if (count == 0) throw ContractError("confusion diff has no populated rows");
  return sum / static_cast<double>(count);
}

ConfusionDiff logit_confusion_diff(const Model& teacher, const Model& student,
                                   const Dataset& ds, std::size_t eval_batch) {
  if (!teacher.defined() || !student.defined()) {
    throw ContractError("logit_confusion_diff needs two built models");
  }
  const std::size_t classes = teacher.spec().num_classes;
  if (student.spec().num_classes != classes) {
    throw ConfigError("teacher emits " + std::to_string(classes) + " classes but student emits " +
                      std::to_string(student.spec().num_classes));
  }
  if (ds.num_classes > classes) {
    throw ConfigError("dataset '" + ds.name + "' has more classes than the models");
  }

  ConfusionDiff diff;
  diff.classes = classes;
  diff.values.assign(classes * classes, 0.0);
  diff.row_present.assign(classes, false);
  std::vector<std::size_t> row_count(classes, 0);

  NoGradGuard guard;
  for (const auto& idx : sequential_batches(ds.n, eval_batch)) {
    Batch batch = make_batch(ds, idx);
    Tensor t_logits = teacher.forward(batch.images);
    Tensor s_logits = student.forward(batch.images);
    const auto& tv = t_logits.values();
    const auto& sv = s_logits.values();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto label = static_cast<std::size_t>(batch.labels[r]);
      ++row_count[label];
      for (std::size_t j = 0; j < classes; ++j) {
        diff.values[label * classes + j] += std::abs(tv[r * classes + j] - sv[r * classes + j]);
      }
    }
  }
  for (std::size_t i = 0; i < classes; ++i) {
    diff.row_present[i] = row_count[i] > 0;
    if (row_count[i] > 0) {
      for (std::size_t j = 0; j < classes; ++j) {
        diff.values[i * classes + j] /= static_cast<double>(row_count[i]);
      }
    }
  }
  return diff;
}

void write_confusion_diff_csv(const std::filesystem::path& path, const ConfusionDiff& diff) {
  std::string out = "true_class";
  for (std::size_t j = 0; j < diff.classes; ++j) out += ",logit_" + std::to_string(j);
  out += '\n';
  for (std::size_t i = 0; i < diff.classes; ++i) {
    out += std::to_string(i);
    for (std::size_t j = 0; j < diff.classes; ++j) {
      out += ',';
      out += diff.row_present[i] ? format_double(diff.at(i, j)) : std::string("missing");
    }
    out += '\n';
  }
  write_text_file(path, out);
}

//--------------------------------------------------------------------------
// Robustness
//--------------------------------------------------------------------------

double RobustnessTable::corruption_mean() const {
  if (per_kind.empty()) throw ContractError("robustness table has no corruption columns");
  double sum = 0.0;
  for (const auto& [kind, acc] : per_kind) sum += acc;
  return sum / static_cast<double>(per_kind.size());
}

RobustnessTable robustness_eval(const Model& model, const Dataset& ds,
                                const std::vector<CorruptionKind>& kinds,
                                const std::vector<int>& severities, std::uint64_t seed) {
  if (kinds.empty()) throw ParameterError("robustness_eval needs at least one corruption kind");
  if (severities.empty()) throw ParameterError("robustness_eval needs at least one severity");

  RobustnessTable table;
  table.clean = evaluate(model, ds).top1;
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    double sum = 0.0;
    for (int severity : severities) {
      CorruptionSpec spec;
      spec.kind = kinds[k];
      spec.severity = severity;
      // Same (kind, severity) always sees the same pixels regardless of
      // which student is being scored.
      spec.seed = Rng::mix(seed, k * 16 + static_cast<std::size_t>(severity));
      sum += evaluate(model, corrupt(ds, spec)).top1;
    }
    table.per_kind.emplace_back(to_string(kinds[k]),
                                sum / static_cast<double>(severities.size()));
  }
  return table;
}

void write_robustness_csv(const std::filesystem::path& path, const RobustnessTable& table) {
  std::string header = "clean";
  std::string row = format_double(table.clean);
  for (const auto& [kind, acc] : table.per_kind) {
    header += ',' + kind;
    row += ',';
    row += format_double(acc);
  }
  write_text_file(path, header + '\n' + row + '\n');
}

//--------------------------------------------------------------------------
// Training core
//--------------------------------------------------------------------------

namespace {

struct SliceLogits {
  std::vector<std::size_t> indices;     // positions within the test split
  std::vector<double> teacher_logits;   // slice_n * classes, row-major
};

// The slice the correlation curves are measured on, chosen once per run.
std::vector<std::size_t> correlation_slice(std::size_t test_n, std::uint64_t seed) {
  const std::size_t slice_n = std::min<std::size_t>(1000, test_n);
  Rng rng(Rng::mix(seed, 0x736c696365ULL));  // stream tag: "slice"
  auto perm = random_permutation(test_n, rng);
  perm.resize(slice_n);
  return perm;
}

std::vector<double> batched_logits(const Model& model, const Dataset& ds,
                                   std::span<const std::size_t> indices) {
  NoGradGuard guard;
  const std::size_t classes = model.spec().num_classes;
  std::vector<double> out;
  out.reserve(indices.size() * classes);
  constexpr std::size_t kBatch = 256;
  for (std::size_t start = 0; start < indices.size(); start += kBatch) {
    const std::size_t end = std::min(indices.size(), start + kBatch);
    Batch batch = make_batch(ds, indices.subspan(start, end - start));
    Tensor logits = model.forward(batch.images);
    const auto& v = logits.values();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

// Mean per-row Pearson/Spearman between two logit matrices; rows where either
// side is constant are skipped.
std::pair<double, double> mean_row_correlations(const std::vector<double>& a,
                                                const std::vector<double>& b,
                                                std::size_t rows, std::size_t cols) {
  double p_sum = 0.0;
  double s_sum = 0.0;
  std::size_t valid = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    std::span<const double> ra(a.data() + r * cols, cols);
    std::span<const double> rb(b.data() + r * cols, cols);
    try {
      const double p = pearson(ra, rb);
      const double s = spearman(ra, rb);
      p_sum += p;
      s_sum += s;
      ++valid;
    } catch (const DegenerateInputError&) {
      // A constant logit row carries no correlation signal; leave it out.
    }
  }
  if (valid == 0) return {0.0, 0.0};
  return {p_sum / static_cast<double>(valid), s_sum / static_cast<double>(valid)};
}

TrainResult run_training(const Model* teacher, const ModelSpec& student_spec,
                         const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                         bool collect_gate_log) {
  cfg.validate();
  student_spec.validate();
  train.validate();
  test.validate();
  if (train.n == 0) throw ContractError("training split is empty");
  if (test.n == 0) throw ContractError("test split is empty");
  if (train.num_classes > student_spec.num_classes) {
    throw ConfigError("dataset '" + train.name + "' has " + std::to_string(train.num_classes) +
                      " classes but the student emits " +
                      std::to_string(student_spec.num_classes));
  }
  if (teacher && teacher->spec().num_classes != student_spec.num_classes) {
    throw ConfigError("teacher emits " + std::to_string(teacher->spec().num_classes) +
                      " classes but the student spec asks for " +
                      std::to_string(student_spec.num_classes));
  }
  if (!teacher && cfg.distill.method != DistillConfig::Method::ce_only) {
    throw ContractError("method " + to_string(cfg.distill.method) + " needs a teacher");
  }

  Model student = Model::build(student_spec);
  SgdOptimizer opt(student.parameters(), cfg.momentum, cfg.weight_decay);

  // Teacher logits on the correlation slice never change; compute them once.
  SliceLogits slice;
  if (teacher) {
    slice.indices = correlation_slice(test.n, cfg.seed);
    slice.teacher_logits = batched_logits(*teacher, test, slice.indices);
  }

  TrainResult result;
  result.metrics.reserve(cfg.epochs);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    std::size_t gate_high = 0;
    std::size_t gate_total = 0;
    nlohmann::json gate_batches = nlohmann::json::array();

    for (const auto& idx : epoch_batch_indices(train.n, cfg.batch_size, cfg.seed, epoch)) {
      Batch batch = make_batch(train, idx);
      Tape tape;
      Tensor student_logits = student.forward(batch.images);
      Tensor teacher_logits;
      if (teacher) {
        NoGradGuard guard;
        teacher_logits = teacher->forward(batch.images);
      }
      MethodLossResult r = method_loss(student_logits, teacher_logits, batch.labels,
                                       cfg.distill, DegenerateRowPolicy::skip_with_warning);
      backward(r.loss);
      opt.step(lr);
      student.zero_grads();

      loss_sum += r.loss.item() * static_cast<double>(idx.size());
      seen += idx.size();
      if (r.has_gate) {
        gate_high += r.gate.high_count();
        gate_total += r.gate.samples.size();
        if (collect_gate_log) {
          gate_batches.push_back(
              {{"indices", batch.indices}, {"report", r.gate.to_json()}});
        }
      }
    }

    MetricsRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.test_accuracy = evaluate(student, test).top1;
    if (teacher) {
      const auto student_slice = batched_logits(student, test, slice.indices);
      const auto [mp, ms] =
          mean_row_correlations(slice.teacher_logits, student_slice, slice.indices.size(),
                                student_spec.num_classes);
      rec.mean_pearson_ts = mp;
      rec.mean_spearman_ts = ms;
    }
    if (gate_total > 0) {
      rec.gate_high_entropy_fraction =
          static_cast<double>(gate_high) / static_cast<double>(gate_total);
    }
    result.metrics.push_back(rec);
    if (collect_gate_log) {
      result.gate_log.push_back({{"epoch", epoch}, {"batches", std::move(gate_batches)}});
    }
  }

  result.model = std::move(student);
  result.meta.epochs = static_cast<std::uint32_t>(cfg.epochs);
  result.meta.final_accuracy = result.metrics.back().test_accuracy;
  result.meta.seed = cfg.seed;
  return result;
}

}  // namespace

TrainResult train_teacher(const ModelSpec& spec, const Dataset& train, const Dataset& test,
                          const TrainConfig& cfg) {
  TrainConfig ce_cfg = cfg;
  ce_cfg.distill = DistillConfig{};
  ce_cfg.distill.method = DistillConfig::Method::ce_only;
  ce_cfg.distill.alpha = 1.0;
  return run_training(nullptr, spec, train, test, ce_cfg, /*collect_gate_log=*/false);
}

TrainResult distill(const Model& teacher, const ModelSpec& student_spec, const Dataset& train,
                    const Dataset& test, const TrainConfig& cfg, bool collect_gate_log) {
  if (!teacher.defined()) throw ContractError("distill needs a built teacher");
  // Freeze the teacher for good; parameters are shared handles, so this
  // flips the caller's copy too, which is the intended reading of "teacher
  // runs in inference mode".
  Model frozen = teacher;
  frozen.set_trainable(false);
  return run_training(&frozen, student_spec, train, test, cfg, collect_gate_log);
}

}  // namespace cmkd
