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

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <vector>

#include <unistd.h>

#include "cmkd/data.hpp"
#include "cmkd/errors.hpp"
#include "cmkd/models.hpp"
#include "cmkd/rng.hpp"
#include "cmkd/tensor.hpp"
#include "cmkd/trainer.hpp"

using namespace cmkd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("cmkd_trainer_test_" + std::to_string(Rng::mix(::getpid(), 55)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Dataset small_train() { return make_synthetic_digits(200, 21, "train"); }
Dataset small_test() { return make_synthetic_digits(80, 21, "test"); }

ModelSpec tiny_mlp(std::uint64_t seed) {
  ModelSpec spec;
  spec.kind = ModelSpec::Kind::mlp;
  spec.layer_dims = {784, 8, 10};
  spec.init_seed = seed;
  return spec;
}

TrainConfig quick_config(std::uint64_t seed = 3) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.lr = 0.05;
  cfg.lr_decay_epochs = {};
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("learning rate follows the step schedule") {
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.lr_decay_epochs = {15, 22, 27};
  cfg.lr_decay_factor = 0.1;
  CHECK(lr_at_epoch(cfg, 0) == doctest::Approx(0.05));
  CHECK(lr_at_epoch(cfg, 14) == doctest::Approx(0.05));
  CHECK(lr_at_epoch(cfg, 15) == doctest::Approx(0.005));
  CHECK(lr_at_epoch(cfg, 21) == doctest::Approx(0.005));
  CHECK(lr_at_epoch(cfg, 22) == doctest::Approx(0.0005));
  CHECK(lr_at_epoch(cfg, 26) == doctest::Approx(0.0005));
  CHECK(lr_at_epoch(cfg, 27) == doctest::Approx(0.00005));
  CHECK(lr_at_epoch(cfg, 29) == doctest::Approx(0.00005));

  cfg.lr_decay_epochs = {1};
  cfg.lr_decay_factor = 0.5;
  CHECK(lr_at_epoch(cfg, 0) == doctest::Approx(0.05));
  CHECK(lr_at_epoch(cfg, 5) == doctest::Approx(0.025));
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  TrainConfig bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = cfg;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = cfg;
  bad.momentum = -0.1;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = cfg;
  bad.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = cfg;
  bad.lr_decay_factor = 0.0;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = cfg;
  bad.distill.temperature = -4.0;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
}

TEST_CASE("metrics csv round trips") {
  TempDir tmp;
  std::vector<MetricsRecord> records(3);
  records[0] = {0, 2.30258, 0.1, 0.0, 0.0, 0.0};
  records[1] = {1, 1.5, 0.42, 0.73123456789, -0.25, 0.5};
  records[2] = {2, 0.75, 0.55, 0.81, 0.6400000001, 0.4375};
  const fs::path file = tmp.path / "metrics.csv";
  write_metrics_csv(file, records);
  auto back = read_metrics_csv(file);
  REQUIRE(back.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(back[i].epoch == records[i].epoch);
    CHECK(back[i].train_loss == doctest::Approx(records[i].train_loss).epsilon(1e-15));
    CHECK(back[i].test_accuracy == doctest::Approx(records[i].test_accuracy).epsilon(1e-15));
    CHECK(back[i].mean_pearson_ts == doctest::Approx(records[i].mean_pearson_ts).epsilon(1e-15));
    CHECK(back[i].mean_spearman_ts ==
          doctest::Approx(records[i].mean_spearman_ts).epsilon(1e-15));
    CHECK(back[i].gate_high_entropy_fraction ==
          doctest::Approx(records[i].gate_high_entropy_fraction).epsilon(1e-15));
  }
  CHECK_THROWS_AS(read_metrics_csv(tmp.path / "missing.csv"), IoError);
}

TEST_CASE("a constant-logit model scores exactly the class frequency") {
  Dataset test = small_test();
  // Fresh biases are zero; zeroing the weights leaves all logits identical,
  // and argmax resolves ties to class 0.
  Model model = Model::build(tiny_mlp(1));
  for (Tensor p : model.parameters()) {
    for (auto& v : p.values()) v = 0.0;
  }
  EvalResult eval = evaluate(model, test);
  std::size_t zeros = 0;
  for (int l : test.labels) zeros += (l == 0);
  CHECK(eval.top1 ==
        doctest::Approx(static_cast<double>(zeros) / test.n).epsilon(1e-15));
  CHECK(eval.top5 >= eval.top1);
  REQUIRE(eval.per_class_accuracy.size() == 10);
  CHECK(eval.per_class_accuracy[0] == doctest::Approx(1.0));
  for (std::size_t c = 1; c < 10; ++c) {
    if (eval.class_present[c]) CHECK(eval.per_class_accuracy[c] == doctest::Approx(0.0));
  }
}

TEST_CASE("evaluation is independent of the eval batch size") {
  Dataset test = small_test();
  Model model = Model::build(tiny_mlp(2));
  EvalResult big = evaluate(model, test, 256);
  EvalResult small = evaluate(model, test, 7);
  CHECK(big.top1 == small.top1);
  CHECK(big.top5 == small.top5);
  CHECK(big.per_class_accuracy == small.per_class_accuracy);
}

TEST_CASE("teacher training learns, records metrics, and is deterministic") {
  Dataset train = small_train();
  Dataset test = small_test();
  TrainConfig cfg = quick_config();
  cfg.epochs = 10;

  TrainResult a = train_teacher(tiny_mlp(7), train, test, cfg);
  REQUIRE(a.metrics.size() == 10);
  CHECK(a.meta.epochs == 10);
  CHECK(a.meta.seed == cfg.seed);
  CHECK(a.meta.final_accuracy == doctest::Approx(a.metrics.back().test_accuracy));
  // Better than the 10-class chance rate even on this tiny budget.
  CHECK(a.metrics.back().test_accuracy > 0.15);
  // Loss goes down across epochs.
  CHECK(a.metrics.back().train_loss < a.metrics.front().train_loss);
  // No teacher: correlation diagnostics stay zero.
  for (const auto& r : a.metrics) {
    CHECK(r.mean_pearson_ts == 0.0);
    CHECK(r.mean_spearman_ts == 0.0);
    CHECK(r.gate_high_entropy_fraction == 0.0);
  }

  TrainResult b = train_teacher(tiny_mlp(7), train, test, cfg);
  CHECK(a.model.parameter_hash() == b.model.parameter_hash());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    CHECK(a.metrics[i].train_loss == b.metrics[i].train_loss);
    CHECK(a.metrics[i].test_accuracy == b.metrics[i].test_accuracy);
  }
}

TEST_CASE("distillation keeps the teacher frozen and fills diagnostics") {
  Dataset train = small_train();
  Dataset test = small_test();
  TrainConfig tcfg = quick_config(11);
  TrainResult teacher = train_teacher(tiny_mlp(100), train, test, tcfg);
  const std::uint64_t teacher_hash_before = teacher.model.parameter_hash();

  TrainConfig scfg = quick_config(12);
  scfg.distill.method = DistillConfig::Method::cmkd;
  TrainResult student = distill(teacher.model, tiny_mlp(200), train, test, scfg, true);

  CHECK(teacher.model.parameter_hash() == teacher_hash_before);
  REQUIRE(student.metrics.size() == scfg.epochs);
  for (const auto& r : student.metrics) {
    CHECK(r.mean_pearson_ts != 0.0);
    CHECK(r.mean_spearman_ts != 0.0);
    CHECK(r.mean_pearson_ts <= 1.0);
    CHECK(r.mean_spearman_ts <= 1.0);
    // The gate splits batches both ways on real data.
    CHECK(r.gate_high_entropy_fraction > 0.0);
    CHECK(r.gate_high_entropy_fraction < 1.0);
  }

  // The gate log captures per-batch reports when requested.
  REQUIRE(student.gate_log.is_array());
  REQUIRE(student.gate_log.size() == scfg.epochs);
  const auto& first_epoch = student.gate_log[0];
  CHECK(first_epoch.at("epoch") == 0);
  REQUIRE(first_epoch.at("batches").is_array());
  CHECK_FALSE(first_epoch.at("batches").empty());
  const auto& first_batch = first_epoch.at("batches")[0];
  CHECK(first_batch.contains("indices"));
  CHECK(first_batch.at("report").contains("samples"));

  // Without the flag the log stays empty.
  TrainResult quiet = distill(teacher.model, tiny_mlp(200), train, test, scfg, false);
  CHECK(quiet.gate_log.empty());
  // Same config, same stream: byte-identical student either way.
  CHECK(quiet.model.parameter_hash() == student.model.parameter_hash());
}

TEST_CASE("ce_only distillation matches plain training exactly") {
  Dataset train = small_train();
  Dataset test = small_test();
  TrainConfig tcfg = quick_config(31);
  TrainResult teacher = train_teacher(tiny_mlp(300), train, test, tcfg);

  TrainConfig cfg = quick_config(32);
  cfg.distill.method = DistillConfig::Method::ce_only;
  TrainResult plain = train_teacher(tiny_mlp(301), train, test, cfg);
  TrainResult viadistill = distill(teacher.model, tiny_mlp(301), train, test, cfg);
  CHECK(plain.model.parameter_hash() == viadistill.model.parameter_hash());
  for (std::size_t i = 0; i < plain.metrics.size(); ++i) {
    CHECK(plain.metrics[i].train_loss == viadistill.metrics[i].train_loss);
    CHECK(plain.metrics[i].test_accuracy == viadistill.metrics[i].test_accuracy);
  }
}

TEST_CASE("distillation methods diverge from ce_only training") {
  Dataset train = small_train();
  Dataset test = small_test();
  TrainConfig tcfg = quick_config(41);
  TrainResult teacher = train_teacher(tiny_mlp(400), train, test, tcfg);

  TrainConfig cfg = quick_config(42);
  cfg.distill.method = DistillConfig::Method::ce_only;
  const std::uint64_t base = distill(teacher.model, tiny_mlp(401), train, test, cfg)
                                 .model.parameter_hash();
  for (auto m : {DistillConfig::Method::kd, DistillConfig::Method::pearson,
                 DistillConfig::Method::pearson_z, DistillConfig::Method::cmkd}) {
    cfg.distill.method = m;
    CHECK(distill(teacher.model, tiny_mlp(401), train, test, cfg).model.parameter_hash() !=
          base);
  }
}

TEST_CASE("confusion diff matches a direct computation and zeroes at identity") {
  Dataset test = small_test();
  Model a = Model::build(tiny_mlp(51));
  Model b = Model::build(tiny_mlp(52));

  ConfusionDiff self = logit_confusion_diff(a, a, test);
  for (std::size_t i = 0; i < 10; ++i) {
    if (!self.row_present[i]) continue;
    for (std::size_t j = 0; j < 10; ++j) CHECK(self.at(i, j) == 0.0);
  }
  CHECK(self.overall_mean() == 0.0);

  ConfusionDiff diff = logit_confusion_diff(a, b, test);
  // Manual recomputation in one big batch.
  std::vector<std::size_t> all(test.n);
  std::iota(all.begin(), all.end(), 0);
  Batch batch = make_batch(test, all);
  Tensor la = a.forward(batch.images);
  Tensor lb = b.forward(batch.images);
  std::vector<double> sums(100, 0.0);
  std::vector<std::size_t> counts(10, 0);
  for (std::size_t s = 0; s < test.n; ++s) {
    const int label = test.labels[s];
    ++counts[label];
    for (std::size_t j = 0; j < 10; ++j) {
      sums[label * 10 + j] += std::fabs(la.values()[s * 10 + j] - lb.values()[s * 10 + j]);
    }
  }
  double grand = 0.0;
  std::size_t present_rows = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(diff.row_present[i] == (counts[i] > 0));
    if (counts[i] == 0) continue;
    ++present_rows;
    for (std::size_t j = 0; j < 10; ++j) {
      const double expected = sums[i * 10 + j] / static_cast<double>(counts[i]);
      CHECK(diff.at(i, j) == doctest::Approx(expected).epsilon(1e-12));
      grand += expected;
    }
  }
  CHECK(diff.overall_mean() ==
        doctest::Approx(grand / static_cast<double>(present_rows * 10)).epsilon(1e-12));

  // Swapping the models leaves the absolute gaps unchanged.
  ConfusionDiff swapped = logit_confusion_diff(b, a, test);
  for (std::size_t i = 0; i < 100; ++i) {
    CHECK(swapped.values[i] == doctest::Approx(diff.values[i]).epsilon(1e-12));
  }

  // Missing classes are flagged absent, not silently zero.
  std::vector<std::size_t> idx;
  for (std::size_t s = 0; s < test.n; ++s) {
    if (test.labels[s] != 0) idx.push_back(s);
  }
  ConfusionDiff partial = logit_confusion_diff(a, b, test.subset(idx));
  CHECK_FALSE(partial.row_present[0]);

  TempDir tmp;
  write_confusion_diff_csv(tmp.path / "diff.csv", diff);
  CHECK(fs::file_size(tmp.path / "diff.csv") > 0);
}

TEST_CASE("robustness at severity zero equals clean accuracy") {
  Dataset test = small_test();
  Model model = Model::build(tiny_mlp(61));
  RobustnessTable table =
      robustness_eval(model, test, all_corruption_kinds(), {0}, 99);
  CHECK(table.per_kind.size() == 4);
  for (const auto& [name, acc] : table.per_kind) {
    CHECK_FALSE(name.empty());
    CHECK(acc == doctest::Approx(table.clean).epsilon(1e-15));
  }
  CHECK(table.corruption_mean() == doctest::Approx(table.clean).epsilon(1e-12));
}

TEST_CASE("robustness is deterministic and corruption hurts a trained model") {
  Dataset train = small_train();
  Dataset test = small_test();
  TrainConfig cfg = quick_config(71);
  cfg.epochs = 3;
  TrainResult trained = train_teacher(tiny_mlp(700), train, test, cfg);

  RobustnessTable a =
      robustness_eval(trained.model, test, all_corruption_kinds(), {1, 2, 3, 4, 5}, 5);
  RobustnessTable b =
      robustness_eval(trained.model, test, all_corruption_kinds(), {1, 2, 3, 4, 5}, 5);
  CHECK(a.clean == b.clean);
  REQUIRE(a.per_kind.size() == b.per_kind.size());
  for (std::size_t i = 0; i < a.per_kind.size(); ++i) {
    CHECK(a.per_kind[i].second == b.per_kind[i].second);
  }
  CHECK(a.corruption_mean() <= a.clean + 1e-12);

  TempDir tmp;
  write_robustness_csv(tmp.path / "rob.csv", a);
  CHECK(fs::file_size(tmp.path / "rob.csv") > 0);
}
