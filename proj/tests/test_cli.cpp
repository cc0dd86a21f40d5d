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

// Drives the installed command-line binary end to end: exit codes, manifests,
// artifact files, determinism of re-runs, and the metrics exporter.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "json.hpp"

#include "cmkd/data.hpp"
#include "cmkd/models.hpp"
#include "cmkd/rng.hpp"
#include "cmkd/trainer.hpp"

using namespace cmkd;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CmdResult {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

CmdResult run_cli(const std::string& args) {
  const std::string cmd = std::string(CMKD_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CmdResult result;
  char buf[4096];
  while (std::size_t got = fread(buf, 1, sizeof(buf), pipe)) {
    result.output.append(buf, got);
  }
  const int status = pclose(pipe);
  result.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// One scratch area per process run, removed at exit.
const fs::path& scratch() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() /
                 ("cmkd_cli_test_" + std::to_string(Rng::mix(::getpid(), 99)));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct ScratchCleaner {
  ~ScratchCleaner() {
    std::error_code ec;
    fs::remove_all(scratch(), ec);
  }
} cleaner;

fs::path write_config(const std::string& name, const json& j) {
  const fs::path p = scratch() / name;
  std::ofstream out(p);
  out << j.dump(2) << "\n";
  return p;
}

json tiny_run_config() {
  return json{
      {"dataset",
       {{"format", "synthetic"}, {"train_count", 160}, {"test_count", 80}, {"data_seed", 5}}},
      {"model", {{"kind", "mlp"}, {"layer_dims", {784, 8, 10}}, {"init_seed", 21}}},
      {"train",
       {{"epochs", 2},
        {"batch_size", 32},
        {"lr", 0.05},
        {"lr_decay_epochs", json::array()},
        {"seed", 9}}}};
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(run_cli("").code == 2);
  CHECK(run_cli("no-such-command").code == 2);
  CHECK(run_cli("train-teacher").code == 2);  // missing required options
  CHECK(run_cli("--help").code == 0);
}

TEST_CASE("datagen writes loadable idx files plus a manifest") {
  const fs::path out = scratch() / "data";
  auto res = run_cli("datagen --out " + out.string() +
                     " --train-count 64 --test-count 32 --seed 7");
  CHECK(res.code == 0);
  CHECK(res.output.find("wrote 64 train and 32 test samples") != std::string::npos);

  Dataset train = load_idx(out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte");
  Dataset test = load_idx(out / "t10k-images-idx3-ubyte", out / "t10k-labels-idx1-ubyte");
  CHECK(train.n == 64);
  CHECK(test.n == 32);
  // The files hold exactly the in-process generator output.
  Dataset expect = make_synthetic_digits(64, 7, "train");
  CHECK(train.images == expect.images);
  CHECK(train.labels == expect.labels);

  const json manifest = json::parse(slurp(out / "manifest.json"));
  CHECK(manifest.at("command") == "datagen");
  CHECK(manifest.at("seed") == 7);
  CHECK(manifest.at("wall_time_seconds").is_number());
  CHECK(manifest.at("outputs").contains("train_images"));
}

TEST_CASE("config errors are reported with the offending key and exit code 2") {
  json cfg = tiny_run_config();
  cfg["train"]["learning_rate"] = 0.1;  // wrong name
  const fs::path path = write_config("bad_key.json", cfg);
  const fs::path out = scratch() / "bad_key_out";
  auto res = run_cli("train-teacher --config " + path.string() + " --out " + out.string());
  CHECK(res.code == 2);
  CHECK(res.output.find("train.learning_rate") != std::string::npos);

  const fs::path garbled = scratch() / "garbled.json";
  std::ofstream(garbled) << "{ not json";
  auto res2 = run_cli("train-teacher --config " + garbled.string() + " --out " + out.string());
  CHECK(res2.code == 2);
  CHECK(res2.output.find("not valid JSON") != std::string::npos);

  auto res3 =
      run_cli("train-teacher --config /definitely/missing.json --out " + out.string());
  CHECK(res3.code == 3);
}

TEST_CASE("teacher training then distillation produce complete artifacts") {
  const fs::path cfg_path = write_config("run.json", tiny_run_config());
  const fs::path teacher_dir = scratch() / "teacher";

  auto teach = run_cli("train-teacher --config " + cfg_path.string() + " --out " +
                       teacher_dir.string());
  REQUIRE(teach.code == 0);
  CHECK(teach.output.find("final test accuracy") != std::string::npos);
  CHECK(fs::exists(teacher_dir / "checkpoint.ckpt"));
  CHECK(fs::exists(teacher_dir / "metrics.csv"));
  const json tmanifest = json::parse(slurp(teacher_dir / "manifest.json"));
  CHECK(tmanifest.at("command") == "train-teacher");
  CHECK(tmanifest.at("method") == "ce_only");
  CHECK(tmanifest.at("seed") == 9);
  CHECK(tmanifest.at("config").at("train").at("epochs") == 2);
  CHECK(tmanifest.at("wall_time_seconds").get<double>() > 0.0);

  // Distill with a method override and the gate log enabled.
  const fs::path student_dir = scratch() / "student_cmkd";
  auto dist = run_cli("distill --teacher " + (teacher_dir / "checkpoint.ckpt").string() +
                      " --config " + cfg_path.string() + " --method cmkd --gate-log --out " +
                      student_dir.string());
  REQUIRE(dist.code == 0);
  CHECK(fs::exists(student_dir / "checkpoint.ckpt"));
  CHECK(fs::exists(student_dir / "metrics.csv"));
  CHECK(fs::exists(student_dir / "confusion_diff.csv"));
  CHECK(fs::exists(student_dir / "gate_log.json"));
  const json smanifest = json::parse(slurp(student_dir / "manifest.json"));
  CHECK(smanifest.at("command") == "distill");
  CHECK(smanifest.at("method") == "cmkd");
  CHECK(smanifest.at("inputs").contains("teacher"));
  const json gate_log = json::parse(slurp(student_dir / "gate_log.json"));
  REQUIRE(gate_log.is_array());
  CHECK(gate_log.size() == 2);  // one entry per epoch

  // The distilled checkpoint loads and reports the configured spec.
  auto loaded = load_checkpoint(student_dir / "checkpoint.ckpt");
  CHECK(loaded.model.spec().layer_dims == std::vector<std::size_t>{784, 8, 10});
  CHECK(loaded.meta.epochs == 2);

  // eval agrees with the final metrics row.
  const fs::path eval_dir = scratch() / "eval";
  auto eval_res = run_cli("eval --checkpoint " + (student_dir / "checkpoint.ckpt").string() +
                          " --config " + cfg_path.string() + " --out " + eval_dir.string());
  REQUIRE(eval_res.code == 0);
  const auto metrics = read_metrics_csv(student_dir / "metrics.csv");
  const std::string eval_csv = slurp(eval_dir / "eval.csv");
  CHECK(eval_csv.rfind("metric,value\n", 0) == 0);
  const auto top1_pos = eval_csv.find("top1,");
  REQUIRE(top1_pos != std::string::npos);
  const double top1 = std::stod(eval_csv.substr(top1_pos + 5));
  CHECK(top1 == metrics.back().test_accuracy);

  // robustness runs the corruption sweep and stays deterministic.
  const fs::path rob_dir = scratch() / "rob";
  auto rob = run_cli("robustness --checkpoint " + (student_dir / "checkpoint.ckpt").string() +
                     " --config " + cfg_path.string() + " --seed 3 --out " + rob_dir.string());
  REQUIRE(rob.code == 0);
  CHECK(fs::exists(rob_dir / "robustness.csv"));
  const fs::path rob_dir2 = scratch() / "rob2";
  auto rob2 = run_cli("robustness --checkpoint " + (student_dir / "checkpoint.ckpt").string() +
                      " --config " + cfg_path.string() + " --seed 3 --out " + rob_dir2.string());
  REQUIRE(rob2.code == 0);
  CHECK(slurp(rob_dir / "robustness.csv") == slurp(rob_dir2 / "robustness.csv"));
}

TEST_CASE("re-running the same config is byte-identical") {
  const fs::path cfg_path = write_config("rerun.json", tiny_run_config());
  const fs::path a = scratch() / "rerun_a";
  const fs::path b = scratch() / "rerun_b";
  REQUIRE(run_cli("train-teacher --config " + cfg_path.string() + " --out " + a.string()).code ==
          0);
  REQUIRE(run_cli("train-teacher --config " + cfg_path.string() + " --out " + b.string()).code ==
          0);
  CHECK(slurp(a / "checkpoint.ckpt") == slurp(b / "checkpoint.ckpt"));
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));

  // A different seed changes the artifacts.
  const fs::path c = scratch() / "rerun_c";
  REQUIRE(run_cli("train-teacher --config " + cfg_path.string() + " --seed 10 --out " +
                  c.string())
              .code == 0);
  CHECK(slurp(a / "checkpoint.ckpt") != slurp(c / "checkpoint.ckpt"));
  const json cm = json::parse(slurp(c / "manifest.json"));
  CHECK(cm.at("seed") == 10);
}

TEST_CASE("bad method and bad teacher path fail with distinct codes") {
  const fs::path cfg_path = write_config("method.json", tiny_run_config());
  const fs::path teacher_dir = scratch() / "teacher";  // created by the earlier case
  REQUIRE(fs::exists(teacher_dir / "checkpoint.ckpt"));

  auto bad_method = run_cli("distill --teacher " + (teacher_dir / "checkpoint.ckpt").string() +
                            " --config " + cfg_path.string() + " --method banana --out " +
                            (scratch() / "x1").string());
  CHECK(bad_method.code == 2);
  CHECK(bad_method.output.find("ce_only, kd, pearson, pearson_z, cmkd") != std::string::npos);

  auto bad_teacher = run_cli("distill --teacher /missing.ckpt --config " + cfg_path.string() +
                             " --out " + (scratch() / "x2").string());
  CHECK(bad_teacher.code == 3);
}

TEST_CASE("export-metrics merges runs into long format") {
  const fs::path teacher_dir = scratch() / "teacher";
  const fs::path student_dir = scratch() / "student_cmkd";
  REQUIRE(fs::exists(teacher_dir / "metrics.csv"));
  REQUIRE(fs::exists(student_dir / "metrics.csv"));

  const fs::path out_csv = scratch() / "all_runs.csv";
  auto res = run_cli("export-metrics --runs " + teacher_dir.string() + " " +
                     student_dir.string() + " --out " + out_csv.string());
  REQUIRE(res.code == 0);

  std::ifstream in(out_csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "run,method,seed,epoch,metric,value");
  std::size_t rows = 0;
  std::size_t cmkd_rows = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++rows;
    if (line.find(",cmkd,") != std::string::npos) ++cmkd_rows;
  }
  // Two runs, two epochs each, five metrics per epoch.
  CHECK(rows == 2 * 2 * 5);
  CHECK(cmkd_rows == 2 * 5);

  // Filtering keeps a single metric; unknown metrics are named in the error.
  const fs::path filtered = scratch() / "filtered.csv";
  auto res2 = run_cli("export-metrics --runs " + teacher_dir.string() + " --out " +
                      filtered.string() + " --metric test_accuracy");
  REQUIRE(res2.code == 0);
  std::ifstream fin(filtered);
  std::getline(fin, header);
  rows = 0;
  while (std::getline(fin, line)) {
    if (line.empty()) continue;
    CHECK(line.find("test_accuracy") != std::string::npos);
    ++rows;
  }
  CHECK(rows == 2);

  auto res3 = run_cli("export-metrics --runs " + teacher_dir.string() + " --out " +
                      filtered.string() + " --metric nope");
  CHECK(res3.code == 2);
  CHECK(res3.output.find("test_accuracy") != std::string::npos);  // lists valid names

  auto res4 = run_cli("export-metrics --runs /no/such/run --out " + filtered.string());
  CHECK(res4.code == 3);
}

TEST_CASE("gradcheck subcommand passes and rejects bad tolerances") {
  auto res = run_cli("gradcheck");
  CHECK(res.code == 0);
  CHECK(res.output.find("all gradient checks passed") != std::string::npos);

  auto res2 = run_cli("gradcheck --tolerance -1");
  CHECK(res2.code == 2);
}
