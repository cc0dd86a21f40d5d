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

// Command-line front end. Every run resolves its JSON config (strict keys,
// defaults materialized), writes a manifest into the output directory before
// any heavy work, then trains / evaluates / exports as asked. Exit codes are
// a stable contract: 0 success, 1 verification failure, 2 usage or config
// error, 3 IO error.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cmkd/data.hpp"
#include "cmkd/errors.hpp"
#include "cmkd/gradcheck.hpp"
#include "cmkd/io_util.hpp"
#include "cmkd/losses.hpp"
#include "cmkd/models.hpp"
#include "cmkd/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "1.0.0";

//--------------------------------------------------------------------------
// Strict JSON config parsing
//--------------------------------------------------------------------------

json parse_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw cmkd::IoError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw cmkd::ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

void require_object(const json& node, const std::string& path) {
  if (!node.is_object()) throw cmkd::ConfigError("config section '" + path + "' must be an object");
}

void reject_unknown_keys(const json& obj, const std::string& prefix,
                         const std::set<std::string>& allowed) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.contains(key)) {
      throw cmkd::ConfigError("unknown config key '" + prefix + key + "'");
    }
  }
}

double get_number(const json& obj, const std::string& prefix, const std::string& key,
                  double fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number()) {
    throw cmkd::ConfigError("config key '" + prefix + key + "' must be a number");
  }
  return obj[key].get<double>();
}

std::uint64_t get_uint(const json& obj, const std::string& prefix, const std::string& key,
                       std::uint64_t fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number_unsigned()) {
    throw cmkd::ConfigError("config key '" + prefix + key + "' must be a non-negative integer");
  }
  return obj[key].get<std::uint64_t>();
}

bool get_bool(const json& obj, const std::string& prefix, const std::string& key,
              bool fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_boolean()) {
    throw cmkd::ConfigError("config key '" + prefix + key + "' must be a boolean");
  }
  return obj[key].get<bool>();
}

std::string get_string(const json& obj, const std::string& prefix, const std::string& key,
                       const std::string& fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_string()) {
    throw cmkd::ConfigError("config key '" + prefix + key + "' must be a string");
  }
  return obj[key].get<std::string>();
}

std::string require_string(const json& obj, const std::string& prefix, const std::string& key) {
  if (!obj.contains(key)) {
    throw cmkd::ConfigError("missing required config key '" + prefix + key + "'");
  }
  return get_string(obj, prefix, key, "");
}

std::vector<std::uint64_t> get_uint_list(const json& obj, const std::string& prefix,
                                         const std::string& key,
                                         std::vector<std::uint64_t> fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_array()) {
    throw cmkd::ConfigError("config key '" + prefix + key + "' must be an array");
  }
  std::vector<std::uint64_t> out;
  for (const auto& item : obj[key]) {
    if (!item.is_number_unsigned()) {
      throw cmkd::ConfigError("config key '" + prefix + key +
                              "' must hold non-negative integers");
    }
    out.push_back(item.get<std::uint64_t>());
  }
  return out;
}

std::vector<std::string> get_string_list(const json& obj, const std::string& prefix,
                                         const std::string& key) {
  if (!obj.contains(key)) return {};
  if (!obj[key].is_array()) {
    throw cmkd::ConfigError("config key '" + prefix + key + "' must be an array");
  }
  std::vector<std::string> out;
  for (const auto& item : obj[key]) {
    if (!item.is_string()) {
      throw cmkd::ConfigError("config key '" + prefix + key + "' must hold strings");
    }
    out.push_back(item.get<std::string>());
  }
  return out;
}

//--------------------------------------------------------------------------
// Config sections
//--------------------------------------------------------------------------

struct DatasetConfig {
  std::string format;  // idx | cifar10 | synthetic
  std::string dir;
  std::string train_images, train_labels, test_images, test_labels;
  std::vector<std::string> train_files, test_files;
  std::size_t train_limit = 0;  // 0 = use everything
  std::size_t test_limit = 0;
  std::size_t train_count = 10000;  // synthetic only
  std::size_t test_count = 2000;
  std::uint64_t data_seed = 7;
};

DatasetConfig parse_dataset(const json& node) {
  require_object(node, "dataset");
  reject_unknown_keys(node, "dataset.",
                      {"format", "dir", "train_images", "train_labels", "test_images",
                       "test_labels", "train_files", "test_files", "train_limit", "test_limit",
                       "train_count", "test_count", "data_seed"});
  DatasetConfig cfg;
  cfg.format = require_string(node, "dataset.", "format");
  if (cfg.format != "idx" && cfg.format != "cifar10" && cfg.format != "synthetic") {
    throw cmkd::ConfigError("dataset.format '" + cfg.format +
                            "' is not one of idx, cifar10, synthetic");
  }
  cfg.dir = get_string(node, "dataset.", "dir", "");
  if (cfg.format == "idx") {
    cfg.train_images = require_string(node, "dataset.", "train_images");
    cfg.train_labels = require_string(node, "dataset.", "train_labels");
    cfg.test_images = require_string(node, "dataset.", "test_images");
    cfg.test_labels = require_string(node, "dataset.", "test_labels");
  } else if (cfg.format == "cifar10") {
    cfg.train_files = get_string_list(node, "dataset.", "train_files");
    cfg.test_files = get_string_list(node, "dataset.", "test_files");
    if (cfg.train_files.empty() || cfg.test_files.empty()) {
      throw cmkd::ConfigError("dataset.train_files and dataset.test_files are required");
    }
  }
  cfg.train_limit = get_uint(node, "dataset.", "train_limit", 0);
  cfg.test_limit = get_uint(node, "dataset.", "test_limit", 0);
  cfg.train_count = get_uint(node, "dataset.", "train_count", cfg.train_count);
  cfg.test_count = get_uint(node, "dataset.", "test_count", cfg.test_count);
  cfg.data_seed = get_uint(node, "dataset.", "data_seed", cfg.data_seed);
  return cfg;
}

// Relative paths land under CMKD_DATA_DIR when the variable is set.
fs::path resolve_data_path(const fs::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("CMKD_DATA_DIR"); root && *root) {
    return fs::path(root) / p;
  }
  return p;
}

fs::path dataset_file(const DatasetConfig& cfg, const std::string& file) {
  if (!cfg.dir.empty()) return resolve_data_path(fs::path(cfg.dir) / file);
  return resolve_data_path(file);
}

std::vector<fs::path> dataset_split_files(const DatasetConfig& cfg, bool train) {
  std::vector<fs::path> files;
  if (cfg.format == "idx") {
    files.push_back(dataset_file(cfg, train ? cfg.train_images : cfg.test_images));
    files.push_back(dataset_file(cfg, train ? cfg.train_labels : cfg.test_labels));
  } else if (cfg.format == "cifar10") {
    for (const auto& f : train ? cfg.train_files : cfg.test_files) {
      files.push_back(dataset_file(cfg, f));
    }
  }
  return files;
}

cmkd::Dataset load_split(const DatasetConfig& cfg, bool train) {
  cmkd::Dataset ds;
  if (cfg.format == "idx") {
    const auto files = dataset_split_files(cfg, train);
    ds = cmkd::load_idx(files[0], files[1]);
  } else if (cfg.format == "cifar10") {
    ds = cmkd::load_cifar10_bin(dataset_split_files(cfg, train));
  } else {
    ds = cmkd::make_synthetic_digits(train ? cfg.train_count : cfg.test_count, cfg.data_seed,
                                     train ? "train" : "test");
  }
  ds.split = train ? "train" : "test";
  const std::size_t limit = train ? cfg.train_limit : cfg.test_limit;
  if (limit > 0 && limit < ds.n) ds = ds.head(limit);
  return ds;
}

json dataset_json(const DatasetConfig& cfg) {
  json j{{"format", cfg.format}};
  if (!cfg.dir.empty()) j["dir"] = cfg.dir;
  if (cfg.format == "idx") {
    j["train_images"] = cfg.train_images;
    j["train_labels"] = cfg.train_labels;
    j["test_images"] = cfg.test_images;
    j["test_labels"] = cfg.test_labels;
  } else if (cfg.format == "cifar10") {
    j["train_files"] = cfg.train_files;
    j["test_files"] = cfg.test_files;
  } else {
    j["train_count"] = cfg.train_count;
    j["test_count"] = cfg.test_count;
    j["data_seed"] = cfg.data_seed;
  }
  j["train_limit"] = cfg.train_limit;
  j["test_limit"] = cfg.test_limit;
  return j;
}

cmkd::ModelSpec parse_model(const json& node, const std::string& section) {
  require_object(node, section);
  reject_unknown_keys(node, section + ".",
                      {"kind", "layer_dims", "conv_channels", "in_channels", "image_h",
                       "image_w", "num_classes", "init_seed"});
  cmkd::ModelSpec spec;
  spec.kind = cmkd::model_kind_from_string(require_string(node, section + ".", "kind"));
  for (std::uint64_t d : get_uint_list(node, section + ".", "layer_dims", {})) {
    spec.layer_dims.push_back(static_cast<std::size_t>(d));
  }
  for (std::uint64_t c : get_uint_list(node, section + ".", "conv_channels", {})) {
    spec.conv_channels.push_back(static_cast<std::size_t>(c));
  }
  spec.in_channels = get_uint(node, section + ".", "in_channels", spec.in_channels);
  spec.image_h = get_uint(node, section + ".", "image_h", spec.image_h);
  spec.image_w = get_uint(node, section + ".", "image_w", spec.image_w);
  spec.num_classes = get_uint(node, section + ".", "num_classes", spec.num_classes);
  spec.init_seed = get_uint(node, section + ".", "init_seed", spec.init_seed);
  spec.validate();
  return spec;
}

json model_json(const cmkd::ModelSpec& spec) {
  json j{{"kind", cmkd::to_string(spec.kind)},
         {"num_classes", spec.num_classes},
         {"init_seed", spec.init_seed}};
  if (spec.kind == cmkd::ModelSpec::Kind::mlp) {
    j["layer_dims"] = spec.layer_dims;
  } else {
    j["conv_channels"] = spec.conv_channels;
    j["in_channels"] = spec.in_channels;
    j["image_h"] = spec.image_h;
    j["image_w"] = spec.image_w;
  }
  return j;
}

cmkd::DistillConfig parse_distill(const json& node) {
  require_object(node, "distill");
  reject_unknown_keys(node, "distill.",
                      {"method", "temperature", "alpha", "beta", "gamma", "epsilon",
                       "spearman_input", "gate_at_unit_temperature"});
  cmkd::DistillConfig cfg;
  cfg.method = cmkd::method_from_string(get_string(node, "distill.", "method",
                                                   cmkd::to_string(cfg.method)));
  cfg.temperature = get_number(node, "distill.", "temperature", cfg.temperature);
  cfg.alpha = get_number(node, "distill.", "alpha", cfg.alpha);
  cfg.beta = get_number(node, "distill.", "beta", cfg.beta);
  cfg.gamma = get_number(node, "distill.", "gamma", cfg.gamma);
  cfg.epsilon = get_number(node, "distill.", "epsilon", cfg.epsilon);
  cfg.spearman_input = cmkd::spearman_input_from_string(
      get_string(node, "distill.", "spearman_input", cmkd::to_string(cfg.spearman_input)));
  cfg.gate_at_unit_temperature =
      get_bool(node, "distill.", "gate_at_unit_temperature", cfg.gate_at_unit_temperature);
  cfg.validate();
  return cfg;
}

json distill_json(const cmkd::DistillConfig& cfg) {
  return json{{"method", cmkd::to_string(cfg.method)},
              {"temperature", cfg.temperature},
              {"alpha", cfg.alpha},
              {"beta", cfg.beta},
              {"gamma", cfg.gamma},
              {"epsilon", cfg.epsilon},
              {"spearman_input", cmkd::to_string(cfg.spearman_input)},
              {"gate_at_unit_temperature", cfg.gate_at_unit_temperature}};
}

cmkd::TrainConfig parse_train(const json& node) {
  require_object(node, "train");
  reject_unknown_keys(node, "train.",
                      {"epochs", "batch_size", "lr", "momentum", "weight_decay",
                       "lr_decay_epochs", "lr_decay_factor", "seed"});
  cmkd::TrainConfig cfg;
  cfg.epochs = get_uint(node, "train.", "epochs", cfg.epochs);
  cfg.batch_size = get_uint(node, "train.", "batch_size", cfg.batch_size);
  cfg.lr = get_number(node, "train.", "lr", cfg.lr);
  cfg.momentum = get_number(node, "train.", "momentum", cfg.momentum);
  cfg.weight_decay = get_number(node, "train.", "weight_decay", cfg.weight_decay);
  std::vector<std::uint64_t> decay_default(cfg.lr_decay_epochs.begin(),
                                           cfg.lr_decay_epochs.end());
  cfg.lr_decay_epochs.clear();
  for (std::uint64_t e : get_uint_list(node, "train.", "lr_decay_epochs", decay_default)) {
    cfg.lr_decay_epochs.push_back(static_cast<std::size_t>(e));
  }
  cfg.lr_decay_factor = get_number(node, "train.", "lr_decay_factor", cfg.lr_decay_factor);
  cfg.seed = get_uint(node, "train.", "seed", cfg.seed);
  return cfg;
}

json train_json(const cmkd::TrainConfig& cfg) {
  return json{{"epochs", cfg.epochs},
              {"batch_size", cfg.batch_size},
              {"lr", cfg.lr},
              {"momentum", cfg.momentum},
              {"weight_decay", cfg.weight_decay},
              {"lr_decay_epochs", cfg.lr_decay_epochs},
              {"lr_decay_factor", cfg.lr_decay_factor},
              {"seed", cfg.seed}};
}

// The one experiment config shared by all commands. model/train/distill are
// optional sections with full defaults; commands that need them say so.
struct RunConfig {
  DatasetConfig dataset;
  std::optional<cmkd::ModelSpec> model;
  cmkd::TrainConfig train;  // holds distill
};

RunConfig parse_run_config(const fs::path& path) {
  const json root = parse_config_file(path);
  require_object(root, "(top level)");
  reject_unknown_keys(root, "", {"dataset", "model", "train", "distill"});
  if (!root.contains("dataset")) {
    throw cmkd::ConfigError("missing required config section 'dataset'");
  }
  RunConfig cfg;
  cfg.dataset = parse_dataset(root["dataset"]);
  if (root.contains("model")) cfg.model = parse_model(root["model"], "model");
  if (root.contains("train")) cfg.train = parse_train(root["train"]);
  if (root.contains("distill")) cfg.train.distill = parse_distill(root["distill"]);
  return cfg;
}

const cmkd::ModelSpec& require_model(const RunConfig& cfg) {
  if (!cfg.model) throw cmkd::ConfigError("missing required config section 'model'");
  return *cfg.model;
}

//--------------------------------------------------------------------------
// Manifests
//--------------------------------------------------------------------------

json file_input_entry(const fs::path& path) {
  return json{{"path", path.string()}, {"fnv1a64", cmkd::file_digest_hex(path)}};
}

json dataset_inputs(const DatasetConfig& cfg, bool want_train, bool want_test) {
  json inputs = json::object();
  if (cfg.format == "synthetic") return inputs;  // generated in-process
  auto add = [&inputs](const std::string& key, const fs::path& p) {
    inputs[key] = file_input_entry(p);
  };
  if (cfg.format == "idx") {
    if (want_train) {
      add("train_images", dataset_file(cfg, cfg.train_images));
      add("train_labels", dataset_file(cfg, cfg.train_labels));
    }
    if (want_test) {
      add("test_images", dataset_file(cfg, cfg.test_images));
      add("test_labels", dataset_file(cfg, cfg.test_labels));
    }
  } else {
    auto add_list = [&](const std::string& key, const std::vector<std::string>& files) {
      json arr = json::array();
      for (const auto& f : files) arr.push_back(file_input_entry(dataset_file(cfg, f)));
      inputs[key] = arr;
    };
    if (want_train) add_list("train_files", cfg.train_files);
    if (want_test) add_list("test_files", cfg.test_files);
  }
  return inputs;
}

class ManifestWriter {
 public:
  ManifestWriter(fs::path out_dir, json manifest)
      : path_(out_dir / "manifest.json"),
        manifest_(std::move(manifest)),
        start_(std::chrono::steady_clock::now()) {
    manifest_["wall_time_seconds"] = nullptr;
    cmkd::write_text_file(path_, manifest_.dump(2) + "\n");
  }

  // Rewrites the manifest with the measured wall time once the run is done.
  void finish() {
    const auto elapsed = std::chrono::steady_clock::now() - start_;
    manifest_["wall_time_seconds"] =
        std::chrono::duration_cast<std::chrono::duration<double>>(elapsed).count();
    cmkd::write_text_file(path_, manifest_.dump(2) + "\n");
  }

 private:
  fs::path path_;
  json manifest_;
  std::chrono::steady_clock::time_point start_;
};

fs::path prepare_out_dir(const std::string& out) {
  fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw cmkd::IoError("cannot create output directory " + dir.string());
  return dir;
}

//--------------------------------------------------------------------------
// Commands
//--------------------------------------------------------------------------

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed_override;
};

int cmd_train_teacher(const CommonArgs& args) {
  RunConfig cfg = parse_run_config(args.config_path);
  const cmkd::ModelSpec& spec = require_model(cfg);
  if (args.seed_override) cfg.train.seed = *args.seed_override;
  cfg.train.distill = cmkd::DistillConfig{};
  cfg.train.distill.method = cmkd::DistillConfig::Method::ce_only;
  cfg.train.validate();

  const fs::path out = prepare_out_dir(args.out_dir);
  json manifest{{"command", "train-teacher"},
                {"version", kToolVersion},
                {"seed", cfg.train.seed},
                {"method", "ce_only"},
                {"config",
                 {{"dataset", dataset_json(cfg.dataset)},
                  {"model", model_json(spec)},
                  {"train", train_json(cfg.train)},
                  {"distill", distill_json(cfg.train.distill)}}},
                {"inputs", dataset_inputs(cfg.dataset, true, true)},
                {"outputs",
                 {{"checkpoint", (out / "checkpoint.ckpt").string()},
                  {"metrics_csv", (out / "metrics.csv").string()}}}};
  ManifestWriter writer(out, std::move(manifest));

  const cmkd::Dataset train = load_split(cfg.dataset, true);
  const cmkd::Dataset test = load_split(cfg.dataset, false);
  cmkd::TrainResult result = cmkd::train_teacher(spec, train, test, cfg.train);

  cmkd::save_checkpoint(result.model, result.meta, out / "checkpoint.ckpt");
  cmkd::write_metrics_csv(out / "metrics.csv", result.metrics);
  writer.finish();
  std::printf("final test accuracy %s\n", cmkd::format_double(result.meta.final_accuracy).c_str());
  return 0;
}

struct DistillArgs : CommonArgs {
  std::string teacher_path;
  std::string method_override;
  bool gate_log = false;
};

int cmd_distill(const DistillArgs& args) {
  RunConfig cfg = parse_run_config(args.config_path);
  const cmkd::ModelSpec& student_spec = require_model(cfg);
  if (args.seed_override) cfg.train.seed = *args.seed_override;
  if (!args.method_override.empty()) {
    cfg.train.distill.method = cmkd::method_from_string(args.method_override);
  }
  cfg.train.validate();

  cmkd::LoadedCheckpoint teacher = cmkd::load_checkpoint(args.teacher_path);

  const fs::path out = prepare_out_dir(args.out_dir);
  json outputs{{"checkpoint", (out / "checkpoint.ckpt").string()},
               {"metrics_csv", (out / "metrics.csv").string()},
               {"confusion_diff_csv", (out / "confusion_diff.csv").string()}};
  if (args.gate_log) outputs["gate_log"] = (out / "gate_log.json").string();
  json inputs = dataset_inputs(cfg.dataset, true, true);
  inputs["teacher"] = file_input_entry(args.teacher_path);
  json manifest{{"command", "distill"},
                {"version", kToolVersion},
                {"seed", cfg.train.seed},
                {"method", cmkd::to_string(cfg.train.distill.method)},
                {"config",
                 {{"dataset", dataset_json(cfg.dataset)},
                  {"model", model_json(student_spec)},
                  {"train", train_json(cfg.train)},
                  {"distill", distill_json(cfg.train.distill)}}},
                {"inputs", std::move(inputs)},
                {"outputs", std::move(outputs)}};
  ManifestWriter writer(out, std::move(manifest));

  const cmkd::Dataset train = load_split(cfg.dataset, true);
  const cmkd::Dataset test = load_split(cfg.dataset, false);
  cmkd::TrainResult result;
  if (cfg.train.distill.method == cmkd::DistillConfig::Method::ce_only) {
    // No teacher involvement; kept as a distill method so the ablation table
    // has its baseline column.
    result = cmkd::train_teacher(student_spec, train, test, cfg.train);
  } else {
    result = cmkd::distill(teacher.model, student_spec, train, test, cfg.train, args.gate_log);
  }

  cmkd::save_checkpoint(result.model, result.meta, out / "checkpoint.ckpt");
  cmkd::write_metrics_csv(out / "metrics.csv", result.metrics);
  const cmkd::ConfusionDiff diff = cmkd::logit_confusion_diff(teacher.model, result.model, test);
  cmkd::write_confusion_diff_csv(out / "confusion_diff.csv", diff);
  if (args.gate_log) {
    cmkd::write_text_file(out / "gate_log.json", result.gate_log.dump(2) + "\n");
  }
  writer.finish();
  std::printf("final test accuracy %s\n", cmkd::format_double(result.meta.final_accuracy).c_str());
  return 0;
}

struct EvalArgs : CommonArgs {
  std::string checkpoint_path;
  std::string split = "test";
};

int cmd_eval(const EvalArgs& args) {
  RunConfig cfg = parse_run_config(args.config_path);
  if (args.split != "train" && args.split != "test") {
    throw cmkd::ConfigError("--split must be train or test");
  }
  cmkd::LoadedCheckpoint ckpt = cmkd::load_checkpoint(args.checkpoint_path);

  const fs::path out = prepare_out_dir(args.out_dir);
  json inputs = dataset_inputs(cfg.dataset, args.split == "train", args.split == "test");
  inputs["checkpoint"] = file_input_entry(args.checkpoint_path);
  json manifest{{"command", "eval"},
                {"version", kToolVersion},
                {"seed", 0},
                {"config", {{"dataset", dataset_json(cfg.dataset)}, {"split", args.split}}},
                {"inputs", std::move(inputs)},
                {"outputs", {{"eval_csv", (out / "eval.csv").string()}}}};
  ManifestWriter writer(out, std::move(manifest));

  const cmkd::Dataset ds = load_split(cfg.dataset, args.split == "train");
  const cmkd::EvalResult res = cmkd::evaluate(ckpt.model, ds);

  std::string csv = "metric,value\n";
  csv += "top1," + cmkd::format_double(res.top1) + "\n";
  csv += "top5," + cmkd::format_double(res.top5) + "\n";
  for (std::size_t c = 0; c < res.per_class_accuracy.size(); ++c) {
    csv += "per_class_" + std::to_string(c) + ",";
    csv += res.class_present[c] ? cmkd::format_double(res.per_class_accuracy[c])
                                : std::string("missing");
    csv += "\n";
  }
  cmkd::write_text_file(out / "eval.csv", csv);
  writer.finish();
  std::printf("top1 %s\ntop5 %s\n", cmkd::format_double(res.top1).c_str(),
              cmkd::format_double(res.top5).c_str());
  return 0;
}

struct RobustnessArgs : CommonArgs {
  std::string checkpoint_path;
};

int cmd_robustness(const RobustnessArgs& args) {
  RunConfig cfg = parse_run_config(args.config_path);
  const std::uint64_t seed = args.seed_override.value_or(cfg.train.seed);
  cmkd::LoadedCheckpoint ckpt = cmkd::load_checkpoint(args.checkpoint_path);

  const fs::path out = prepare_out_dir(args.out_dir);
  json inputs = dataset_inputs(cfg.dataset, false, true);
  inputs["checkpoint"] = file_input_entry(args.checkpoint_path);
  json manifest{{"command", "robustness"},
                {"version", kToolVersion},
                {"seed", seed},
                {"config", {{"dataset", dataset_json(cfg.dataset)}}},
                {"inputs", std::move(inputs)},
                {"outputs", {{"robustness_csv", (out / "robustness.csv").string()}}}};
  ManifestWriter writer(out, std::move(manifest));

  const cmkd::Dataset ds = load_split(cfg.dataset, false);
  const cmkd::RobustnessTable table =
      cmkd::robustness_eval(ckpt.model, ds, cmkd::all_corruption_kinds(), {1, 2, 3, 4, 5}, seed);
  cmkd::write_robustness_csv(out / "robustness.csv", table);
  writer.finish();
  std::printf("clean %s, corruption mean %s\n", cmkd::format_double(table.clean).c_str(),
              cmkd::format_double(table.corruption_mean()).c_str());
  return 0;
}

struct ExportArgs {
  std::vector<std::string> run_dirs;
  std::string out_file;
  std::string metric_filter;
};

int cmd_export_metrics(const ExportArgs& args) {
  static const std::vector<std::string> kMetricNames{
      "train_loss", "test_accuracy", "mean_pearson_ts", "mean_spearman_ts",
      "gate_high_entropy_fraction"};
  if (!args.metric_filter.empty() &&
      std::find(kMetricNames.begin(), kMetricNames.end(), args.metric_filter) ==
          kMetricNames.end()) {
    std::string valid;
    for (const auto& m : kMetricNames) valid += (valid.empty() ? "" : ", ") + m;
    throw cmkd::ConfigError("unknown metric '" + args.metric_filter + "' (valid: " + valid + ")");
  }

  std::string csv = "run,method,seed,epoch,metric,value\n";
  for (const auto& dir : args.run_dirs) {
    const fs::path run_dir(dir);
    std::ifstream in(run_dir / "manifest.json");
    if (!in) throw cmkd::IoError("cannot open " + (run_dir / "manifest.json").string());
    json manifest;
    try {
      manifest = json::parse(in);
    } catch (const json::parse_error& e) {
      throw cmkd::FormatError("bad manifest in " + dir + ": " + e.what());
    }
    const std::string method = manifest.value("method", std::string("unknown"));
    const std::uint64_t seed = manifest.value("seed", std::uint64_t{0});
    const std::string run_name = run_dir.filename().string().empty()
                                     ? run_dir.string()
                                     : run_dir.filename().string();

    for (const auto& rec : cmkd::read_metrics_csv(run_dir / "metrics.csv")) {
      const double values[] = {rec.train_loss, rec.test_accuracy, rec.mean_pearson_ts,
                               rec.mean_spearman_ts, rec.gate_high_entropy_fraction};
      for (std::size_t m = 0; m < kMetricNames.size(); ++m) {
        if (!args.metric_filter.empty() && kMetricNames[m] != args.metric_filter) continue;
        csv += run_name + "," + method + "," + std::to_string(seed) + "," +
               std::to_string(rec.epoch) + "," + kMetricNames[m] + "," +
               cmkd::format_double(values[m]) + "\n";
      }
    }
  }
  cmkd::write_text_file(args.out_file, csv);
  return 0;
}

struct GradcheckArgs {
  double tolerance = 1e-4;
  std::uint64_t seed = 20260214;
};

int cmd_gradcheck(const GradcheckArgs& args) {
  if (!(args.tolerance > 0.0)) throw cmkd::ParameterError("--tolerance must be positive");
  bool all_pass = true;
  for (const auto& res : cmkd::run_standard_suite(args.tolerance, args.seed)) {
    std::printf("%-32s max_rel_error %-12.3e %s\n", res.name.c_str(), res.max_rel_error,
                res.pass ? "ok" : "FAIL");
    all_pass = all_pass && res.pass;
  }
  for (const auto& check : cmkd::kd_gradient_identity()) {
    const bool pass = check.max_abs_error <= 1e-10;
    std::printf("kd_analytic_identity_T%-10g max_abs_error %-12.3e %s\n", check.temperature,
                check.max_abs_error, pass ? "ok" : "FAIL");
    all_pass = all_pass && pass;
  }
  if (!all_pass) {
    std::fprintf(stderr, "gradient verification failed (tolerance %g)\n", args.tolerance);
    return 1;
  }
  std::printf("all gradient checks passed (tolerance %g)\n", args.tolerance);
  return 0;
}

struct DatagenArgs {
  std::string out_dir;
  std::size_t train_count = 10000;
  std::size_t test_count = 2000;
  std::uint64_t seed = 7;
};

int cmd_datagen(const DatagenArgs& args) {
  const fs::path out = prepare_out_dir(args.out_dir);
  json manifest{{"command", "datagen"},
                {"version", kToolVersion},
                {"seed", args.seed},
                {"config", {{"train_count", args.train_count}, {"test_count", args.test_count}}},
                {"inputs", json::object()},
                {"outputs",
                 {{"train_images", (out / "train-images-idx3-ubyte").string()},
                  {"train_labels", (out / "train-labels-idx1-ubyte").string()},
                  {"test_images", (out / "t10k-images-idx3-ubyte").string()},
                  {"test_labels", (out / "t10k-labels-idx1-ubyte").string()}}}};
  ManifestWriter writer(out, std::move(manifest));

  const cmkd::Dataset train = cmkd::make_synthetic_digits(args.train_count, args.seed, "train");
  const cmkd::Dataset test = cmkd::make_synthetic_digits(args.test_count, args.seed, "test");
  cmkd::write_idx(train, out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte");
  cmkd::write_idx(test, out / "t10k-images-idx3-ubyte", out / "t10k-labels-idx1-ubyte");
  writer.finish();
  std::printf("wrote %zu train and %zu test samples to %s\n", train.n, test.n,
              out.string().c_str());
  return 0;
}

//--------------------------------------------------------------------------
// Exit-code mapping
//--------------------------------------------------------------------------

template <typename Fn>
int run_guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const cmkd::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const cmkd::ParameterError& e) {
    std::fprintf(stderr, "parameter error: %s\n", e.what());
    return 2;
  } catch (const cmkd::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const cmkd::FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 3;
  } catch (const cmkd::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"correlation-matching knowledge distillation toolkit"};
  app.require_subcommand(1);

  // train-teacher
  CommonArgs teacher_args;
  auto* train_teacher_cmd =
      app.add_subcommand("train-teacher", "train a model with plain cross-entropy");
  train_teacher_cmd->add_option("--config", teacher_args.config_path, "JSON config file")
      ->required();
  train_teacher_cmd->add_option("--out", teacher_args.out_dir, "output directory")->required();
  std::uint64_t teacher_seed = 0;
  auto* teacher_seed_opt =
      train_teacher_cmd->add_option("--seed", teacher_seed, "override train.seed");

  // distill
  DistillArgs distill_args;
  auto* distill_cmd = app.add_subcommand("distill", "distill a teacher into a student");
  distill_cmd->add_option("--teacher", distill_args.teacher_path, "teacher checkpoint")
      ->required();
  distill_cmd->add_option("--config", distill_args.config_path, "JSON config file")->required();
  distill_cmd->add_option("--out", distill_args.out_dir, "output directory")->required();
  distill_cmd->add_option("--method", distill_args.method_override,
                          "override distill.method (ce_only, kd, pearson, pearson_z, cmkd)");
  std::uint64_t distill_seed = 0;
  auto* distill_seed_opt = distill_cmd->add_option("--seed", distill_seed, "override train.seed");
  distill_cmd->add_flag("--gate-log", distill_args.gate_log,
                        "write per-epoch entropy gate decisions");

  // eval
  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint_path, "model checkpoint")->required();
  eval_cmd->add_option("--config", eval_args.config_path, "JSON config file")->required();
  eval_cmd->add_option("--out", eval_args.out_dir, "output directory")->required();
  eval_cmd->add_option("--split", eval_args.split, "train or test (default test)");

  // robustness
  RobustnessArgs robust_args;
  auto* robust_cmd =
      app.add_subcommand("robustness", "corruption sweep over the test split");
  robust_cmd->add_option("--checkpoint", robust_args.checkpoint_path, "model checkpoint")
      ->required();
  robust_cmd->add_option("--config", robust_args.config_path, "JSON config file")->required();
  robust_cmd->add_option("--out", robust_args.out_dir, "output directory")->required();
  std::uint64_t robust_seed = 0;
  auto* robust_seed_opt =
      robust_cmd->add_option("--seed", robust_seed, "corruption seed (default train.seed)");

  // export-metrics
  ExportArgs export_args;
  auto* export_cmd =
      app.add_subcommand("export-metrics", "merge run metrics into one long-format CSV");
  export_cmd->add_option("--runs", export_args.run_dirs, "run directories")
      ->required()
      ->expected(-1);
  export_cmd->add_option("--out", export_args.out_file, "output CSV file")->required();
  export_cmd->add_option("--metric", export_args.metric_filter, "keep only this metric");

  // gradcheck
  GradcheckArgs grad_args;
  auto* grad_cmd =
      app.add_subcommand("gradcheck", "finite-difference verification of all gradients");
  grad_cmd->add_option("--tolerance", grad_args.tolerance,
                       "max relative error allowed (default 1e-4)");
  grad_cmd->add_option("--seed", grad_args.seed, "randomization seed");

  // datagen
  DatagenArgs datagen_args;
  auto* datagen_cmd =
      app.add_subcommand("datagen", "generate the procedural digit dataset as IDX files");
  datagen_cmd->add_option("--out", datagen_args.out_dir, "output directory")->required();
  datagen_cmd->add_option("--train-count", datagen_args.train_count, "training samples");
  datagen_cmd->add_option("--test-count", datagen_args.test_count, "test samples");
  datagen_cmd->add_option("--seed", datagen_args.seed, "generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (train_teacher_cmd->parsed()) {
    if (!teacher_seed_opt->empty()) teacher_args.seed_override = teacher_seed;
    return run_guarded([&] { return cmd_train_teacher(teacher_args); });
  }
  if (distill_cmd->parsed()) {
    if (!distill_seed_opt->empty()) distill_args.seed_override = distill_seed;
    return run_guarded([&] { return cmd_distill(distill_args); });
  }
  if (eval_cmd->parsed()) {
    return run_guarded([&] { return cmd_eval(eval_args); });
  }
  if (robust_cmd->parsed()) {
    if (!robust_seed_opt->empty()) robust_args.seed_override = robust_seed;
    return run_guarded([&] { return cmd_robustness(robust_args); });
  }
  if (export_cmd->parsed()) {
    return run_guarded([&] { return cmd_export_metrics(export_args); });
  }
  if (grad_cmd->parsed()) {
    return run_guarded([&] { return cmd_gradcheck(grad_args); });
  }
  if (datagen_cmd->parsed()) {
    return run_guarded([&] { return cmd_datagen(datagen_args); });
  }
  return 2;
}
