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

// Classifier architectures used on both sides of distillation, plus a small
// versioned binary checkpoint format.  Two families are enough for the
// teacher/student experiments: a plain MLP over flattened pixels and a small
// conv net (3x3 conv, relu, 2x2 maxpool per stage, then a linear head).

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cmkd/tensor.hpp"

namespace cmkd {

struct ModelSpec {
  enum class Kind { mlp, smallcnn };

  Kind kind = Kind::mlp;

  // mlp: full layer widths, input first and class count last, e.g.
  // {784, 256, 128, 10}.  At least two entries.
  std::vector<std::size_t> layer_dims;

  // smallcnn: output channels per conv stage, e.g. {16, 32}.  Every stage
  // halves the spatial extent, so image_h and image_w must be divisible by
  // 2^stages.
  std::vector<std::size_t> conv_channels;

  std::size_t in_channels = 1;
  std::size_t image_h = 28;
  std::size_t image_w = 28;
  std::size_t num_classes = 10;
  std::uint64_t init_seed = 1;

  // Throws ParameterError when the fields do not describe a usable network.
  void validate() const;

  bool operator==(const ModelSpec&) const = default;
};

ModelSpec::Kind model_kind_from_string(const std::string& s);
std::string to_string(ModelSpec::Kind kind);

class Model {
 public:
  Model() = default;

  // Fresh network with He-uniform weights (limit sqrt(6/fan_in)) drawn from
  // Rng(spec.init_seed) in a fixed layer order; biases start at zero.
  static Model build(const ModelSpec& spec);

  bool defined() const { return !params_.empty(); }
  const ModelSpec& spec() const { return spec_; }

  // Logits [batch, num_classes].  The MLP accepts either [b, d] or
  // [b, c, h, w] with c*h*w == d; the conv net requires [b, c, h, w].
  Tensor forward(const Tensor& input) const;

  const std::vector<std::pair<std::string, Tensor>>& named_parameters() const {
    return params_;
  }
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  // Toggles requires_grad on every parameter; a frozen teacher never lands
  // on the tape even when student ops are being recorded.
  void set_trainable(bool trainable);
  void zero_grads();

  // FNV-1a over the raw little-endian bytes of all parameter values in
  // declaration order.  Equal hashes mean bit-identical weights.
  std::uint64_t parameter_hash() const;

  // Direct access for the optimizer and checkpoint code.
  Tensor parameter(const std::string& name) const;

 private:
  ModelSpec spec_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

struct CheckpointMeta {
  std::uint32_t epochs = 0;
  double final_accuracy = 0.0;
  std::uint64_t seed = 0;

  bool operator==(const CheckpointMeta&) const = default;
};

struct LoadedCheckpoint {
  Model model;
  CheckpointMeta meta;
};

// Little-endian binary file: "CMKD" magic, format version, the ModelSpec, the
// meta block, then a named tensor table.  Loading validates magic and version
// before touching anything else and restores weights bit for bit.
void save_checkpoint(const Model& model, const CheckpointMeta& meta,
                     const std::filesystem::path& path);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cmkd
