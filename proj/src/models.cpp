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

#include "cmkd/models.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "cmkd/errors.hpp"
#include "cmkd/io_util.hpp"
#include "cmkd/rng.hpp"

namespace cmkd {

namespace {

std::size_t checked_pow2_div(std::size_t extent, std::size_t stages, const char* axis) {
  for (std::size_t i = 0; i < stages; ++i) {
    if (extent % 2 != 0) {
      throw ParameterError(std::string("image ") + axis + " not divisible by 2^" +
                           std::to_string(stages) + " conv stages");
    }
    extent /= 2;
  }
  if (extent == 0) throw ParameterError(std::string("image ") + axis + " vanishes after pooling");
  return extent;
}

}  // namespace

void ModelSpec::validate() const {
  if (num_classes < 2) throw ParameterError("num_classes must be at least 2");
  switch (kind) {
    case Kind::mlp: {
      if (layer_dims.size() < 2) {
        throw ParameterError("mlp needs at least input and output widths in layer_dims");
      }
      for (std::size_t d : layer_dims) {
        if (d == 0) throw ParameterError("mlp layer width must be positive");
      }
      if (layer_dims.back() != num_classes) {
        throw ParameterError("mlp output width " + std::to_string(layer_dims.back()) +
                             " does not match num_classes " + std::to_string(num_classes));
      }
      if (!conv_channels.empty()) {
        throw ParameterError("conv_channels is only valid for the smallcnn kind");
      }
      break;
    }
    case Kind::smallcnn: {
      if (conv_channels.empty()) {
        throw ParameterError("smallcnn needs at least one conv stage in conv_channels");
      }
      for (std::size_t c : conv_channels) {
        if (c == 0) throw ParameterError("conv channel count must be positive");
      }
      if (!layer_dims.empty()) {
        throw ParameterError("layer_dims is only valid for the mlp kind");
      }
      if (in_channels == 0) throw ParameterError("in_channels must be positive");
      checked_pow2_div(image_h, conv_channels.size(), "height");
      checked_pow2_div(image_w, conv_channels.size(), "width");
      break;
    }
  }
}

ModelSpec::Kind model_kind_from_string(const std::string& s) {
  if (s == "mlp") return ModelSpec::Kind::mlp;
  if (s == "smallcnn") return ModelSpec::Kind::smallcnn;
  throw ConfigError("unknown model kind '" + s + "' (valid: mlp, smallcnn)");
}

std::string to_string(ModelSpec::Kind kind) {
  switch (kind) {
    case ModelSpec::Kind::mlp: return "mlp";
    case ModelSpec::Kind::smallcnn: return "smallcnn";
  }
  throw ParameterError("unknown model kind value");
}

namespace {

Tensor he_uniform(const std::vector<std::size_t>& shape, std::size_t fan_in, Rng& rng) {
  std::size_t count = 1;
  for (std::size_t d : shape) count *= d;
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> values(count);
  for (double& v : values) v = rng.uniform(-limit, limit);
  return Tensor(shape, std::move(values), /*requires_grad=*/true);
}

Tensor zero_param(const std::vector<std::size_t>& shape) {
  Tensor t = Tensor::zeros(shape);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

Model Model::build(const ModelSpec& spec) {
  spec.validate();
  Model m;
  m.spec_ = spec;
  Rng rng(spec.init_seed);

  if (spec.kind == ModelSpec::Kind::mlp) {
    for (std::size_t i = 0; i + 1 < spec.layer_dims.size(); ++i) {
      const std::size_t in = spec.layer_dims[i];
      const std::size_t out = spec.layer_dims[i + 1];
      const std::string stem = "fc" + std::to_string(i + 1);
      m.params_.emplace_back(stem + ".weight", he_uniform({in, out}, in, rng));
      m.params_.emplace_back(stem + ".bias", zero_param({out}));
    }
  } else {
    std::size_t in_c = spec.in_channels;
    for (std::size_t i = 0; i < spec.conv_channels.size(); ++i) {
      const std::size_t out_c = spec.conv_channels[i];
      const std::string stem = "conv" + std::to_string(i + 1);
      m.params_.emplace_back(stem + ".weight",
                             he_uniform({out_c, in_c, 3, 3}, in_c * 9, rng));
      m.params_.emplace_back(stem + ".bias", zero_param({out_c}));
      in_c = out_c;
    }
    const std::size_t stages = spec.conv_channels.size();
    const std::size_t fh = checked_pow2_div(spec.image_h, stages, "height");
    const std::size_t fw = checked_pow2_div(spec.image_w, stages, "width");
    const std::size_t flat = in_c * fh * fw;
    m.params_.emplace_back("fc.weight", he_uniform({flat, spec.num_classes}, flat, rng));
    m.params_.emplace_back("fc.bias", zero_param({spec.num_classes}));
  }
  return m;
}

Tensor Model::forward(const Tensor& input) const {
  if (!defined()) throw ContractError("forward on an unbuilt model");

  if (spec_.kind == ModelSpec::Kind::mlp) {
    const std::size_t want = spec_.layer_dims.front();
    Tensor x = input;
    if (input.ndim() == 4) {
      const std::size_t flat = input.dim(1) * input.dim(2) * input.dim(3);
      if (flat != want) {
        throw DimensionError("mlp expects " + std::to_string(want) +
                             " features, got " + std::to_string(flat));
      }
      x = reshape(input, {input.dim(0), flat});
    } else if (input.ndim() != 2 || input.dim(1) != want) {
      throw DimensionError("mlp expects input [batch, " + std::to_string(want) + "]");
    }
    const std::size_t layers = params_.size() / 2;
    for (std::size_t i = 0; i < layers; ++i) {
      x = add_row_bias(matmul(x, params_[2 * i].second), params_[2 * i + 1].second);
      if (i + 1 < layers) x = relu(x);
    }
    return x;
  }

  if (input.ndim() != 4 || input.dim(1) != spec_.in_channels ||
      input.dim(2) != spec_.image_h || input.dim(3) != spec_.image_w) {
    throw DimensionError("smallcnn expects input [batch, " +
                         std::to_string(spec_.in_channels) + ", " +
                         std::to_string(spec_.image_h) + ", " +
                         std::to_string(spec_.image_w) + "]");
  }
  Tensor x = input;
  const std::size_t stages = spec_.conv_channels.size();
  for (std::size_t i = 0; i < stages; ++i) {
    x = conv2d(x, params_[2 * i].second, /*stride=*/1, /*padding=*/1);
    x = add_channel_bias(x, params_[2 * i + 1].second);
    x = maxpool2x2(relu(x));
  }
  const std::size_t flat = x.dim(1) * x.dim(2) * x.dim(3);
  x = reshape(x, {x.dim(0), flat});
  return add_row_bias(matmul(x, params_[2 * stages].second),
                      params_[2 * stages + 1].second);
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : params_) total += t.size();
  return total;
}

void Model::set_trainable(bool trainable) {
  for (auto& [name, t] : params_) t.set_requires_grad(trainable);
}

void Model::zero_grads() {
  for (auto& [name, t] : params_) t.zero_grad();
}

std::uint64_t Model::parameter_hash() const {
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& [name, t] : params_) {
    for (double v : t.values()) {
      const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      unsigned char bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
      h = fnv1a64(std::span<const unsigned char>(bytes, 8), h);
    }
  }
  return h;
}

Tensor Model::parameter(const std::string& name) const {
  for (const auto& [n, t] : params_) {
    if (n == name) return t;
  }
  throw IndexError("no parameter named '" + name + "'");
}

//--------------------------------------------------------------------------
// Checkpoint format.  All integers little-endian; doubles stored as the
// little-endian bytes of their IEEE-754 bit pattern.
//
//   "CMKD"  u32 version=1
//   u8 kind  u32 num_classes  u64 init_seed
//   mlp:      u32 n, then n x u32 layer widths
//   smallcnn: u32 in_channels, u32 image_h, u32 image_w, u32 n, n x u32
//   u32 epochs  f64 final_accuracy  u64 seed
//   u32 tensor_count, then per tensor:
//     u32 name_len, name bytes, u32 ndim, ndim x u32 dims, f64 data
//--------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'C', 'M', 'K', 'D'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void need(std::istream& in, char* dst, std::size_t count, const char* what) {
  in.read(dst, static_cast<std::streamsize>(count));
  if (in.gcount() != static_cast<std::streamsize>(count)) {
    throw FormatError(std::string("truncated checkpoint while reading ") + what);
  }
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  need(in, reinterpret_cast<char*>(b), 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& in, const char* what) {
  unsigned char b[8];
  need(in, reinterpret_cast<char*>(b), 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& in, const char* what) {
  return std::bit_cast<double>(get_u64(in, what));
}

}  // namespace

void save_checkpoint(const Model& model, const CheckpointMeta& meta,
                     const std::filesystem::path& path) {
  if (!model.defined()) throw ContractError("cannot save an unbuilt model");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());

  const ModelSpec& spec = model.spec();
  out.write(kMagic, 4);
  put_u32(out, kFormatVersion);
  out.put(spec.kind == ModelSpec::Kind::mlp ? 0 : 1);
  put_u32(out, static_cast<std::uint32_t>(spec.num_classes));
  put_u64(out, spec.init_seed);
  if (spec.kind == ModelSpec::Kind::mlp) {
    put_u32(out, static_cast<std::uint32_t>(spec.layer_dims.size()));
    for (std::size_t d : spec.layer_dims) put_u32(out, static_cast<std::uint32_t>(d));
  } else {
    put_u32(out, static_cast<std::uint32_t>(spec.in_channels));
    put_u32(out, static_cast<std::uint32_t>(spec.image_h));
    put_u32(out, static_cast<std::uint32_t>(spec.image_w));
    put_u32(out, static_cast<std::uint32_t>(spec.conv_channels.size()));
    for (std::size_t c : spec.conv_channels) put_u32(out, static_cast<std::uint32_t>(c));
  }
  put_u32(out, meta.epochs);
  put_f64(out, meta.final_accuracy);
  put_u64(out, meta.seed);

  const auto& params = model.named_parameters();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t i = 0; i < t.ndim(); ++i) {
      put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
    }
    for (double v : t.values()) put_f64(out, v);
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());

  char magic[4];
  need(in, magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("not a checkpoint file (bad magic): " + path.string());
  }
  const std::uint32_t version = get_u32(in, "format version");
  if (version != kFormatVersion) {
    throw FormatError("unsupported checkpoint format version " + std::to_string(version));
  }

  char kind_byte;
  need(in, &kind_byte, 1, "model kind");
  if (kind_byte != 0 && kind_byte != 1) {
    throw FormatError("unknown model kind byte in checkpoint");
  }
  ModelSpec spec;
  spec.kind = kind_byte == 0 ? ModelSpec::Kind::mlp : ModelSpec::Kind::smallcnn;
  spec.num_classes = get_u32(in, "num_classes");
  spec.init_seed = get_u64(in, "init_seed");
  if (spec.kind == ModelSpec::Kind::mlp) {
    const std::uint32_t n = get_u32(in, "layer count");
    spec.layer_dims.resize(n);
    for (auto& d : spec.layer_dims) d = get_u32(in, "layer width");
  } else {
    spec.in_channels = get_u32(in, "in_channels");
    spec.image_h = get_u32(in, "image_h");
    spec.image_w = get_u32(in, "image_w");
    const std::uint32_t n = get_u32(in, "conv stage count");
    spec.conv_channels.resize(n);
    for (auto& c : spec.conv_channels) c = get_u32(in, "conv channels");
  }

  CheckpointMeta meta;
  meta.epochs = get_u32(in, "epochs");
  meta.final_accuracy = get_f64(in, "final_accuracy");
  meta.seed = get_u64(in, "seed");

  // Rebuild the architecture from the spec, then overwrite every parameter
  // with the stored bytes.  Name and shape must match the rebuilt network,
  // which catches corrupted or reordered tensor tables.
  Model model = Model::build(spec);
  auto expect = model.named_parameters();
  const std::uint32_t count = get_u32(in, "tensor count");
  if (count != expect.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, expected " +
                      std::to_string(expect.size()));
  }
  for (auto& [name, tensor] : expect) {
    const std::uint32_t name_len = get_u32(in, "tensor name length");
    std::string stored(name_len, '\0');
    need(in, stored.data(), name_len, "tensor name");
    if (stored != name) {
      throw FormatError("checkpoint tensor '" + stored + "' does not match expected '" +
                        name + "'");
    }
    const std::uint32_t ndim = get_u32(in, "tensor rank");
    if (ndim != tensor.ndim()) {
      throw FormatError("rank mismatch for tensor '" + name + "'");
    }
    for (std::size_t i = 0; i < ndim; ++i) {
      const std::uint32_t d = get_u32(in, "tensor dim");
      if (d != tensor.dim(i)) {
        throw FormatError("shape mismatch for tensor '" + name + "'");
      }
    }
    auto& dst = tensor.values();
    for (double& v : dst) v = get_f64(in, "tensor data");
  }
  return LoadedCheckpoint{std::move(model), meta};
}

}  // namespace cmkd
