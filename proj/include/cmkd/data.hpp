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

// Image classification datasets: IDX (ubyte) and CIFAR-10 binary readers, an
// IDX writer, deterministic batch scheduling, the corruption bench used for
// robustness sweeps, and a procedural digit-glyph generator that can stock a
// data directory when no external download is available.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cmkd/tensor.hpp"

namespace cmkd {

struct Dataset {
  std::string name = "dataset";
  std::string split = "train";
  std::size_t n = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 0;
  std::vector<double> images;  // n * channels * height * width, each in [0, 1]
  std::vector<int> labels;     // n entries in [0, num_classes)

  std::size_t pixel_count() const { return channels * height * width; }
  void validate() const;  // ContractError when the fields disagree

  // First `count` samples (count <= n), keeping name/split/num_classes.
  Dataset head(std::size_t count) const;
  // Samples at the given positions, in that order.
  Dataset subset(std::span<const std::size_t> indices) const;
};

// IDX ubyte pair as distributed for digit benchmarks: big-endian headers,
// magic 0x00000803 for images and 0x00000801 for labels. File sizes are
// validated against the declared counts before any pixel is read, and pixel
// bytes are mapped to [0, 1] by dividing by 255.
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path);

// Writes the same format back out (used by the data generator; round-trips
// byte-exactly for byte-quantized images).
void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

// CIFAR-10 binary batches: concatenation of 3073-byte records (1 label byte,
// then 3072 channel-major pixel bytes). Every file length must be an exact
// multiple of the record size and every label below 10.
Dataset load_cifar10_bin(const std::vector<std::filesystem::path>& files);

// Deterministic epoch schedule: a Fisher-Yates permutation of [0, n) seeded
// with mix(seed, epoch), cut into consecutive batches (last one ragged).
std::vector<std::vector<std::size_t>> epoch_batch_indices(std::size_t n,
                                                          std::size_t batch_size,
                                                          std::uint64_t seed,
                                                          std::uint64_t epoch);

struct Batch {
  Tensor images;                     // [b, channels, height, width]
  std::vector<int> labels;           // b entries
  std::vector<std::size_t> indices;  // dataset positions, for logging
};

Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices);

// ---- corruption bench --------------------------------------------------------

enum class CorruptionKind { gaussian_noise, brightness, contrast, pixelate };

CorruptionKind corruption_kind_from_string(const std::string& s);
std::string to_string(CorruptionKind kind);
const std::vector<CorruptionKind>& all_corruption_kinds();

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;        // 1..5; 0 is the identity (useful in tests)
  std::uint64_t seed = 0;  // only gaussian_noise consumes randomness

  void validate() const;
};

// Returns a corrupted copy; pixel values stay clamped to [0, 1] and the
// label vector is untouched. Severity tables (index = severity):
//   gaussian_noise: sigma   {0, 0.04, 0.06, 0.08, 0.09, 0.10}
//   brightness:     shift   {0, 0.10, 0.20, 0.30, 0.40, 0.50}
//   contrast:       scale   {1, 0.75, 0.50, 0.40, 0.30, 0.15}
//   pixelate:       block   {1, 2, 2, 4, 4, 8}
Dataset corrupt(const Dataset& ds, const CorruptionSpec& spec);

// ---- procedural dataset --------------------------------------------------------

// Renders 28x28 grayscale digit glyphs (a fixed 5x7 bitmap font) under a
// random affine placement plus pixel noise, byte-quantized so the images
// survive an IDX round trip bit for bit. Deterministic in (n, seed, split).
Dataset make_synthetic_digits(std::size_t n, std::uint64_t seed, const std::string& split);

}  // namespace cmkd
