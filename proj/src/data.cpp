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

#include "cmkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "cmkd/errors.hpp"
#include "cmkd/io_util.hpp"
#include "cmkd/rng.hpp"

namespace cmkd {

void Dataset::validate() const {
  if (labels.size() != n) {
    throw ContractError("dataset '" + name + "' holds " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(n) + " samples");
  }
  if (images.size() != n * pixel_count()) {
    throw ContractError("dataset '" + name + "' image buffer does not match n * c * h * w");
  }
  if (n > 0 && (channels == 0 || height == 0 || width == 0)) {
    throw ContractError("dataset '" + name + "' has empty image geometry");
  }
  if (num_classes == 0 && n > 0) {
    throw ContractError("dataset '" + name + "' has no classes");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw ContractError("dataset '" + name + "' label " + std::to_string(labels[i]) +
                          " at sample " + std::to_string(i) + " is outside [0, " +
                          std::to_string(num_classes) + ")");
    }
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!(images[i] >= 0.0 && images[i] <= 1.0)) {
      throw ContractError("dataset '" + name + "' pixel " + std::to_string(i) +
                          " is outside [0, 1]");
    }
  }
}

Dataset Dataset::head(std::size_t count) const {
  if (count > n) {
    throw ContractError("head(" + std::to_string(count) + ") exceeds dataset size " +
                        std::to_string(n));
  }
  Dataset out = *this;
  out.n = count;
  out.images.assign(images.begin(),
                    images.begin() + static_cast<std::ptrdiff_t>(count * pixel_count()));
  out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(count));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out = *this;
  out.n = indices.size();
  out.images.clear();
  out.labels.clear();
  out.images.reserve(indices.size() * pixel_count());
  out.labels.reserve(indices.size());
  const std::size_t px = pixel_count();
  for (std::size_t idx : indices) {
    if (idx >= n) {
      throw IndexError("subset index " + std::to_string(idx) + " out of range for " +
                       std::to_string(n) + " samples");
    }
    const double* src = images.data() + idx * px;
    out.images.insert(out.images.end(), src, src + px);
    out.labels.push_back(labels[idx]);
  }
  return out;
}

//--------------------------------------------------------------------------
// IDX ubyte files
//--------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::uint32_t read_be_u32(std::istream& in, const std::filesystem::path& path,
                          const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) {
    throw FormatError("truncated header (" + std::string(what) + ") in " + path.string());
  }
  return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

void write_be_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uintmax_t checked_file_size(const std::filesystem::path& path) {
  std::error_code ec;
  const std::uintmax_t size = std::filesystem::file_size(path, ec);
  if (ec) throw IoError("cannot stat " + path.string() + ": " + ec.message());
  return size;
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw IoError("cannot open " + images_path.string());
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("cannot open " + labels_path.string());

  const std::uint32_t img_magic = read_be_u32(img, images_path, "image magic");
  if (img_magic != kIdxImagesMagic) {
    throw FormatError("bad image magic in " + images_path.string() + ": expected 0x" +
                      "00000803, got 0x" + [&] {
                        char buf[9];
                        std::snprintf(buf, sizeof(buf), "%08x", img_magic);
                        return std::string(buf);
                      }());
  }
  const std::uint32_t count = read_be_u32(img, images_path, "image count");
  const std::uint32_t rows = read_be_u32(img, images_path, "row count");
  const std::uint32_t cols = read_be_u32(img, images_path, "column count");
  if (count == 0 || rows == 0 || cols == 0) {
    throw FormatError("degenerate image dimensions in " + images_path.string());
  }

  const std::uint32_t lab_magic = read_be_u32(lab, labels_path, "label magic");
  if (lab_magic != kIdxLabelsMagic) {
    throw FormatError("bad label magic in " + labels_path.string() + ": expected 0x" +
                      "00000801, got 0x" + [&] {
                        char buf[9];
                        std::snprintf(buf, sizeof(buf), "%08x", lab_magic);
                        return std::string(buf);
                      }());
  }
  const std::uint32_t lab_count = read_be_u32(lab, labels_path, "label count");
  if (lab_count != count) {
    throw FormatError("image/label count mismatch: " + std::to_string(count) + " images vs " +
                      std::to_string(lab_count) + " labels");
  }

  // Size check before committing to the pixel buffer allocation.
  const std::uintmax_t want_img = 16 + static_cast<std::uintmax_t>(count) * rows * cols;
  const std::uintmax_t got_img = checked_file_size(images_path);
  if (got_img != want_img) {
    throw FormatError(images_path.string() + " holds " + std::to_string(got_img) +
                      " bytes, header requires " + std::to_string(want_img));
  }
  const std::uintmax_t want_lab = 8 + static_cast<std::uintmax_t>(count);
  const std::uintmax_t got_lab = checked_file_size(labels_path);
  if (got_lab != want_lab) {
    throw FormatError(labels_path.string() + " holds " + std::to_string(got_lab) +
                      " bytes, header requires " + std::to_string(want_lab));
  }

  Dataset ds;
  ds.name = images_path.filename().string();
  ds.n = count;
  ds.channels = 1;
  ds.height = rows;
  ds.width = cols;

  const std::size_t pixels = static_cast<std::size_t>(count) * rows * cols;
  std::vector<unsigned char> raw(pixels);
  img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixels));
  if (img.gcount() != static_cast<std::streamsize>(pixels)) {
    throw FormatError("truncated pixel data in " + images_path.string());
  }
  ds.images.resize(pixels);
  for (std::size_t i = 0; i < pixels; ++i) ds.images[i] = raw[i] / 255.0;

  std::vector<unsigned char> raw_labels(count);
  lab.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(count));
  if (lab.gcount() != static_cast<std::streamsize>(count)) {
    throw FormatError("truncated label data in " + labels_path.string());
  }
  ds.labels.resize(count);
  int max_label = 0;
  for (std::size_t i = 0; i < count; ++i) {
    ds.labels[i] = raw_labels[i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  return ds;
}

void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  ds.validate();
  if (ds.channels != 1) {
    throw ContractError("IDX files hold single-channel images, dataset has " +
                        std::to_string(ds.channels) + " channels");
  }
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw IoError("cannot write " + images_path.string());
  write_be_u32(img, kIdxImagesMagic);
  write_be_u32(img, static_cast<std::uint32_t>(ds.n));
  write_be_u32(img, static_cast<std::uint32_t>(ds.height));
  write_be_u32(img, static_cast<std::uint32_t>(ds.width));
  std::vector<unsigned char> raw(ds.images.size());
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    raw[i] = static_cast<unsigned char>(std::lround(ds.images[i] * 255.0));
  }
  img.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!img) throw IoError("failed writing " + images_path.string());

  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("cannot write " + labels_path.string());
  write_be_u32(lab, kIdxLabelsMagic);
  write_be_u32(lab, static_cast<std::uint32_t>(ds.n));
  for (int label : ds.labels) lab.put(static_cast<char>(label));
  if (!lab) throw IoError("failed writing " + labels_path.string());
}

//--------------------------------------------------------------------------
// CIFAR-10 binary batches
//--------------------------------------------------------------------------

Dataset load_cifar10_bin(const std::vector<std::filesystem::path>& files) {
  if (files.empty()) throw ParameterError("no CIFAR-10 files given");
  constexpr std::size_t kRecord = 3073;
  constexpr std::size_t kPixels = 3072;

  std::size_t total = 0;
  for (const auto& path : files) {
    const std::uintmax_t size = checked_file_size(path);
    if (size == 0 || size % kRecord != 0) {
      throw FormatError(path.string() + " length " + std::to_string(size) +
                        " is not a positive multiple of the 3073-byte record");
    }
    total += static_cast<std::size_t>(size / kRecord);
  }

  Dataset ds;
  ds.name = files.front().filename().string();
  ds.n = total;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  ds.num_classes = 10;
  ds.images.resize(total * kPixels);
  ds.labels.resize(total);

  std::size_t sample = 0;
  std::vector<unsigned char> record(kRecord);
  for (const auto& path : files) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    while (in.read(reinterpret_cast<char*>(record.data()), kRecord)) {
      if (record[0] >= 10) {
        throw FormatError("label byte " + std::to_string(record[0]) + " in " + path.string() +
                          " exceeds the 10 CIFAR-10 classes");
      }
      ds.labels[sample] = record[0];
      double* dst = ds.images.data() + sample * kPixels;
      for (std::size_t i = 0; i < kPixels; ++i) dst[i] = record[1 + i] / 255.0;
      ++sample;
    }
  }
  return ds;
}

//--------------------------------------------------------------------------
// Batching
//--------------------------------------------------------------------------

std::vector<std::vector<std::size_t>> epoch_batch_indices(std::size_t n,
                                                          std::size_t batch_size,
                                                          std::uint64_t seed,
                                                          std::uint64_t epoch) {
  if (batch_size == 0) throw ParameterError("batch_size must be at least 1");
  Rng rng(Rng::mix(seed, epoch));
  std::vector<std::size_t> perm = random_permutation(n, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                         perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ParameterError("empty batch");
  const std::size_t px = ds.pixel_count();
  std::vector<double> values;
  values.reserve(indices.size() * px);
  Batch batch;
  batch.labels.reserve(indices.size());
  for (std::size_t idx : indices) {
    if (idx >= ds.n) {
      throw IndexError("batch index " + std::to_string(idx) + " out of range for " +
                       std::to_string(ds.n) + " samples");
    }
    const double* src = ds.images.data() + idx * px;
    values.insert(values.end(), src, src + px);
    batch.labels.push_back(ds.labels[idx]);
  }
  batch.images = Tensor({indices.size(), ds.channels, ds.height, ds.width}, std::move(values));
  batch.indices.assign(indices.begin(), indices.end());
  return batch;
}

//--------------------------------------------------------------------------
// Corruptions
//--------------------------------------------------------------------------

CorruptionKind corruption_kind_from_string(const std::string& s) {
  if (s == "gaussian_noise") return CorruptionKind::gaussian_noise;
  if (s == "brightness") return CorruptionKind::brightness;
  if (s == "contrast") return CorruptionKind::contrast;
  if (s == "pixelate") return CorruptionKind::pixelate;
  throw ConfigError("unknown corruption kind '" + s +
                    "' (valid: gaussian_noise, brightness, contrast, pixelate)");
}

std::string to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::brightness: return "brightness";
    case CorruptionKind::contrast: return "contrast";
    case CorruptionKind::pixelate: return "pixelate";
  }
  throw ParameterError("unknown corruption kind value");
}

const std::vector<CorruptionKind>& all_corruption_kinds() {
  static const std::vector<CorruptionKind> kinds = {
      CorruptionKind::gaussian_noise, CorruptionKind::brightness, CorruptionKind::contrast,
      CorruptionKind::pixelate};
  return kinds;
}

void CorruptionSpec::validate() const {
  if (severity < 0 || severity > 5) {
    throw ParameterError("corruption severity " + std::to_string(severity) +
                         " outside [0, 5] (0 is the identity extension)");
  }
}

namespace {

// Severity tables, index 0 = identity.
constexpr double kNoiseSigma[6] = {0.0, 0.04, 0.06, 0.08, 0.09, 0.10};
constexpr double kBrightnessShift[6] = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
constexpr double kContrastScale[6] = {1.0, 0.75, 0.5, 0.4, 0.3, 0.15};
constexpr std::size_t kPixelateBlock[6] = {1, 2, 2, 4, 4, 8};

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

Dataset corrupt(const Dataset& ds, const CorruptionSpec& spec) {
  spec.validate();
  Dataset out = ds;
  switch (spec.kind) {
    case CorruptionKind::gaussian_noise: {
      const double sigma = kNoiseSigma[spec.severity];
      if (sigma == 0.0) break;
      Rng rng(spec.seed);
      for (double& v : out.images) v = clamp01(v + rng.normal() * sigma);
      break;
    }
    case CorruptionKind::brightness: {
      const double shift = kBrightnessShift[spec.severity];
      if (shift == 0.0) break;
      for (double& v : out.images) v = clamp01(v + shift);
      break;
    }
    case CorruptionKind::contrast: {
      const double scale = kContrastScale[spec.severity];
      if (scale == 1.0) break;
      for (double& v : out.images) v = clamp01((v - 0.5) * scale + 0.5);
      break;
    }
    case CorruptionKind::pixelate: {
      const std::size_t block = kPixelateBlock[spec.severity];
      if (block <= 1) break;
      const std::size_t planes = ds.n * ds.channels;
      for (std::size_t p = 0; p < planes; ++p) {
        double* plane = out.images.data() + p * ds.height * ds.width;
        for (std::size_t y0 = 0; y0 < ds.height; y0 += block) {
          const std::size_t y1 = std::min(ds.height, y0 + block);
          for (std::size_t x0 = 0; x0 < ds.width; x0 += block) {
            const std::size_t x1 = std::min(ds.width, x0 + block);
            double sum = 0.0;
            for (std::size_t y = y0; y < y1; ++y) {
              for (std::size_t x = x0; x < x1; ++x) sum += plane[y * ds.width + x];
            }
            const double mean = sum / static_cast<double>((y1 - y0) * (x1 - x0));
            for (std::size_t y = y0; y < y1; ++y) {
              for (std::size_t x = x0; x < x1; ++x) plane[y * ds.width + x] = mean;
            }
          }
        }
      }
      break;
    }
  }
  return out;
}

//--------------------------------------------------------------------------
// Procedural digit glyphs
//--------------------------------------------------------------------------

namespace {

// 5x7 bitmap font, one string per row, '1' = ink.
const char* const kDigitFont[10][7] = {
    {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},  // 0
    {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},  // 1
    {"01110", "10001", "00001", "00010", "00100", "01000", "11111"},  // 2
    {"11111", "00010", "00100", "00010", "00001", "10001", "01110"},  // 3
    {"00010", "00110", "01010", "10010", "11111", "00010", "00010"},  // 4
    {"11111", "10000", "11110", "00001", "00001", "10001", "01110"},  // 5
    {"00110", "01000", "10000", "11110", "10001", "10001", "01110"},  // 6
    {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},  // 7
    {"01110", "10001", "10001", "01110", "10001", "10001", "01110"},  // 8
    {"01110", "10001", "10001", "01111", "00001", "00010", "01100"},  // 9
};

constexpr std::size_t kGlyphW = 5;
constexpr std::size_t kGlyphH = 7;
constexpr std::size_t kCanvas = 28;

// Placement and noise ranges; chosen so a small MLP teacher lands in the
// low-to-mid 0.9s on held-out data rather than saturating. Samples fall in
// two strata: a gently perturbed majority, and a hard-pose minority drawn
// with much wider rotation, scale, and offset ranges. The pose spread is
// what separates model capacities: covering it takes many templates per
// class, so wide hidden layers keep their accuracy on the minority while
// narrow ones give up margin there.
constexpr double kScaleLo = 2.2, kScaleHi = 3.7;
constexpr double kRotMax = 0.30;   // radians
constexpr double kJitter = 3.0;    // pixels around the canvas center
constexpr double kHardFrac = 0.31;
constexpr double kHardScaleLo = 2.6, kHardScaleHi = 4.8;
constexpr double kHardRotMax = 1.15;  // radians
constexpr double kHardJitter = 5.0;   // pixels around the canvas center
constexpr double kMainLo = 0.57, kMainHi = 1.0;
constexpr double kGlyphNoiseSigma = 0.24;
// Optional distractor digits under the labeled glyph, currently disabled
// (zero relative amplitude).
constexpr int kDistractors = 2;
constexpr double kDistractRelLo = 0.0, kDistractRelHi = 0.0;
constexpr double kDistractScaleLo = 1.8, kDistractScaleHi = 2.6;
constexpr double kDistractOffset = 6.0;  // pixels around the canvas center
constexpr double kDistractRotMax = 0.30;

double glyph_at(int digit, int ix, int iy) {
  if (ix < 0 || iy < 0 || ix >= static_cast<int>(kGlyphW) || iy >= static_cast<int>(kGlyphH)) {
    return 0.0;
  }
  return kDigitFont[digit][iy][ix] == '1' ? 1.0 : 0.0;
}

// Bilinear sample of the glyph bitmap, treating cell (i, j) as a unit square
// centered at (i + 0.5, j + 0.5) and everything outside as blank.
double sample_glyph(int digit, double gx, double gy) {
  const double fx = gx - 0.5;
  const double fy = gy - 0.5;
  const int x0 = static_cast<int>(std::floor(fx));
  const int y0 = static_cast<int>(std::floor(fy));
  const double ax = fx - x0;
  const double ay = fy - y0;
  const double v00 = glyph_at(digit, x0, y0);
  const double v10 = glyph_at(digit, x0 + 1, y0);
  const double v01 = glyph_at(digit, x0, y0 + 1);
  const double v11 = glyph_at(digit, x0 + 1, y0 + 1);
  return v00 * (1 - ax) * (1 - ay) + v10 * ax * (1 - ay) + v01 * (1 - ax) * ay +
         v11 * ax * ay;
}

}  // namespace

Dataset make_synthetic_digits(std::size_t n, std::uint64_t seed, const std::string& split) {
  Dataset ds;
  ds.name = "synthetic-digits";
  ds.split = split;
  ds.n = n;
  ds.channels = 1;
  ds.height = kCanvas;
  ds.width = kCanvas;
  ds.num_classes = 10;
  ds.images.resize(n * kCanvas * kCanvas);
  ds.labels.resize(n);

  const auto* split_bytes = reinterpret_cast<const unsigned char*>(split.data());
  const std::uint64_t split_hash =
      fnv1a64(std::span<const unsigned char>(split_bytes, split.size()));
  Rng rng(Rng::mix(seed, split_hash));

  struct Placement {
    int digit = 0;
    double rel = 1.0;
    double cos_t = 1.0, sin_t = 0.0;
    double sx = 1.0, sy = 1.0;
    double cx = 0.0, cy = 0.0;
  };
  const auto glyph_under = [](const Placement& p, double px, double py) {
    // Inverse affine map from canvas pixel center to glyph coordinates.
    const double dx = (px + 0.5) - p.cx;
    const double dy = (py + 0.5) - p.cy;
    const double u = p.cos_t * dx + p.sin_t * dy;
    const double v = -p.sin_t * dx + p.cos_t * dy;
    return sample_glyph(p.digit, u / p.sx + kGlyphW / 2.0, v / p.sy + kGlyphH / 2.0);
  };

  for (std::size_t s = 0; s < n; ++s) {
    const int digit = static_cast<int>(rng.index(10));
    ds.labels[s] = digit;
    Placement main;
    main.digit = digit;
    const bool hard_pose = rng.uniform01() < kHardFrac;
    const double scale_lo = hard_pose ? kHardScaleLo : kScaleLo;
    const double scale_hi = hard_pose ? kHardScaleHi : kScaleHi;
    const double rot_max = hard_pose ? kHardRotMax : kRotMax;
    const double jitter = hard_pose ? kHardJitter : kJitter;
    main.sx = rng.uniform(scale_lo, scale_hi);
    main.sy = rng.uniform(scale_lo, scale_hi);
    const double theta = rng.uniform(-rot_max, rot_max);
    main.cos_t = std::cos(theta);
    main.sin_t = std::sin(theta);
    main.cx = kCanvas / 2.0 + rng.uniform(-jitter, jitter);
    main.cy = kCanvas / 2.0 + rng.uniform(-jitter, jitter);
    const double amp = rng.uniform(kMainLo, kMainHi);
    Placement extra[kDistractors];
    for (int d = 0; d < kDistractors; ++d) {
      int dd = static_cast<int>(rng.index(9));
      if (dd >= digit) ++dd;
      extra[d].digit = dd;
      extra[d].rel = rng.uniform(kDistractRelLo, kDistractRelHi);
      extra[d].sx = rng.uniform(kDistractScaleLo, kDistractScaleHi);
      extra[d].sy = rng.uniform(kDistractScaleLo, kDistractScaleHi);
      const double dth = rng.uniform(-kDistractRotMax, kDistractRotMax);
      extra[d].cos_t = std::cos(dth);
      extra[d].sin_t = std::sin(dth);
      extra[d].cx = kCanvas / 2.0 + rng.uniform(-kDistractOffset, kDistractOffset);
      extra[d].cy = kCanvas / 2.0 + rng.uniform(-kDistractOffset, kDistractOffset);
    }

    double* img = ds.images.data() + s * kCanvas * kCanvas;
    for (std::size_t py = 0; py < kCanvas; ++py) {
      for (std::size_t px = 0; px < kCanvas; ++px) {
        double glyph = glyph_under(main, px, py);
        for (int d = 0; d < kDistractors; ++d) {
          glyph = std::max(glyph, extra[d].rel * glyph_under(extra[d], px, py));
        }
        double value = amp * glyph;
        value += rng.normal() * kGlyphNoiseSigma;
        // Byte quantization keeps an IDX round trip bit-exact.
        img[py * kCanvas + px] =
            std::lround(clamp01(value) * 255.0) / 255.0;
      }
    }
  }
  return ds;
}

}  // namespace cmkd
