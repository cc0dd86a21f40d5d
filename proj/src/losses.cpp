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

#include "cmkd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <utility>

#include "cmkd/softrank.hpp"
#include "cmkd/stats.hpp"

namespace cmkd {

namespace {

void warn(const std::string& message) { std::fprintf(stderr, "[cmkd] warning: %s\n", message.c_str()); }

std::pair<std::size_t, std::size_t> check_logit_matrix(const Tensor& t, const char* what) {
  if (!t.defined() || t.ndim() != 2) {
    throw DimensionError(std::string(what) + ": expected a [batch, classes] logit matrix");
  }
  return {t.dim(0), t.dim(1)};
}

void check_same_extent(const Tensor& student, const Tensor& teacher, const char* what) {
  if (teacher.shape() != student.shape()) {
    throw DimensionError(std::string(what) + ": student and teacher logit shapes differ");
  }
}

bool row_is_constant(const double* row, std::size_t n) {
  for (std::size_t j = 1; j < n; ++j) {
    if (row[j] != row[0]) return false;
  }
  return true;
}

// Finds rows where a correlation is undefined (constant student or teacher
// logits) and applies the policy: throw naming the first offender, or mark
// the rows inactive with a warning.
std::vector<unsigned char> degenerate_row_mask(const char* what, const Tensor& student,
                                               const Tensor& teacher, DegenerateRowPolicy policy) {
  const std::size_t b = student.dim(0), c = student.dim(1);
  const double* sv = student.values().data();
  const double* tv = teacher.values().data();
  std::vector<unsigned char> active(b, 1);
  for (std::size_t i = 0; i < b; ++i) {
    const bool s_const = row_is_constant(sv + i * c, c);
    const bool t_const = row_is_constant(tv + i * c, c);
    if (!s_const && !t_const) continue;
    const char* side = s_const ? "student" : "teacher";
    const std::string msg = std::string(what) + ": constant " + side + " logits in sample " +
                            std::to_string(i) + ", correlation undefined";
    if (policy == DegenerateRowPolicy::error) throw DegenerateInputError(msg);
    active[i] = 0;
    warn(msg + "; row contributes zero loss");
  }
  return active;
}

}  // namespace

// ---- config -----------------------------------------------------------------

void DistillConfig::validate() const {
  if (!(temperature > 0.0)) {
    throw ParameterError("distill config: temperature must be > 0, got " +
                         std::to_string(temperature));
  }
  if (!(epsilon > 0.0)) {
    throw ParameterError("distill config: epsilon must be > 0, got " + std::to_string(epsilon));
  }
  if (alpha < 0.0 || beta < 0.0 || gamma < 0.0) {
    throw ParameterError("distill config: loss weights must be >= 0");
  }
}

DistillConfig::Method method_from_string(const std::string& name) {
  if (name == "ce_only") return DistillConfig::Method::ce_only;
  if (name == "kd") return DistillConfig::Method::kd;
  if (name == "pearson") return DistillConfig::Method::pearson;
  if (name == "pearson_z") return DistillConfig::Method::pearson_z;
  if (name == "cmkd") return DistillConfig::Method::cmkd;
  throw ConfigError("unknown method '" + name +
                    "' (expected one of: ce_only, kd, pearson, pearson_z, cmkd)");
}

std::string to_string(DistillConfig::Method method) {
  switch (method) {
    case DistillConfig::Method::ce_only: return "ce_only";
    case DistillConfig::Method::kd: return "kd";
    case DistillConfig::Method::pearson: return "pearson";
    case DistillConfig::Method::pearson_z: return "pearson_z";
    case DistillConfig::Method::cmkd: return "cmkd";
  }
  throw ContractError("to_string: invalid method value");
}

DistillConfig::SpearmanInput spearman_input_from_string(const std::string& name) {
  if (name == "zscored_logits") return DistillConfig::SpearmanInput::zscored_logits;
  if (name == "softened_probs") return DistillConfig::SpearmanInput::softened_probs;
  throw ConfigError("unknown spearman_input '" + name +
                    "' (expected zscored_logits or softened_probs)");
}

std::string to_string(DistillConfig::SpearmanInput input) {
  return input == DistillConfig::SpearmanInput::zscored_logits ? "zscored_logits"
                                                               : "softened_probs";
}

// ---- ProbBatch ----------------------------------------------------------------

ProbBatch ProbBatch::softened(std::span<const double> logits, std::size_t rows, std::size_t cols,
                              double temperature) {
  if (rows == 0 || cols == 0 || logits.size() != rows * cols) {
    throw DimensionError("softened: logit buffer does not match [" + std::to_string(rows) +
                         " x " + std::to_string(cols) + "]");
  }
  if (!(temperature > 0.0)) {
    throw ParameterError("softened: temperature must be > 0, got " + std::to_string(temperature));
  }
  ProbBatch batch;
  batch.rows = rows;
  batch.cols = cols;
  batch.values.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = logits.data() + r * cols;
    double* p = batch.values.data() + r * cols;
    double mx = z[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, z[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      p[j] = std::exp((z[j] - mx) / temperature);
      s += p[j];
    }
    for (std::size_t j = 0; j < cols; ++j) p[j] /= s;
  }
  batch.validate();
  return batch;
}

std::span<const double> ProbBatch::row(std::size_t r) const {
  if (r >= rows) throw IndexError("ProbBatch::row: index " + std::to_string(r) + " out of range");
  return {values.data() + r * cols, cols};
}

void ProbBatch::validate() const {
  if (values.size() != rows * cols) {
    throw DimensionError("ProbBatch: value count does not match extent");
  }
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = values[r * cols + j];
      if (v < 0.0) {
        throw DomainError("ProbBatch: negative probability in row " + std::to_string(r));
      }
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) {
      throw DomainError("ProbBatch: row " + std::to_string(r) + " sums to " + std::to_string(s));
    }
  }
}

// ---- GateReport ----------------------------------------------------------------

std::size_t GateReport::high_count() const {
  std::size_t n = 0;
  for (const Sample& s : samples) n += s.high_entropy ? 1 : 0;
  return n;
}

std::size_t GateReport::low_count() const { return samples.size() - high_count(); }

nlohmann::json GateReport::to_json() const {
  nlohmann::json j;
  j["mean_entropy"] = mean_entropy;
  j["temperature"] = temperature;
  j["high_count"] = high_count();
  j["low_count"] = low_count();
  auto arr = nlohmann::json::array();
  for (const Sample& s : samples) {
    arr.push_back({{"index", s.index},
                   {"entropy", s.entropy},
                   {"branch", s.high_entropy ? "high_entropy" : "low_entropy"}});
  }
  j["samples"] = std::move(arr);
  return j;
}

// ---- row-wise building blocks ---------------------------------------------------

Tensor zscore_rows(const Tensor& x, const std::vector<unsigned char>* active_rows) {
  const auto [b, c] = check_logit_matrix(x, "zscore_rows");
  if (c < 2) throw ContractError("zscore_rows: rows need at least 2 entries");
  if (active_rows && active_rows->size() != b) {
    throw DimensionError("zscore_rows: row mask length does not match batch");
  }
  const double* xv = x.values().data();
  std::vector<double> out(b * c, 0.0);
  std::vector<double> sigmas(b, 1.0);
  for (std::size_t i = 0; i < b; ++i) {
    if (active_rows && !(*active_rows)[i]) continue;  // inactive -> all-zero row
    const double* row = xv + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = row[j] - mu;
      ss += d * d;
    }
    if (ss == 0.0) {
      throw DegenerateInputError("zscore_rows: constant row " + std::to_string(i));
    }
    const double sigma = std::sqrt(ss / static_cast<double>(c - 1));
    sigmas[i] = sigma;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (row[j] - mu) / sigma;
  }
  Tensor result(x.shape(), std::move(out));
  if (Tape::active() != nullptr && x.requires_grad()) {
    auto ximpl = x.impl_ptr();
    auto oimpl = result.impl_ptr();
    std::vector<unsigned char> mask =
        active_rows ? *active_rows : std::vector<unsigned char>(b, 1);
    Tape::active()->record(
        {x}, result, [ximpl, oimpl, b, c, sigmas = std::move(sigmas), mask = std::move(mask)]() {
          // d(zhat_k)/d(z_j) = (delta_kj - 1/c)/sigma - zhat_k * zhat_j / ((c-1) sigma),
          // contracted against the upstream row g:
          //   grad_j = (g_j - mean(g))/sigma - zhat_j * <g, zhat> / ((c-1) sigma).
          for (std::size_t i = 0; i < b; ++i) {
            if (!mask[i]) continue;
            const double* g = oimpl->grad.data() + i * c;
            const double* zh = oimpl->values.data() + i * c;
            double g_mean = 0.0, g_dot_zh = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              g_mean += g[j];
              g_dot_zh += g[j] * zh[j];
            }
            g_mean /= static_cast<double>(c);
            const double sigma = sigmas[i];
            double* gx = ximpl->grad.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) {
              gx[j] += (g[j] - g_mean) / sigma -
                       zh[j] * g_dot_zh / (static_cast<double>(c - 1) * sigma);
            }
          }
        });
  }
  return result;
}

Tensor pearson_rows_vs_const(const Tensor& x, const std::vector<double>& y,
                             const std::vector<unsigned char>* active_rows) {
  const auto [b, c] = check_logit_matrix(x, "pearson_rows_vs_const");
  if (c < 2) throw ContractError("pearson_rows_vs_const: rows need at least 2 entries");
  if (y.size() != b * c) {
    throw DimensionError("pearson_rows_vs_const: reference matrix size " +
                         std::to_string(y.size()) + " does not match [" + std::to_string(b) +
                         " x " + std::to_string(c) + "]");
  }
  if (active_rows && active_rows->size() != b) {
    throw DimensionError("pearson_rows_vs_const: row mask length does not match batch");
  }
  const double* xv = x.values().data();
  std::vector<double> r_values(b, 1.0);
  for (std::size_t i = 0; i < b; ++i) {
    if (active_rows && !(*active_rows)[i]) continue;  // inactive -> r = 1, zero loss
    double mx = 0.0, my = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      mx += xv[i * c + j];
      my += y[i * c + j];
    }
    mx /= static_cast<double>(c);
    my /= static_cast<double>(c);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double dx = xv[i * c + j] - mx;
      const double dy = y[i * c + j] - my;
      sxy += dx * dy;
      sxx += dx * dx;
      syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
      throw DegenerateInputError("pearson_rows_vs_const: constant row " + std::to_string(i));
    }
    r_values[i] = sxy / (std::sqrt(sxx) * std::sqrt(syy));
  }
  Tensor result({b}, std::move(r_values));
  if (Tape::active() != nullptr && x.requires_grad()) {
    auto ximpl = x.impl_ptr();
    auto oimpl = result.impl_ptr();
    std::vector<unsigned char> mask =
        active_rows ? *active_rows : std::vector<unsigned char>(b, 1);
    Tape::active()->record(
        {x}, result, [ximpl, oimpl, b, c, y, mask = std::move(mask)]() {
          // dr/dx_j = ytilde_j / sqrt(Sxx Syy) - r * xtilde_j / Sxx.
          for (std::size_t i = 0; i < b; ++i) {
            if (!mask[i]) continue;
            const double g = oimpl->grad[i];
            if (g == 0.0) continue;
            const double* xrow = ximpl->values.data() + i * c;
            const double* yrow = y.data() + i * c;
            double mx = 0.0, my = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              mx += xrow[j];
              my += yrow[j];
            }
            mx /= static_cast<double>(c);
            my /= static_cast<double>(c);
            double sxy = 0.0, sxx = 0.0, syy = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dx = xrow[j] - mx;
              const double dy = yrow[j] - my;
              sxy += dx * dy;
              sxx += dx * dx;
              syy += dy * dy;
            }
            const double denom = std::sqrt(sxx) * std::sqrt(syy);
            const double r = sxy / denom;
            double* gx = ximpl->grad.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) {
              const double dx = xrow[j] - mx;
              const double dy = yrow[j] - my;
              gx[j] += g * (dy / denom - r * dx / sxx);
            }
          }
        });
  }
  return result;
}

Tensor soft_rank_rows(const Tensor& x, double epsilon) {
  const auto [b, c] = check_logit_matrix(x, "soft_rank_rows");
  const double* xv = x.values().data();
  std::vector<SoftRankResult> rows;
  rows.reserve(b);
  std::vector<double> out(b * c);
  for (std::size_t i = 0; i < b; ++i) {
    rows.push_back(soft_rank(std::span<const double>(xv + i * c, c), epsilon));
    std::copy(rows.back().ranks.begin(), rows.back().ranks.end(), out.begin() + i * c);
  }
  Tensor result(x.shape(), std::move(out));
  if (Tape::active() != nullptr && x.requires_grad()) {
    auto ximpl = x.impl_ptr();
    auto oimpl = result.impl_ptr();
    Tape::active()->record({x}, result, [ximpl, oimpl, b, c, rows = std::move(rows)]() {
      for (std::size_t i = 0; i < b; ++i) {
        const std::vector<double> g = soft_rank_backward(
            rows[i], std::span<const double>(oimpl->grad.data() + i * c, c));
        double* gx = ximpl->grad.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) gx[j] += g[j];
      }
    });
  }
  return result;
}

// ---- losses ------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  const auto [b, c] = check_logit_matrix(logits, "cross_entropy");
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
  }
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[i]) +
                       " out of range [0, " + std::to_string(c) + ") at sample " +
                       std::to_string(i));
    }
  }
  const double* zv = logits.values().data();
  std::vector<double> probs(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* z = zv + i * c;
    double mx = z[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(z[j] - mx);
      s += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= s;
    const double lse = mx + std::log(s);
    loss += lse - z[labels[i]];
  }
  loss /= static_cast<double>(b);
  Tensor result = Tensor::scalar(loss);
  if (Tape::active() != nullptr && logits.requires_grad()) {
    auto limpl = logits.impl_ptr();
    auto oimpl = result.impl_ptr();
    Tape::active()->record(
        {logits}, result, [limpl, oimpl, b, c, labels, probs = std::move(probs)]() {
          const double g = oimpl->grad[0] / static_cast<double>(b);
          for (std::size_t i = 0; i < b; ++i) {
            double* gz = limpl->grad.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) {
              const double onehot = static_cast<std::size_t>(labels[i]) == j ? 1.0 : 0.0;
              gz[j] += g * (probs[i * c + j] - onehot);
            }
          }
        });
  }
  return result;
}

Tensor kd_kl(const Tensor& student_logits, const Tensor& teacher_logits,
             const DistillConfig& cfg) {
  cfg.validate();
  const auto [b, c] = check_logit_matrix(student_logits, "kd_kl");
  check_same_extent(student_logits, teacher_logits, "kd_kl");
  const double T = cfg.temperature;

  const ProbBatch teacher_probs = ProbBatch::softened(teacher_logits.values(), b, c, T);
  double teacher_self_term = 0.0;  // sum of p^T log p^T with 0 log 0 = 0
  for (double p : teacher_probs.values) {
    if (p > 0.0) teacher_self_term += p * std::log(p);
  }

  // KL_mean = (sum p^T log p^T - sum p^T log p^S) / b, where only the second
  // term depends on the student and flows through the tape.
  Tensor pt_const({b, c}, teacher_probs.values);
  Tensor ps = softmax_rows(student_logits, T);
  Tensor cross = sum(mul(pt_const, log(ps)));
  return add(mul(cross, -1.0 / static_cast<double>(b)),
             teacher_self_term / static_cast<double>(b));
}

Tensor kd_grad_analytic(const Tensor& student_logits, const Tensor& teacher_logits,
                        double temperature) {
  const auto [b, c] = check_logit_matrix(student_logits, "kd_grad_analytic");
  check_same_extent(student_logits, teacher_logits, "kd_grad_analytic");
  const ProbBatch ps = ProbBatch::softened(student_logits.values(), b, c, temperature);
  const ProbBatch pt = ProbBatch::softened(teacher_logits.values(), b, c, temperature);
  std::vector<double> grad(b * c);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    grad[i] = (ps.values[i] - pt.values[i]) / temperature;
  }
  return Tensor({b, c}, std::move(grad));
}

namespace {

// Shared Pearson pipeline: optionally standardize both rows, soften both at
// cfg.temperature, return the per-sample correlation vector r (student side
// differentiable). Inactive rows give r = 1.
Tensor pearson_row_correlations(const Tensor& student, const Tensor& teacher,
                                const DistillConfig& cfg, bool use_zscore,
                                const std::vector<unsigned char>& active) {
  const std::size_t b = student.dim(0), c = student.dim(1);
  // Teacher route is plain math.
  std::vector<double> teacher_ref(b * c, 0.0);
  const double* tv = teacher.values().data();
  for (std::size_t i = 0; i < b; ++i) {
    if (!active[i]) continue;
    std::vector<double> row(tv + i * c, tv + (i + 1) * c);
    if (use_zscore) row = zscore(row);
    const ProbBatch p = ProbBatch::softened(row, 1, c, cfg.temperature);
    std::copy(p.values.begin(), p.values.end(), teacher_ref.begin() + i * c);
  }
  Tensor processed = use_zscore ? zscore_rows(student, &active) : student;
  Tensor probs = softmax_rows(processed, cfg.temperature);
  return pearson_rows_vs_const(probs, teacher_ref, &active);
}

// Shared Spearman pipeline: per-sample correlation between the student's
// soft ranks and the teacher's hard ranks.
Tensor spearman_row_correlations(const Tensor& student, const Tensor& teacher,
                                 const DistillConfig& cfg,
                                 const std::vector<unsigned char>& active) {
  const std::size_t b = student.dim(0), c = student.dim(1);
  // Hard ranks are invariant under the strictly monotone Z-score / softmax
  // maps, so the teacher reference can rank the raw rows directly.
  std::vector<double> teacher_ranks(b * c, 0.0);
  const double* tv = teacher.values().data();
  for (std::size_t i = 0; i < b; ++i) {
    if (!active[i]) continue;
    const std::vector<double> ranks =
        hard_ranks(std::span<const double>(tv + i * c, c));
    std::copy(ranks.begin(), ranks.end(), teacher_ranks.begin() + i * c);
  }
  Tensor rank_input;
  if (cfg.spearman_input == DistillConfig::SpearmanInput::zscored_logits) {
    rank_input = zscore_rows(student, &active);
  } else {
    rank_input = softmax_rows(student, cfg.temperature);
  }
  Tensor soft_ranks = soft_rank_rows(rank_input, cfg.epsilon);
  return pearson_rows_vs_const(soft_ranks, teacher_ranks, &active);
}

// mean(1 - r) over the batch; inactive rows have r = 1 and drop out.
Tensor one_minus_mean(const Tensor& r) { return mean(add(negate(r), 1.0)); }

}  // namespace

Tensor pearson_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                    const DistillConfig& cfg, bool use_zscore, DegenerateRowPolicy policy) {
  cfg.validate();
  check_logit_matrix(student_logits, "pearson_loss");
  check_same_extent(student_logits, teacher_logits, "pearson_loss");
  const auto active = degenerate_row_mask("pearson_loss", student_logits, teacher_logits, policy);
  return one_minus_mean(
      pearson_row_correlations(student_logits, teacher_logits, cfg, use_zscore, active));
}

Tensor spearman_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                     const DistillConfig& cfg, DegenerateRowPolicy policy) {
  cfg.validate();
  check_logit_matrix(student_logits, "spearman_loss");
  check_same_extent(student_logits, teacher_logits, "spearman_loss");
  const auto active =
      degenerate_row_mask("spearman_loss", student_logits, teacher_logits, policy);
  return one_minus_mean(
      spearman_row_correlations(student_logits, teacher_logits, cfg, active));
}

Tensor cmkd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                 const std::vector<int>& labels, const DistillConfig& cfg, GateReport* report,
                 DegenerateRowPolicy policy) {
  cfg.validate();
  const auto [b, c] = check_logit_matrix(student_logits, "cmkd_loss");
  check_same_extent(student_logits, teacher_logits, "cmkd_loss");

  // Gate on the teacher's softened-distribution entropy against the batch
  // mean. Ties (entropy exactly at the mean) take the high-entropy branch.
  const double gate_T = cfg.gate_at_unit_temperature ? 1.0 : cfg.temperature;
  const ProbBatch gate_probs = ProbBatch::softened(teacher_logits.values(), b, c, gate_T);
  std::vector<double> entropies(b);
  double mean_h = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    entropies[i] = entropy(gate_probs.row(i));
    mean_h += entropies[i];
  }
  mean_h /= static_cast<double>(b);

  std::vector<double> pearson_weights(b), spearman_weights(b);
  if (report != nullptr) {
    report->samples.clear();
    report->mean_entropy = mean_h;
    report->temperature = gate_T;
  }
  for (std::size_t i = 0; i < b; ++i) {
    const bool high = entropies[i] >= mean_h;
    pearson_weights[i] = high ? cfg.beta : cfg.gamma;
    spearman_weights[i] = high ? cfg.gamma : cfg.beta;
    if (report != nullptr) {
      report->samples.push_back({i, entropies[i], high});
    }
  }

  const auto active = degenerate_row_mask("cmkd_loss", student_logits, teacher_logits, policy);
  Tensor rp = pearson_row_correlations(student_logits, teacher_logits, cfg,
                                       /*use_zscore=*/true, active);
  Tensor rs = spearman_row_correlations(student_logits, teacher_logits, cfg, active);

  Tensor pearson_terms = add(negate(rp), 1.0);   // [b], 1 - r
  Tensor spearman_terms = add(negate(rs), 1.0);  // [b]
  Tensor gated = add(mul(pearson_terms, Tensor({b}, pearson_weights)),
                     mul(spearman_terms, Tensor({b}, spearman_weights)));
  Tensor correlation_term = mean(gated);
  Tensor ce = cross_entropy(student_logits, labels);
  return add(mul(ce, cfg.alpha), correlation_term);
}

MethodLossResult method_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                             const std::vector<int>& labels, const DistillConfig& cfg,
                             DegenerateRowPolicy policy) {
  cfg.validate();
  using Method = DistillConfig::Method;
  if (cfg.method != Method::ce_only && !teacher_logits.defined()) {
    throw ContractError("method_loss: method '" + to_string(cfg.method) +
                        "' needs teacher logits");
  }
  MethodLossResult result;
  switch (cfg.method) {
    case Method::ce_only:
      result.loss = mul(cross_entropy(student_logits, labels), cfg.alpha);
      break;
    case Method::kd: {
      const double t2 = cfg.temperature * cfg.temperature;
      result.loss = add(mul(cross_entropy(student_logits, labels), cfg.alpha),
                        mul(kd_kl(student_logits, teacher_logits, cfg), t2));
      break;
    }
    case Method::pearson:
      result.loss = add(mul(cross_entropy(student_logits, labels), cfg.alpha),
                        mul(pearson_loss(student_logits, teacher_logits, cfg,
                                         /*use_zscore=*/false, policy),
                            cfg.beta));
      break;
    case Method::pearson_z:
      result.loss = add(mul(cross_entropy(student_logits, labels), cfg.alpha),
                        mul(pearson_loss(student_logits, teacher_logits, cfg,
                                         /*use_zscore=*/true, policy),
                            cfg.beta));
      break;
    case Method::cmkd:
      result.loss =
          cmkd_loss(student_logits, teacher_logits, labels, cfg, &result.gate, policy);
      result.has_gate = true;
      break;
  }
  return result;
}

}  // namespace cmkd
