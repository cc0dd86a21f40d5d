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

#include "cmkd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>
#include <utility>

namespace cmkd {

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_tape_epoch{0};

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

const detail::TensorImpl& checked(const Tensor& t, const char* what) {
  if (!t.defined()) throw ContractError(std::string(what) + ": undefined tensor");
  return *t.impl();
}

// True when the op must be recorded: a tape is active and some input will
// receive gradients through it.
bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values, bool requires_grad) {
  if (shape.empty()) throw DimensionError("tensor: shape must have at least one dimension");
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor: zero-sized dimension in " + shape_string(shape));
  }
  const std::size_t n = shape_product(shape);
  if (values.size() != n) {
    throw DimensionError("tensor: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_string(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
  impl_->grad.assign(n, 0.0);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  const std::size_t n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
  const std::size_t n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

const std::vector<std::size_t>& Tensor::shape() const { return checked(*this, "shape").shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("dim: axis " + std::to_string(axis) + " out of range for " +
                         shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const { return checked(*this, "size").values.size(); }

std::vector<double>& Tensor::values() {
  return const_cast<detail::TensorImpl&>(checked(*this, "values")).values;
}
const std::vector<double>& Tensor::values() const { return checked(*this, "values").values; }

std::vector<double>& Tensor::grad() {
  return const_cast<detail::TensorImpl&>(checked(*this, "grad")).grad;
}
const std::vector<double>& Tensor::grad() const { return checked(*this, "grad").grad; }

void Tensor::zero_grad() {
  auto& g = grad();
  std::fill(g.begin(), g.end(), 0.0);
}

bool Tensor::requires_grad() const { return checked(*this, "requires_grad").requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  const_cast<detail::TensorImpl&>(checked(*this, "set_requires_grad")).requires_grad = flag;
  return *this;
}

Tensor Tensor::detached() const {
  const auto& impl = checked(*this, "detached");
  return Tensor(impl.shape, impl.values, false);
}

double Tensor::item() const {
  const auto& impl = checked(*this, "item");
  if (impl.values.size() != 1) {
    throw ContractError("item: tensor of shape " + shape_string(impl.shape) + " is not scalar");
  }
  return impl.values[0];
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() : epoch_(++g_tape_epoch) {
  previous_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

std::int64_t Tape::ensure_node(const Tensor& t) {
  auto* impl = t.impl();
  if (impl == nullptr) throw ContractError("tape: undefined tensor");
  if (impl->tape_epoch == epoch_ && impl->node >= 0) return impl->node;
  impl->tape_epoch = epoch_;
  impl->node = next_node_++;
  impl->op_index = -1;
  return impl->node;
}

void Tape::record(const std::vector<Tensor>& inputs, const Tensor& output,
                  std::function<void()> backward_fn) {
  OpRecord op;
  op.inputs.reserve(inputs.size());
  for (const Tensor& in : inputs) {
    if (in.defined() && in.requires_grad()) {
      op.inputs.push_back(ensure_node(in));
    }
  }
  auto* out = output.impl();
  out->requires_grad = true;
  out->tape_epoch = epoch_;
  out->node = next_node_++;
  out->op_index = static_cast<std::int64_t>(ops_.size());
  op.output = out->node;
  op.backward = std::move(backward_fn);
  ops_.push_back(std::move(op));
  op_outputs_.push_back(output.impl_ptr());
}

void Tape::run_backward(const Tensor& loss) {
  const auto& impl = checked(loss, "backward");
  if (impl.values.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_string(impl.shape));
  }
  if (impl.tape_epoch != epoch_ || impl.node < 0) {
    // A constant w.r.t. this tape: nothing flows, grads stay untouched.
    last_replay_count_ = 0;
    return;
  }
  // Non-leaf grads are scratch space for a single replay; leaves keep
  // accumulating so repeated backward calls sum their contributions.
  for (auto& out : op_outputs_) std::fill(out->grad.begin(), out->grad.end(), 0.0);
  loss.impl()->grad[0] = 1.0;
  std::size_t count = 0;
  for (std::int64_t i = impl.op_index; i >= 0; --i) {
    ops_[static_cast<std::size_t>(i)].backward();
    ++count;
  }
  last_replay_count_ = count;
}

NoGradGuard::NoGradGuard() {
  previous_ = g_active_tape;
  g_active_tape = nullptr;
}

NoGradGuard::~NoGradGuard() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (tape == nullptr) {
    if (checked(loss, "backward").values.size() != 1) {
      throw ContractError("backward: loss must be scalar");
    }
    return;  // constant relative to a non-existent tape
  }
  tape->run_backward(loss);
}

// ---- elementwise -----------------------------------------------------------

namespace {

enum class BroadcastKind { same, scalar_rhs };

BroadcastKind classify_binary(const Tensor& a, const Tensor& b, const char* what) {
  const auto& ai = checked(a, what);
  const auto& bi = checked(b, what);
  if (ai.shape == bi.shape) return BroadcastKind::same;
  if (bi.values.size() == 1) return BroadcastKind::scalar_rhs;
  throw DimensionError(std::string(what) + ": shapes " + shape_string(ai.shape) + " and " +
                       shape_string(bi.shape) + " do not match (rhs must be equal or scalar)");
}

// Shared skeleton for the four binary arithmetic ops: `fwd(x, y)` computes a
// value, `dfd(x, y)` returns (d/dx, d/dy) at the recorded operands.
template <typename Fwd, typename Dfd>
Tensor binary_op(const char* what, const Tensor& a, const Tensor& b, Fwd fwd, Dfd dfd) {
  const BroadcastKind kind = classify_binary(a, b, what);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  if (kind == BroadcastKind::same) {
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i], i);
  } else {
    const double s = bv[0];
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], s, i);
  }
  Tensor result(a.shape(), std::move(out));
  if (should_record({&a, &b})) {
    auto ai = a.impl_ptr();
    auto bi = b.impl_ptr();
    auto oi = result.impl_ptr();
    const bool ga = a.requires_grad();
    const bool gb = b.requires_grad();
    Tape::active()->record({a, b}, result, [ai, bi, oi, ga, gb, kind, dfd]() {
      const std::size_t n = oi->grad.size();
      for (std::size_t i = 0; i < n; ++i) {
        const double g = oi->grad[i];
        if (g == 0.0) continue;
        const double x = ai->values[i];
        const double y = kind == BroadcastKind::same ? bi->values[i] : bi->values[0];
        const auto [dx, dy] = dfd(x, y);
        if (ga) ai->grad[i] += g * dx;
        if (gb) bi->grad[kind == BroadcastKind::same ? i : 0] += g * dy;
      }
    });
  }
  return result;
}

struct Pair {
  double dx, dy;
};

template <typename Fwd, typename Dfd>
Tensor unary_op(const char* what, const Tensor& a, Fwd fwd, Dfd dfd) {
  const auto& av = checked(a, what).values;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], i);
  Tensor result(a.shape(), std::move(out));
  if (should_record({&a})) {
    auto ai = a.impl_ptr();
    auto oi = result.impl_ptr();
    Tape::active()->record({a}, result, [ai, oi, dfd]() {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        ai->grad[i] += oi->grad[i] * dfd(ai->values[i], oi->values[i]);
      }
    });
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y, std::size_t) { return x + y; },
      [](double, double) { return Pair{1.0, 1.0}; });
}
Tensor add(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y, std::size_t) { return x - y; },
      [](double, double) { return Pair{1.0, -1.0}; });
}
Tensor sub(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y, std::size_t) { return x * y; },
      [](double x, double y) { return Pair{y, x}; });
}
Tensor mul(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b,
      [](double x, double y, std::size_t i) {
        if (y == 0.0) throw DomainError("div: zero divisor at index " + std::to_string(i));
        return x / y;
      },
      [](double x, double y) { return Pair{1.0 / y, -x / (y * y)}; });
}
Tensor div(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x, std::size_t) { return std::exp(x); },
      [](double, double out) { return out; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      "log", a,
      [](double x, std::size_t i) {
        if (!(x > 0.0)) {
          throw DomainError("log: non-positive value " + std::to_string(x) + " at index " +
                            std::to_string(i));
        }
        return std::log(x);
      },
      [](double x, double) { return 1.0 / x; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x, std::size_t) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor negate(const Tensor& a) {
  return unary_op(
      "negate", a, [](double x, std::size_t) { return -x; },
      [](double, double) { return -1.0; });
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& ai = checked(a, "matmul");
  const auto& bi = checked(b, "matmul");
  if (ai.shape.size() != 2 || bi.shape.size() != 2) {
    throw DimensionError("matmul: expected 2-d operands, got " + shape_string(ai.shape) + " x " +
                         shape_string(bi.shape));
  }
  const std::size_t m = ai.shape[0], k = ai.shape[1], k2 = bi.shape[0], n = bi.shape[1];
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(ai.shape) + " x " +
                         shape_string(bi.shape));
  }
  std::vector<double> out(m * n, 0.0);
  {
    const double* A = ai.values.data();
    const double* B = bi.values.data();
    double* O = out.data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        const double* brow = B + p * n;
        double* orow = O + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
      }
    }
  }
  Tensor result({m, n}, std::move(out));
  if (should_record({&a, &b})) {
    auto aimpl = a.impl_ptr();
    auto bimpl = b.impl_ptr();
    auto oimpl = result.impl_ptr();
    const bool ga = a.requires_grad();
    const bool gb = b.requires_grad();
    Tape::active()->record({a, b}, result, [aimpl, bimpl, oimpl, ga, gb, m, k, n]() {
      const double* G = oimpl->grad.data();
      if (ga) {
        // dA = G * B^T, accumulated as row-dot-row to stay cache friendly.
        const double* B = bimpl->values.data();
        double* GA = aimpl->grad.data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double* grow = G + i * n;
            const double* brow = B + p * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            GA[i * k + p] += s;
          }
        }
      }
      if (gb) {
        // dB = A^T * G.
        const double* A = aimpl->values.data();
        double* GB = bimpl->grad.data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            const double* grow = G + i * n;
            double* gbrow = GB + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
          }
        }
      }
    });
  }
  return result;
}

// ---- conv2d ----------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
              std::size_t padding) {
  const auto& xi = checked(input, "conv2d");
  const auto& ki = checked(kernel, "conv2d");
  if (xi.shape.size() != 4 || ki.shape.size() != 4) {
    throw DimensionError("conv2d: expected input [b,c,h,w] and kernel [o,c,kh,kw], got " +
                         shape_string(xi.shape) + " and " + shape_string(ki.shape));
  }
  if (stride == 0) throw ParameterError("conv2d: stride must be >= 1");
  const std::size_t b = xi.shape[0], c = xi.shape[1], h = xi.shape[2], w = xi.shape[3];
  const std::size_t o = ki.shape[0], kc = ki.shape[1], kh = ki.shape[2], kw = ki.shape[3];
  if (kc != c) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(kc) + " channels, input has " +
                         std::to_string(c));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw DimensionError("conv2d: kernel window must be odd, got " + std::to_string(kh) + "x" +
                         std::to_string(kw));
  }
  const std::int64_t oh_s =
      (static_cast<std::int64_t>(h) + 2 * static_cast<std::int64_t>(padding) -
       static_cast<std::int64_t>(kh)) /
          static_cast<std::int64_t>(stride) +
      1;
  const std::int64_t ow_s =
      (static_cast<std::int64_t>(w) + 2 * static_cast<std::int64_t>(padding) -
       static_cast<std::int64_t>(kw)) /
          static_cast<std::int64_t>(stride) +
      1;
  if (oh_s <= 0 || ow_s <= 0) {
    throw DimensionError("conv2d: non-positive output size for input " + shape_string(xi.shape) +
                         ", kernel " + shape_string(ki.shape));
  }
  const std::size_t oh = static_cast<std::size_t>(oh_s), ow = static_cast<std::size_t>(ow_s);

  std::vector<double> out(b * o * oh * ow, 0.0);
  const auto& X = xi.values;
  const auto& K = ki.values;
  for (std::size_t bi_ = 0; bi_ < b; ++bi_) {
    for (std::size_t oc = 0; oc < o; ++oc) {
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (std::size_t ic = 0; ic < c; ++ic) {
            for (std::size_t u = 0; u < kh; ++u) {
              const std::int64_t y = static_cast<std::int64_t>(i * stride + u) -
                                     static_cast<std::int64_t>(padding);
              if (y < 0 || y >= static_cast<std::int64_t>(h)) continue;
              for (std::size_t v = 0; v < kw; ++v) {
                const std::int64_t x = static_cast<std::int64_t>(j * stride + v) -
                                       static_cast<std::int64_t>(padding);
                if (x < 0 || x >= static_cast<std::int64_t>(w)) continue;
                acc += X[((bi_ * c + ic) * h + static_cast<std::size_t>(y)) * w +
                         static_cast<std::size_t>(x)] *
                       K[((oc * c + ic) * kh + u) * kw + v];
              }
            }
          }
          out[((bi_ * o + oc) * oh + i) * ow + j] = acc;
        }
      }
    }
  }
  Tensor result({b, o, oh, ow}, std::move(out));
  if (should_record({&input, &kernel})) {
    auto ximpl = input.impl_ptr();
    auto kimpl = kernel.impl_ptr();
    auto oimpl = result.impl_ptr();
    const bool gx = input.requires_grad();
    const bool gk = kernel.requires_grad();
    Tape::active()->record(
        {input, kernel}, result,
        [ximpl, kimpl, oimpl, gx, gk, b, c, h, w, o, kh, kw, oh, ow, stride, padding]() {
          const auto& G = oimpl->grad;
          const auto& Xv = ximpl->values;
          const auto& Kv = kimpl->values;
          for (std::size_t bi_ = 0; bi_ < b; ++bi_) {
            for (std::size_t oc = 0; oc < o; ++oc) {
              for (std::size_t i = 0; i < oh; ++i) {
                for (std::size_t j = 0; j < ow; ++j) {
                  const double g = G[((bi_ * o + oc) * oh + i) * ow + j];
                  if (g == 0.0) continue;
                  for (std::size_t ic = 0; ic < c; ++ic) {
                    for (std::size_t u = 0; u < kh; ++u) {
                      const std::int64_t y = static_cast<std::int64_t>(i * stride + u) -
                                             static_cast<std::int64_t>(padding);
                      if (y < 0 || y >= static_cast<std::int64_t>(h)) continue;
                      for (std::size_t v = 0; v < kw; ++v) {
                        const std::int64_t x = static_cast<std::int64_t>(j * stride + v) -
                                               static_cast<std::int64_t>(padding);
                        if (x < 0 || x >= static_cast<std::int64_t>(w)) continue;
                        const std::size_t xidx =
                            ((bi_ * c + ic) * h + static_cast<std::size_t>(y)) * w +
                            static_cast<std::size_t>(x);
                        const std::size_t kidx = ((oc * c + ic) * kh + u) * kw + v;
                        if (gx) ximpl->grad[xidx] += g * Kv[kidx];
                        if (gk) kimpl->grad[kidx] += g * Xv[xidx];
                      }
                    }
                  }
                }
              }
            }
          }
        });
  }
  return result;
}

// ---- bias broadcasts ---------------------------------------------------------

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  const auto& xi = checked(x, "add_row_bias");
  const auto& bi = checked(bias, "add_row_bias");
  if (xi.shape.size() != 2 || bi.shape.size() != 1 || bi.shape[0] != xi.shape[1]) {
    throw DimensionError("add_row_bias: need [m,n] + [n], got " + shape_string(xi.shape) + " + " +
                         shape_string(bi.shape));
  }
  const std::size_t m = xi.shape[0], n = xi.shape[1];
  std::vector<double> out(xi.values);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bi.values[j];
  }
  Tensor result(xi.shape, std::move(out));
  if (should_record({&x, &bias})) {
    auto ximpl = x.impl_ptr();
    auto bimpl = bias.impl_ptr();
    auto oimpl = result.impl_ptr();
    const bool gx = x.requires_grad();
    const bool gb = bias.requires_grad();
    Tape::active()->record({x, bias}, result, [ximpl, bimpl, oimpl, gx, gb, m, n]() {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const double g = oimpl->grad[i * n + j];
          if (gx) ximpl->grad[i * n + j] += g;
          if (gb) bimpl->grad[j] += g;
        }
      }
    });
  }
  return result;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  const auto& xi = checked(x, "add_channel_bias");
  const auto& bi = checked(bias, "add_channel_bias");
  if (xi.shape.size() != 4 || bi.shape.size() != 1 || bi.shape[0] != xi.shape[1]) {
    throw DimensionError("add_channel_bias: need [b,c,h,w] + [c], got " + shape_string(xi.shape) +
                         " + " + shape_string(bi.shape));
  }
  const std::size_t b = xi.shape[0], c = xi.shape[1], hw = xi.shape[2] * xi.shape[3];
  std::vector<double> out(xi.values);
  for (std::size_t bi_ = 0; bi_ < b; ++bi_) {
    for (std::size_t ic = 0; ic < c; ++ic) {
      const double v = bi.values[ic];
      double* row = out.data() + (bi_ * c + ic) * hw;
      for (std::size_t k = 0; k < hw; ++k) row[k] += v;
    }
  }
  Tensor result(xi.shape, std::move(out));
  if (should_record({&x, &bias})) {
    auto ximpl = x.impl_ptr();
    auto bimpl = bias.impl_ptr();
    auto oimpl = result.impl_ptr();
    const bool gx = x.requires_grad();
    const bool gb = bias.requires_grad();
    Tape::active()->record({x, bias}, result, [ximpl, bimpl, oimpl, gx, gb, b, c, hw]() {
      for (std::size_t bi_ = 0; bi_ < b; ++bi_) {
        for (std::size_t ic = 0; ic < c; ++ic) {
          const double* g = oimpl->grad.data() + (bi_ * c + ic) * hw;
          if (gx) {
            double* gx_row = ximpl->grad.data() + (bi_ * c + ic) * hw;
            for (std::size_t k = 0; k < hw; ++k) gx_row[k] += g[k];
          }
          if (gb) {
            double s = 0.0;
            for (std::size_t k = 0; k < hw; ++k) s += g[k];
            bimpl->grad[ic] += s;
          }
        }
      }
    });
  }
  return result;
}

// ---- reductions --------------------------------------------------------------

namespace {

// Decomposes a shape around `axis` into outer/axis/inner extents so that the
// flat index is (outer * axis_n + a) * inner + inner_idx.
struct AxisSplit {
  std::size_t outer = 1, axis_n = 1, inner = 1;
};

AxisSplit split_axis(const std::vector<std::size_t>& shape, std::size_t axis, const char* what) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(what) + ": axis " + std::to_string(axis) +
                         " out of range for " + shape_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.axis_n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::vector<std::size_t> drop_axis(const std::vector<std::size_t>& shape, std::size_t axis) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

Tensor full_reduce(const char* what, const Tensor& a, bool is_mean) {
  const auto& ai = checked(a, what);
  double s = 0.0;
  for (double v : ai.values) s += v;
  const double scale = is_mean ? 1.0 / static_cast<double>(ai.values.size()) : 1.0;
  Tensor result = Tensor::scalar(s * scale);
  if (should_record({&a})) {
    auto aimpl = a.impl_ptr();
    auto oimpl = result.impl_ptr();
    Tape::active()->record({a}, result, [aimpl, oimpl, scale]() {
      const double g = oimpl->grad[0] * scale;
      for (double& gi : aimpl->grad) gi += g;
    });
  }
  return result;
}

Tensor axis_reduce(const char* what, const Tensor& a, std::size_t axis, bool is_mean) {
  const auto& ai = checked(a, what);
  const AxisSplit sp = split_axis(ai.shape, axis, what);
  const double scale = is_mean ? 1.0 / static_cast<double>(sp.axis_n) : 1.0;
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.axis_n; ++k) {
      const double* src = ai.values.data() + (o * sp.axis_n + k) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  if (is_mean) {
    for (double& v : out) v *= scale;
  }
  Tensor result(drop_axis(ai.shape, axis), std::move(out));
  if (should_record({&a})) {
    auto aimpl = a.impl_ptr();
    auto oimpl = result.impl_ptr();
    Tape::active()->record({a}, result, [aimpl, oimpl, sp, scale]() {
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t k = 0; k < sp.axis_n; ++k) {
          double* dst = aimpl->grad.data() + (o * sp.axis_n + k) * sp.inner;
          const double* g = oimpl->grad.data() + o * sp.inner;
          for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += g[i] * scale;
        }
      }
    });
  }
  return result;
}

}  // namespace

Tensor sum(const Tensor& a) { return full_reduce("sum", a, false); }
Tensor sum(const Tensor& a, std::size_t axis) { return axis_reduce("sum", a, axis, false); }
Tensor mean(const Tensor& a) { return full_reduce("mean", a, true); }
Tensor mean(const Tensor& a, std::size_t axis) { return axis_reduce("mean", a, axis, true); }

Tensor max(const Tensor& a) {
  const auto& ai = checked(a, "max");
  std::size_t arg = 0;
  double best = ai.values[0];
  for (std::size_t i = 1; i < ai.values.size(); ++i) {
    if (ai.values[i] > best) {
      best = ai.values[i];
      arg = i;
    }
  }
  Tensor result = Tensor::scalar(best);
  if (should_record({&a})) {
    auto aimpl = a.impl_ptr();
    auto oimpl = result.impl_ptr();
    Tape::active()->record({a}, result,
                           [aimpl, oimpl, arg]() { aimpl->grad[arg] += oimpl->grad[0]; });
  }
  return result;
}

Tensor maxpool2x2(const Tensor& a) {
  const auto& ai = checked(a, "maxpool2x2");
  if (ai.shape.size() != 4) {
    throw DimensionError("maxpool2x2: expected [b,c,h,w], got " + shape_string(ai.shape));
  }
  const std::size_t b = ai.shape[0], c = ai.shape[1], h = ai.shape[2], w = ai.shape[3];
  if (h % 2 != 0 || w % 2 != 0) {
    throw DimensionError("maxpool2x2: spatial dims must be even, got " + std::to_string(h) + "x" +
                         std::to_string(w));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<double> out(b * c * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t bc = 0; bc < b * c; ++bc) {
    const double* plane = ai.values.data() + bc * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best_idx = (2 * i) * w + 2 * j;
        double best = plane[best_idx];
        // Scan order fixes the winner on ties: top-left first.
        for (std::size_t du = 0; du < 2; ++du) {
          for (std::size_t dv = 0; dv < 2; ++dv) {
            const std::size_t idx = (2 * i + du) * w + (2 * j + dv);
            if (plane[idx] > best) {
              best = plane[idx];
              best_idx = idx;
            }
          }
        }
        out[bc * oh * ow + i * ow + j] = best;
        argmax[bc * oh * ow + i * ow + j] = bc * h * w + best_idx;
      }
    }
  }
  Tensor result({b, c, oh, ow}, std::move(out));
  if (should_record({&a})) {
    auto aimpl = a.impl_ptr();
    auto oimpl = result.impl_ptr();
    Tape::active()->record({a}, result, [aimpl, oimpl, argmax = std::move(argmax)]() {
      for (std::size_t i = 0; i < oimpl->grad.size(); ++i) {
        aimpl->grad[argmax[i]] += oimpl->grad[i];
      }
    });
  }
  return result;
}

// ---- reshape ----------------------------------------------------------------

Tensor reshape(const Tensor& a, std::vector<std::size_t> new_shape) {
  const auto& ai = checked(a, "reshape");
  if (shape_product(new_shape) != ai.values.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(ai.shape) + " as " +
                         shape_string(new_shape));
  }
  Tensor result(std::move(new_shape), ai.values);
  if (should_record({&a})) {
    auto aimpl = a.impl_ptr();
    auto oimpl = result.impl_ptr();
    Tape::active()->record({a}, result, [aimpl, oimpl]() {
      for (std::size_t i = 0; i < oimpl->grad.size(); ++i) aimpl->grad[i] += oimpl->grad[i];
    });
  }
  return result;
}

// ---- softmax ----------------------------------------------------------------

Tensor softmax_rows(const Tensor& logits, double temperature) {
  const auto& li = checked(logits, "softmax_rows");
  if (li.shape.size() != 2) {
    throw DimensionError("softmax_rows: expected [b,c], got " + shape_string(li.shape));
  }
  if (!(temperature > 0.0)) {
    throw ParameterError("softmax_rows: temperature must be > 0, got " +
                         std::to_string(temperature));
  }
  const std::size_t b = li.shape[0], c = li.shape[1];
  std::vector<double> out(b * c);
  for (std::size_t i = 0; i < b; ++i) {
    const double* z = li.values.data() + i * c;
    double* p = out.data() + i * c;
    double mx = z[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      p[j] = std::exp((z[j] - mx) / temperature);
      s += p[j];
    }
    for (std::size_t j = 0; j < c; ++j) p[j] /= s;
  }
  Tensor result(li.shape, std::move(out));
  if (should_record({&logits})) {
    auto limpl = logits.impl_ptr();
    auto oimpl = result.impl_ptr();
    Tape::active()->record({logits}, result, [limpl, oimpl, b, c, temperature]() {
      for (std::size_t i = 0; i < b; ++i) {
        const double* p = oimpl->values.data() + i * c;
        const double* g = oimpl->grad.data() + i * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[j] * p[j];
        double* gz = limpl->grad.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) gz[j] += (g[j] - dot) * p[j] / temperature;
      }
    });
  }
  return result;
}

// ---- optimizer ----------------------------------------------------------------

void sgd_step(std::span<double> param, std::span<const double> grad, std::span<double> velocity,
              double lr, double momentum, double weight_decay) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw DimensionError("sgd_step: param/grad/velocity sizes differ (" +
                         std::to_string(param.size()) + "/" + std::to_string(grad.size()) + "/" +
                         std::to_string(velocity.size()) + ")");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * param[i];
    param[i] -= lr * velocity[i];
  }
}

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.reserve(params_.size());
  for (const Tensor& p : params_) velocity_.emplace_back(p.size(), 0.0);
}

void SgdOptimizer::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    sgd_step(params_[i].values(), params_[i].grad(), velocity_[i], lr, momentum_, weight_decay_);
  }
}

}  // namespace cmkd
