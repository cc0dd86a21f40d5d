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

// Minimal define-by-run reverse-mode autodiff over dense 64-bit float
// tensors. A Tensor is a shared handle to its storage; operations compute
// eagerly and, when a Tape is active and some input wants gradients, record
// a backward closure. backward(loss) replays the recorded closures in
// reverse order and accumulates into leaf .grad buffers.
//
// Threading model: one tape per thread (thread-local activation). Multiple
// independent tapes may run concurrently as long as they share no tensors.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cmkd/errors.hpp"

namespace cmkd {

class Tape;

namespace detail {

struct TensorImpl {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;

  // Identity on a tape. Valid only while tape_epoch matches the active
  // tape's epoch; a stale id means the tensor is not on the current tape.
  std::int64_t node = -1;
  std::int64_t op_index = -1;  // index of the producing op, -1 for leaves
  std::uint64_t tape_epoch = 0;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  // Construction validates that every dimension is positive and that the
  // value count matches the shape product; grad is allocated zero-filled.
  Tensor(std::vector<std::size_t> shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::vector<double>& values();
  const std::vector<double>& values() const;
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);

  // Deep copy of the values with gradient tracking disabled.
  Tensor detached() const;

  // Value of a single-element tensor.
  double item() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Records define-by-run operations. Constructing a Tape makes it the active
// tape for the current thread; destruction restores the previous one.
class Tape {
 public:
  struct OpRecord {
    std::vector<std::int64_t> inputs;
    std::int64_t output = -1;
    std::function<void()> backward;
  };

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Registers t as a leaf node if it is not yet on this tape.
  std::int64_t ensure_node(const Tensor& t);

  // Appends an operation. The closure must add (never assign) each
  // gradient-requiring input's contribution, reading the output's grad.
  void record(const std::vector<Tensor>& inputs, const Tensor& output,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and replays closures from the loss' producing
  // op down to the start of the tape. Non-leaf grads are transient per call;
  // leaf grads accumulate across calls until zero_grad. A scalar that is not
  // on this tape (a constant) is a no-op. Non-scalar loss -> ContractError.
  void run_backward(const Tensor& loss);

  const std::vector<OpRecord>& operations() const { return ops_; }
  std::size_t node_count() const { return static_cast<std::size_t>(next_node_); }
  std::size_t last_replay_count() const { return last_replay_count_; }

 private:
  std::vector<OpRecord> ops_;
  std::vector<std::shared_ptr<detail::TensorImpl>> op_outputs_;
  std::int64_t next_node_ = 0;
  std::uint64_t epoch_ = 0;
  std::size_t last_replay_count_ = 0;
  Tape* previous_ = nullptr;
};

// Temporarily deactivates the active tape, e.g. for frozen-teacher forward
// passes and evaluation.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* previous_ = nullptr;
};

// Dispatches to the active tape; no-op on a tape-less constant.
void backward(const Tensor& loss);

// ---- elementwise --------------------------------------------------------
// Binary forms accept equal shapes or a single-element (broadcast) rhs.
Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, double b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, double b);
Tensor div(const Tensor& a, const Tensor& b);  // zero divisor -> DomainError
Tensor div(const Tensor& a, double b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // requires strictly positive entries
Tensor relu(const Tensor& a);
Tensor negate(const Tensor& a);

// ---- linear algebra / convolution ---------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n] -> [m,n]

// input [b,c,h,w], kernel [o,c,kh,kw] with odd kh/kw; stride >= 1,
// padding >= 0, output spatial dims must come out positive.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
              std::size_t padding);

// Broadcast helpers used by the models: bias over matrix rows / image channels.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);      // [m,n] + [n]
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);  // [b,c,h,w] + [c]

// ---- reductions ----------------------------------------------------------
Tensor sum(const Tensor& a);                    // -> scalar
Tensor sum(const Tensor& a, std::size_t axis);  // drops the axis
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);
Tensor max(const Tensor& a);  // gradient routed to the first max position
Tensor maxpool2x2(const Tensor& a);  // [b,c,h,w] with even h and w

// ---- shape ----------------------------------------------------------------
Tensor reshape(const Tensor& a, std::vector<std::size_t> new_shape);

// ---- softmax ---------------------------------------------------------------
// Row-wise softmax of [b,c] logits at temperature T > 0, stabilized by
// per-row max subtraction.
Tensor softmax_rows(const Tensor& logits, double temperature);

// ---- optimizer -------------------------------------------------------------
// v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
void sgd_step(std::span<double> param, std::span<const double> grad, std::span<double> velocity,
              double lr, double momentum, double weight_decay);

class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor> params, double momentum, double weight_decay);

  // Applies one update from the accumulated .grad buffers, then leaves the
  // grads untouched (callers zero them).
  void step(double lr);

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
  double weight_decay_;
};

}  // namespace cmkd
