//*****************************************************************************
// Copyright 2026 The attnsteer Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//*****************************************************************************

#pragma once

// Dense float64 tensors with a tape-style reverse-mode autodiff engine.
//
// Every backward rule is written in terms of the same differentiable ops
// used in the forward pass. Running backward() in train_with_grad_graph mode
// therefore records the gradient computation itself, and the returned
// gradients can be differentiated again (needed for losses defined on
// Grad-CAM maps, which are functions of a gradient).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace attnsteer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::uint64_t id = 0;  // creation order; inputs always precede outputs
  std::shared_ptr<Node> grad_fn;
};

/// Handle to an immutable tensor. Copies share storage; ops never mutate
/// their inputs.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;
  std::span<const double> data() const;
  double at(std::size_t flat_index) const;
  double item() const;

  bool requires_grad() const;
  /// Only valid on leaves (tensors without a grad_fn).
  Tensor& set_requires_grad(bool flag);
  /// Fresh leaf holding a copy of the values; no graph attachment.
  Tensor detach() const;

  bool is_leaf() const;
  const Node* grad_fn() const;
  std::uint64_t id() const;
  const TensorImpl* impl() const noexcept { return impl_.get(); }

 private:
  friend Tensor make_op_result(const char*, Shape, std::vector<double>, std::vector<Tensor>,
                               std::function<std::vector<Tensor>(const Tensor&, const std::vector<bool>&)>);
  std::shared_ptr<TensorImpl> impl_;
};

/// A recorded op. `backward` maps the output gradient to one gradient per
/// input (undefined Tensor where `needs[i]` is false).
class Node {
 public:
  using BackwardFn = std::function<std::vector<Tensor>(const Tensor&, const std::vector<bool>&)>;

  Node(std::string name, std::vector<Tensor> inputs, BackwardFn fn)
      : name_(std::move(name)), inputs_(std::move(inputs)), fn_(std::move(fn)) {}

  const std::string& name() const noexcept { return name_; }
  const std::vector<Tensor>& inputs() const noexcept { return inputs_; }
  std::vector<Tensor> backward(const Tensor& grad_output, const std::vector<bool>& needs) const {
    return fn_(grad_output, needs);
  }

 private:
  std::string name_;
  std::vector<Tensor> inputs_;
  BackwardFn fn_;
};

/// Builds an op's output and, when recording is on and any input requires a
/// gradient, attaches the backward rule. Throws NumericError on non-finite
/// output.
Tensor make_op_result(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                      Node::BackwardFn backward);

// ---------------------------------------------------------------------------
// Graph modes

enum class GraphMode {
  inference,              // nothing is recorded
  train,                  // forward recorded; backward produces detached gradients
  train_with_grad_graph,  // backward is itself recorded (double backprop)
};

bool recording_enabled();

/// RAII switch for the calling thread's recording flag.
class GraphModeGuard {
 public:
  explicit GraphModeGuard(GraphMode mode);
  ~GraphModeGuard();
  GraphModeGuard(const GraphModeGuard&) = delete;
  GraphModeGuard& operator=(const GraphModeGuard&) = delete;

 private:
  bool previous_;
};

/// Reverse-mode gradients of a scalar `loss` with respect to each tensor in
/// `wrt` (leaves or intermediates). Tensors unreachable from `loss`, or not
/// requiring grad, get a zero gradient.
std::vector<Tensor> backward(const Tensor& loss, const std::vector<Tensor>& wrt,
                             GraphMode mode = GraphMode::train);

// ---------------------------------------------------------------------------
// Ops. Shapes must match exactly unless stated; there is no implicit
// broadcasting.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor min_elementwise(const Tensor& a, const Tensor& b);  // ties route to `a`
Tensor max_elementwise(const Tensor& a, const Tensor& b);  // ties route to `a`

Tensor relu(const Tensor& x);  // subgradient 0 at 0
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor log(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);  // gradient 1 strictly inside (lo, hi)

/// Elementwise -[y ln s(z) + (1-y) ln(1-s(z))] in the overflow-free form.
/// `labels` is treated as a constant.
Tensor bce_with_logits(const Tensor& logits, const Tensor& labels);

Tensor sum(const Tensor& x);   // -> scalar
Tensor mean(const Tensor& x);  // -> scalar

/// Sums away all axes after the first `keep_dims`.
Tensor sum_trailing(const Tensor& x, std::size_t keep_dims);
/// Repeats `x` over the trailing axes of `shape`; x.shape must prefix shape.
Tensor expand_trailing(const Tensor& x, const Shape& shape);
/// Bias over axis 1: b[C] -> shape [N, C, ...].
Tensor channel_broadcast(const Tensor& b, const Shape& shape);
/// Adjoint of channel_broadcast: sums all axes except axis 1.
Tensor channel_reduce(const Tensor& x);
Tensor bias_add(const Tensor& x, const Tensor& bias);

Tensor reshape(const Tensor& x, const Shape& shape);

/// out[j] = x[index[j]].
Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<std::size_t>> index, const Shape& out_shape);
/// out[index[j]] += g[j]; adjoint of gather.
Tensor scatter_add(const Tensor& g, std::shared_ptr<const std::vector<std::size_t>> index, const Shape& out_shape);

/// Batched product of [n, *, *] tensors, optionally transposing either side.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
/// x[B, in] * w[out, in]^T + bias[out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// x[B,C,H,W] (*) w[O,C,kh,kw] -> [B,O,Ho,Wo]; cross-correlation, zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, Conv2dOptions opts = {});
/// Gradient of conv2d wrt its input, as a differentiable op.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape, Conv2dOptions opts);
/// Gradient of conv2d wrt its weight, as a differentiable op.
Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out, const Shape& weight_shape, Conv2dOptions opts);

/// Window max over [B,C,H,W]; ties go to the lowest flat index.
Tensor maxpool2d(const Tensor& x, std::size_t window, std::size_t stride);
/// Mean over H,W: [B,C,H,W] -> [B,C].
Tensor global_avg_pool(const Tensor& x);
/// Max over the last axis (first occurrence wins): [.., P] -> [..].
Tensor max_lastdim(const Tensor& x);

std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding);

}  // namespace attnsteer
