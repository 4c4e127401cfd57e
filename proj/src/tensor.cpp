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

#include "attnsteer/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "attnsteer/error.hpp"

namespace attnsteer {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_recording = true;

std::uint64_t next_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(data.size()));
  }
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
  impl_->id = next_id();
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }
Tensor Tensor::ones(const Shape& shape) { return full(shape, 1.0); }
Tensor Tensor::full(const Shape& shape, double value) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), value));
}
Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw UsageError("tensor: use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  if (!impl_) throw UsageError("tensor: use of undefined tensor");
  return impl_->data;
}

double Tensor::at(std::size_t flat_index) const { return data()[flat_index]; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw UsageError("tensor: use of undefined tensor");
  if (impl_->grad_fn) throw UsageError("set_requires_grad: only valid on leaf tensors");
  impl_->requires_grad = flag;
  return *this;
}

Tensor Tensor::detach() const { return Tensor(shape(), std::vector<double>(data().begin(), data().end())); }

bool Tensor::is_leaf() const { return !impl_ || !impl_->grad_fn; }
const Node* Tensor::grad_fn() const { return impl_ ? impl_->grad_fn.get() : nullptr; }
std::uint64_t Tensor::id() const { return impl_ ? impl_->id : 0; }

Tensor make_op_result(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                      Node::BackwardFn backward_fn) {
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output (numeric overflow)");
  }
  Tensor out(std::move(shape), std::move(data));
  bool track = false;
  if (t_recording) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    out.impl_->requires_grad = true;
    out.impl_->grad_fn = std::make_shared<Node>(op, std::move(inputs), std::move(backward_fn));
  }
  return out;
}

bool recording_enabled() { return t_recording; }

GraphModeGuard::GraphModeGuard(GraphMode mode) : previous_(t_recording) {
  t_recording = mode != GraphMode::inference;
}

GraphModeGuard::~GraphModeGuard() { t_recording = previous_; }

std::vector<Tensor> backward(const Tensor& loss, const std::vector<Tensor>& wrt, GraphMode mode) {
  if (mode == GraphMode::inference) throw UsageError("backward: not available in inference mode");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));

  const bool create_graph = mode == GraphMode::train_with_grad_graph;

  // Collect the requires-grad subgraph reachable from the loss.
  std::unordered_map<const TensorImpl*, Tensor> reachable;
  std::vector<Tensor> stack;
  if (loss.requires_grad()) {
    stack.push_back(loss);
    reachable.emplace(loss.impl(), loss);
  }
  while (!stack.empty()) {
    Tensor t = std::move(stack.back());
    stack.pop_back();
    if (const Node* fn = t.grad_fn()) {
      for (const auto& in : fn->inputs()) {
        if (in.requires_grad() && reachable.emplace(in.impl(), in).second) stack.push_back(in);
      }
    }
  }

  std::vector<Tensor> order;
  order.reserve(reachable.size());
  for (auto& [_, t] : reachable) order.push_back(t);
  std::sort(order.begin(), order.end(), [](const Tensor& a, const Tensor& b) { return a.id() < b.id(); });

  std::unordered_set<const TensorImpl*> targets;
  for (const auto& w : wrt) {
    if (w.defined()) targets.insert(w.impl());
  }

  // A tensor is needed if it is a target or feeds one.
  std::unordered_set<const TensorImpl*> needed;
  for (const auto& t : order) {
    bool need = targets.count(t.impl()) > 0;
    if (!need && t.grad_fn()) {
      for (const auto& in : t.grad_fn()->inputs()) {
        if (needed.count(in.impl())) {
          need = true;
          break;
        }
      }
    }
    if (need) needed.insert(t.impl());
  }

  GraphModeGuard guard(create_graph ? GraphMode::train_with_grad_graph : GraphMode::inference);

  std::unordered_map<const TensorImpl*, Tensor> grads;
  std::unordered_map<const TensorImpl*, Tensor> results;
  if (needed.count(loss.impl())) grads.emplace(loss.impl(), Tensor::ones(loss.shape()));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Tensor& t = *it;
    auto git = grads.find(t.impl());
    if (git == grads.end()) continue;
    Tensor g = std::move(git->second);
    grads.erase(git);
    if (targets.count(t.impl())) results[t.impl()] = g;
    const Node* fn = t.grad_fn();
    if (!fn) continue;
    const auto& inputs = fn->inputs();
    std::vector<bool> needs(inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      needs[i] = inputs[i].requires_grad() && needed.count(inputs[i].impl()) > 0;
      any = any || needs[i];
    }
    if (!any) continue;
    auto in_grads = fn->backward(g, needs);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!needs[i] || !in_grads[i].defined()) continue;
      auto [slot, inserted] = grads.try_emplace(inputs[i].impl(), in_grads[i]);
      if (!inserted) slot->second = add(slot->second, in_grads[i]);
    }
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto rit = results.find(w.impl());
    if (rit != results.end()) {
      out.push_back(rit->second);
    } else {
      out.push_back(Tensor::zeros(w.shape()));
    }
  }
  return out;
}

}  // namespace attnsteer
