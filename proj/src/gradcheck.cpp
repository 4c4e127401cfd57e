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

#include "attnsteer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace attnsteer {

namespace {

std::vector<Tensor> as_leaves(const std::vector<Tensor>& inputs) {
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) {
    Tensor leaf = t.detach();
    leaf.set_requires_grad(true);
    leaves.push_back(leaf);
  }
  return leaves;
}

std::vector<Tensor> perturbed(const std::vector<Tensor>& inputs, std::size_t which, std::size_t flat, double delta) {
  std::vector<Tensor> out;
  out.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> d(inputs[i].data().begin(), inputs[i].data().end());
    if (i == which) d[flat] += delta;
    out.emplace_back(inputs[i].shape(), std::move(d));
  }
  return out;
}

double eval(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  GraphModeGuard guard(GraphMode::inference);
  return f(inputs).item();
}

std::vector<Tensor> gradients_at(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  GraphModeGuard guard(GraphMode::train);
  auto leaves = as_leaves(inputs);
  return backward(f(leaves), leaves);
}

}  // namespace

double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  diff = std::sqrt(diff);
  const double scale = std::max(std::sqrt(na), std::sqrt(nb));
  return scale < 1e-10 ? diff : diff / scale;
}

GradCheckReport check_gradients(const ScalarFn& f, const std::vector<Tensor>& inputs, double step) {
  const auto analytic = gradients_at(f, inputs);
  GradCheckReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> numeric(inputs[i].numel());
    for (std::size_t k = 0; k < numeric.size(); ++k) {
      const double up = eval(f, perturbed(inputs, i, k, step));
      const double down = eval(f, perturbed(inputs, i, k, -step));
      numeric[k] = (up - down) / (2.0 * step);
    }
    const double err = relative_error(analytic[i].data(), numeric);
    report.per_input_rel_error.push_back(err);
    report.max_rel_error = std::max(report.max_rel_error, err);
  }
  return report;
}

GradCheckReport grad_of_grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double eps,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<Tensor> direction;
  for (const auto& t : inputs) {
    std::vector<double> d(t.numel());
    for (auto& v : d) v = normal(rng);
    direction.emplace_back(t.shape(), std::move(d));
  }

  // Hessian-vector product through double backward.
  std::vector<Tensor> hvp;
  {
    GraphModeGuard guard(GraphMode::train);
    auto leaves = as_leaves(inputs);
    auto grads = backward(f(leaves), leaves, GraphMode::train_with_grad_graph);
    Tensor dot;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      Tensor term = sum(mul(grads[i], direction[i]));
      dot = dot.defined() ? add(dot, term) : term;
    }
    hvp = backward(dot, leaves);
  }

  // Central difference of the first-order gradient along the direction.
  auto shifted = [&](double sign) {
    std::vector<Tensor> moved;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      std::vector<double> d(inputs[i].data().begin(), inputs[i].data().end());
      auto dir = direction[i].data();
      for (std::size_t k = 0; k < d.size(); ++k) d[k] += sign * eps * dir[k];
      moved.emplace_back(inputs[i].shape(), std::move(d));
    }
    return gradients_at(f, moved);
  };
  const auto plus = shifted(1.0);
  const auto minus = shifted(-1.0);

  GradCheckReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> numeric(inputs[i].numel());
    auto p = plus[i].data();
    auto m = minus[i].data();
    for (std::size_t k = 0; k < numeric.size(); ++k) numeric[k] = (p[k] - m[k]) / (2.0 * eps);
    const double err = relative_error(hvp[i].data(), numeric);
    report.per_input_rel_error.push_back(err);
    report.max_rel_error = std::max(report.max_rel_error, err);
  }
  return report;
}

}  // namespace attnsteer
