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

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "attnsteer/tensor.hpp"

namespace attnsteer {

/// Scalar-valued function of a list of tensors, built from forward ops.
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<double> per_input_rel_error;
  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

/// ||a - b|| / max(||a||, ||b||), falling back to the absolute difference
/// when both norms are below 1e-10.
double relative_error(std::span<const double> a, std::span<const double> b);

/// First-order check: backward() against central differences of `f`.
GradCheckReport check_gradients(const ScalarFn& f, const std::vector<Tensor>& inputs, double step = 1e-5);

/// Second-order check: Hessian-vector products obtained by differentiating
/// the train_with_grad_graph gradient, against central differences of the
/// first-order gradient along the same random direction.
GradCheckReport grad_of_grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double eps = 1e-5,
                                   std::uint64_t seed = 1);

}  // namespace attnsteer
