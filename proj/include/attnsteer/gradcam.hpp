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

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "attnsteer/io.hpp"
#include "attnsteer/model.hpp"
#include "attnsteer/tensor.hpp"

namespace attnsteer {

enum class CamMode {
  report,          // detached grid
  train_full,      // differentiable through activations and channel weights
  train_detached,  // channel weights treated as constants
};

CamMode parse_cam_mode(const std::string& text);
std::string to_string(CamMode mode);

/// Normalized Grad-CAM heatmap on the last-conv grid.
///
/// grid = relu(sum_k alpha_k A^k) / max(...), alpha_k the spatial mean of
/// d logit / d A^k. A map whose pre-normalization maximum is 0 is flagged
/// degenerate and left all zero.
struct CamMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t attribute = 0;
  bool degenerate = false;
  std::vector<double> grid;            // row-major h*w, in [0, 1]
  std::vector<std::uint8_t> hard_set;  // grid > 0.5
  Tensor grid_tensor;                  // [h, w]; graph-attached in train modes
};

/// Batched maps sharing one forward pass.
struct CamBatch {
  Tensor grid;                   // [B, h, w]
  std::vector<bool> degenerate;  // per row
};

/// Grad-CAM for rows of a batch. `target` is a [B, K] constant selecting, per
/// row, the logit to explain (one-hot rows; all-zero rows yield degenerate
/// maps). Rows are independent because the network never mixes samples, so
/// one backward pass gives every row's own gradient.
CamBatch cam_from_activations(const Tensor& acts, const Tensor& logits, const Tensor& target, CamMode mode);

/// Single-image Grad-CAM. `image` is [C,H,W] or [1,C,H,W].
CamMap compute_cam(const ModelState& state, const Tensor& image, std::size_t attribute, CamMode mode = CamMode::report);

/// Unpacks one row of a CamBatch.
CamMap cam_row(const CamBatch& batch, std::size_t row, std::size_t attribute);

/// Fixed 256-entry color table: index 0 (no evidence) is red, 255 (peak) is
/// blue.
const std::array<std::array<std::uint8_t, 3>, 256>& heatmap_lut();

/// Nearest-neighbor upsample of the grid to height x width, colored through
/// heatmap_lut().
Image render_heatmap(const CamMap& cam, std::size_t height, std::size_t width);

/// The grid itself as an 8-bit gray image (h x w).
Image cam_to_gray(const CamMap& cam);

nlohmann::json cam_to_json(const CamMap& cam);

}  // namespace attnsteer
