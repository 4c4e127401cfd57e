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

#include "attnsteer/gradcam.hpp"

#include <algorithm>
#include <cmath>

#include "attnsteer/error.hpp"

namespace attnsteer {

CamMode parse_cam_mode(const std::string& text) {
  if (text == "report") return CamMode::report;
  if (text == "train_full" || text == "full") return CamMode::train_full;
  if (text == "train_detached" || text == "detached") return CamMode::train_detached;
  throw UsageError("unknown cam mode '" + text + "' (expected train_full or train_detached)");
}

std::string to_string(CamMode mode) {
  switch (mode) {
    case CamMode::report:
      return "report";
    case CamMode::train_full:
      return "train_full";
    case CamMode::train_detached:
      return "train_detached";
  }
  return "report";
}

CamBatch cam_from_activations(const Tensor& acts, const Tensor& logits, const Tensor& target, CamMode mode) {
  if (acts.dim() != 4) throw ShapeError("gradcam: activations must be [B,F,h,w], got " + shape_str(acts.shape()));
  if (target.shape() != logits.shape()) {
    throw ShapeError("gradcam: target " + shape_str(target.shape()) + " vs logits " + shape_str(logits.shape()));
  }
  const std::size_t batch = acts.size(0), channels = acts.size(1), h = acts.size(2), w = acts.size(3);
  const std::size_t cells = h * w;

  Tensor score = sum(mul(logits, target.detach()));
  const GraphMode grad_mode = mode == CamMode::train_full ? GraphMode::train_with_grad_graph : GraphMode::train;
  Tensor grad_acts = backward(score, {acts}, grad_mode)[0];

  Tensor alpha = global_avg_pool(grad_acts);  // [B, F]
  if (mode != CamMode::train_full) alpha = alpha.detach();

  Tensor weighted = bmm(reshape(alpha, {batch, 1, channels}), reshape(acts, {batch, channels, cells}));
  Tensor raw = relu(reshape(weighted, {batch, cells}));
  Tensor peak = max_lastdim(raw);  // [B]

  std::vector<double> guard(batch, 0.0);
  std::vector<bool> degenerate(batch, false);
  for (std::size_t b = 0; b < batch; ++b) {
    if (peak.at(b) <= 0.0) {
      degenerate[b] = true;
      guard[b] = 1.0;  // raw is all zero here, so the grid stays zero
    }
  }
  Tensor denom = add(peak, Tensor({batch}, guard));
  Tensor grid = reshape(div(raw, expand_trailing(denom, {batch, cells})), {batch, h, w});
  if (mode == CamMode::report) grid = grid.detach();
  return {grid, std::move(degenerate)};
}

CamMap cam_row(const CamBatch& batch, std::size_t row, std::size_t attribute) {
  const std::size_t h = batch.grid.size(1), w = batch.grid.size(2);
  CamMap cam;
  cam.height = h;
  cam.width = w;
  cam.attribute = attribute;
  cam.degenerate = batch.degenerate.at(row);
  auto d = batch.grid.data();
  cam.grid.assign(d.begin() + static_cast<std::ptrdiff_t>(row * h * w),
                  d.begin() + static_cast<std::ptrdiff_t>((row + 1) * h * w));
  cam.hard_set.resize(cam.grid.size());
  for (std::size_t i = 0; i < cam.grid.size(); ++i) cam.hard_set[i] = cam.grid[i] > 0.5 ? 1 : 0;
  if (batch.grid.requires_grad() && batch.grid.size(0) == 1) {
    cam.grid_tensor = reshape(batch.grid, {h, w});
  } else {
    cam.grid_tensor = Tensor({h, w}, cam.grid);
  }
  return cam;
}

CamMap compute_cam(const ModelState& state, const Tensor& image, std::size_t attribute, CamMode mode) {
  const std::size_t k = state.spec.num_attributes;
  if (attribute >= k) {
    throw UsageError("gradcam: attribute " + std::to_string(attribute) + " out of range (model has " +
                         std::to_string(k) + ")",
                     "attribute_out_of_range");
  }
  Tensor batch = image.dim() == 3 ? reshape(image, {1, image.size(0), image.size(1), image.size(2)}) : image;
  if (batch.dim() != 4 || batch.size(0) != 1) {
    throw ShapeError("gradcam: expected a single image, got " + shape_str(image.shape()));
  }

  GraphModeGuard recording(GraphMode::train);
  Tensor acts = forward_trunk(state, batch);
  if (mode == CamMode::report || !acts.requires_grad()) {
    acts = acts.detach();
    acts.set_requires_grad(true);
  }
  Tensor logits = forward_head(state, acts);
  std::vector<double> target(k, 0.0);
  target[attribute] = 1.0;
  auto cams = cam_from_activations(acts, logits, Tensor({1, k}, target), mode);
  return cam_row(cams, 0, attribute);
}

const std::array<std::array<std::uint8_t, 3>, 256>& heatmap_lut() {
  static const auto lut = [] {
    std::array<std::array<std::uint8_t, 3>, 256> t{};
    // Reversed jet in integer arithmetic: u runs 1020 (index 0) down to 0
    // (index 255); channel = clamp(1.5 - |4u' - c|) with u' = u / 1020.
    auto channel = [](int u, int center) {
      const int v = 1530 - std::abs(4 * u - center * 1020);  // scaled by 1020
      const int clamped = std::clamp(v, 0, 1020);
      return static_cast<std::uint8_t>((clamped * 255 + 510) / 1020);
    };
    for (int i = 0; i < 256; ++i) {
      const int u = (255 - i) * 4;  // 0..1020
      t[static_cast<std::size_t>(i)] = {channel(u, 3), channel(u, 2), channel(u, 1)};
    }
    return t;
  }();
  return lut;
}

namespace {

std::uint8_t quantize(double v) {
  const double scaled = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(scaled);
}

}  // namespace

Image render_heatmap(const CamMap& cam, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw UsageError("render_heatmap: zero-sized target");
  if (cam.grid.size() != cam.height * cam.width || cam.grid.empty()) throw UsageError("render_heatmap: invalid CamMap");
  const auto& lut = heatmap_lut();
  Image img{width, height, 3, std::vector<std::uint8_t>(width * height * 3)};
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t gy = y * cam.height / height;
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t gx = x * cam.width / width;
      const auto& color = lut[quantize(cam.grid[gy * cam.width + gx])];
      std::copy(color.begin(), color.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>((y * width + x) * 3));
    }
  }
  return img;
}

Image cam_to_gray(const CamMap& cam) {
  Image img{cam.width, cam.height, 1, std::vector<std::uint8_t>(cam.grid.size())};
  for (std::size_t i = 0; i < cam.grid.size(); ++i) img.pixels[i] = quantize(cam.grid[i]);
  return img;
}

nlohmann::json cam_to_json(const CamMap& cam) {
  nlohmann::json grid = nlohmann::json::array();
  nlohmann::json hard = nlohmann::json::array();
  for (std::size_t y = 0; y < cam.height; ++y) {
    nlohmann::json row = nlohmann::json::array();
    nlohmann::json hrow = nlohmann::json::array();
    for (std::size_t x = 0; x < cam.width; ++x) {
      row.push_back(cam.grid[y * cam.width + x]);
      hrow.push_back(static_cast<int>(cam.hard_set[y * cam.width + x]));
    }
    grid.push_back(std::move(row));
    hard.push_back(std::move(hrow));
  }
  return {{"attribute", cam.attribute}, {"height", cam.height}, {"width", cam.width},
          {"degenerate", cam.degenerate}, {"grid", grid},        {"hard_set", hard}};
}

}  // namespace attnsteer
