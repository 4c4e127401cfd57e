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

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "attnsteer/tensor.hpp"

namespace attnsteer {

/// Axis-aligned rectangle in normalized image coordinates.
struct Rect {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  double area() const { return (x1 - x0) * (y1 - y0); }
  bool operator==(const Rect&) const = default;
};

struct NamedRegion {
  std::string name;
  Rect rect;
};

/// The ten-region face layout shared by the generator, the losses, the
/// service and the UI.
struct RegionTemplate {
  int version = 1;
  std::vector<NamedRegion> regions;

  void validate() const;
  bool contains(const std::string& name) const;
  const Rect& rect(const std::string& name) const;  // UsageError "unknown_region"
  std::vector<std::string> names() const;

  static const RegionTemplate& builtin();
};

nlohmann::ordered_json template_to_json(const RegionTemplate& tmpl);
RegionTemplate template_from_json(const nlohmann::ordered_json& j);
RegionTemplate load_template(const std::filesystem::path& path);

struct RegionSelection {
  std::string name;
  double weight = 1.0;
  bool operator==(const RegionSelection&) const = default;
};

/// "mouth:3.0,chin" -> [{mouth, 3.0}, {chin, 1.0}].
std::vector<RegionSelection> parse_region_list(const std::string& text);
std::string format_region_list(const std::vector<RegionSelection>& selection);

/// Selected regions rasterized onto a CAM grid.
struct RegionSpec {
  std::vector<RegionSelection> selected;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> mask;       // S: weight x fractional cell overlap, max over regions
  std::vector<double> unit_mask;  // the same with every weight set to 1

  Tensor mask_tensor() const;  // [h, w]
};

/// Fraction of the grid cell (row, col) covered by `rect`.
double cell_overlap(const Rect& rect, std::size_t row, std::size_t col, std::size_t height, std::size_t width);

/// Errors: empty selection ("empty_region_selection"), unknown region,
/// non-positive weight, or a mask with no positive cell ("empty_region_mask").
RegionSpec rasterize(const RegionTemplate& tmpl, const std::vector<RegionSelection>& selection, std::size_t height,
                     std::size_t width);

inline constexpr double kIouEpsilon = 1e-6;

/// -ln((sum min(m, S) + eps) / (sum max(m, S) + eps)) on plain values.
double iou_loss_value(std::span<const double> membership, std::span<const double> region,
                      double epsilon = kIouEpsilon);

/// Hard mode: membership is the >0.5 indicator of the CAM grid.
double hard_iou_loss(std::span<const double> grid, std::span<const double> region, double epsilon = kIouEpsilon);

/// Differentiable soft IoU loss; `grid` is [h, w] or [B, h, w], `region` is
/// [h, w]. Returns a scalar for a single map and [B] for a batch.
Tensor soft_iou_loss(const Tensor& grid, const Tensor& region, double epsilon = kIouEpsilon);

/// Mean binary cross entropy over every logit; labels must be 0 or 1.
Tensor attribute_loss(const Tensor& logits, const Tensor& labels);

struct LossWeights {
  double w_a = 1.0;
  double w_g = 0.0;

  void validate() const;
  /// "lipstick" (1, 5), "cheekbones" (1, 4), "double_chin" (1, 3).
  static LossWeights preset(const std::string& name);
};

/// w_a * loss_a + w_g * loss_g, evaluated in that order.
Tensor combined_loss(const Tensor& loss_a, const Tensor& loss_g, const LossWeights& weights);
double combined_loss_value(double loss_a, double loss_g, const LossWeights& weights);

/// Share of CAM mass that falls inside the unit-weight region mask:
/// sum(grid * S) / sum(grid); 0 for an all-zero grid.
double attention_in_roi(std::span<const double> grid, std::span<const double> unit_mask);

}  // namespace attnsteer
