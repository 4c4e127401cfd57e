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

#include "attnsteer/objective.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "attnsteer/error.hpp"
#include "attnsteer/io.hpp"

namespace attnsteer {

void RegionTemplate::validate() const {
  if (regions.size() != 10) {
    throw DataError("region template must have 10 regions, found " + std::to_string(regions.size()), "bad_template");
  }
  std::set<std::string> seen;
  for (const auto& r : regions) {
    if (!seen.insert(r.name).second) throw DataError("duplicate region '" + r.name + "'", "bad_template");
    const Rect& b = r.rect;
    const bool inside = b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 1.0 && b.y1 <= 1.0;
    if (!inside || b.x1 <= b.x0 || b.y1 <= b.y0) {
      throw DataError("region '" + r.name + "' must have positive area inside the unit square", "bad_template");
    }
  }
}

bool RegionTemplate::contains(const std::string& name) const {
  return std::any_of(regions.begin(), regions.end(), [&](const NamedRegion& r) { return r.name == name; });
}

const Rect& RegionTemplate::rect(const std::string& name) const {
  for (const auto& r : regions) {
    if (r.name == name) return r.rect;
  }
  throw UsageError("unknown region '" + name + "'", "unknown_region");
}

std::vector<std::string> RegionTemplate::names() const {
  std::vector<std::string> out;
  for (const auto& r : regions) out.push_back(r.name);
  return out;
}

const RegionTemplate& RegionTemplate::builtin() {
  static const RegionTemplate tmpl = [] {
    RegionTemplate t;
    t.regions = {
        {"forehead", {0.25, 0.05, 0.75, 0.22}},     {"left-eyebrow", {0.18, 0.26, 0.44, 0.32}},
        {"right-eyebrow", {0.56, 0.26, 0.82, 0.32}}, {"left-eye", {0.18, 0.34, 0.44, 0.46}},
        {"right-eye", {0.56, 0.34, 0.82, 0.46}},     {"nose", {0.42, 0.46, 0.58, 0.66}},
        {"left-cheek", {0.08, 0.50, 0.32, 0.68}},    {"right-cheek", {0.68, 0.50, 0.92, 0.68}},
        {"mouth", {0.30, 0.70, 0.65, 0.85}},         {"chin", {0.32, 0.87, 0.68, 0.98}},
    };
    t.validate();
    return t;
  }();
  return tmpl;
}

nlohmann::ordered_json template_to_json(const RegionTemplate& tmpl) {
  nlohmann::ordered_json regions = nlohmann::ordered_json::object();
  for (const auto& r : tmpl.regions) regions[r.name] = {r.rect.x0, r.rect.y0, r.rect.x1, r.rect.y1};
  nlohmann::ordered_json j;
  j["version"] = tmpl.version;
  j["regions"] = std::move(regions);
  return j;
}

RegionTemplate template_from_json(const nlohmann::ordered_json& j) {
  RegionTemplate t;
  try {
    t.version = j.at("version").get<int>();
    for (const auto& [name, box] : j.at("regions").items()) {
      if (!box.is_array() || box.size() != 4) throw DataError("region '" + name + "' needs [x0, y0, x1, y1]", "bad_template");
      t.regions.push_back({name, {box[0].get<double>(), box[1].get<double>(), box[2].get<double>(), box[3].get<double>()}});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed region template: ") + e.what(), "bad_template");
  }
  if (t.version != 1) throw DataError("unsupported region template version " + std::to_string(t.version), "bad_template");
  t.validate();
  return t;
}

RegionTemplate load_template(const std::filesystem::path& path) {
  try {
    return template_from_json(nlohmann::ordered_json::parse(read_text(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what(), "bad_template");
  }
}

std::vector<RegionSelection> parse_region_list(const std::string& text) {
  std::vector<RegionSelection> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    RegionSelection sel;
    const auto colon = item.find(':');
    sel.name = item.substr(0, colon);
    if (colon != std::string::npos) {
      try {
        std::size_t used = 0;
        sel.weight = std::stod(item.substr(colon + 1), &used);
        if (used != item.size() - colon - 1) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw UsageError("bad region weight in '" + item + "'", "bad_weight");
      }
    }
    out.push_back(sel);
  }
  return out;
}

std::string format_region_list(const std::vector<RegionSelection>& selection) {
  std::string out;
  for (const auto& s : selection) {
    if (!out.empty()) out += ",";
    std::ostringstream w;
    w << s.weight;
    out += s.name + ":" + w.str();
  }
  return out;
}

Tensor RegionSpec::mask_tensor() const { return Tensor({height, width}, mask); }

double cell_overlap(const Rect& rect, std::size_t row, std::size_t col, std::size_t height, std::size_t width) {
  // Work in grid units so that fully covered cells come out exactly 1.
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  const double c = static_cast<double>(col), r = static_cast<double>(row);
  const double ox = std::clamp(rect.x1 * w, c, c + 1.0) - std::clamp(rect.x0 * w, c, c + 1.0);
  const double oy = std::clamp(rect.y1 * h, r, r + 1.0) - std::clamp(rect.y0 * h, r, r + 1.0);
  return std::max(0.0, ox) * std::max(0.0, oy);
}

RegionSpec rasterize(const RegionTemplate& tmpl, const std::vector<RegionSelection>& selection, std::size_t height,
                     std::size_t width) {
  if (selection.empty()) throw UsageError("no regions selected", "empty_region_selection");
  if (height == 0 || width == 0) throw UsageError("rasterize: grid must be at least 1x1");
  RegionSpec spec{selection, height, width, std::vector<double>(height * width, 0.0),
                  std::vector<double>(height * width, 0.0)};
  for (const auto& sel : selection) {
    if (!(sel.weight > 0.0) || !std::isfinite(sel.weight)) {
      throw UsageError("region '" + sel.name + "' needs a positive weight", "bad_weight");
    }
    const Rect& r = tmpl.rect(sel.name);
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double cover = cell_overlap(r, y, x, height, width);
        double& s = spec.mask[y * width + x];
        double& u = spec.unit_mask[y * width + x];
        s = std::max(s, sel.weight * cover);
        u = std::max(u, cover);
      }
    }
  }
  if (std::none_of(spec.mask.begin(), spec.mask.end(), [](double v) { return v > 0.0; })) {
    throw UsageError("selected regions do not cover any grid cell", "empty_region_mask");
  }
  return spec;
}

double iou_loss_value(std::span<const double> membership, std::span<const double> region, double epsilon) {
  if (membership.size() != region.size()) {
    throw ShapeError("iou_loss: map has " + std::to_string(membership.size()) + " cells, region has " +
                     std::to_string(region.size()));
  }
  double inter = 0.0, uni = 0.0;
  for (std::size_t i = 0; i < region.size(); ++i) {
    inter += std::min(membership[i], region[i]);
    uni += std::max(membership[i], region[i]);
  }
  return -std::log((inter + epsilon) / (uni + epsilon));
}

double hard_iou_loss(std::span<const double> grid, std::span<const double> region, double epsilon) {
  std::vector<double> indicator(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) indicator[i] = grid[i] > 0.5 ? 1.0 : 0.0;
  return iou_loss_value(indicator, region, epsilon);
}

Tensor soft_iou_loss(const Tensor& grid, const Tensor& region, double epsilon) {
  if (region.dim() != 2) throw ShapeError("soft_iou_loss: region must be [h,w], got " + shape_str(region.shape()));
  const bool single = grid.dim() == 2;
  if ((!single && grid.dim() != 3) ||
      !std::equal(region.shape().begin(), region.shape().end(), grid.shape().end() - 2)) {
    throw ShapeError("soft_iou_loss: grid " + shape_str(grid.shape()) + " vs region " + shape_str(region.shape()));
  }
  const std::size_t batch = single ? 1 : grid.size(0);
  std::vector<double> tiled;
  tiled.reserve(batch * region.numel());
  for (std::size_t b = 0; b < batch; ++b) tiled.insert(tiled.end(), region.data().begin(), region.data().end());
  Tensor m = single ? reshape(grid, {1, grid.size(0), grid.size(1)}) : grid;
  Tensor s(m.shape(), std::move(tiled));
  Tensor inter = add_scalar(sum_trailing(min_elementwise(m, s), 1), epsilon);
  Tensor uni = add_scalar(sum_trailing(max_elementwise(m, s), 1), epsilon);
  Tensor loss = neg(log(div(inter, uni)));
  return single ? reshape(loss, {}) : loss;
}

Tensor attribute_loss(const Tensor& logits, const Tensor& labels) {
  for (double y : labels.data()) {
    if (y != 0.0 && y != 1.0) throw UsageError("attribute labels must be 0 or 1", "bad_labels");
  }
  return mean(bce_with_logits(logits, labels));
}

void LossWeights::validate() const {
  if (!(w_a > 0.0) || !std::isfinite(w_a)) throw UsageError("w_a must be positive", "bad_weight");
  if (!(w_g >= 0.0) || !std::isfinite(w_g)) throw UsageError("w_g must be non-negative", "bad_weight");
}

LossWeights LossWeights::preset(const std::string& name) {
  if (name == "lipstick") return {1.0, 5.0};
  if (name == "cheekbones") return {1.0, 4.0};
  if (name == "double_chin") return {1.0, 3.0};
  throw UsageError("unknown loss-weight preset '" + name + "'");
}

Tensor combined_loss(const Tensor& loss_a, const Tensor& loss_g, const LossWeights& weights) {
  return add(scale(loss_a, weights.w_a), scale(loss_g, weights.w_g));
}

double combined_loss_value(double loss_a, double loss_g, const LossWeights& weights) {
  return loss_a * weights.w_a + loss_g * weights.w_g;
}

double attention_in_roi(std::span<const double> grid, std::span<const double> unit_mask) {
  if (grid.size() != unit_mask.size()) throw ShapeError("attention_in_roi: grid and mask sizes differ");
  double inside = 0.0, total = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    inside += grid[i] * unit_mask[i];
    total += grid[i];
  }
  return total > 0.0 ? inside / total : 0.0;
}

}  // namespace attnsteer
