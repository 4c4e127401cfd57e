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
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "attnsteer/tensor.hpp"

namespace attnsteer {

/// One convolution block: conv(kernel, stride, same-padding) -> relu ->
/// optional max-pool with window == stride == `pool` (1 disables pooling).
struct ConvBlockSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pool = 1;

  bool operator==(const ConvBlockSpec&) const = default;
};

/// MiniAlex: a few conv blocks followed by fully connected layers with one
/// sigmoid logit per attribute. The Grad-CAM tap is the post-ReLU output of
/// the last conv block (before its pool, if any).
struct ModelSpec {
  std::size_t channels = 1;
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<ConvBlockSpec> conv_blocks{{8, 5, 2, 2}, {16, 3, 1, 2}, {32, 3, 1, 1}};
  std::vector<std::size_t> fc_widths{128, 4};  // last entry == num_attributes
  std::size_t num_attributes = 4;

  /// Throws UsageError on a degenerate spec (CAM grid under 4x4, head width
  /// not equal to num_attributes, layers that shrink to nothing).
  void validate() const;

  /// Spatial size of the Grad-CAM tap.
  std::pair<std::size_t, std::size_t> cam_grid() const;
  std::size_t tap_channels() const { return conv_blocks.back().out_channels; }

  bool operator==(const ModelSpec&) const = default;
};

void to_json(nlohmann::json& j, const ModelSpec& spec);
void from_json(const nlohmann::json& j, ModelSpec& spec);

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct ModelState {
  ModelSpec spec;
  std::vector<NamedTensor> parameters;  // fixed order: conv1.weight, conv1.bias, ..., fcN.bias
  std::string last_conv_name;

  const Tensor& param(const std::string& name) const;
  std::vector<Tensor> tensors() const;
  /// Same parameters, as fresh leaves that require grad.
  ModelState trainable() const;
  /// Same parameters, detached.
  ModelState frozen() const;
  /// Replaces values in order; shapes must match.
  ModelState with_values(const std::vector<Tensor>& values) const;
};

struct ForwardResult {
  Tensor logits;          // [B, K], pre-sigmoid
  Tensor last_conv_acts;  // [B, F, h, w]
};

/// Parameter names and shapes implied by a spec, in canonical order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelSpec& spec);

/// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases. Values are
/// drawn in float32 so that a fresh state survives the checkpoint format
/// unchanged.
ModelState init_model(const ModelSpec& spec, std::uint64_t seed);

ForwardResult forward(const ModelState& state, const Tensor& batch);
/// Conv stack up to and including the Grad-CAM tap.
Tensor forward_trunk(const ModelState& state, const Tensor& batch);
/// Everything after the tap: optional pool, flatten, fully connected layers.
Tensor forward_head(const ModelState& state, const Tensor& last_conv_acts);

/// Rounds every parameter to the nearest float32 (the storage precision).
ModelState quantize_to_storage(const ModelState& state);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct CheckpointMeta {
  std::string kind;    // baseline, finetune, region_only, mixed, init
  std::string parent;  // checkpoint id of the parent, empty for roots
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::vector<double> loss_history;
  nlohmann::json extra = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const CheckpointMeta& meta);
void from_json(const nlohmann::json& j, CheckpointMeta& meta);

struct Checkpoint {
  ModelState state;
  CheckpointMeta meta;
};

/// "ATST" | u32 LE version | u64 LE header length | JSON header | f32 LE payload
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Stable identifier: first 16 hex digits of the SHA-256 of the serialized
/// file.
std::string checkpoint_id(const Checkpoint& checkpoint);

}  // namespace attnsteer
