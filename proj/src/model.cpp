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

#include "attnsteer/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <random>

#include "attnsteer/error.hpp"
#include "attnsteer/io.hpp"

namespace attnsteer {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Spec

namespace {

struct LayerShapes {
  std::vector<std::pair<std::size_t, std::size_t>> conv_out;  // pre-pool spatial size per block
  std::pair<std::size_t, std::size_t> final_out;              // after last pool
};

LayerShapes trace_shapes(const ModelSpec& spec) {
  LayerShapes shapes;
  std::size_t h = spec.height, w = spec.width;
  for (std::size_t i = 0; i < spec.conv_blocks.size(); ++i) {
    const auto& b = spec.conv_blocks[i];
    if (b.out_channels == 0 || b.kernel == 0 || b.stride == 0 || b.pool == 0) {
      throw UsageError("model spec: conv block " + std::to_string(i + 1) + " has a zero field");
    }
    const std::size_t pad = b.kernel / 2;
    h = conv_output_size(h, b.kernel, b.stride, pad);
    w = conv_output_size(w, b.kernel, b.stride, pad);
    if (h == 0 || w == 0) throw UsageError("model spec: conv block " + std::to_string(i + 1) + " shrinks input to nothing");
    shapes.conv_out.emplace_back(h, w);
    if (b.pool > 1) {
      h /= b.pool;
      w /= b.pool;
      if (h == 0 || w == 0) throw UsageError("model spec: pool in block " + std::to_string(i + 1) + " shrinks input to nothing");
    }
  }
  shapes.final_out = {h, w};
  return shapes;
}

}  // namespace

void ModelSpec::validate() const {
  if (channels == 0 || height == 0 || width == 0) throw UsageError("model spec: input dimensions must be positive");
  if (conv_blocks.empty()) throw UsageError("model spec: at least one conv block is required");
  if (fc_widths.empty()) throw UsageError("model spec: at least one fully connected layer is required");
  if (num_attributes == 0) throw UsageError("model spec: num_attributes must be positive");
  if (fc_widths.back() != num_attributes) {
    throw UsageError("model spec: output width " + std::to_string(fc_widths.back()) + " != num_attributes " +
                     std::to_string(num_attributes));
  }
  for (auto w : fc_widths) {
    if (w == 0) throw UsageError("model spec: zero-width fully connected layer");
  }
  auto shapes = trace_shapes(*this);
  auto [gh, gw] = shapes.conv_out.back();
  if (gh < 4 || gw < 4) {
    throw UsageError("model spec: Grad-CAM grid " + std::to_string(gh) + "x" + std::to_string(gw) +
                     " is smaller than 4x4", "degenerate_spec");
  }
}

std::pair<std::size_t, std::size_t> ModelSpec::cam_grid() const { return trace_shapes(*this).conv_out.back(); }

void to_json(json& j, const ModelSpec& spec) {
  json blocks = json::array();
  for (const auto& b : spec.conv_blocks) {
    blocks.push_back({{"out_channels", b.out_channels}, {"kernel", b.kernel}, {"stride", b.stride}, {"pool", b.pool}});
  }
  j = json{{"input", {spec.channels, spec.height, spec.width}},
           {"conv_blocks", blocks},
           {"fc_widths", spec.fc_widths},
           {"num_attributes", spec.num_attributes}};
}

void from_json(const json& j, ModelSpec& spec) {
  ModelSpec out;
  if (j.contains("input")) {
    auto in = j.at("input").get<std::vector<std::size_t>>();
    if (in.size() != 3) throw UsageError("model spec: input must be [channels, height, width]");
    out.channels = in[0];
    out.height = in[1];
    out.width = in[2];
  }
  if (j.contains("conv_blocks")) {
    out.conv_blocks.clear();
    for (const auto& b : j.at("conv_blocks")) {
      out.conv_blocks.push_back({b.at("out_channels").get<std::size_t>(), b.value("kernel", std::size_t{3}),
                                 b.value("stride", std::size_t{1}), b.value("pool", std::size_t{1})});
    }
  }
  if (j.contains("num_attributes")) out.num_attributes = j.at("num_attributes").get<std::size_t>();
  if (j.contains("fc_widths")) {
    out.fc_widths = j.at("fc_widths").get<std::vector<std::size_t>>();
  } else {
    out.fc_widths = {128, out.num_attributes};
  }
  if (!j.contains("num_attributes") && !out.fc_widths.empty()) out.num_attributes = out.fc_widths.back();
  spec = std::move(out);
}

// ---------------------------------------------------------------------------
// State

const Tensor& ModelState::param(const std::string& name) const {
  for (const auto& p : parameters) {
    if (p.name == name) return p.value;
  }
  throw UsageError("model: no parameter named " + name);
}

std::vector<Tensor> ModelState::tensors() const {
  std::vector<Tensor> out;
  out.reserve(parameters.size());
  for (const auto& p : parameters) out.push_back(p.value);
  return out;
}

ModelState ModelState::trainable() const {
  ModelState out = *this;
  for (auto& p : out.parameters) {
    p.value = p.value.detach();
    p.value.set_requires_grad(true);
  }
  return out;
}

ModelState ModelState::frozen() const {
  ModelState out = *this;
  for (auto& p : out.parameters) p.value = p.value.detach();
  return out;
}

ModelState ModelState::with_values(const std::vector<Tensor>& values) const {
  if (values.size() != parameters.size()) throw UsageError("model: wrong number of parameter values");
  ModelState out = *this;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != parameters[i].value.shape()) {
      throw ShapeError("model: parameter " + parameters[i].name + " expects " + shape_str(parameters[i].value.shape()) +
                       ", got " + shape_str(values[i].shape()));
    }
    out.parameters[i].value = values[i];
  }
  return out;
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelSpec& spec) {
  spec.validate();
  std::vector<std::pair<std::string, Shape>> layout;
  std::size_t in_channels = spec.channels;
  for (std::size_t i = 0; i < spec.conv_blocks.size(); ++i) {
    const auto& b = spec.conv_blocks[i];
    const std::string name = "conv" + std::to_string(i + 1);
    layout.emplace_back(name + ".weight", Shape{b.out_channels, in_channels, b.kernel, b.kernel});
    layout.emplace_back(name + ".bias", Shape{b.out_channels});
    in_channels = b.out_channels;
  }
  auto [fh, fw] = trace_shapes(spec).final_out;
  std::size_t in_features = in_channels * fh * fw;
  for (std::size_t i = 0; i < spec.fc_widths.size(); ++i) {
    const std::string name = "fc" + std::to_string(i + 1);
    layout.emplace_back(name + ".weight", Shape{spec.fc_widths[i], in_features});
    layout.emplace_back(name + ".bias", Shape{spec.fc_widths[i]});
    in_features = spec.fc_widths[i];
  }
  return layout;
}

ModelState init_model(const ModelSpec& spec, std::uint64_t seed) {
  ModelState state;
  state.spec = spec;
  state.last_conv_name = "conv" + std::to_string(spec.conv_blocks.size());
  std::mt19937_64 rng(seed);
  for (auto& [name, shape] : parameter_layout(spec)) {
    std::vector<double> values(shape_numel(shape), 0.0);
    if (shape.size() > 1) {
      const std::size_t fan_in = shape_numel(shape) / shape[0];
      const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in)));
      for (auto& v : values) {
        // 24 random bits -> exact float in [0, 1)
        const float u = static_cast<float>(rng() >> 40) * 0x1.0p-24f;
        v = static_cast<double>((2.0f * u - 1.0f) * bound);
      }
    }
    state.parameters.push_back({name, Tensor(shape, std::move(values))});
  }
  return state;
}

Tensor forward_trunk(const ModelState& state, const Tensor& batch) {
  const auto& spec = state.spec;
  if (batch.dim() != 4 || batch.size(1) != spec.channels || batch.size(2) != spec.height ||
      batch.size(3) != spec.width) {
    throw ShapeError("model forward: batch " + shape_str(batch.shape()) + " does not match input [B," +
                     std::to_string(spec.channels) + "," + std::to_string(spec.height) + "," +
                     std::to_string(spec.width) + "]");
  }
  Tensor x = batch;
  const std::size_t n = spec.conv_blocks.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& b = spec.conv_blocks[i];
    const std::string name = "conv" + std::to_string(i + 1);
    x = relu(bias_add(conv2d(x, state.param(name + ".weight"), {b.stride, b.kernel / 2}), state.param(name + ".bias")));
    if (i + 1 < n && b.pool > 1) x = maxpool2d(x, b.pool, b.pool);
  }
  return x;
}

Tensor forward_head(const ModelState& state, const Tensor& last_conv_acts) {
  const auto& spec = state.spec;
  Tensor x = last_conv_acts;
  const auto& last = spec.conv_blocks.back();
  if (last.pool > 1) x = maxpool2d(x, last.pool, last.pool);
  const std::size_t batch = x.size(0);
  x = reshape(x, {batch, x.numel() / batch});
  for (std::size_t i = 0; i < spec.fc_widths.size(); ++i) {
    const std::string name = "fc" + std::to_string(i + 1);
    x = linear(x, state.param(name + ".weight"), state.param(name + ".bias"));
    if (i + 1 < spec.fc_widths.size()) x = relu(x);
  }
  return x;
}

ForwardResult forward(const ModelState& state, const Tensor& batch) {
  Tensor acts = forward_trunk(state, batch);
  return {forward_head(state, acts), acts};
}

ModelState quantize_to_storage(const ModelState& state) {
  ModelState out = state;
  for (auto& p : out.parameters) {
    std::vector<double> v(p.value.data().begin(), p.value.data().end());
    for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
    p.value = Tensor(p.value.shape(), std::move(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

void to_json(json& j, const CheckpointMeta& meta) {
  j = json{{"kind", meta.kind},   {"parent", meta.parent},       {"seed", meta.seed},
           {"epoch", meta.epoch}, {"loss_history", meta.loss_history}, {"extra", meta.extra}};
}

void from_json(const json& j, CheckpointMeta& meta) {
  meta.kind = j.value("kind", "");
  meta.parent = j.value("parent", "");
  meta.seed = j.value("seed", std::uint64_t{0});
  meta.epoch = j.value("epoch", std::size_t{0});
  meta.loss_history = j.value("loss_history", std::vector<double>{});
  meta.extra = j.value("extra", json::object());
}

namespace {

constexpr char kMagic[4] = {'A', 'T', 'S', 'T'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}
std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint) {
  const auto& state = checkpoint.state;
  std::vector<std::uint8_t> payload;
  json table = json::array();
  for (const auto& p : state.parameters) {
    table.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", payload.size()}, {"count", p.value.numel()}});
    for (double v : p.value.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      put_u32(payload, bits);
    }
  }
  json header{{"format_version", kCheckpointFormatVersion},
              {"spec", state.spec},
              {"last_conv_name", state.last_conv_name},
              {"tensors", table},
              {"metadata", checkpoint.meta},
              {"payload_sha256", sha256_hex(payload)}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kCheckpointFormatVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw DataError("checkpoint: bad magic bytes (not an ATST file)", "bad_checkpoint");
  }
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kCheckpointFormatVersion) {
    throw DataError("checkpoint: unsupported format_version " + std::to_string(version) + " (this build reads " +
                        std::to_string(kCheckpointFormatVersion) + ")",
                    "checkpoint_version");
  }
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw DataError("checkpoint: truncated header", "checkpoint_truncated");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what(), "bad_checkpoint");
  }
  auto payload = bytes.subspan(16 + header_len);

  try {
    Checkpoint ck;
    ck.state.spec = header.at("spec").get<ModelSpec>();
    ck.state.spec.validate();
    ck.state.last_conv_name = header.at("last_conv_name").get<std::string>();
    ck.meta = header.at("metadata").get<CheckpointMeta>();

    std::size_t expected_bytes = 0;
    for (const auto& t : header.at("tensors")) expected_bytes += 4 * t.at("count").get<std::size_t>();
    if (payload.size() < expected_bytes) throw DataError("checkpoint: truncated payload", "checkpoint_truncated");
    if (payload.size() > expected_bytes) throw DataError("checkpoint: trailing bytes after payload", "bad_checkpoint");
    if (sha256_hex(payload) != header.at("payload_sha256").get<std::string>()) {
      throw DataError("checkpoint: payload digest mismatch (file corrupted)", "checkpoint_digest");
    }

    auto layout = parameter_layout(ck.state.spec);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != layout.size()) throw DataError("checkpoint: parameter table does not match spec", "bad_checkpoint");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const auto& t = tensors[i];
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      if (name != layout[i].first || shape != layout[i].second) {
        throw DataError("checkpoint: parameter " + name + " " + shape_str(shape) + " does not match spec entry " +
                            layout[i].first + " " + shape_str(layout[i].second),
                        "bad_checkpoint");
      }
      const std::size_t offset = t.at("offset").get<std::size_t>();
      const std::size_t count = t.at("count").get<std::size_t>();
      if (count != shape_numel(shape) || offset + 4 * count > payload.size()) {
        throw DataError("checkpoint: bad offset table", "bad_checkpoint");
      }
      std::vector<double> values(count);
      for (std::size_t k = 0; k < count; ++k) {
        values[k] = static_cast<double>(std::bit_cast<float>(get_u32(payload.data() + offset + 4 * k)));
      }
      ck.state.parameters.push_back({name, Tensor(shape, std::move(values))});
    }
    return ck;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what(), "bad_checkpoint");
  }
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  try {
    return parse_checkpoint(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what(), e.code());
  }
}

std::string checkpoint_id(const Checkpoint& checkpoint) {
  return sha256_hex(serialize_checkpoint(checkpoint)).substr(0, 16);
}

}  // namespace attnsteer
