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
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "attnsteer/io.hpp"
#include "attnsteer/objective.hpp"

namespace attnsteer {

inline const std::vector<std::string> kSplits = {"train", "val", "test"};

struct AttributeSpec {
  std::string name;
  std::vector<std::string> regions;  // template regions the pattern is drawn in
  std::string pattern;               // hstripes | checker | ring | blob
  double amplitude = 0.3;            // pattern contrast on the [0, 1] intensity scale
  double base_rate = 0.5;            // P(y = 1), or P(y = 1 | driver absent) when co-occurring

  bool operator==(const AttributeSpec&) const = default;
};

/// P(b = 1 | a = 1) = rho; P(b = 1 | a = 0) = b's base rate.
struct Cooccurrence {
  std::string a;
  std::string b;
  double rho = 0.9;

  bool operator==(const Cooccurrence&) const = default;
};

struct GenConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<AttributeSpec> attributes;
  std::vector<Cooccurrence> cooccurrence;
  std::size_t train = 8000;
  std::size_t val = 1000;
  std::size_t test = 2000;
  double noise = 0.08;             // Gaussian pixel noise sigma
  double background = 0.10;        // amplitude of the smooth random background
  double amplitude_jitter = 0.3;   // per-record relative amplitude spread
  std::uint64_t seed = 1;
  std::size_t workers = 1;         // generation shards; output does not depend on it

  /// Four attributes in two biased pairs: lipstick -> heavy_makeup and
  /// double_chin -> chubby.
  static GenConfig defaults();

  void validate(const RegionTemplate& tmpl = RegionTemplate::builtin()) const;
  std::size_t count(const std::string& split) const;
  std::size_t attribute_index(const std::string& name) const;

  bool operator==(const GenConfig&) const = default;
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

/// Reads a JSON config; missing keys keep their defaults().
GenConfig load_gen_config(const std::filesystem::path& path);

struct SampleRecord {
  std::string id;
  std::string path;  // relative to the manifest directory
  std::vector<int> labels;
  std::string split;

  bool operator==(const SampleRecord&) const = default;
};

struct VariantSpec {
  std::string kind;  // region_only | occlude
  std::vector<std::string> regions;
};

struct DatasetManifest {
  int format_version = 1;
  GenConfig config;
  std::vector<std::string> attributes;
  std::vector<VariantSpec> variants;  // edits applied on top of the generated images, in order
  std::vector<SampleRecord> records;
  std::filesystem::path root;         // directory holding manifest.jsonl

  std::size_t attribute_index(const std::string& name) const;
  std::vector<const SampleRecord*> split(const std::string& name) const;
  const SampleRecord& record(const std::string& id) const;
};

std::string record_id(const std::string& split, std::size_t index);

/// The label vector for one record, drawn from the (seed, split, index) stream.
std::vector<int> sample_labels(const GenConfig& config, const std::string& split, std::size_t index);

/// Renders one record's 8-bit grayscale image.
Image render_sample(const GenConfig& config, const std::string& split, std::size_t index,
                    const std::vector<int>& labels, const RegionTemplate& tmpl = RegionTemplate::builtin());

/// Pixel rectangle [x0, x1) x [y0, y1) whose pixel centers fall inside the
/// normalized region.
struct PixelRect {
  std::size_t x0, y0, x1, y1;
};
PixelRect pixel_rect(const Rect& region, std::size_t height, std::size_t width);

/// Writes out_dir/{split}/{id}.png and out_dir/manifest.jsonl.
DatasetManifest generate(const GenConfig& config, const std::filesystem::path& out_dir,
                         const RegionTemplate& tmpl = RegionTemplate::builtin());

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& dir);
DatasetManifest load_manifest(const std::filesystem::path& dir);

/// Applies an edit to a single image (in place).
void apply_variant(Image& image, const VariantSpec& variant, const RegionTemplate& tmpl = RegionTemplate::builtin());

/// region_only blanks everything outside the regions to background gray;
/// occlude paints an opaque dark band over them. Labels are carried over.
DatasetManifest make_variants(const DatasetManifest& manifest, const VariantSpec& variant,
                              const std::filesystem::path& out_dir,
                              const RegionTemplate& tmpl = RegionTemplate::builtin());

struct EvalSplits {
  std::vector<std::string> e1;  // test records with a and b
  std::vector<std::string> e2;  // test records with a but not b
};

/// Errors: unknown attribute; empty test split; empty E2 ("empty_e2").
EvalSplits split_e1_e2(const DatasetManifest& manifest, const std::string& attr_a, const std::string& attr_b);

struct CooccurrenceStats {
  std::size_t a_positive = 0;
  std::size_t both = 0;
  double rate() const { return a_positive ? static_cast<double>(both) / static_cast<double>(a_positive) : 0.0; }
  /// |rate - rho| <= 3 binomial standard deviations.
  bool within_three_sigma(double rho) const;
};
CooccurrenceStats cooccurrence(const DatasetManifest& manifest, const std::string& attr_a, const std::string& attr_b,
                               const std::string& split = "");

/// Images of a split decoded into memory (pixels as bytes, row-major per image).
struct ImageSet {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::string> ids;
  std::vector<std::uint8_t> pixels;
  std::vector<std::vector<int>> labels;

  std::size_t size() const { return ids.size(); }
  void append(const ImageSet& other);
};

/// Decodes every image of `split` (or the listed ids), checking sizes.
ImageSet load_images(const DatasetManifest& manifest, const std::string& split);
ImageSet load_images(const DatasetManifest& manifest, const std::vector<std::string>& ids);

}  // namespace attnsteer
