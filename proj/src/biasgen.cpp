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

#include "attnsteer/biasgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "attnsteer/error.hpp"

namespace attnsteer {

namespace fs = std::filesystem;

namespace {

constexpr std::uint8_t kGrayByte = 128;
constexpr std::uint8_t kOccluderByte = 16;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t split_code(const std::string& split) {
  for (std::size_t i = 0; i < kSplits.size(); ++i) {
    if (kSplits[i] == split) return i + 1;
  }
  throw UsageError("unknown split '" + split + "'");
}

enum class Stream : std::uint64_t { labels = 1, image = 2 };

/// Independent generator per (seed, split, index, stream), so records can be
/// produced in any order or on any worker.
class RecordRng {
 public:
  RecordRng(std::uint64_t seed, const std::string& split, std::size_t index, Stream stream)
      : engine_(splitmix64(splitmix64(splitmix64(splitmix64(seed) ^ split_code(split)) ^ index) ^
                           static_cast<std::uint64_t>(stream))) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

double pattern_value(const std::string& pattern, std::size_t i, std::size_t j, std::size_t w, std::size_t h,
                     int phase, double cx_offset, double cy_offset) {
  if (pattern == "hstripes") return ((j + static_cast<std::size_t>(phase)) % 2 == 0) ? 1.0 : -1.0;
  if (pattern == "checker") return ((i / 2 + j / 2 + static_cast<std::size_t>(phase)) % 2 == 0) ? 1.0 : -1.0;
  const double cx = static_cast<double>(w) / 2.0 + cx_offset;
  const double cy = static_cast<double>(h) / 2.0 + cy_offset;
  const double dx = static_cast<double>(i) + 0.5 - cx;
  const double dy = static_cast<double>(j) + 0.5 - cy;
  const double d = std::sqrt(dx * dx + dy * dy);
  const double size = static_cast<double>(std::min(w, h));
  if (pattern == "ring") {
    const double r0 = 0.32 * size;
    return std::exp(-(d - r0) * (d - r0) / (2.0 * 0.8 * 0.8));
  }
  // blob
  const double sigma = 0.25 * size;
  return std::exp(-d * d / (2.0 * sigma * sigma));
}

const std::set<std::string>& known_patterns() {
  static const std::set<std::string> p{"hstripes", "checker", "ring", "blob"};
  return p;
}

}  // namespace

GenConfig GenConfig::defaults() {
  GenConfig c;
  c.attributes = {
      {"lipstick", {"mouth"}, "hstripes", 0.12, 0.5},
      {"heavy_makeup", {"left-eye", "right-eye"}, "checker", 0.35, 0.1},
      {"double_chin", {"chin"}, "blob", 0.3, 0.4},
      {"chubby", {"left-cheek", "right-cheek"}, "ring", 0.3, 0.15},
  };
  c.cooccurrence = {{"lipstick", "heavy_makeup", 0.9}, {"double_chin", "chubby", 0.8}};
  return c;
}

std::size_t GenConfig::attribute_index(const std::string& name) const {
  for (std::size_t i = 0; i < attributes.size(); ++i) {
    if (attributes[i].name == name) return i;
  }
  throw UsageError("unknown attribute '" + name + "'", "unknown_attribute");
}

std::size_t GenConfig::count(const std::string& split) const {
  if (split == "train") return train;
  if (split == "val") return val;
  if (split == "test") return test;
  throw UsageError("unknown split '" + split + "'");
}

void GenConfig::validate(const RegionTemplate& tmpl) const {
  if (height < 8 || width < 8) throw UsageError("image size must be at least 8x8", "bad_config");
  if (attributes.empty()) throw UsageError("at least one attribute is required", "bad_config");
  if (train == 0 || val == 0 || test == 0) throw UsageError("split counts must be positive", "bad_config");
  if (!(noise >= 0.0) || !(background >= 0.0) || !(amplitude_jitter >= 0.0 && amplitude_jitter < 1.0)) {
    throw UsageError("noise, background and amplitude_jitter must be non-negative (jitter < 1)", "bad_config");
  }
  if (workers == 0) throw UsageError("workers must be positive", "bad_config");
  std::set<std::string> names;
  for (const auto& a : attributes) {
    if (!names.insert(a.name).second) throw UsageError("duplicate attribute '" + a.name + "'", "bad_config");
    if (a.regions.empty()) throw UsageError("attribute '" + a.name + "' has no region", "bad_config");
    if (!known_patterns().count(a.pattern)) {
      throw UsageError("attribute '" + a.name + "': unknown pattern '" + a.pattern + "'", "bad_config");
    }
    if (!(a.base_rate >= 0.0 && a.base_rate <= 1.0)) {
      throw UsageError("attribute '" + a.name + "': base_rate must lie in [0, 1]", "bad_config");
    }
    for (const auto& r : a.regions) {
      const PixelRect px = pixel_rect(tmpl.rect(r), height, width);
      if (px.x1 < px.x0 + 3 || px.y1 < px.y0 + 3) {
        throw DataError("region '" + r + "' is too small for a pattern at " + std::to_string(width) + "x" +
                            std::to_string(height),
                        "region_too_small");
      }
    }
  }
  std::set<std::string> driven;
  for (const auto& c : cooccurrence) {
    const std::size_t ia = attribute_index(c.a), ib = attribute_index(c.b);
    if (!(c.rho >= 0.0 && c.rho <= 1.0)) throw UsageError("rho must lie in [0, 1]", "bad_config");
    if (ia >= ib) throw UsageError("co-occurrence driver '" + c.a + "' must be listed before '" + c.b + "'", "bad_config");
    if (!driven.insert(c.b).second) throw UsageError("attribute '" + c.b + "' has two drivers", "bad_config");
  }
}

void to_json(nlohmann::json& j, const GenConfig& c) {
  nlohmann::json attrs = nlohmann::json::array();
  for (const auto& a : c.attributes) {
    attrs.push_back({{"name", a.name},
                     {"regions", a.regions},
                     {"pattern", a.pattern},
                     {"amplitude", a.amplitude},
                     {"base_rate", a.base_rate}});
  }
  nlohmann::json co = nlohmann::json::array();
  for (const auto& p : c.cooccurrence) co.push_back({{"a", p.a}, {"b", p.b}, {"rho", p.rho}});
  // `workers` is deliberately left out: it never changes the output.
  j = {{"height", c.height},
       {"width", c.width},
       {"attributes", attrs},
       {"cooccurrence", co},
       {"counts", {{"train", c.train}, {"val", c.val}, {"test", c.test}}},
       {"noise", c.noise},
       {"background", c.background},
       {"amplitude_jitter", c.amplitude_jitter},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, GenConfig& c) {
  GenConfig d = GenConfig::defaults();
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  if (j.contains("attributes")) {
    c.attributes.clear();
    for (const auto& a : j.at("attributes")) {
      AttributeSpec s;
      s.name = a.at("name").get<std::string>();
      s.regions = a.at("regions").get<std::vector<std::string>>();
      s.pattern = a.at("pattern").get<std::string>();
      s.amplitude = a.value("amplitude", 0.3);
      s.base_rate = a.value("base_rate", 0.5);
      c.attributes.push_back(std::move(s));
    }
  } else {
    c.attributes = d.attributes;
  }
  if (j.contains("cooccurrence")) {
    c.cooccurrence.clear();
    for (const auto& p : j.at("cooccurrence")) {
      c.cooccurrence.push_back({p.at("a").get<std::string>(), p.at("b").get<std::string>(), p.at("rho").get<double>()});
    }
  } else {
    c.cooccurrence = d.cooccurrence;
  }
  const auto counts = j.value("counts", nlohmann::json::object());
  c.train = counts.value("train", d.train);
  c.val = counts.value("val", d.val);
  c.test = counts.value("test", d.test);
  c.noise = j.value("noise", d.noise);
  c.background = j.value("background", d.background);
  c.amplitude_jitter = j.value("amplitude_jitter", d.amplitude_jitter);
  c.seed = j.value("seed", d.seed);
  c.workers = j.value("workers", d.workers);
}

GenConfig load_gen_config(const fs::path& path) {
  try {
    auto j = nlohmann::json::parse(read_text(path));
    // Accept either a bare generator config or a combined file with a "data" section.
    return (j.contains("data") ? j.at("data") : j).get<GenConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what(), "bad_config");
  }
}

std::size_t DatasetManifest::attribute_index(const std::string& name) const {
  for (std::size_t i = 0; i < attributes.size(); ++i) {
    if (attributes[i] == name) return i;
  }
  throw UsageError("unknown attribute '" + name + "'", "unknown_attribute");
}

std::vector<const SampleRecord*> DatasetManifest::split(const std::string& name) const {
  std::vector<const SampleRecord*> out;
  for (const auto& r : records) {
    if (r.split == name) out.push_back(&r);
  }
  return out;
}

const SampleRecord& DatasetManifest::record(const std::string& id) const {
  for (const auto& r : records) {
    if (r.id == id) return r;
  }
  throw UsageError("unknown sample '" + id + "'", "unknown_sample");
}

std::string record_id(const std::string& split, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06zu", index);
  return split + "-" + buf;
}

std::vector<int> sample_labels(const GenConfig& config, const std::string& split, std::size_t index) {
  RecordRng rng(config.seed, split, index, Stream::labels);
  std::vector<int> labels(config.attributes.size(), 0);
  for (std::size_t k = 0; k < config.attributes.size(); ++k) {
    double p = config.attributes[k].base_rate;
    for (const auto& c : config.cooccurrence) {
      if (c.b == config.attributes[k].name && labels[config.attribute_index(c.a)] == 1) p = c.rho;
    }
    labels[k] = rng.uniform() < p ? 1 : 0;
  }
  return labels;
}

PixelRect pixel_rect(const Rect& region, std::size_t height, std::size_t width) {
  auto lo = [](double edge, std::size_t n) {
    // first pixel whose center (i + 0.5) / n is >= edge
    const double i = std::ceil(edge * static_cast<double>(n) - 0.5);
    return static_cast<std::size_t>(std::clamp(i, 0.0, static_cast<double>(n)));
  };
  return {lo(region.x0, width), lo(region.y0, height), lo(region.x1, width), lo(region.y1, height)};
}

Image render_sample(const GenConfig& config, const std::string& split, std::size_t index,
                    const std::vector<int>& labels, const RegionTemplate& tmpl) {
  if (labels.size() != config.attributes.size()) throw UsageError("label vector does not match attributes");
  RecordRng rng(config.seed, split, index, Stream::image);
  const std::size_t h = config.height, w = config.width;
  std::vector<double> v(h * w, 0.5);

  // Smooth background: three low-frequency waves.
  for (int k = 0; k < 3; ++k) {
    const double fx = 0.5 + rng.uniform(), fy = 0.5 + rng.uniform();
    const double sx = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double phase = 2.0 * std::numbers::pi * rng.uniform();
    const double amp = config.background * (0.5 + 0.5 * rng.uniform()) * (2.0 / 3.0);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double t = sx * fx * static_cast<double>(x) / static_cast<double>(w) + fy * static_cast<double>(y) / static_cast<double>(h);
        v[y * w + x] += amp * std::cos(2.0 * std::numbers::pi * t + phase);
      }
    }
  }

  // Faint face oval.
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = ((static_cast<double>(x) + 0.5) / static_cast<double>(w) - 0.5) / 0.44;
      const double dy = ((static_cast<double>(y) + 0.5) / static_cast<double>(h) - 0.52) / 0.48;
      if (dx * dx + dy * dy <= 1.0) v[y * w + x] += 0.06;
    }
  }

  // Attribute patterns. Draws are consumed for every attribute so that the
  // noise field does not depend on the labels.
  for (std::size_t k = 0; k < config.attributes.size(); ++k) {
    const auto& attr = config.attributes[k];
    const double amp = attr.amplitude * (1.0 + config.amplitude_jitter * (2.0 * rng.uniform() - 1.0));
    const int phase = rng.uniform() < 0.5 ? 0 : 1;
    const double ox = rng.uniform() - 0.5, oy = rng.uniform() - 0.5;
    if (labels[k] != 1) continue;
    for (const auto& region : attr.regions) {
      const PixelRect r = pixel_rect(tmpl.rect(region), h, w);
      const std::size_t rw = r.x1 - r.x0, rh = r.y1 - r.y0;
      for (std::size_t j = 0; j < rh; ++j) {
        for (std::size_t i = 0; i < rw; ++i) {
          v[(r.y0 + j) * w + r.x0 + i] += amp * pattern_value(attr.pattern, i, j, rw, rh, phase, ox, oy);
        }
      }
    }
  }

  Image img{w, h, 1, std::vector<std::uint8_t>(h * w)};
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double value = std::clamp(v[i] + config.noise * rng.normal(), 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(value * 255.0));
  }
  return img;
}

namespace {

nlohmann::json header_json(const DatasetManifest& m) {
  nlohmann::json variants = nlohmann::json::array();
  for (const auto& v : m.variants) variants.push_back({{"kind", v.kind}, {"regions", v.regions}});
  return {{"type", "header"},
          {"format_version", m.format_version},
          {"attributes", m.attributes},
          {"config", m.config},
          {"variants", variants}};
}

}  // namespace

void save_manifest(const DatasetManifest& manifest, const fs::path& dir) {
  std::string text = header_json(manifest).dump() + "\n";
  for (const auto& r : manifest.records) {
    nlohmann::json j = {{"id", r.id}, {"path", r.path}, {"labels", r.labels}, {"split", r.split}};
    text += j.dump() + "\n";
  }
  write_text(dir / "manifest.jsonl", text);
}

DatasetManifest load_manifest(const fs::path& dir) {
  const fs::path file = fs::is_directory(dir) ? dir / "manifest.jsonl" : dir;
  std::istringstream in(read_text(file));
  DatasetManifest m;
  m.root = file.parent_path();
  std::string line;
  std::size_t line_no = 0;
  std::set<std::string> ids;
  try {
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      auto j = nlohmann::json::parse(line);
      if (line_no == 1) {
        if (j.value("type", "") != "header") throw DataError(file.string() + ": missing header record", "bad_manifest");
        m.format_version = j.at("format_version").get<int>();
        if (m.format_version != 1) {
          throw DataError(file.string() + ": unsupported manifest format_version " + std::to_string(m.format_version),
                          "bad_manifest");
        }
        m.attributes = j.at("attributes").get<std::vector<std::string>>();
        m.config = j.at("config").get<GenConfig>();
        for (const auto& v : j.value("variants", nlohmann::json::array())) {
          m.variants.push_back({v.at("kind").get<std::string>(), v.at("regions").get<std::vector<std::string>>()});
        }
        continue;
      }
      SampleRecord r{j.at("id").get<std::string>(), j.at("path").get<std::string>(),
                     j.at("labels").get<std::vector<int>>(), j.at("split").get<std::string>()};
      if (r.labels.size() != m.attributes.size()) {
        throw DataError(file.string() + ":" + std::to_string(line_no) + ": label vector has wrong length", "bad_manifest");
      }
      if (!ids.insert(r.id).second) throw DataError(file.string() + ": duplicate id " + r.id, "bad_manifest");
      m.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(file.string() + ":" + std::to_string(line_no) + ": " + e.what(), "bad_manifest");
  }
  if (line_no == 0) throw DataError(file.string() + ": empty manifest", "bad_manifest");
  return m;
}

namespace {

/// Runs body(i) for i in [0, n) on `workers` threads; results land by index.
template <typename Body>
void parallel_for(std::size_t n, std::size_t workers, Body body) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += workers) body(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

DatasetManifest generate(const GenConfig& config, const fs::path& out_dir, const RegionTemplate& tmpl) {
  config.validate(tmpl);
  DatasetManifest m;
  m.config = config;
  m.config.workers = 1;
  for (const auto& a : config.attributes) m.attributes.push_back(a.name);
  m.root = out_dir;

  std::vector<std::pair<std::string, std::size_t>> jobs;
  for (const auto& split : kSplits) {
    for (std::size_t i = 0; i < config.count(split); ++i) jobs.emplace_back(split, i);
  }
  m.records.resize(jobs.size());
  parallel_for(jobs.size(), config.workers, [&](std::size_t n) {
    const auto& [split, index] = jobs[n];
    SampleRecord r;
    r.id = record_id(split, index);
    r.split = split;
    r.path = split + "/" + r.id + ".png";
    r.labels = sample_labels(config, split, index);
    write_png(out_dir / r.path, render_sample(config, split, index, r.labels, tmpl));
    m.records[n] = std::move(r);
  });
  save_manifest(m, out_dir);
  return m;
}

void apply_variant(Image& image, const VariantSpec& variant, const RegionTemplate& tmpl) {
  if (variant.kind != "region_only" && variant.kind != "occlude") {
    throw UsageError("unknown variant kind '" + variant.kind + "' (expected region_only or occlude)");
  }
  if (variant.regions.empty()) throw UsageError("variant needs at least one region", "empty_region_selection");
  std::vector<std::uint8_t> inside(image.width * image.height, 0);
  for (const auto& name : variant.regions) {
    const PixelRect r = pixel_rect(tmpl.rect(name), image.height, image.width);
    for (std::size_t y = r.y0; y < r.y1; ++y) {
      for (std::size_t x = r.x0; x < r.x1; ++x) inside[y * image.width + x] = 1;
    }
  }
  for (std::size_t p = 0; p < inside.size(); ++p) {
    const bool region_only = variant.kind == "region_only";
    if (region_only ? !inside[p] : inside[p]) {
      for (std::size_t c = 0; c < image.channels; ++c) {
        image.pixels[p * image.channels + c] = region_only ? kGrayByte : kOccluderByte;
      }
    }
  }
}

DatasetManifest make_variants(const DatasetManifest& manifest, const VariantSpec& variant, const fs::path& out_dir,
                              const RegionTemplate& tmpl) {
  for (const auto& name : variant.regions) tmpl.rect(name);
  DatasetManifest out = manifest;
  out.root = out_dir;
  out.variants.push_back(variant);
  parallel_for(manifest.records.size(), manifest.config.workers, [&](std::size_t n) {
    const auto& r = manifest.records[n];
    Image img = read_png(manifest.root / r.path);
    apply_variant(img, variant, tmpl);
    write_png(out_dir / r.path, img);
  });
  save_manifest(out, out_dir);
  return out;
}

EvalSplits split_e1_e2(const DatasetManifest& manifest, const std::string& attr_a, const std::string& attr_b) {
  const std::size_t a = manifest.attribute_index(attr_a), b = manifest.attribute_index(attr_b);
  if (a == b) throw UsageError("E1/E2 need two different attributes", "bad_pair");
  auto test = manifest.split("test");
  if (test.empty()) throw DataError("manifest has no test records", "empty_split");
  EvalSplits s;
  for (const auto* r : test) {
    if (r->labels[a] != 1) continue;
    (r->labels[b] == 1 ? s.e1 : s.e2).push_back(r->id);
  }
  if (s.e2.empty()) {
    throw UsageError("E2 (" + attr_a + " without " + attr_b +
                         ") is empty; regenerate with a lower co-occurrence rate rho",
                     "empty_e2");
  }
  return s;
}

bool CooccurrenceStats::within_three_sigma(double rho) const {
  if (a_positive == 0) return false;
  const double sigma = std::sqrt(rho * (1.0 - rho) / static_cast<double>(a_positive));
  return std::abs(rate() - rho) <= 3.0 * sigma + 1e-12;
}

CooccurrenceStats cooccurrence(const DatasetManifest& manifest, const std::string& attr_a, const std::string& attr_b,
                               const std::string& split) {
  const std::size_t a = manifest.attribute_index(attr_a), b = manifest.attribute_index(attr_b);
  CooccurrenceStats s;
  for (const auto& r : manifest.records) {
    if (!split.empty() && r.split != split) continue;
    if (r.labels[a] != 1) continue;
    ++s.a_positive;
    s.both += r.labels[b] == 1;
  }
  return s;
}

void ImageSet::append(const ImageSet& other) {
  if (size() == 0) {
    height = other.height;
    width = other.width;
  } else if (other.size() && (other.height != height || other.width != width)) {
    throw DataError("cannot mix image sizes", "bad_image");
  }
  ids.insert(ids.end(), other.ids.begin(), other.ids.end());
  pixels.insert(pixels.end(), other.pixels.begin(), other.pixels.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
}

namespace {

ImageSet load_records(const DatasetManifest& manifest, const std::vector<const SampleRecord*>& records) {
  ImageSet set;
  set.height = manifest.config.height;
  set.width = manifest.config.width;
  const std::size_t px = set.height * set.width;
  set.pixels.resize(records.size() * px);
  for (std::size_t n = 0; n < records.size(); ++n) {
    const auto& r = *records[n];
    Image img = read_png(manifest.root / r.path);
    if (img.width != set.width || img.height != set.height || img.channels != 1) {
      throw DataError(r.path + ": expected " + std::to_string(set.width) + "x" + std::to_string(set.height) +
                          " grayscale, got " + std::to_string(img.width) + "x" + std::to_string(img.height) + "x" +
                          std::to_string(img.channels),
                      "bad_image");
    }
    std::copy(img.pixels.begin(), img.pixels.end(), set.pixels.begin() + static_cast<std::ptrdiff_t>(n * px));
    set.ids.push_back(r.id);
    set.labels.push_back(r.labels);
  }
  return set;
}

}  // namespace

ImageSet load_images(const DatasetManifest& manifest, const std::string& split) {
  return load_records(manifest, manifest.split(split));
}

ImageSet load_images(const DatasetManifest& manifest, const std::vector<std::string>& ids) {
  std::vector<const SampleRecord*> records;
  for (const auto& id : ids) records.push_back(&manifest.record(id));
  return load_records(manifest, records);
}

}  // namespace attnsteer
