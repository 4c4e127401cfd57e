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

#include "attnsteer/service.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>

#include "attnsteer/error.hpp"
#include "attnsteer/io.hpp"

namespace attnsteer {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// RunConfig

TrainConfig RunConfig::preset() {
  TrainConfig c;
  c.weights = LossWeights::preset("lipstick");
  c.finetune_epochs = 1;
  c.clip_norm = 1.0;
  return c;
}

void RunConfig::validate() const {
  data.validate();
  model.validate();
  train.validate();
  finetune.validate();
  if (model.num_attributes != data.attributes.size()) {
    throw UsageError("model has " + std::to_string(model.num_attributes) + " outputs but the data config lists " +
                         std::to_string(data.attributes.size()) + " attributes",
                     "bad_config");
  }
  data.attribute_index(attr_a);
  data.attribute_index(attr_b);
  if (regions.empty()) throw UsageError("experiment needs at least one region", "empty_region_selection");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"data", c.data},
       {"model", c.model},
       {"train", c.train},
       {"finetune", c.finetune},
       {"experiment", {{"pair", {c.attr_a, c.attr_b}}, {"regions", format_region_list(c.regions)}}}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  if (j.contains("data")) c.data = j.at("data").get<GenConfig>();
  if (j.contains("model")) {
    c.model = j.at("model").get<ModelSpec>();
  } else {
    c.model.num_attributes = c.data.attributes.size();
    c.model.fc_widths.back() = c.model.num_attributes;
  }
  if (j.contains("train")) from_json(j.at("train"), c.train);
  if (j.contains("finetune")) from_json(j.at("finetune"), c.finetune);
  if (j.contains("experiment")) {
    const auto& e = j.at("experiment");
    if (e.contains("pair")) {
      const auto pair = e.at("pair").get<std::vector<std::string>>();
      if (pair.size() != 2) throw UsageError("experiment.pair must name two attributes", "bad_config");
      c.attr_a = pair[0];
      c.attr_b = pair[1];
    }
    if (e.contains("regions")) c.regions = parse_region_list(e.at("regions").get<std::string>());
  }
}

RunConfig load_run_config(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end()).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what(), "bad_config");
  }
}

// ---------------------------------------------------------------------------
// Shared operations

std::size_t resolve_attribute(const std::string& attr, const std::vector<std::string>& names) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == attr) return i;
  }
  std::size_t index = 0;
  const auto [end, ec] = std::from_chars(attr.data(), attr.data() + attr.size(), index);
  if (ec == std::errc() && end == attr.data() + attr.size() && !attr.empty()) {
    if (index < names.size()) return index;
    throw UsageError("attribute index " + attr + " out of range (model has " + std::to_string(names.size()) + ")",
                     "attribute_out_of_range");
  }
  throw UsageError("unknown attribute '" + attr + "'", "unknown_attribute");
}

std::vector<std::string> checkpoint_attributes(const Checkpoint& checkpoint) {
  if (checkpoint.meta.extra.contains("attributes")) {
    return checkpoint.meta.extra.at("attributes").get<std::vector<std::string>>();
  }
  std::vector<std::string> names;
  for (std::size_t i = 0; i < checkpoint.state.spec.num_attributes; ++i) names.push_back("attr" + std::to_string(i));
  return names;
}

namespace {

void check_compatible(const Checkpoint& checkpoint, const DatasetManifest& data) {
  if (checkpoint.state.spec.num_attributes != data.attributes.size()) {
    throw DataError("checkpoint predicts " + std::to_string(checkpoint.state.spec.num_attributes) +
                        " attributes but the dataset has " + std::to_string(data.attributes.size()),
                    "shape_mismatch");
  }
  if (checkpoint.meta.extra.contains("attributes") && checkpoint_attributes(checkpoint) != data.attributes) {
    throw DataError("checkpoint attribute names differ from the dataset's", "shape_mismatch");
  }
}

}  // namespace

TrainResult run_train(const DatasetManifest& data, const ModelSpec& spec, const TrainConfig& config,
                      const ProgressFn& progress) {
  if (spec.num_attributes != data.attributes.size()) {
    throw UsageError("model spec has " + std::to_string(spec.num_attributes) + " outputs, dataset has " +
                         std::to_string(data.attributes.size()) + " attributes",
                     "bad_config");
  }
  TrainResult r = train_baseline(load_images(data, "train"), load_images(data, "val"), spec, config, progress);
  r.checkpoint.meta.extra["attributes"] = data.attributes;
  return r;
}

TrainResult run_continue(const Checkpoint& start, const DatasetManifest& data, const TrainConfig& config,
                         std::size_t epochs, const ProgressFn& progress) {
  check_compatible(start, data);
  TrainResult r = continue_training(start, load_images(data, "train"), config, epochs, progress);
  r.checkpoint.meta.extra["attributes"] = data.attributes;
  return r;
}

AttentionTarget finetune_target(const Checkpoint& parent, const DatasetManifest& data, const FinetuneRequest& request,
                                const RegionTemplate& tmpl) {
  if (request.regions.empty()) throw UsageError("no region selected", "empty_region_selection");
  check_compatible(parent, data);
  request.config.validate();
  const auto [h, w] = parent.state.spec.cam_grid();
  AttentionTarget t;
  t.attribute = resolve_attribute(request.attribute, data.attributes);
  t.region = rasterize(tmpl, request.regions, h, w);
  return t;
}

TrainResult run_finetune(const Checkpoint& parent, const DatasetManifest& data, const FinetuneRequest& request,
                         const ProgressFn& progress, const RegionTemplate& tmpl) {
  const AttentionTarget target = finetune_target(parent, data, request, tmpl);
  TrainResult r = finetune(parent, load_images(data, "train"), target, request.config, progress);
  r.checkpoint.meta.extra["attributes"] = data.attributes;
  r.checkpoint.meta.extra["attribute"] = data.attributes[target.attribute];
  return r;
}

nlohmann::ordered_json run_eval(const Checkpoint& checkpoint, const DatasetManifest& data, const std::string& attr_a,
                                const std::string& attr_b, const std::vector<RegionSelection>& regions,
                                const RegionTemplate& tmpl) {
  check_compatible(checkpoint, data);
  if (regions.empty()) throw UsageError("no region selected", "empty_region_selection");
  const EvalReport report = evaluate(checkpoint, data, attr_a, attr_b, regions, tmpl);
  return report_to_json(report);
}

// ---------------------------------------------------------------------------
// Workspace

namespace {

void write_atomically(const fs::path& path, std::span<const std::uint8_t> bytes) {
  const fs::path tmp = path.string() + ".tmp";
  write_file(tmp, bytes);
  fs::rename(tmp, path);
}

std::span<const std::uint8_t> as_bytes(const std::string& s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

bool safe_name(const std::string& s) {
  return !s.empty() && s.size() <= 128 && std::all_of(s.begin(), s.end(), [](char c) {
           return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
         }) && s.front() != '.';
}

}  // namespace

Workspace::Workspace(fs::path root) : root_(std::move(root)) {
  for (const auto& d : {datasets_dir(), checkpoints_dir(), reports_dir(), jobs_dir(), cache_dir()}) {
    fs::create_directories(d);
  }
}

std::vector<std::string> Workspace::datasets() const {
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(datasets_dir())) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.jsonl")) names.push_back(entry.path().filename());
  }
  std::sort(names.begin(), names.end());
  return names;
}

std::shared_ptr<const DatasetManifest> Workspace::dataset(const std::string& name) const {
  std::string chosen = name;
  if (chosen.empty()) {
    const auto all = datasets();
    if (all.size() != 1) {
      throw UsageError("workspace has " + std::to_string(all.size()) + " datasets; name one", "dataset_required");
    }
    chosen = all.front();
  }
  if (!safe_name(chosen) || !fs::exists(datasets_dir() / chosen / "manifest.jsonl")) {
    throw UsageError("unknown dataset '" + chosen + "'", "unknown_dataset");
  }
  std::lock_guard lock(mutex_);
  auto& slot = manifests_[chosen];
  if (!slot) slot = std::make_shared<const DatasetManifest>(load_manifest(datasets_dir() / chosen));
  return slot;
}

std::shared_ptr<const ImageSet> Workspace::images(const std::string& dataset_name, const std::string& split) const {
  const auto manifest = dataset(dataset_name);
  const std::string key = manifest->root.string() + "#" + split;
  {
    std::lock_guard lock(mutex_);
    if (auto it = image_cache_.find(key); it != image_cache_.end()) return it->second;
  }
  auto set = std::make_shared<const ImageSet>(load_images(*manifest, split));
  std::lock_guard lock(mutex_);
  return image_cache_.emplace(key, set).first->second;
}

std::string Workspace::add_checkpoint(const Checkpoint& checkpoint) const {
  const std::string id = checkpoint_id(checkpoint);
  const fs::path path = checkpoints_dir() / (id + ".ckpt");
  if (!fs::exists(path)) write_atomically(path, serialize_checkpoint(checkpoint));
  return id;
}

Checkpoint Workspace::checkpoint(const std::string& id) const {
  const fs::path path = checkpoints_dir() / (id + ".ckpt");
  if (!safe_name(id) || !fs::exists(path)) throw UsageError("unknown checkpoint '" + id + "'", "unknown_checkpoint");
  return load_checkpoint(path);
}

std::vector<CheckpointInfo> Workspace::checkpoints() const {
  std::vector<CheckpointInfo> out;
  for (const auto& entry : fs::directory_iterator(checkpoints_dir())) {
    if (entry.path().extension() != ".ckpt") continue;
    const auto bytes = read_file(entry.path());
    const Checkpoint ck = parse_checkpoint(bytes);
    out.push_back({entry.path().stem(), ck.meta.kind, ck.meta.parent, ck.meta.epoch, ck.meta.seed, sha256_hex(bytes)});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

std::string Workspace::add_report(const nlohmann::ordered_json& report) const {
  const std::string text = report.dump(2) + "\n";
  const std::string id = sha256_hex(text).substr(0, 16);
  const fs::path path = reports_dir() / (id + ".json");
  if (!fs::exists(path)) write_atomically(path, as_bytes(text));
  return id;
}

nlohmann::ordered_json Workspace::report(const std::string& id) const {
  const fs::path path = reports_dir() / (id + ".json");
  if (!safe_name(id) || !fs::exists(path)) throw UsageError("unknown report '" + id + "'", "unknown_report");
  const auto bytes = read_file(path);
  return nlohmann::ordered_json::parse(bytes.begin(), bytes.end());
}

std::vector<std::string> Workspace::reports() const {
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(reports_dir())) {
    if (entry.path().extension() == ".json") ids.push_back(entry.path().stem());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

nlohmann::ordered_json Workspace::index() const {
  nlohmann::ordered_json j;
  j["datasets"] = nlohmann::ordered_json::array();
  for (const auto& name : datasets()) {
    const auto bytes = read_file(datasets_dir() / name / "manifest.jsonl");
    const auto m = dataset(name);
    j["datasets"].push_back({{"name", name},
                             {"attributes", m->attributes},
                             {"records", m->records.size()},
                             {"manifest_digest", sha256_hex(bytes)}});
  }
  std::vector<CheckpointInfo> cks;
  try {
    cks = checkpoints();
  } catch (const DataError& e) {
    throw DataError(std::string("unreadable checkpoint in workspace: ") + e.what(), "workspace_corrupt");
  }
  std::map<std::string, std::string> parent;
  j["checkpoints"] = nlohmann::ordered_json::array();
  for (const auto& c : cks) {
    if (c.digest.substr(0, 16) != c.id) {
      throw DataError("checkpoint " + c.id + " does not match its digest", "workspace_corrupt");
    }
    parent[c.id] = c.parent;
    j["checkpoints"].push_back({{"id", c.id},
                                {"kind", c.kind},
                                {"parent", c.parent.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(c.parent)},
                                {"epoch", c.epoch},
                                {"seed", c.seed},
                                {"digest", c.digest}});
  }
  // Lineage links are content hashes of earlier files, so a cycle means
  // tampering; walk every chain anyway.
  for (const auto& c : cks) {
    std::set<std::string> seen{c.id};
    for (std::string p = c.parent; !p.empty() && parent.count(p); p = parent[p]) {
      if (!seen.insert(p).second) throw DataError("checkpoint lineage has a cycle at " + p, "workspace_corrupt");
    }
  }
  j["reports"] = nlohmann::ordered_json::array();
  for (const auto& id : reports()) {
    const auto bytes = read_file(reports_dir() / (id + ".json"));
    const std::string digest = sha256_hex(bytes);
    if (digest.substr(0, 16) != id) throw DataError("report " + id + " does not match its digest", "workspace_corrupt");
    j["reports"].push_back({{"id", id}, {"digest", digest}});
  }
  j["templates"] = {"builtin"};
  return j;
}

// ---------------------------------------------------------------------------
// Jobs

std::string to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::succeeded: return "succeeded";
    case JobState::failed: return "failed";
  }
  return "unknown";
}

nlohmann::ordered_json job_to_json(const JobRecord& job) {
  nlohmann::ordered_json curve = nlohmann::ordered_json::array();
  for (const auto& s : job.loss_curve) {
    curve.push_back({{"step", s.step},
                     {"epoch", s.epoch},
                     {"loss_a", s.loss_a},
                     {"loss_g_soft", s.loss_g_soft},
                     {"loss_g_hard", s.loss_g_hard},
                     {"combined", s.combined}});
  }
  auto opt = [](const std::string& s) { return s.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(s); };
  nlohmann::ordered_json j;
  j["id"] = job.id;
  j["kind"] = job.kind;
  j["state"] = to_string(job.state);
  j["progress"] = job.progress;
  j["loss_curve"] = curve;
  j["result"] = {{"checkpoint", opt(job.result_checkpoint)},
                 {"report", opt(job.result_report)},
                 {"dataset", opt(job.result_dataset)}};
  j["error"] = job.error.empty() ? nlohmann::ordered_json(nullptr)
                                 : nlohmann::ordered_json{{"code", job.error_code}, {"message", job.error}};
  j["warnings"] = job.warnings;
  return j;
}

struct JobRunner::Entry {
  JobRecord record;
  bool mutating = false;
  JobBody body;
};

namespace {

class EntryContext : public JobContext {
 public:
  EntryContext(JobRecord& record, std::mutex& mutex, std::condition_variable& changed)
      : record_(record), mutex_(mutex), changed_(changed) {}

  void step(double progress, const StepLog& log) override {
    std::lock_guard lock(mutex_);
    record_.progress = std::max(record_.progress, std::min(progress, 1.0));
    record_.loss_curve.push_back(log);
    changed_.notify_all();
  }
  void set_checkpoint(const std::string& id) override { set(record_.result_checkpoint, id); }
  void set_report(const std::string& id) override { set(record_.result_report, id); }
  void set_dataset(const std::string& name) override { set(record_.result_dataset, name); }
  void warn(const std::string& message) override {
    std::lock_guard lock(mutex_);
    record_.warnings.push_back(message);
  }

 private:
  void set(std::string& field, const std::string& value) {
    std::lock_guard lock(mutex_);
    field = value;
  }

  JobRecord& record_;
  std::mutex& mutex_;
  std::condition_variable& changed_;
};

}  // namespace

JobRunner::JobRunner(fs::path jobs_dir) : jobs_dir_(std::move(jobs_dir)) {
  fs::create_directories(jobs_dir_);
  // Continue numbering after jobs persisted by an earlier server.
  for (const auto& entry : fs::directory_iterator(jobs_dir_)) {
    const std::string stem = entry.path().stem();
    if (entry.path().extension() != ".json" || stem.rfind("job-", 0) != 0) continue;
    std::size_t n = 0;
    std::from_chars(stem.data() + 4, stem.data() + stem.size(), n);
    next_id_ = std::max(next_id_, n + 1);
  }
  worker_ = std::thread([this] { worker_loop(); });
}

JobRunner::~JobRunner() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
    changed_.notify_all();
  }
  worker_.join();
  for (auto& t : side_threads_) t.join();
}

std::string JobRunner::submit(const std::string& kind, bool mutating, JobBody body) {
  std::lock_guard lock(mutex_);
  if (mutating) {
    for (const auto& [_, e] : jobs_) {
      if (e->mutating && (e->record.state == JobState::queued || e->record.state == JobState::running)) {
        throw UsageError("a training job (" + e->record.id + ") is already " + to_string(e->record.state),
                         "training_busy");
      }
    }
  }
  char id[32];
  std::snprintf(id, sizeof(id), "job-%06zu", next_id_++);
  auto entry = std::make_shared<Entry>();
  entry->record.id = id;
  entry->record.kind = kind;
  entry->mutating = mutating;
  entry->body = std::move(body);
  jobs_[id] = entry;
  if (mutating) {
    queue_.push_back(entry);
  } else {
    side_threads_.emplace_back([this, entry] { run(entry); });
  }
  changed_.notify_all();
  return id;
}

void JobRunner::run(const std::shared_ptr<Entry>& entry) {
  {
    std::lock_guard lock(mutex_);
    entry->record.state = JobState::running;
    changed_.notify_all();
  }
  EntryContext context(entry->record, mutex_, changed_);
  std::string error, code;
  try {
    entry->body(context);
  } catch (const Error& e) {
    error = e.what();
    code = e.code();
  } catch (const std::exception& e) {
    error = e.what();
    code = "internal";
  }
  JobRecord snapshot;
  {
    std::lock_guard lock(mutex_);
    snapshot = entry->record;
  }
  if (error.empty()) {
    snapshot.state = JobState::succeeded;
    snapshot.progress = 1.0;
  } else {
    snapshot.state = JobState::failed;
    snapshot.error = error;
    snapshot.error_code = code;
  }
  // The record reaches disk before pollers can observe the terminal state.
  try {
    persist(snapshot);
  } catch (const std::exception&) {
    // Persistence is best effort; the in-memory record stays authoritative.
  }
  std::lock_guard lock(mutex_);
  entry->record = snapshot;
  entry->body = nullptr;
  changed_.notify_all();
}

void JobRunner::worker_loop() {
  for (;;) {
    std::shared_ptr<Entry> next;
    {
      std::unique_lock lock(mutex_);
      changed_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;
      next = queue_.front();
      queue_.pop_front();
    }
    run(next);
  }
}

void JobRunner::persist(const JobRecord& record) const {
  const std::string text = job_to_json(record).dump(2) + "\n";
  write_atomically(jobs_dir_ / (record.id + ".json"), as_bytes(text));
  const std::string csv = loss_csv(record.loss_curve);
  write_atomically(jobs_dir_ / (record.id + ".csv"), as_bytes(csv));
}

std::optional<JobRecord> JobRunner::get(const std::string& id) const {
  std::lock_guard lock(mutex_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) return std::nullopt;
  return it->second->record;
}

std::vector<JobRecord> JobRunner::list() const {
  std::lock_guard lock(mutex_);
  std::vector<JobRecord> out;
  for (const auto& [_, e] : jobs_) out.push_back(e->record);
  return out;
}

bool JobRunner::busy() const {
  std::lock_guard lock(mutex_);
  for (const auto& [_, e] : jobs_) {
    if (e->mutating && (e->record.state == JobState::queued || e->record.state == JobState::running)) return true;
  }
  return false;
}

JobRecord JobRunner::wait(const std::string& id) const {
  std::unique_lock lock(mutex_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) throw UsageError("unknown job '" + id + "'", "unknown_job");
  const auto entry = it->second;
  changed_.wait(lock, [&] {
    return entry->record.state == JobState::succeeded || entry->record.state == JobState::failed;
  });
  return entry->record;
}

}  // namespace attnsteer
