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

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "attnsteer/biasgen.hpp"
#include "attnsteer/error.hpp"
#include "attnsteer/trainer.hpp"

namespace httplib {
class Server;
}

namespace attnsteer {

// ---------------------------------------------------------------------------
// Run configuration: one structured file whose sections the CLI flags override.

struct RunConfig {
  GenConfig data = GenConfig::defaults();
  ModelSpec model;
  TrainConfig train;                 // baseline and comparison networks
  TrainConfig finetune = preset();   // w_a, w_g, epochs and CAM mode of the fine-tune
  std::string attr_a = "lipstick";
  std::string attr_b = "heavy_makeup";
  std::vector<RegionSelection> regions{{"mouth", 3.0}};

  static TrainConfig preset();
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Sections: data, model, train, finetune, experiment {pair, regions}.
/// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Operations shared by the CLI and the HTTP jobs, so both produce identical
// artifacts for identical parameters.

/// Baseline training on a dataset's train/val splits. The checkpoint records
/// the attribute names.
TrainResult run_train(const DatasetManifest& data, const ModelSpec& spec, const TrainConfig& config,
                      const ProgressFn& progress = {});

/// Plain continuation for `epochs` epochs on the train split.
TrainResult run_continue(const Checkpoint& start, const DatasetManifest& data, const TrainConfig& config,
                         std::size_t epochs, const ProgressFn& progress = {});

struct FinetuneRequest {
  std::string attribute;
  std::vector<RegionSelection> regions;
  TrainConfig config = RunConfig::preset();
};

/// Validates the request (regions, weights, attribute) without training.
/// Errors: empty_region_selection, unknown_region, bad_weight, unknown_attribute.
AttentionTarget finetune_target(const Checkpoint& parent, const DatasetManifest& data, const FinetuneRequest& request,
                                const RegionTemplate& tmpl = RegionTemplate::builtin());

TrainResult run_finetune(const Checkpoint& parent, const DatasetManifest& data, const FinetuneRequest& request,
                         const ProgressFn& progress = {}, const RegionTemplate& tmpl = RegionTemplate::builtin());

/// Report JSON for a checkpoint on a dataset's test split.
nlohmann::ordered_json run_eval(const Checkpoint& checkpoint, const DatasetManifest& data, const std::string& attr_a,
                                const std::string& attr_b, const std::vector<RegionSelection>& regions,
                                const RegionTemplate& tmpl = RegionTemplate::builtin());

/// Attribute index from a name or a decimal index, against `names`.
std::size_t resolve_attribute(const std::string& attr, const std::vector<std::string>& names);

/// Attribute names stored in a checkpoint (falls back to "attr0", "attr1", ...).
std::vector<std::string> checkpoint_attributes(const Checkpoint& checkpoint);

// ---------------------------------------------------------------------------
// Workspace: datasets/, checkpoints/, reports/, jobs/ and cache/ under one root.

struct CheckpointInfo {
  std::string id;
  std::string kind;
  std::string parent;
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::string digest;  // SHA-256 of the checkpoint file
};

class Workspace {
 public:
  /// Creates the directory layout if needed.
  explicit Workspace(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path datasets_dir() const { return root_ / "datasets"; }
  std::filesystem::path checkpoints_dir() const { return root_ / "checkpoints"; }
  std::filesystem::path reports_dir() const { return root_ / "reports"; }
  std::filesystem::path jobs_dir() const { return root_ / "jobs"; }
  std::filesystem::path cache_dir() const { return root_ / "cache"; }

  std::vector<std::string> datasets() const;
  /// The named dataset, or the only one when `name` is empty.
  /// Errors: unknown_dataset (404), dataset_required.
  std::shared_ptr<const DatasetManifest> dataset(const std::string& name) const;
  /// Decoded images of a split, cached in memory.
  std::shared_ptr<const ImageSet> images(const std::string& dataset, const std::string& split) const;

  /// Stores a checkpoint under its content id; returns the id.
  std::string add_checkpoint(const Checkpoint& checkpoint) const;
  Checkpoint checkpoint(const std::string& id) const;  // unknown_checkpoint (404)
  /// Every stored checkpoint, sorted by id.
  std::vector<CheckpointInfo> checkpoints() const;

  /// Stores a report under the hash of its serialization; returns the id.
  std::string add_report(const nlohmann::ordered_json& report) const;
  nlohmann::ordered_json report(const std::string& id) const;  // unknown_report (404)
  std::vector<std::string> reports() const;

  /// Datasets, checkpoints (with lineage) and reports with content digests.
  /// Throws DataError("workspace_corrupt") when a digest or lineage link is broken.
  nlohmann::ordered_json index() const;

 private:
  std::filesystem::path root_;
  mutable std::mutex mutex_;
  mutable std::map<std::string, std::shared_ptr<const DatasetManifest>> manifests_;
  mutable std::map<std::string, std::shared_ptr<const ImageSet>> image_cache_;
};

// ---------------------------------------------------------------------------
// Jobs

enum class JobState { queued, running, succeeded, failed };
std::string to_string(JobState s);

struct JobRecord {
  std::string id;
  std::string kind;  // train | finetune | eval | generate
  JobState state = JobState::queued;
  double progress = 0.0;
  std::vector<StepLog> loss_curve;
  std::string result_checkpoint;
  std::string result_report;
  std::string result_dataset;
  std::string error;
  std::string error_code;
  std::vector<std::string> warnings;
};

nlohmann::ordered_json job_to_json(const JobRecord& job);

/// What a running job may touch: progress, loss curve and results.
class JobContext {
 public:
  virtual ~JobContext() = default;
  virtual void step(double progress, const StepLog& log) = 0;
  virtual void set_checkpoint(const std::string& id) = 0;
  virtual void set_report(const std::string& id) = 0;
  virtual void set_dataset(const std::string& name) = 0;
  virtual void warn(const std::string& message) = 0;
};

using JobBody = std::function<void(JobContext&)>;

/// Single-owner job registry. Mutating jobs (train, finetune, generate) run
/// one at a time on a dedicated worker; eval jobs run on their own threads.
/// Snapshots are copies taken under the registry lock.
class JobRunner {
 public:
  explicit JobRunner(std::filesystem::path jobs_dir);
  ~JobRunner();
  JobRunner(const JobRunner&) = delete;
  JobRunner& operator=(const JobRunner&) = delete;

  /// Queues a job. Throws UsageError("training_busy") when `mutating` and a
  /// mutating job is queued or running.
  std::string submit(const std::string& kind, bool mutating, JobBody body);

  std::optional<JobRecord> get(const std::string& id) const;
  std::vector<JobRecord> list() const;
  bool busy() const;

  /// Blocks until the job reaches a terminal state.
  JobRecord wait(const std::string& id) const;

 private:
  struct Entry;
  void run(const std::shared_ptr<Entry>& entry);
  void worker_loop();
  void persist(const JobRecord& record) const;

  std::filesystem::path jobs_dir_;
  mutable std::mutex mutex_;
  mutable std::condition_variable changed_;
  std::map<std::string, std::shared_ptr<Entry>> jobs_;
  std::deque<std::shared_ptr<Entry>> queue_;
  std::size_t next_id_ = 1;
  bool stopping_ = false;
  std::thread worker_;
  std::vector<std::thread> side_threads_;
};

// ---------------------------------------------------------------------------
// HTTP API

struct ServiceOptions {
  std::filesystem::path ui_dir;  // static bundle served at /, optional
  RegionTemplate region_template = RegionTemplate::builtin();
  std::size_t page_size = 24;
};

/// JSON-over-HTTP API on top of a workspace and a job runner.
class ApiService {
 public:
  ApiService(Workspace& workspace, JobRunner& jobs, ServiceOptions options = {});
  void install(httplib::Server& server);

 private:
  Workspace& workspace_;
  JobRunner& jobs_;
  ServiceOptions options_;
};

/// HTTP status for an error code: 404 unknown ids, 409 busy, 422 degenerate
/// requests, 400 other usage errors, 500 otherwise.
int http_status(const Error& error);

/// Blocks serving the API on host:port until the process is stopped.
void serve(const std::filesystem::path& workspace, const std::string& host, int port, ServiceOptions options = {});

// ---------------------------------------------------------------------------
// CLI

/// Runs the command line; returns the process exit code (0 ok, 1 usage,
/// 2 data/IO, 3 numeric).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace attnsteer
