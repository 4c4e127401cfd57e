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

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "attnsteer/biasgen.hpp"
#include "attnsteer/gradcam.hpp"
#include "attnsteer/model.hpp"
#include "attnsteer/objective.hpp"

namespace attnsteer {

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 20;  // baseline training
  std::size_t patience = 3;     // epochs without validation improvement
  std::size_t finetune_epochs = 1;
  LossWeights weights{1.0, 0.0};
  CamMode cam_mode = CamMode::train_full;
  double degenerate_skip = 0.9;  // skip loss_g when more than this share of positives is degenerate
  double clip_norm = 0.0;        // global gradient-norm clip before the update; 0 disables
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Keys missing from `j` keep the value already in `c`.
void from_json(const nlohmann::json& j, TrainConfig& c);

/// One optimizer step as logged to the loss CSV.
struct StepLog {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss_a = 0.0;
  double loss_g_soft = 0.0;
  double loss_g_hard = 0.0;
  double combined = 0.0;
  double grad_norm = 0.0;     // before clipping
  std::size_t cam_rows = 0;   // attribute-positive, non-degenerate rows feeding loss_g
  bool loss_g_skipped = false;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean combined loss over the epoch
  double val_loss = 0.0;    // attribute loss on the validation set (NaN when not evaluated)
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  std::vector<std::string> warnings;
};

/// Called after every step with overall progress in [0, 1].
using ProgressFn = std::function<void(double, const StepLog&)>;

/// v <- momentum * v - lr * g; p <- p + v.
void sgd_momentum_step(std::span<double> params, std::span<double> velocity, std::span<const double> grads, double lr,
                       double momentum);

/// Pixels scaled to [0, 1] as a [B, 1, H, W] tensor, for the listed rows.
Tensor image_batch(const ImageSet& set, std::span<const std::size_t> rows);
Tensor label_batch(const ImageSet& set, std::span<const std::size_t> rows);

/// Mean attribute loss over a set (inference mode).
double mean_attribute_loss(const ModelState& state, const ImageSet& set, std::size_t batch_size = 256);

/// Fine-tuning target: attribute index plus its rasterized region.
struct AttentionTarget {
  std::size_t attribute = 0;
  RegionSpec region;
};

/// Trains from a fresh init with early stopping on validation loss and
/// returns the best-validation checkpoint (attribute loss only).
TrainResult train_baseline(const ImageSet& train, const ImageSet& val, const ModelSpec& spec, const TrainConfig& config,
                           const ProgressFn& progress = {});

/// `epochs` plain epochs continuing from `start` (fresh momentum), no early
/// stopping. Equivalent to finetune with w_g = 0.
TrainResult continue_training(const Checkpoint& start, const ImageSet& train, const TrainConfig& config,
                              std::size_t epochs, const ProgressFn& progress = {});

/// Optimizes w_a * loss_a + w_g * loss_g for config.finetune_epochs epochs.
/// loss_g is the mean soft IoU loss over the batch rows positive for the
/// attribute whose Grad-CAM map is not degenerate.
TrainResult finetune(const Checkpoint& parent, const ImageSet& train, const AttentionTarget& target,
                     const TrainConfig& config, const ProgressFn& progress = {});

/// Copy of `set` with the edit applied to every image.
ImageSet with_variant(const ImageSet& set, const VariantSpec& variant,
                      const RegionTemplate& tmpl = RegionTemplate::builtin());

struct ComparisonNetworks {
  TrainResult region_only;  // N_o
  TrainResult mixed;        // N_w
};

/// N_o trains on region-only images; N_w on the original set plus the
/// region-only copies.
ComparisonNetworks train_comparisons(const ImageSet& train, const ImageSet& val, const ModelSpec& spec,
                                     const TrainConfig& config, const std::vector<std::string>& regions,
                                     const ProgressFn& progress = {});

std::string loss_csv(const std::vector<StepLog>& steps);

// ---------------------------------------------------------------------------
// Evaluation

struct SplitMetrics {
  std::size_t count = 0;
  std::vector<double> accuracy;   // per attribute
  double attention_in_roi = 0.0;  // mean over maps of the target attribute
  std::size_t cam_samples = 0;
  std::size_t degenerate = 0;
  double mean_hard_iou = 0.0;
};

struct EvalReport {
  std::string checkpoint;
  std::vector<std::string> attributes;
  std::string attr_a;
  std::string attr_b;
  std::string regions;
  SplitMetrics test;
  SplitMetrics e1;
  SplitMetrics e2;
  nlohmann::json config = nlohmann::json::object();

  std::size_t index_a() const;
};

/// Per-sample model outputs the report is assembled from.
struct SampleScores {
  std::string id;
  std::vector<int> labels;
  std::vector<double> logits;
  std::vector<double> grid;  // CAM of attr_a; empty when not computed
};

/// Prediction rule: class 1 iff sigmoid(logit) > 0.5.
bool predict_positive(double logit);

/// Assembles a report from scores of every test record. attention_in_roi and
/// the CAM counts on the test split cover records positive for attr_a.
EvalReport make_report(const std::vector<SampleScores>& test, const EvalSplits& splits,
                       const std::vector<std::string>& attributes, const std::string& attr_a,
                       const std::string& attr_b, const RegionSpec& region);

/// Logits for every test record and report-mode CAMs of attr_a for the
/// attr_a-positive ones.
std::vector<SampleScores> score_set(const ModelState& state, const ImageSet& set, std::size_t attribute,
                                    std::size_t batch_size = 128);

EvalReport evaluate(const Checkpoint& checkpoint, const DatasetManifest& manifest, const std::string& attr_a,
                    const std::string& attr_b, const std::vector<RegionSelection>& regions,
                    const RegionTemplate& tmpl = RegionTemplate::builtin());

/// Same, on an already decoded test set (avoids re-reading images).
EvalReport evaluate(const Checkpoint& checkpoint, const ImageSet& test, const EvalSplits& splits,
                    const std::vector<std::string>& attributes, const std::string& attr_a, const std::string& attr_b,
                    const std::vector<RegionSelection>& regions, const RegionTemplate& tmpl = RegionTemplate::builtin());

nlohmann::ordered_json report_to_json(const EvalReport& report);

/// Rows = networks, columns = test / E1 / E2 accuracy of attr_a plus the
/// attention share on each split.
std::string format_table(const std::vector<std::pair<std::string, EvalReport>>& rows);

}  // namespace attnsteer
