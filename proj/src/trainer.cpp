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

#include "attnsteer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "attnsteer/error.hpp"

namespace attnsteer {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw UsageError("lr must be non-negative", "bad_config");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw UsageError("momentum must lie in [0, 1)", "bad_config");
  if (batch_size == 0) throw UsageError("batch_size must be at least 1", "bad_config");
  if (max_epochs == 0 || finetune_epochs == 0) throw UsageError("epoch counts must be positive", "bad_config");
  if (!(clip_norm >= 0.0) || !std::isfinite(clip_norm)) throw UsageError("clip_norm must be non-negative", "bad_config");
  if (!(degenerate_skip >= 0.0 && degenerate_skip <= 1.0)) {
    throw UsageError("degenerate_skip must lie in [0, 1]", "bad_config");
  }
  weights.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"momentum", c.momentum},
       {"batch_size", c.batch_size},
       {"max_epochs", c.max_epochs},
       {"patience", c.patience},
       {"finetune_epochs", c.finetune_epochs},
       {"wa", c.weights.w_a},
       {"wg", c.weights.w_g},
       {"cam_mode", to_string(c.cam_mode)},
       {"degenerate_skip", c.degenerate_skip},
       {"clip_norm", c.clip_norm},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
  c.weights.w_a = j.value("wa", c.weights.w_a);
  c.weights.w_g = j.value("wg", c.weights.w_g);
  c.cam_mode = parse_cam_mode(j.value("cam_mode", to_string(c.cam_mode)));
  c.degenerate_skip = j.value("degenerate_skip", c.degenerate_skip);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.seed = j.value("seed", c.seed);
}

void sgd_momentum_step(std::span<double> params, std::span<double> velocity, std::span<const double> grads, double lr,
                       double momentum) {
  if (params.size() != velocity.size() || params.size() != grads.size()) {
    throw ShapeError("sgd: parameter, velocity and gradient sizes differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] - lr * grads[i];
    params[i] += velocity[i];
  }
}

Tensor image_batch(const ImageSet& set, std::span<const std::size_t> rows) {
  const std::size_t px = set.height * set.width;
  std::vector<double> data(rows.size() * px);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    const std::uint8_t* src = set.pixels.data() + rows[b] * px;
    for (std::size_t i = 0; i < px; ++i) data[b * px + i] = static_cast<double>(src[i]) / 255.0;
  }
  return Tensor({rows.size(), 1, set.height, set.width}, std::move(data));
}

Tensor label_batch(const ImageSet& set, std::span<const std::size_t> rows) {
  const std::size_t k = set.labels.empty() ? 0 : set.labels[0].size();
  std::vector<double> data(rows.size() * k);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    for (std::size_t j = 0; j < k; ++j) data[b * k + j] = set.labels[rows[b]][j];
  }
  return Tensor({rows.size(), k}, std::move(data));
}

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seeded Fisher-Yates so batch order does not depend on the library's
/// shuffle algorithm.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix(mix(seed) ^ (epoch + 1)));
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

void check_dataset(const ModelSpec& spec, const ImageSet& set, const char* what) {
  if (set.size() == 0) throw DataError(std::string(what) + " set is empty", "empty_split");
  if (set.height != spec.height || set.width != spec.width || spec.channels != 1) {
    throw DataError(std::string(what) + " images are " + std::to_string(set.width) + "x" + std::to_string(set.height) +
                        ", model expects " + std::to_string(spec.width) + "x" + std::to_string(spec.height),
                    "bad_image");
  }
  if (set.labels[0].size() != spec.num_attributes) {
    throw DataError(std::string(what) + " labels have " + std::to_string(set.labels[0].size()) +
                        " attributes, model has " + std::to_string(spec.num_attributes),
                    "bad_labels");
  }
}

/// Mutable training state: plain parameter vectors plus momentum buffers.
class Trainer {
 public:
  Trainer(const ModelState& start, const TrainConfig& config) : shape_(start.frozen()), config_(config) {
    for (const auto& p : start.parameters) {
      values_.emplace_back(p.value.data().begin(), p.value.data().end());
      velocity_.emplace_back(p.value.numel(), 0.0);
    }
  }

  ModelState state() const {
    std::vector<Tensor> tensors;
    for (std::size_t i = 0; i < values_.size(); ++i) tensors.emplace_back(shape_.parameters[i].value.shape(), values_[i]);
    return shape_.with_values(tensors);
  }

  /// One pass over `train`; appends step logs and returns the mean combined loss.
  double run_epoch(const ImageSet& train, std::size_t epoch, const AttentionTarget* target, TrainResult& result,
                   const ProgressFn& progress, std::size_t total_steps) {
    const auto order = epoch_order(train.size(), config_.seed, epoch);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
      const std::size_t end = std::min(order.size(), start + config_.batch_size);
      std::span<const std::size_t> rows(order.data() + start, end - start);
      StepLog log = step(train, rows, target, result);
      log.epoch = epoch;
      log.step = result.steps.size();
      result.steps.push_back(log);
      total += log.combined;
      ++batches;
      if (progress) progress(static_cast<double>(result.steps.size()) / static_cast<double>(total_steps), log);
    }
    return total / static_cast<double>(batches);
  }

 private:
  StepLog step(const ImageSet& train, std::span<const std::size_t> rows, const AttentionTarget* target,
               TrainResult& result) {
    GraphModeGuard recording(GraphMode::train);
    std::vector<Tensor> leaves;
    for (std::size_t i = 0; i < values_.size(); ++i) {
      leaves.emplace_back(shape_.parameters[i].value.shape(), values_[i], true);
    }
    const ModelState live = shape_.with_values(leaves);
    const Tensor x = image_batch(train, rows);
    const Tensor y = label_batch(train, rows);

    StepLog log;
    const bool attend = target != nullptr && config_.weights.w_g > 0.0;
    try {
      Tensor logits, acts;
      if (attend) {
        acts = forward_trunk(live, x);
        logits = forward_head(live, acts);
      } else {
        logits = forward(live, x).logits;
      }
      const Tensor loss_a = attribute_loss(logits, y);
      Tensor loss_g = Tensor::scalar(0.0);
      if (attend) loss_g = attention_loss(acts, logits, train, rows, *target, log, result);
      const Tensor combined = combined_loss(loss_a, loss_g, config_.weights);
      log.loss_a = loss_a.item();
      log.loss_g_soft = loss_g.item();
      log.combined = combined.item();

      const auto grads = backward(combined, leaves);
      double squared = 0.0;
      for (const auto& g : grads) {
        for (double v : g.data()) squared += v * v;
      }
      log.grad_norm = std::sqrt(squared);
      const double factor =
          config_.clip_norm > 0.0 && log.grad_norm > config_.clip_norm ? config_.clip_norm / log.grad_norm : 1.0;
      for (std::size_t i = 0; i < values_.size(); ++i) {
        std::vector<double> g(grads[i].data().begin(), grads[i].data().end());
        if (factor != 1.0) {
          for (double& v : g) v *= factor;
        }
        sgd_momentum_step(values_[i], velocity_[i], g, config_.lr, config_.momentum);
      }
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(result.steps.size()) + " (last loss_a " +
                             (result.steps.empty() ? std::string("n/a") : std::to_string(result.steps.back().loss_a)) +
                             "): " + e.what(),
                         "divergence");
    }
    for (const auto& v : values_) {
      for (double p : v) {
        if (!std::isfinite(p)) {
          throw NumericError("training diverged at step " + std::to_string(result.steps.size()) +
                                 ": non-finite parameter after update (loss_a " + std::to_string(log.loss_a) + ")",
                             "divergence");
        }
      }
    }
    return log;
  }

  Tensor attention_loss(const Tensor& acts, const Tensor& logits, const ImageSet& train,
                        std::span<const std::size_t> rows, const AttentionTarget& target, StepLog& log,
                        TrainResult& result) {
    const std::size_t batch = rows.size(), k = logits.size(1);
    std::vector<double> onehot(batch * k, 0.0);
    std::vector<std::size_t> positives;
    for (std::size_t b = 0; b < batch; ++b) {
      if (train.labels[rows[b]][target.attribute] == 1) {
        onehot[b * k + target.attribute] = 1.0;
        positives.push_back(b);
      }
    }
    if (positives.empty()) {
      log.loss_g_skipped = true;
      return Tensor::scalar(0.0);
    }
    const CamBatch cams = cam_from_activations(acts, logits, Tensor({batch, k}, onehot), config_.cam_mode);
    std::vector<double> use(batch, 0.0);
    std::size_t degenerate = 0;
    for (std::size_t b : positives) {
      if (cams.degenerate[b]) {
        ++degenerate;
      } else {
        use[b] = 1.0;
      }
    }
    const double share = static_cast<double>(degenerate) / static_cast<double>(positives.size());
    if (share > config_.degenerate_skip || degenerate == positives.size()) {
      log.loss_g_skipped = true;
      result.warnings.push_back("step " + std::to_string(result.steps.size()) + ": " + std::to_string(degenerate) +
                                " of " + std::to_string(positives.size()) +
                                " Grad-CAM maps degenerate; batch skipped for loss_g");
      return Tensor::scalar(0.0);
    }
    const std::size_t used = positives.size() - degenerate;
    log.cam_rows = used;

    const Tensor region = target.region.mask_tensor();
    const Tensor per_row = soft_iou_loss(cams.grid, region);
    const std::size_t cells = target.region.mask.size();
    auto grid = cams.grid.data();
    double hard = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      if (use[b] == 0.0) continue;
      hard += hard_iou_loss(grid.subspan(b * cells, cells), target.region.mask);
    }
    log.loss_g_hard = hard / static_cast<double>(used);
    return scale(sum(mul(per_row, Tensor({batch}, use))), 1.0 / static_cast<double>(used));
  }

  ModelState shape_;
  TrainConfig config_;
  std::vector<std::vector<double>> values_;
  std::vector<std::vector<double>> velocity_;
};

Checkpoint make_checkpoint(const ModelState& state, const std::string& kind, const std::string& parent,
                           const TrainConfig& config, std::size_t epoch, const std::vector<double>& history) {
  Checkpoint ck{quantize_to_storage(state), {}};
  ck.meta.kind = kind;
  ck.meta.parent = parent;
  ck.meta.seed = config.seed;
  ck.meta.epoch = epoch;
  ck.meta.loss_history = history;
  ck.meta.extra["train_config"] = config;
  return ck;
}

TrainResult train_with_early_stopping(const ImageSet& train, const ImageSet& val, const ModelSpec& spec,
                                      const TrainConfig& config, const std::string& kind, const ProgressFn& progress) {
  config.validate();
  check_dataset(spec, train, "training");
  check_dataset(spec, val, "validation");
  Trainer trainer(init_model(spec, config.seed), config);
  TrainResult result;
  const std::size_t steps_per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.max_epochs;

  double best = std::numeric_limits<double>::infinity();
  ModelState best_state;
  std::size_t since_best = 0;
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    const double train_loss = trainer.run_epoch(train, epoch, nullptr, result, progress, total_steps);
    const ModelState current = trainer.state();
    const double val_loss = mean_attribute_loss(current, val);
    if (!std::isfinite(val_loss)) throw NumericError("validation loss is not finite", "divergence");
    result.epochs.push_back({epoch + 1, train_loss, val_loss});
    history.push_back(val_loss);
    if (val_loss < best) {
      best = val_loss;
      best_state = current;
      result.best_epoch = epoch + 1;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  result.checkpoint = make_checkpoint(best_state, kind, "", config, result.best_epoch, history);
  return result;
}

}  // namespace

double mean_attribute_loss(const ModelState& state, const ImageSet& set, std::size_t batch_size) {
  GraphModeGuard inference(GraphMode::inference);
  const ModelState frozen = state.frozen();
  double total = 0.0;
  const auto rows = all_rows(set.size());
  for (std::size_t start = 0; start < rows.size(); start += batch_size) {
    const std::size_t end = std::min(rows.size(), start + batch_size);
    std::span<const std::size_t> r(rows.data() + start, end - start);
    const Tensor logits = forward(frozen, image_batch(set, r)).logits;
    total += attribute_loss(logits, label_batch(set, r)).item() * static_cast<double>(r.size());
  }
  return total / static_cast<double>(set.size());
}

TrainResult train_baseline(const ImageSet& train, const ImageSet& val, const ModelSpec& spec, const TrainConfig& config,
                           const ProgressFn& progress) {
  return train_with_early_stopping(train, val, spec, config, "baseline", progress);
}

TrainResult continue_training(const Checkpoint& start, const ImageSet& train, const TrainConfig& config,
                              std::size_t epochs, const ProgressFn& progress) {
  config.validate();
  check_dataset(start.state.spec, train, "training");
  Trainer trainer(start.state, config);
  TrainResult result;
  const std::size_t total = epochs * ((train.size() + config.batch_size - 1) / config.batch_size);
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const double loss = trainer.run_epoch(train, epoch, nullptr, result, progress, total);
    result.epochs.push_back({epoch + 1, loss, std::numeric_limits<double>::quiet_NaN()});
    history.push_back(loss);
  }
  result.best_epoch = epochs;
  result.checkpoint =
      make_checkpoint(trainer.state(), "finetune", checkpoint_id(start), config, start.meta.epoch + epochs, history);
  return result;
}

TrainResult finetune(const Checkpoint& parent, const ImageSet& train, const AttentionTarget& target,
                     const TrainConfig& config, const ProgressFn& progress) {
  config.validate();
  check_dataset(parent.state.spec, train, "training");
  const auto [gh, gw] = parent.state.spec.cam_grid();
  if (target.region.height != gh || target.region.width != gw) {
    throw ShapeError("finetune: region is rasterized to " + std::to_string(target.region.height) + "x" +
                     std::to_string(target.region.width) + ", model grid is " + std::to_string(gh) + "x" +
                     std::to_string(gw));
  }
  if (target.attribute >= parent.state.spec.num_attributes) {
    throw UsageError("finetune: attribute index out of range", "attribute_out_of_range");
  }
  Trainer trainer(parent.state, config);
  TrainResult result;
  const std::size_t total = config.finetune_epochs * ((train.size() + config.batch_size - 1) / config.batch_size);
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < config.finetune_epochs; ++epoch) {
    const double loss = trainer.run_epoch(train, epoch, &target, result, progress, total);
    result.epochs.push_back({epoch + 1, loss, std::numeric_limits<double>::quiet_NaN()});
    history.push_back(loss);
  }
  result.best_epoch = config.finetune_epochs;
  result.checkpoint = make_checkpoint(trainer.state(), "finetune", checkpoint_id(parent), config,
                                      parent.meta.epoch + config.finetune_epochs, history);
  result.checkpoint.meta.extra["attribute"] = target.attribute;
  result.checkpoint.meta.extra["regions"] = format_region_list(target.region.selected);
  return result;
}

ImageSet with_variant(const ImageSet& set, const VariantSpec& variant, const RegionTemplate& tmpl) {
  ImageSet out = set;
  const std::size_t px = set.height * set.width;
  for (std::size_t n = 0; n < set.size(); ++n) {
    Image img{set.width, set.height, 1,
              std::vector<std::uint8_t>(set.pixels.begin() + static_cast<std::ptrdiff_t>(n * px),
                                        set.pixels.begin() + static_cast<std::ptrdiff_t>((n + 1) * px))};
    apply_variant(img, variant, tmpl);
    std::copy(img.pixels.begin(), img.pixels.end(), out.pixels.begin() + static_cast<std::ptrdiff_t>(n * px));
  }
  return out;
}

ComparisonNetworks train_comparisons(const ImageSet& train, const ImageSet& val, const ModelSpec& spec,
                                     const TrainConfig& config, const std::vector<std::string>& regions,
                                     const ProgressFn& progress) {
  const VariantSpec variant{"region_only", regions};
  const ImageSet train_o = with_variant(train, variant), val_o = with_variant(val, variant);
  ImageSet train_w = train, val_w = val;
  train_w.append(train_o);
  val_w.append(val_o);
  ComparisonNetworks out{train_with_early_stopping(train_o, val_o, spec, config, "region_only", progress),
                         train_with_early_stopping(train_w, val_w, spec, config, "mixed", progress)};
  return out;
}

std::string loss_csv(const std::vector<StepLog>& steps) {
  std::string out = "step,loss_a,loss_g_soft,loss_g_hard,combined\n";
  char line[160];
  for (const auto& s : steps) {
    std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g,%.17g,%.17g\n", s.step, s.loss_a, s.loss_g_soft, s.loss_g_hard,
                  s.combined);
    out += line;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

std::size_t EvalReport::index_a() const {
  for (std::size_t i = 0; i < attributes.size(); ++i) {
    if (attributes[i] == attr_a) return i;
  }
  throw UsageError("unknown attribute '" + attr_a + "'", "unknown_attribute");
}

bool predict_positive(double logit) { return 1.0 / (1.0 + std::exp(-logit)) > 0.5; }

namespace {

SplitMetrics split_metrics(const std::vector<const SampleScores*>& samples, std::size_t k, const RegionSpec& region) {
  SplitMetrics m;
  m.count = samples.size();
  m.accuracy.assign(k, 0.0);
  double attention = 0.0, hard = 0.0;
  for (const auto* s : samples) {
    for (std::size_t j = 0; j < k; ++j) m.accuracy[j] += (predict_positive(s->logits[j]) ? 1 : 0) == s->labels[j];
    if (s->grid.empty()) continue;
    ++m.cam_samples;
    attention += attention_in_roi(s->grid, region.unit_mask);
    hard += hard_iou_loss(s->grid, region.mask);
    bool zero = std::all_of(s->grid.begin(), s->grid.end(), [](double v) { return v == 0.0; });
    m.degenerate += zero;
  }
  if (m.count) {
    for (auto& a : m.accuracy) a /= static_cast<double>(m.count);
  }
  if (m.cam_samples) {
    m.attention_in_roi = attention / static_cast<double>(m.cam_samples);
    m.mean_hard_iou = hard / static_cast<double>(m.cam_samples);
  }
  return m;
}

}  // namespace

EvalReport make_report(const std::vector<SampleScores>& test, const EvalSplits& splits,
                       const std::vector<std::string>& attributes, const std::string& attr_a,
                       const std::string& attr_b, const RegionSpec& region) {
  EvalReport r;
  r.attributes = attributes;
  r.attr_a = attr_a;
  r.attr_b = attr_b;
  r.regions = format_region_list(region.selected);
  const std::size_t a = r.index_a();
  std::map<std::string, const SampleScores*> by_id;
  std::vector<const SampleScores*> all;
  for (const auto& s : test) {
    if (s.logits.size() != attributes.size() || s.labels.size() != attributes.size()) {
      throw ShapeError("report: sample " + s.id + " has the wrong number of attributes");
    }
    by_id[s.id] = &s;
    all.push_back(&s);
  }
  auto pick = [&](const std::vector<std::string>& ids) {
    std::vector<const SampleScores*> out;
    for (const auto& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw DataError("report: split member " + id + " has no scores", "bad_manifest");
      out.push_back(it->second);
    }
    return out;
  };
  r.test = split_metrics(all, attributes.size(), region);
  r.e1 = split_metrics(pick(splits.e1), attributes.size(), region);
  r.e2 = split_metrics(pick(splits.e2), attributes.size(), region);
  (void)a;
  return r;
}

std::vector<SampleScores> score_set(const ModelState& state, const ImageSet& set, std::size_t attribute,
                                    std::size_t batch_size) {
  const ModelState frozen = state.frozen();
  const std::size_t k = state.spec.num_attributes;
  std::vector<SampleScores> out(set.size());
  const auto rows = all_rows(set.size());
  for (std::size_t start = 0; start < rows.size(); start += batch_size) {
    const std::size_t end = std::min(rows.size(), start + batch_size);
    std::span<const std::size_t> r(rows.data() + start, end - start);
    GraphModeGuard recording(GraphMode::train);
    Tensor acts = forward_trunk(frozen, image_batch(set, r)).detach();
    acts.set_requires_grad(true);
    const Tensor logits = forward_head(frozen, acts);
    std::vector<double> onehot(r.size() * k, 0.0);
    for (std::size_t b = 0; b < r.size(); ++b) {
      if (set.labels[r[b]][attribute] == 1) onehot[b * k + attribute] = 1.0;
    }
    const CamBatch cams = cam_from_activations(acts, logits, Tensor({r.size(), k}, onehot), CamMode::report);
    const std::size_t cells = cams.grid.numel() / r.size();
    auto grid = cams.grid.data();
    auto z = logits.data();
    for (std::size_t b = 0; b < r.size(); ++b) {
      SampleScores& s = out[r[b]];
      s.id = set.ids[r[b]];
      s.labels = set.labels[r[b]];
      s.logits.assign(z.begin() + static_cast<std::ptrdiff_t>(b * k), z.begin() + static_cast<std::ptrdiff_t>((b + 1) * k));
      if (onehot[b * k + attribute] == 1.0) {
        s.grid.assign(grid.begin() + static_cast<std::ptrdiff_t>(b * cells),
                      grid.begin() + static_cast<std::ptrdiff_t>((b + 1) * cells));
      }
    }
  }
  return out;
}

EvalReport evaluate(const Checkpoint& checkpoint, const ImageSet& test, const EvalSplits& splits,
                    const std::vector<std::string>& attributes, const std::string& attr_a, const std::string& attr_b,
                    const std::vector<RegionSelection>& regions, const RegionTemplate& tmpl) {
  check_dataset(checkpoint.state.spec, test, "test");
  const auto [gh, gw] = checkpoint.state.spec.cam_grid();
  const RegionSpec region = rasterize(tmpl, regions, gh, gw);
  std::size_t a = attributes.size();
  for (std::size_t i = 0; i < attributes.size(); ++i) {
    if (attributes[i] == attr_a) a = i;
  }
  if (a == attributes.size()) throw UsageError("unknown attribute '" + attr_a + "'", "unknown_attribute");
  EvalReport r = make_report(score_set(checkpoint.state, test, a), splits, attributes, attr_a, attr_b, region);
  r.checkpoint = checkpoint_id(checkpoint);
  r.config = {{"checkpoint_kind", checkpoint.meta.kind}, {"parent", checkpoint.meta.parent}};
  return r;
}

EvalReport evaluate(const Checkpoint& checkpoint, const DatasetManifest& manifest, const std::string& attr_a,
                    const std::string& attr_b, const std::vector<RegionSelection>& regions,
                    const RegionTemplate& tmpl) {
  const EvalSplits splits = split_e1_e2(manifest, attr_a, attr_b);
  return evaluate(checkpoint, load_images(manifest, "test"), splits, manifest.attributes, attr_a, attr_b, regions,
                  tmpl);
}

namespace {

nlohmann::ordered_json metrics_json(const SplitMetrics& m, const std::vector<std::string>& attributes) {
  nlohmann::ordered_json acc = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < attributes.size(); ++i) acc[attributes[i]] = m.accuracy.empty() ? 0.0 : m.accuracy[i];
  nlohmann::ordered_json j;
  j["count"] = m.count;
  j["accuracy"] = acc;
  j["attention_in_roi"] = m.attention_in_roi;
  j["cam_samples"] = m.cam_samples;
  j["degenerate"] = m.degenerate;
  j["mean_hard_iou_loss"] = m.mean_hard_iou;
  return j;
}

}  // namespace

nlohmann::ordered_json report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["checkpoint"] = r.checkpoint;
  j["attributes"] = r.attributes;
  j["pair"] = {r.attr_a, r.attr_b};
  j["regions"] = r.regions;
  j["splits"]["test"] = metrics_json(r.test, r.attributes);
  j["splits"]["e1"] = metrics_json(r.e1, r.attributes);
  j["splits"]["e2"] = metrics_json(r.e2, r.attributes);
  j["config"] = r.config;
  return j;
}

std::string format_table(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::size_t name_width = 7;
  for (const auto& [name, _] : rows) name_width = std::max(name_width, name.size());
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-*s  %8s  %8s  %8s  %8s  %8s  %8s\n", static_cast<int>(name_width), "network",
                "test", "E1", "E2", "roi:test", "roi:E1", "roi:E2");
  out << buf;
  for (const auto& [name, r] : rows) {
    const std::size_t a = r.index_a();
    std::snprintf(buf, sizeof(buf), "%-*s  %7.2f%%  %7.2f%%  %7.2f%%  %8.4f  %8.4f  %8.4f\n",
                  static_cast<int>(name_width), name.c_str(), 100.0 * r.test.accuracy[a], 100.0 * r.e1.accuracy[a],
                  100.0 * r.e2.accuracy[a], r.test.attention_in_roi, r.e1.attention_in_roi, r.e2.attention_in_roi);
    out << buf;
  }
  return out.str();
}

}  // namespace attnsteer
