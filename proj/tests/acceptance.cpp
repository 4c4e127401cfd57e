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

// Acceptance harness: one PASS/FAIL line per criterion, then a summary.
// Exit status is 0 only when every criterion passes.
//
//   attnsteer_acceptance [--config configs/reference.json] [--work DIR]
//                        [--only 1,2,...] [--test-binary PATH ...]

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "attnsteer/error.hpp"
#include "attnsteer/gradcam.hpp"
#include "attnsteer/gradcheck.hpp"
#include "attnsteer/io.hpp"
#include "attnsteer/service.hpp"
#include "cam_oracle.hpp"
#include "op_cases.hpp"

namespace fs = std::filesystem;
using namespace attnsteer;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), format, a, b, c, d);
  return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void log(const std::string& message) { std::cerr << "  .. " << message << std::endl; }

// ---------------------------------------------------------------------------
// 1. Autodiff

Outcome autodiff() {
  const double cpu0 = cpu_seconds();
  Outcome o;
  double worst_first = 0.0, worst_second = 0.0;
  std::size_t instances = 0;
  std::string worst_op;
  for (const auto& name : testing::all_op_names()) {
    testing::CaseGen gen(std::hash<std::string>{}(name) + 7);
    for (int trial = 0; trial < 3; ++trial) {
      const auto c = testing::make_case(name, gen);
      const double err = check_gradients(c.fn, c.inputs, 1e-5).max_rel_error;
      ++instances;
      if (err > worst_first) {
        worst_first = err;
        worst_op = name;
      }
    }
  }
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    testing::CaseGen gen(500 + seed);
    worst_second = std::max(worst_second, grad_of_grad_check(testing::tiny_conv_net, testing::tiny_conv_net_inputs(gen),
                                                             1e-5, seed)
                                              .max_rel_error);
  }
  const double cpu = cpu_seconds() - cpu0;
  o.pass = instances >= 20 && worst_first < 1e-4 && worst_second < 1e-3 && cpu < 120.0;
  o.detail = std::to_string(instances) + " op instances, max rel err " + fmt("%.2e", worst_first) + " (" + worst_op +
             ", limit 1e-4); double backprop on the tiny conv net " + fmt("%.2e", worst_second) +
             " (limit 1e-3); CPU " + fmt("%.1f s", cpu) + " (limit 120 s)";
  return o;
}

// ---------------------------------------------------------------------------
// 2. Grad-CAM against the finite-difference oracle

Tensor random_image(const ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> px(spec.channels * spec.height * spec.width);
  for (auto& v : px) v = u(rng);
  return Tensor({1, spec.channels, spec.height, spec.width}, px);
}

Outcome gradcam_oracle() {
  Outcome o;
  const ModelSpec spec;
  double worst = 0.0, worst_scale = 0.0;
  std::size_t pairs = 0, skipped_attrs = 0;
  for (std::uint64_t trial = 0; pairs < 10 && trial < 40; ++trial) {
    const ModelState state = init_model(spec, 1000 + trial);
    const Tensor image = random_image(spec, 2000 + trial);
    std::size_t attr = spec.num_attributes;
    CamMap cam;
    for (std::size_t k = 0; k < spec.num_attributes; ++k) {
      cam = compute_cam(state, image, k);
      if (!cam.degenerate) {
        attr = k;
        break;
      }
      ++skipped_attrs;
    }
    if (attr == spec.num_attributes) continue;
    ++pairs;
    worst = std::max(worst, relative_error(cam.grid, testing::fd_cam_grid(state, image, attr)));

    // Scaling the attribute's output row and bias by c > 0 scales the raw map
    // by c; the normalized grid must not move.
    auto values = state.tensors();
    const std::size_t wi = values.size() - 2, bi = values.size() - 1, row = values[wi].size(1);
    std::vector<double> w(values[wi].data().begin(), values[wi].data().end());
    std::vector<double> b(values[bi].data().begin(), values[bi].data().end());
    const double c = 0.25 + 0.5 * static_cast<double>(trial);
    for (std::size_t j = 0; j < row; ++j) w[attr * row + j] *= c;
    b[attr] *= c;
    values[wi] = Tensor(values[wi].shape(), w);
    values[bi] = Tensor(values[bi].shape(), b);
    const CamMap scaled = compute_cam(state.with_values(values), image, attr);
    for (std::size_t i = 0; i < cam.grid.size(); ++i) {
      worst_scale = std::max(worst_scale, std::abs(cam.grid[i] - scaled.grid[i]));
    }
  }
  o.pass = pairs == 10 && worst < 1e-3 && worst_scale <= 1e-9;
  o.detail = std::to_string(pairs) + " (model, image) pairs, max rel err vs oracle " + fmt("%.2e", worst) +
             " (limit 1e-3); scale invariance max |diff| " + fmt("%.1e", worst_scale) + " (limit 1e-9)";
  return o;
}

// ---------------------------------------------------------------------------
// 3. IoU loss unit suite

std::vector<double> indicator(std::size_t n, const std::vector<std::size_t>& on) {
  std::vector<double> v(n, 0.0);
  for (auto i : on) v[i] = 1.0;
  return v;
}

Outcome iou_suite() {
  Outcome o;
  std::vector<std::string> failures;
  const auto g = indicator(64, {9, 10, 17, 18});
  const double identical = iou_loss_value(g, g);
  if (!(identical >= 0.0 && identical < 1e-6)) failures.push_back("identical sets");
  const double half = iou_loss_value(indicator(64, {0, 1, 2, 3}), indicator(64, {2, 3, 4, 5}), 0.0);
  if (std::abs(half - std::log(3.0)) > 1e-12) failures.push_back("ln 3 case");

  std::mt19937_64 rng(77);
  std::bernoulli_distribution coin(0.3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t symmetric = 0, monotone = 0, moved = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> a(64), b(64);
    for (std::size_t i = 0; i < 64; ++i) {
      a[i] = coin(rng);
      b[i] = coin(rng);
    }
    const double ab = iou_loss_value(a, b), ba = iou_loss_value(b, a);
    if (ab == ba && ab >= 0.0 && ((ab < 1e-6) == (a == b))) ++symmetric;

    // Hard sets of equal size: each extra overlapping cell lowers the loss.
    std::vector<std::size_t> order(64);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t size = 1 + trial % 16;
    std::vector<double> s(64, 0.0);
    for (std::size_t i = 0; i < size; ++i) s[order[i]] = 1.0;
    double previous = std::numeric_limits<double>::infinity();
    bool strictly = true;
    for (std::size_t overlap = 0; overlap <= size; ++overlap) {
      std::vector<double> m(64, 0.0);
      for (std::size_t i = 0; i < overlap; ++i) m[order[i]] = 1.0;
      for (std::size_t i = 0; i < size - overlap; ++i) m[order[32 + i]] = 1.0;
      const double loss = iou_loss_value(m, s);
      strictly = strictly && loss < previous;
      previous = loss;
    }
    monotone += strictly;

    // Soft maps: moving mass from outside the region to inside never hurts.
    std::vector<double> soft(64);
    for (auto& v : soft) v = u(rng);
    const std::size_t from = order[32 + rng() % 32], to = order[rng() % size];
    const double before = iou_loss_value(soft, s);
    const double delta = std::min(soft[from], 1.0 - soft[to]) * u(rng);
    soft[from] -= delta;
    soft[to] += delta;
    moved += iou_loss_value(soft, s) <= before + 1e-15;
  }
  if (symmetric != 1000) failures.push_back("symmetry");
  if (monotone != 1000) failures.push_back("hard monotonicity");
  if (moved != 1000) failures.push_back("soft monotonicity");
  o.pass = failures.empty();
  o.detail = "identical " + fmt("%.2e", identical) + ", half overlap - ln 3 = " + fmt("%.1e", half - std::log(3.0)) +
             ", symmetry " + std::to_string(symmetric) + "/1000, hard monotone " + std::to_string(monotone) +
             "/1000, soft monotone " + std::to_string(moved) + "/1000";
  for (const auto& f : failures) o.detail += "; FAILED " + f;
  return o;
}

// ---------------------------------------------------------------------------
// Reference experiment, shared by criteria 4 to 7

struct Reference {
  RunConfig config;
  DatasetManifest manifest;
  ImageSet train, val, test;
  EvalSplits splits;
  AttentionTarget target;
  TrainResult baseline, tuned;
  ComparisonNetworks comparisons;
  EvalReport base_report, tuned_report, region_only_report, mixed_report;
  double core_cpu = 0.0;  // generation, baseline, fine-tune and their evaluation
  double comparison_cpu = 0.0;
};

Reference run_reference(const RunConfig& rc, const fs::path& work) {
  Reference r;
  r.config = rc;
  const double cpu0 = cpu_seconds();
  fs::remove_all(work / "data");
  log("generating " + std::to_string(rc.data.train + rc.data.val + rc.data.test) + " images");
  r.manifest = generate(rc.data, work / "data");
  r.train = load_images(r.manifest, "train");
  r.val = load_images(r.manifest, "val");
  r.test = load_images(r.manifest, "test");
  r.splits = split_e1_e2(r.manifest, rc.attr_a, rc.attr_b);
  const auto [gh, gw] = rc.model.cam_grid();
  r.target = {r.manifest.attribute_index(rc.attr_a), rasterize(RegionTemplate::builtin(), rc.regions, gh, gw)};

  log("training the baseline");
  r.baseline = train_baseline(r.train, r.val, rc.model, rc.train);
  r.baseline.checkpoint.meta.extra["attributes"] = r.manifest.attributes;
  log("fine-tuning");
  r.tuned = finetune(r.baseline.checkpoint, r.train, r.target, rc.finetune);
  r.tuned.checkpoint.meta.extra["attributes"] = r.manifest.attributes;
  auto report = [&](const Checkpoint& ck) {
    return evaluate(ck, r.test, r.splits, r.manifest.attributes, rc.attr_a, rc.attr_b, rc.regions);
  };
  r.base_report = report(r.baseline.checkpoint);
  r.tuned_report = report(r.tuned.checkpoint);
  r.core_cpu = cpu_seconds() - cpu0;

  log("training N_o and N_w");
  const double cpu1 = cpu_seconds();
  std::vector<std::string> names;
  for (const auto& s : rc.regions) names.push_back(s.name);
  r.comparisons = train_comparisons(r.train, r.val, rc.model, rc.train, names);
  r.region_only_report = report(r.comparisons.region_only.checkpoint);
  r.mixed_report = report(r.comparisons.mixed.checkpoint);
  r.comparison_cpu = cpu_seconds() - cpu1;

  save_checkpoint(r.baseline.checkpoint, work / "baseline.ckpt");
  save_checkpoint(r.tuned.checkpoint, work / "finetuned.ckpt");
  save_checkpoint(r.comparisons.region_only.checkpoint, work / "N_o.ckpt");
  save_checkpoint(r.comparisons.mixed.checkpoint, work / "N_w.ckpt");
  write_text(work / "finetune_loss.csv", loss_csv(r.tuned.steps));
  const std::string table = format_table({{"baseline", r.base_report},
                                          {"fine-tuned", r.tuned_report},
                                          {"N_o", r.region_only_report},
                                          {"N_w", r.mixed_report}});
  write_text(work / "table.txt", table);
  std::cerr << table;
  return r;
}

double acc_a(const EvalReport& r, const SplitMetrics& m) { return 100.0 * m.accuracy[r.index_a()]; }

// 4. Linearity of the logged combined loss.
Outcome linearity(const Reference& r) {
  Outcome o;
  const auto w = r.config.finetune.weights;
  double worst = 0.0;
  std::size_t with_attention = 0;
  for (const auto& s : r.tuned.steps) {
    worst = std::max(worst, std::abs(s.combined - (w.w_a * s.loss_a + w.w_g * s.loss_g_soft)));
    with_attention += !s.loss_g_skipped;
  }
  o.pass = !r.tuned.steps.empty() && worst <= 1e-12 && with_attention > 0;
  o.detail = std::to_string(r.tuned.steps.size()) + " steps (" + std::to_string(with_attention) +
             " with an attention term), max |combined - (w_a loss_a + w_g loss_g)| = " + fmt("%.1e", worst) +
             " (limit 1e-12)";
  return o;
}

// 5. Bias mitigation.
Outcome mitigation(const Reference& r) {
  Outcome o;
  const auto& b = r.base_report;
  const auto& t = r.tuned_report;
  const double roi_gain = t.test.attention_in_roi - b.test.attention_in_roi;
  const double e2_before = acc_a(b, b.e2), e2_after = acc_a(t, t.e2);
  const double test_before = acc_a(b, b.test), test_after = acc_a(t, t.test);
  const bool roi_ok = roi_gain >= 0.20;
  const bool e2_ok = e2_after >= e2_before;
  const bool test_ok = test_before - test_after <= 2.0;
  const bool time_ok = r.core_cpu < 900.0;
  o.pass = roi_ok && e2_ok && test_ok && time_ok;
  o.detail = "attention_in_roi(" + r.config.attr_a + ") " + fmt("%.4f -> %.4f (gain %+.4f, need >= 0.20)", b.test.attention_in_roi,
                                                               t.test.attention_in_roi, roi_gain) +
             "; E2 " + fmt("%.2f%% -> %.2f%%", e2_before, e2_after) + " over " + std::to_string(b.e2.count) +
             (e2_ok ? " (not decreased)" : " (DECREASED)") + "; test " +
             fmt("%.2f%% -> %.2f%% (drop %.2f points, limit 2)", test_before, test_after, test_before - test_after) +
             "; CPU " + fmt("%.0f s (limit 900 s)", r.core_cpu);
  return o;
}

// 6. Comparison networks.
Outcome orderings(const Reference& r) {
  Outcome o;
  const double base = acc_a(r.base_report, r.base_report.test);
  const double n_o = acc_a(r.region_only_report, r.region_only_report.test);
  const double n_w = acc_a(r.mixed_report, r.mixed_report.test);
  const double roi_ft = r.tuned_report.test.attention_in_roi, roi_nw = r.mixed_report.test.attention_in_roi;
  const bool a = n_o < base, b = n_w >= n_o, c = roi_ft > roi_nw;
  o.pass = a && b && c;
  o.detail = fmt("N_o test %.2f%% < baseline %.2f%%", n_o, base) + (a ? "" : " (NO)") +
             fmt("; N_w %.2f%% >= N_o %.2f%%", n_w, n_o) + (b ? "" : " (NO)") +
             fmt("; fine-tuned attention %.4f > N_w %.4f", roi_ft, roi_nw) + (c ? "" : " (NO)") +
             fmt("; CPU %.0f s", r.comparison_cpu);
  return o;
}

// ---------------------------------------------------------------------------
// 7. Determinism and persistence

bool same_tree(const fs::path& a, const fs::path& b, std::size_t* files) {
  std::set<fs::path> left, right;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.is_regular_file()) left.insert(fs::relative(e.path(), a));
  }
  for (const auto& e : fs::recursive_directory_iterator(b)) {
    if (e.is_regular_file()) right.insert(fs::relative(e.path(), b));
  }
  if (left != right) return false;
  for (const auto& p : left) {
    if (read_file(a / p) != read_file(b / p)) return false;
  }
  *files = left.size();
  return true;
}

Outcome determinism(const Reference& r, const fs::path& work) {
  Outcome o;
  std::vector<std::string> notes, failures;

  // Datasets: regenerate the reference data with a different shard count.
  GenConfig again = r.config.data;
  again.workers = again.workers == 1 ? 3 : 1;
  fs::remove_all(work / "data_repeat");
  log("regenerating the dataset");
  generate(again, work / "data_repeat");
  std::size_t files = 0;
  if (same_tree(work / "data", work / "data_repeat", &files)) {
    notes.push_back("dataset regenerated bit-identically (" + std::to_string(files) + " files)");
  } else {
    failures.push_back("regenerated dataset differs");
  }
  fs::remove_all(work / "data_repeat");

  // Checkpoints: the fine-tune again, and a short baseline twice.
  log("repeating the fine-tune");
  TrainResult tuned = finetune(r.baseline.checkpoint, r.train, r.target, r.config.finetune);
  tuned.checkpoint.meta.extra["attributes"] = r.manifest.attributes;
  if (serialize_checkpoint(tuned.checkpoint) != serialize_checkpoint(r.tuned.checkpoint)) {
    failures.push_back("repeated fine-tune checkpoint differs");
  }
  TrainConfig brief = r.config.train;
  brief.max_epochs = 2;
  ImageSet subset;
  subset.height = r.train.height;
  subset.width = r.train.width;
  const std::size_t n = std::min<std::size_t>(r.train.size(), 512), px = r.train.height * r.train.width;
  subset.ids.assign(r.train.ids.begin(), r.train.ids.begin() + n);
  subset.labels.assign(r.train.labels.begin(), r.train.labels.begin() + n);
  subset.pixels.assign(r.train.pixels.begin(), r.train.pixels.begin() + n * px);
  const auto b1 = train_baseline(subset, r.val, r.config.model, brief).checkpoint;
  const auto b2 = train_baseline(subset, r.val, r.config.model, brief).checkpoint;
  if (serialize_checkpoint(b1) != serialize_checkpoint(b2)) failures.push_back("repeated baseline checkpoint differs");
  if (failures.empty()) notes.push_back("repeated fine-tune and baseline checkpoints identical");

  // Reports: re-evaluate the stored fine-tuned checkpoint from disk.
  const Checkpoint loaded = load_checkpoint(work / "finetuned.ckpt");
  const auto report_again = report_to_json(
      evaluate(loaded, r.test, r.splits, r.manifest.attributes, r.config.attr_a, r.config.attr_b, r.config.regions));
  if (report_again.dump(2) != report_to_json(r.tuned_report).dump(2)) {
    failures.push_back("report from the reloaded checkpoint differs");
  } else {
    notes.push_back("reports identical");
  }

  // Round trip: predictions of the reloaded checkpoint, bit for bit.
  std::vector<std::size_t> rows(std::min<std::size_t>(r.test.size(), 256));
  std::iota(rows.begin(), rows.end(), 0);
  const Tensor batch = image_batch(r.test, rows);
  Tensor before, after;
  {
    GraphModeGuard guard(GraphMode::inference);
    before = forward(r.tuned.checkpoint.state, batch).logits;
    after = forward(loaded.state, batch).logits;
  }
  if (!std::equal(before.data().begin(), before.data().end(), after.data().begin(), after.data().end())) {
    failures.push_back("round-trip predictions differ");
  } else {
    notes.push_back("round-trip logits identical on " + std::to_string(rows.size()) + " images");
  }

  // Corruption: one flipped payload bit must be caught by the digest.
  auto bytes = read_file(work / "finetuned.ckpt");
  bytes[bytes.size() / 2 + bytes.size() / 4] ^= 0x01;
  write_file(work / "corrupted.ckpt", bytes);
  std::string code;
  try {
    load_checkpoint(work / "corrupted.ckpt");
  } catch (const Error& e) {
    code = e.code();
  }
  if (code != "checkpoint_digest") {
    failures.push_back("corrupted checkpoint not detected (got '" + code + "')");
  } else {
    notes.push_back("corruption detected by digest");
  }

  o.pass = failures.empty();
  for (const auto& s : notes) o.detail += (o.detail.empty() ? "" : "; ") + s;
  for (const auto& s : failures) o.detail += (o.detail.empty() ? "" : "; ") + ("FAILED " + s);
  return o;
}

// ---------------------------------------------------------------------------
// 8. Service contract: the CLI and HTTP suites, run as separate processes.

Outcome service(const std::vector<std::string>& binaries) {
  Outcome o;
  if (binaries.empty()) {
    o.pass = false;
    o.detail = "no service test binaries given";
    return o;
  }
  for (const auto& bin : binaries) {
    const std::string cmd = "\"" + bin + "\" --gtest_brief=1 > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    const bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0;
    o.pass = o.pass && ok;
    o.detail += (o.detail.empty() ? "" : "; ") + fs::path(bin).filename().string() + (ok ? " passed" : " FAILED");
  }
  o.detail += "; no UI bundle mounted";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attnsteer acceptance criteria"};
  std::string config_path = std::string(ATTNSTEER_SOURCE_DIR) + "/configs/reference.json";
  std::string work = "acceptance_work";
  std::vector<int> only;
  std::vector<std::string> binaries;
  app.add_option("--config", config_path, "reference run configuration");
  app.add_option("--work", work, "scratch directory for data and checkpoints");
  app.add_option("--only", only, "run a subset of criteria")->delimiter(',');
  app.add_option("--test-binary", binaries, "service test executables for criterion 8");
  CLI11_PARSE(app, argc, argv);

  auto wanted = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };
  int failed = 0, ran = 0;
  auto report = [&](int k, const std::string& name, const Outcome& o) {
    ++ran;
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << k << " (" << name << "): " << o.detail << std::endl;
  };
  auto guarded = [&](int k, const std::string& name, const std::function<Outcome()>& fn) {
    if (!wanted(k)) return;
    try {
      report(k, name, fn());
    } catch (const std::exception& e) {
      report(k, name, {false, std::string("error: ") + e.what()});
    }
  };

  try {
    fs::create_directories(work);
    guarded(1, "autodiff", autodiff);
    guarded(2, "Grad-CAM oracle", gradcam_oracle);
    guarded(3, "IoU loss", iou_suite);

    if (wanted(4) || wanted(5) || wanted(6) || wanted(7)) {
      std::optional<Reference> ref;
      try {
        ref = run_reference(load_run_config(config_path), work);
      } catch (const std::exception& e) {
        for (int k : {4, 5, 6, 7}) {
          if (wanted(k)) report(k, "reference experiment", {false, std::string("error: ") + e.what()});
        }
      }
      if (ref) {
        guarded(4, "combined-loss linearity", [&] { return linearity(*ref); });
        guarded(5, "bias mitigation", [&] { return mitigation(*ref); });
        guarded(6, "comparison networks", [&] { return orderings(*ref); });
        guarded(7, "determinism and persistence", [&] { return determinism(*ref, work); });
      }
    }
    guarded(8, "service contract", [&] { return service(binaries); });
  } catch (const std::exception& e) {
    std::cout << "FAIL  harness error: " << e.what() << std::endl;
    return 2;
  }
  std::cout << (ran - failed) << "/" << ran << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
