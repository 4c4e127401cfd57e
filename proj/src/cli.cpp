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

#include <cstdlib>
#include <ostream>

#include "CLI11.hpp"

#include "attnsteer/error.hpp"
#include "attnsteer/gradcam.hpp"
#include "attnsteer/io.hpp"
#include "attnsteer/service.hpp"

namespace attnsteer {

namespace fs = std::filesystem;

namespace {

void save_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_checkpoint(const Checkpoint& ck, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_checkpoint(ck, path);
}

/// Options shared by the training commands; each overrides the matching
/// config-file value only when given.
struct TrainFlags {
  std::optional<double> lr, momentum, clip_norm;
  std::optional<std::size_t> batch_size, patience;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> cam_mode;

  void add(CLI::App* cmd) {
    cmd->add_option("--lr", lr, "learning rate");
    cmd->add_option("--momentum", momentum, "SGD momentum");
    cmd->add_option("--batch-size", batch_size, "minibatch size");
    cmd->add_option("--patience", patience, "early-stopping patience (epochs)");
    cmd->add_option("--seed", seed, "shuffling seed (baseline also: init seed)");
    cmd->add_option("--clip-norm", clip_norm, "global gradient-norm clip, 0 disables");
    cmd->add_option("--cam-mode", cam_mode, "train_full | train_detached");
  }
  void apply(TrainConfig& c) const {
    if (lr) c.lr = *lr;
    if (momentum) c.momentum = *momentum;
    if (clip_norm) c.clip_norm = *clip_norm;
    if (batch_size) c.batch_size = *batch_size;
    if (patience) c.patience = *patience;
    if (seed) c.seed = *seed;
    if (cam_mode) c.cam_mode = parse_cam_mode(*cam_mode);
  }
};

std::vector<std::string> split_pair(const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos || comma == 0 || comma + 1 == text.size()) {
    throw UsageError("--pair must look like a,b (got '" + text + "')");
  }
  return {text.substr(0, comma), text.substr(comma + 1)};
}

RunConfig run_config(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

ProgressFn epoch_printer(std::ostream& out) {
  return [&out, last = std::size_t{0}](double, const StepLog& s) mutable {
    if (s.epoch + 1 != last) {
      last = s.epoch + 1;
      out << "  epoch " << last << " ..." << std::endl;
    }
  };
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"attnsteer: Grad-CAM attention steering toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "run configuration (JSON with data/model/train/finetune/experiment)");

  // generate
  auto* gen = app.add_subcommand("generate", "generate a synthetic dataset");
  std::string gen_out;
  std::optional<std::uint64_t> gen_seed;
  std::optional<std::size_t> gen_workers, gen_train, gen_val, gen_test;
  std::optional<double> gen_rho;
  gen->add_option("--config", config_path, "generator config (bare, or a run config with a data section)");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--workers", gen_workers, "worker threads (output does not depend on it)");
  gen->add_option("--train", gen_train, "train count");
  gen->add_option("--val", gen_val, "validation count");
  gen->add_option("--test", gen_test, "test count");
  gen->add_option("--rho", gen_rho, "co-occurrence rate of every configured pair");

  // init
  auto* init = app.add_subcommand("init", "write a freshly initialized checkpoint");
  std::string init_data, init_out;
  std::uint64_t init_seed = 1;
  init->add_option("--config", config_path, "run config (model section)");
  init->add_option("--data", init_data, "dataset whose attributes the model predicts")->required();
  init->add_option("--out", init_out, "checkpoint path")->required();
  init->add_option("--seed", init_seed, "init seed");

  // train
  auto* train = app.add_subcommand("train", "train a baseline (or continue a checkpoint with --from)");
  std::string train_data, train_out, train_from, train_log;
  std::optional<std::size_t> train_epochs;
  TrainFlags train_flags;
  train->add_option("--config", config_path, "run config");
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "checkpoint path")->required();
  train->add_option("--from", train_from, "continue this checkpoint for --epochs epochs (no early stopping)");
  train->add_option("--epochs", train_epochs, "max epochs (baseline) or exact epochs (--from)");
  train->add_option("--log", train_log, "per-step loss CSV");
  train_flags.add(train);

  // gradcam
  auto* cam = app.add_subcommand("gradcam", "Grad-CAM heatmap of one image");
  std::string cam_ckpt, cam_image, cam_attr, cam_out, cam_json, cam_gray;
  cam->add_option("--ckpt", cam_ckpt, "checkpoint")->required();
  cam->add_option("--image", cam_image, "grayscale PNG")->required();
  cam->add_option("--attr", cam_attr, "attribute name or index")->required();
  cam->add_option("--out", cam_out, "heatmap PNG (upsampled to the image size)")->required();
  cam->add_option("--json", cam_json, "also write the grid as JSON");
  cam->add_option("--gray", cam_gray, "also write the raw grid as a gray PNG");

  // finetune
  auto* ft = app.add_subcommand("finetune", "fine-tune toward a region with the combined loss");
  std::string ft_ckpt, ft_data, ft_attr, ft_regions, ft_out, ft_log;
  std::optional<double> ft_wa, ft_wg;
  std::optional<std::size_t> ft_epochs;
  TrainFlags ft_flags;
  ft->add_option("--config", config_path, "run config (finetune section)");
  ft->add_option("--ckpt", ft_ckpt, "parent checkpoint")->required();
  ft->add_option("--data", ft_data, "dataset directory")->required();
  ft->add_option("--attr", ft_attr, "attribute name or index")->required();
  ft->add_option("--regions", ft_regions, "regions with weights, e.g. mouth:3.0,chin")->required();
  ft->add_option("--wa", ft_wa, "attribute-loss weight");
  ft->add_option("--wg", ft_wg, "attention-loss weight");
  ft->add_option("--epochs", ft_epochs, "fine-tune epochs");
  ft->add_option("--out", ft_out, "child checkpoint path")->required();
  ft->add_option("--log", ft_log, "per-step loss CSV");
  ft_flags.add(ft);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate on test, E1 and E2");
  std::string ev_ckpt, ev_data, ev_pair, ev_region, ev_out;
  bool ev_table = false;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--pair", ev_pair, "attributes a,b")->required();
  ev->add_option("--region", ev_region, "region list for attention_in_roi")->required();
  ev->add_option("--out", ev_out, "report JSON path");
  ev->add_flag("--table", ev_table, "print the text table");

  // compare
  auto* cmp = app.add_subcommand("compare", "baseline, fine-tuned, N_o and N_w on one dataset");
  std::string cmp_data, cmp_region, cmp_pair, cmp_out;
  std::optional<std::size_t> cmp_epochs;
  cmp->add_option("--config", config_path, "run config");
  cmp->add_option("--data", cmp_data, "dataset directory")->required();
  cmp->add_option("--region", cmp_region, "region list (default from config: mouth:3)");
  cmp->add_option("--pair", cmp_pair, "attributes a,b (default from config)");
  cmp->add_option("--epochs", cmp_epochs, "max baseline epochs");
  cmp->add_option("--out", cmp_out, "directory for checkpoints, reports and the table");

  // serve
  auto* srv = app.add_subcommand("serve", "HTTP API over a workspace");
  std::string srv_workspace, srv_host = "127.0.0.1", srv_ui;
  int srv_port = 8080;
  if (const char* env = std::getenv("WORKSPACE")) srv_workspace = env;
  if (const char* env = std::getenv("PORT")) srv_port = std::atoi(env);
  srv->add_option("--workspace", srv_workspace, "workspace root (env WORKSPACE)");
  srv->add_option("--port", srv_port, "port (env PORT; 0 picks a free one)");
  srv->add_option("--host", srv_host, "bind address");
  srv->add_option("--ui", srv_ui, "static UI bundle directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::usage);
  }

  try {
    if (*gen) {
      GenConfig g = config_path.empty() ? GenConfig::defaults() : load_gen_config(config_path);
      if (gen_seed) g.seed = *gen_seed;
      if (gen_workers) g.workers = *gen_workers;
      if (gen_train) g.train = *gen_train;
      if (gen_val) g.val = *gen_val;
      if (gen_test) g.test = *gen_test;
      if (gen_rho) {
        for (auto& c : g.cooccurrence) c.rho = *gen_rho;
      }
      const auto m = generate(g, gen_out);
      out << "generated " << m.records.size() << " records in " << gen_out << "\n";
      for (const auto& c : g.cooccurrence) {
        const auto s = cooccurrence(m, c.a, c.b);
        out << "  P(" << c.b << " | " << c.a << ") = " << s.rate() << " over " << s.a_positive << " (rho " << c.rho
            << (s.within_three_sigma(c.rho) ? ", within 3 sigma)" : ", OUTSIDE 3 sigma)") << "\n";
      }
    } else if (*init) {
      const RunConfig rc = run_config(config_path);
      const auto m = load_manifest(init_data);
      ModelSpec spec = rc.model;
      spec.num_attributes = m.attributes.size();
      spec.fc_widths.back() = spec.num_attributes;
      Checkpoint ck{init_model(spec, init_seed), {}};
      ck.meta.kind = "init";
      ck.meta.seed = init_seed;
      ck.meta.extra["attributes"] = m.attributes;
      write_checkpoint(ck, init_out);
      out << "checkpoint " << checkpoint_id(ck) << " -> " << init_out << "\n";
    } else if (*train) {
      RunConfig rc = run_config(config_path);
      train_flags.apply(rc.train);
      const auto m = load_manifest(train_data);
      TrainResult r;
      if (!train_from.empty()) {
        r = run_continue(load_checkpoint(train_from), m, rc.train, train_epochs.value_or(1), epoch_printer(out));
      } else {
        if (train_epochs) rc.train.max_epochs = *train_epochs;
        r = run_train(m, rc.model, rc.train, epoch_printer(out));
        for (const auto& e : r.epochs) {
          out << "  epoch " << e.epoch << ": train " << e.train_loss << ", val " << e.val_loss << "\n";
        }
      }
      write_checkpoint(r.checkpoint, train_out);
      if (!train_log.empty()) save_text(train_log, loss_csv(r.steps));
      out << "checkpoint " << checkpoint_id(r.checkpoint) << " (epoch " << r.checkpoint.meta.epoch << ") -> "
          << train_out << "\n";
    } else if (*cam) {
      const Checkpoint ck = load_checkpoint(cam_ckpt);
      const Image img = read_png(cam_image);
      const auto& spec = ck.state.spec;
      if (img.channels != spec.channels || img.height != spec.height || img.width != spec.width) {
        throw DataError(cam_image + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                            ", the model expects " + std::to_string(spec.width) + "x" + std::to_string(spec.height),
                        "bad_image");
      }
      std::vector<double> px(img.pixels.size());
      for (std::size_t i = 0; i < px.size(); ++i) px[i] = img.pixels[i] / 255.0;
      const std::size_t attr = resolve_attribute(cam_attr, checkpoint_attributes(ck));
      const CamMap map = compute_cam(ck.state, Tensor({1, img.channels, img.height, img.width}, px), attr);
      if (fs::path(cam_out).has_parent_path()) fs::create_directories(fs::path(cam_out).parent_path());
      write_png(cam_out, render_heatmap(map, img.height, img.width));
      if (!cam_json.empty()) save_text(cam_json, cam_to_json(map).dump(2) + "\n");
      if (!cam_gray.empty()) write_png(cam_gray, cam_to_gray(map));
      out << (map.degenerate ? "degenerate map (no positive evidence); " : "") << "heatmap -> " << cam_out << "\n";
    } else if (*ft) {
      RunConfig rc = run_config(config_path);
      FinetuneRequest request;
      request.config = rc.finetune;
      ft_flags.apply(request.config);
      if (ft_wa) request.config.weights.w_a = *ft_wa;
      if (ft_wg) request.config.weights.w_g = *ft_wg;
      if (ft_epochs) request.config.finetune_epochs = *ft_epochs;
      request.attribute = ft_attr;
      request.regions = parse_region_list(ft_regions);
      const auto r = run_finetune(load_checkpoint(ft_ckpt), load_manifest(ft_data), request, epoch_printer(out));
      for (const auto& w : r.warnings) err << "warning: " << w << "\n";
      write_checkpoint(r.checkpoint, ft_out);
      if (!ft_log.empty()) save_text(ft_log, loss_csv(r.steps));
      out << "checkpoint " << checkpoint_id(r.checkpoint) << " (parent " << r.checkpoint.meta.parent << ") -> "
          << ft_out << "\n";
    } else if (*ev) {
      const auto pair = split_pair(ev_pair);
      const auto report = run_eval(load_checkpoint(ev_ckpt), load_manifest(ev_data), pair[0], pair[1],
                                   parse_region_list(ev_region));
      if (!ev_out.empty()) save_text(ev_out, report.dump(2) + "\n");
      if (ev_table || ev_out.empty()) out << report.dump(2) << "\n";
    } else if (*cmp) {
      RunConfig rc = run_config(config_path);
      if (!cmp_region.empty()) rc.regions = parse_region_list(cmp_region);
      if (!cmp_pair.empty()) {
        const auto pair = split_pair(cmp_pair);
        rc.attr_a = pair[0];
        rc.attr_b = pair[1];
      }
      if (cmp_epochs) rc.train.max_epochs = *cmp_epochs;
      const auto m = load_manifest(cmp_data);
      if (rc.model.num_attributes != m.attributes.size()) {
        rc.model.num_attributes = m.attributes.size();
        rc.model.fc_widths.back() = rc.model.num_attributes;
      }
      const ImageSet train_set = load_images(m, "train"), val_set = load_images(m, "val"),
                     test_set = load_images(m, "test");
      const EvalSplits splits = split_e1_e2(m, rc.attr_a, rc.attr_b);
      out << "baseline\n";
      TrainResult base = train_baseline(train_set, val_set, rc.model, rc.train, epoch_printer(out));
      base.checkpoint.meta.extra["attributes"] = m.attributes;
      out << "fine-tune\n";
      const auto [gh, gw] = rc.model.cam_grid();
      const AttentionTarget target{m.attribute_index(rc.attr_a), rasterize(RegionTemplate::builtin(), rc.regions, gh, gw)};
      TrainResult tuned = finetune(base.checkpoint, train_set, target, rc.finetune, epoch_printer(out));
      tuned.checkpoint.meta.extra["attributes"] = m.attributes;
      out << "N_o and N_w\n";
      std::vector<std::string> names;
      for (const auto& r : rc.regions) names.push_back(r.name);
      auto nets = train_comparisons(train_set, val_set, rc.model, rc.train, names, epoch_printer(out));
      nets.region_only.checkpoint.meta.extra["attributes"] = m.attributes;
      nets.mixed.checkpoint.meta.extra["attributes"] = m.attributes;
      std::vector<std::pair<std::string, EvalReport>> rows;
      const std::vector<std::pair<std::string, const Checkpoint*>> nets_in_order{
          {"baseline", &base.checkpoint},
          {"fine-tuned", &tuned.checkpoint},
          {"N_o", &nets.region_only.checkpoint},
          {"N_w", &nets.mixed.checkpoint}};
      for (const auto& [name, ck] : nets_in_order) {
        rows.emplace_back(name, evaluate(*ck, test_set, splits, m.attributes, rc.attr_a, rc.attr_b, rc.regions));
        if (!cmp_out.empty()) {
          write_checkpoint(*ck, fs::path(cmp_out) / (name + ".ckpt"));
          save_text(fs::path(cmp_out) / (name + ".report.json"), report_to_json(rows.back().second).dump(2) + "\n");
        }
      }
      const std::string table = format_table(rows);
      if (!cmp_out.empty()) {
        save_text(fs::path(cmp_out) / "table.txt", table);
        save_text(fs::path(cmp_out) / "finetune_loss.csv", loss_csv(tuned.steps));
      }
      out << table;
    } else if (*srv) {
      if (srv_workspace.empty()) throw UsageError("serve needs --workspace or WORKSPACE");
      ServiceOptions options;
      options.ui_dir = srv_ui;
      serve(srv_workspace, srv_host, srv_port, options);
    }
  } catch (const Error& e) {
    err << "error [" << e.code() << "]: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error [io]: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::data);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::data);
  }
  return 0;
}

}  // namespace attnsteer
