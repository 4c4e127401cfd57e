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

#include <charconv>
#include <cmath>
#include <iostream>
#include <set>

#include "httplib.h"

#include "attnsteer/error.hpp"
#include "attnsteer/gradcam.hpp"
#include "attnsteer/io.hpp"
#include "attnsteer/service.hpp"

namespace attnsteer {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

int http_status(const Error& error) {
  static const std::set<std::string> not_found{"unknown_checkpoint", "unknown_sample", "unknown_job",
                                               "unknown_report", "unknown_dataset"};
  static const std::set<std::string> unprocessable{
      "empty_region_selection", "empty_e2",    "unknown_region",         "bad_weight",    "unknown_attribute",
      "attribute_out_of_range", "bad_pair",    "shape_mismatch",         "empty_split",   "region_too_small",
      "dataset_exists"};
  if (not_found.count(error.code())) return 404;
  if (error.code() == "training_busy") return 409;
  if (unprocessable.count(error.code())) return 422;
  switch (error.kind()) {
    case ErrorKind::usage: return 400;
    case ErrorKind::data: return 422;
    case ErrorKind::numeric: return 500;
  }
  return 500;
}

namespace {

void send_json(httplib::Response& res, const ojson& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(2) + "\n", "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  send_json(res, {{"error", {{"code", code}, {"message", message}}}}, status);
}

/// Wraps a handler so library errors become JSON error responses.
httplib::Server::Handler guarded(std::function<void(const httplib::Request&, httplib::Response&)> fn) {
  return [fn = std::move(fn)](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const Error& e) {
      send_error(res, http_status(e), e.code(), e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, 400, "bad_request", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  };
}

nlohmann::json parse_body(const httplib::Request& req) {
  nlohmann::json body;
  try {
    body = nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError(std::string("malformed JSON body: ") + e.what(), "bad_request");
  }
  if (!body.is_object()) throw UsageError("request body must be a JSON object", "bad_request");
  return body;
}

std::string query(const httplib::Request& req, const std::string& key, const std::string& fallback = "") {
  return req.has_param(key) ? req.get_param_value(key) : fallback;
}

std::size_t query_count(const httplib::Request& req, const std::string& key, std::size_t fallback) {
  if (!req.has_param(key)) return fallback;
  const std::string v = req.get_param_value(key);
  std::size_t n = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), n);
  if (ec != std::errc() || end != v.data() + v.size() || n == 0) {
    throw UsageError(key + " must be a positive integer", "bad_request");
  }
  return n;
}

/// Regions as [{name, weight}] (or a "mouth:3,chin" string).
std::vector<RegionSelection> parse_regions(const nlohmann::json& j) {
  if (j.is_string()) return parse_region_list(j.get<std::string>());
  if (!j.is_array()) throw UsageError("regions must be an array of {name, weight}", "bad_request");
  std::vector<RegionSelection> out;
  for (const auto& r : j) {
    if (!r.is_object() || !r.contains("name")) throw UsageError("each region needs a name", "bad_request");
    RegionSelection s{r.at("name").get<std::string>(), r.value("weight", 1.0)};
    if (!(s.weight > 0.0) || !std::isfinite(s.weight)) {
      throw UsageError("region '" + s.name + "' has a non-positive weight", "bad_weight");
    }
    out.push_back(s);
  }
  return out;
}

Tensor image_tensor(const Image& img) {
  std::vector<double> data(img.pixels.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<double>(img.pixels[i]) / 255.0;
  return Tensor({1, img.channels, img.height, img.width}, std::move(data));
}

ojson checkpoint_json(const CheckpointInfo& c, const std::vector<CheckpointInfo>& all) {
  ojson children = ojson::array();
  for (const auto& other : all) {
    if (other.parent == c.id) children.push_back(other.id);
  }
  return {{"id", c.id},
          {"kind", c.kind},
          {"parent", c.parent.empty() ? ojson(nullptr) : ojson(c.parent)},
          {"children", children},
          {"epoch", c.epoch},
          {"seed", c.seed},
          {"digest", c.digest}};
}

}  // namespace

ApiService::ApiService(Workspace& workspace, JobRunner& jobs, ServiceOptions options)
    : workspace_(workspace), jobs_(jobs), options_(std::move(options)) {}

void ApiService::install(httplib::Server& server) {
  server.Get("/api/health", guarded([](const httplib::Request&, httplib::Response& res) {
               send_json(res, {{"status", "ok"}});
             }));

  server.Get("/api/template", guarded([this](const httplib::Request&, httplib::Response& res) {
               ojson regions = ojson::array();
               for (const auto& r : options_.region_template.regions) {
                 regions.push_back({{"name", r.name}, {"rect", {r.rect.x0, r.rect.y0, r.rect.x1, r.rect.y1}}});
               }
               send_json(res, {{"version", options_.region_template.version}, {"regions", regions}});
             }));

  server.Get("/api/workspace", guarded([this](const httplib::Request&, httplib::Response& res) {
               send_json(res, workspace_.index());
             }));

  server.Get("/api/datasets", guarded([this](const httplib::Request&, httplib::Response& res) {
               ojson out = ojson::array();
               for (const auto& name : workspace_.datasets()) {
                 const auto m = workspace_.dataset(name);
                 ojson counts;
                 for (const auto& s : kSplits) counts[s] = m->split(s).size();
                 out.push_back({{"name", name}, {"attributes", m->attributes}, {"counts", counts}});
               }
               send_json(res, {{"datasets", out}});
             }));

  server.Get("/api/samples", guarded([this](const httplib::Request& req, httplib::Response& res) {
               const auto m = workspace_.dataset(query(req, "dataset"));
               const std::string dataset = m->root.filename();
               const std::string split = query(req, "split", "test");
               if (std::find(kSplits.begin(), kSplits.end(), split) == kSplits.end()) {
                 throw UsageError("unknown split '" + split + "'", "bad_request");
               }
               const std::string attr = query(req, "attr");
               const std::size_t page = query_count(req, "page", 1);
               const std::size_t size = std::min<std::size_t>(query_count(req, "page_size", options_.page_size), 200);
               std::vector<const SampleRecord*> rows;
               const std::size_t a = attr.empty() ? 0 : resolve_attribute(attr, m->attributes);
               for (const auto* r : m->split(split)) {
                 if (attr.empty() || r->labels[a] == 1) rows.push_back(r);
               }
               ojson samples = ojson::array();
               for (std::size_t i = (page - 1) * size; i < std::min(rows.size(), page * size); ++i) {
                 ojson labels;
                 for (std::size_t k = 0; k < m->attributes.size(); ++k) labels[m->attributes[k]] = rows[i]->labels[k];
                 samples.push_back({{"id", rows[i]->id},
                                    {"split", rows[i]->split},
                                    {"labels", labels},
                                    {"image_url", "/api/images/" + dataset + "/" + rows[i]->id + ".png"}});
               }
               send_json(res, {{"dataset", dataset},
                               {"split", split},
                               {"attr", attr.empty() ? ojson(nullptr) : ojson(attr)},
                               {"page", page},
                               {"page_size", size},
                               {"total", rows.size()},
                               {"pages", (rows.size() + size - 1) / size},
                               {"samples", samples}});
             }));

  server.Get(R"(/api/images/([^/]+)/([^/]+)\.png)",
             guarded([this](const httplib::Request& req, httplib::Response& res) {
               const auto m = workspace_.dataset(req.matches[1]);
               const auto& r = m->record(req.matches[2]);
               const auto bytes = read_file(m->root / r.path);
               res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
             }));

  // Grad-CAM of one sample. The JSON is recomputed on every call (it is a
  // pure function of the stored checkpoint and image); the PNG is cached.
  auto cam_for = [this](const httplib::Request& req, std::string* cache_key) {
    const std::string ckpt_id = req.matches[1];
    const std::string sample = req.matches[2];
    const Checkpoint ck = workspace_.checkpoint(ckpt_id);
    const auto m = workspace_.dataset(query(req, "dataset"));
    const SampleRecord& r = m->record(sample);
    if (!req.has_param("attr")) throw UsageError("attr query parameter is required", "bad_request");
    const std::size_t attr = resolve_attribute(req.get_param_value("attr"), m->attributes);
    if (ck.state.spec.num_attributes != m->attributes.size()) {
      throw DataError("checkpoint and dataset disagree on the attribute count", "shape_mismatch");
    }
    const Image img = read_png(m->root / r.path);
    if (cache_key) {
      *cache_key = ckpt_id + "_" + std::string(m->root.filename()) + "_" + sample + "_" + m->attributes[attr];
    }
    return std::make_tuple(compute_cam(ck.state, image_tensor(img), attr), img, std::string(m->root.filename()),
                           m->attributes[attr]);
  };

  server.Get(R"(/api/gradcam/([^/]+)/([^/]+)/heatmap\.png)",
             guarded([this, cam_for](const httplib::Request& req, httplib::Response& res) {
               std::string key;
               const auto [cam, img, dataset, attr] = cam_for(req, &key);
               const fs::path cached = workspace_.cache_dir() / "heatmaps" / (key + ".png");
               if (!fs::exists(cached)) {
                 fs::create_directories(cached.parent_path());
                 write_png(cached, render_heatmap(cam, img.height, img.width));
               }
               const auto bytes = read_file(cached);
               res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
             }));

  server.Get(R"(/api/gradcam/([^/]+)/([^/]+))",
             guarded([cam_for](const httplib::Request& req, httplib::Response& res) {
               const auto [cam, img, dataset, attr] = cam_for(req, nullptr);
               ojson body;
               body["checkpoint"] = req.matches[1];
               body["dataset"] = dataset;
               body["sample"] = req.matches[2];
               body["attribute_name"] = attr;
               const auto grid = cam_to_json(cam);
               for (const auto& [k, v] : grid.items()) body[k] = v;
               body["png_url"] = "/api/gradcam/" + std::string(req.matches[1]) + "/" + std::string(req.matches[2]) +
                                 "/heatmap.png?dataset=" + dataset + "&attr=" + attr;
               send_json(res, body);
             }));

  server.Post("/api/jobs/finetune", guarded([this](const httplib::Request& req, httplib::Response& res) {
                const auto body = parse_body(req);
                if (!body.contains("ckpt") || !body.contains("attr")) {
                  throw UsageError("ckpt and attr are required", "bad_request");
                }
                const std::string ckpt_id = body.at("ckpt").get<std::string>();
                const auto parent = std::make_shared<Checkpoint>(workspace_.checkpoint(ckpt_id));
                const auto data = workspace_.dataset(body.value("dataset", ""));
                FinetuneRequest request;
                request.attribute = body.at("attr").is_number() ? std::to_string(body.at("attr").get<std::size_t>())
                                                                : body.at("attr").get<std::string>();
                request.regions = parse_regions(body.value("regions", nlohmann::json::array()));
                from_json(body, request.config);
                request.config.finetune_epochs = body.value("epochs", request.config.finetune_epochs);
                finetune_target(*parent, *data, request, options_.region_template);
                const RegionTemplate tmpl = options_.region_template;
                Workspace& ws = workspace_;
                const std::string id = jobs_.submit("finetune", true, [&ws, parent, data, request, tmpl](JobContext& ctx) {
                  auto r = run_finetune(*parent, *data, request, [&](double p, const StepLog& s) { ctx.step(p, s); },
                                        tmpl);
                  for (const auto& w : r.warnings) ctx.warn(w);
                  ctx.set_checkpoint(ws.add_checkpoint(r.checkpoint));
                });
                send_json(res, {{"job_id", id}, {"state", "queued"}}, 202);
              }));

  server.Post("/api/jobs/train", guarded([this](const httplib::Request& req, httplib::Response& res) {
                const auto body = parse_body(req);
                const auto data = workspace_.dataset(body.value("dataset", ""));
                ModelSpec spec;
                if (body.contains("model")) {
                  spec = body.at("model").get<ModelSpec>();
                } else {
                  spec.num_attributes = data->attributes.size();
                  spec.fc_widths.back() = spec.num_attributes;
                }
                spec.validate();
                TrainConfig config;
                from_json(body, config);
                config.validate();
                Workspace& ws = workspace_;
                const std::string id = jobs_.submit("train", true, [&ws, data, spec, config](JobContext& ctx) {
                  auto r = run_train(*data, spec, config, [&](double p, const StepLog& s) { ctx.step(p, s); });
                  ctx.set_checkpoint(ws.add_checkpoint(r.checkpoint));
                });
                send_json(res, {{"job_id", id}, {"state", "queued"}}, 202);
              }));

  server.Post("/api/jobs/eval", guarded([this](const httplib::Request& req, httplib::Response& res) {
                const auto body = parse_body(req);
                if (!body.contains("ckpt") || !body.contains("pair")) {
                  throw UsageError("ckpt and pair are required", "bad_request");
                }
                const auto ck = std::make_shared<Checkpoint>(workspace_.checkpoint(body.at("ckpt").get<std::string>()));
                const auto data = workspace_.dataset(body.value("dataset", ""));
                const auto pair = body.at("pair").get<std::vector<std::string>>();
                if (pair.size() != 2) throw UsageError("pair must name two attributes", "bad_request");
                const auto regions = parse_regions(body.value("regions", nlohmann::json::array()));
                if (regions.empty()) throw UsageError("no region selected", "empty_region_selection");
                for (const auto& r : regions) options_.region_template.rect(r.name);
                split_e1_e2(*data, pair[0], pair[1]);
                const RegionTemplate tmpl = options_.region_template;
                Workspace& ws = workspace_;
                const std::string id = jobs_.submit("eval", false, [&ws, ck, data, pair, regions, tmpl](JobContext& ctx) {
                  ctx.set_report(ws.add_report(run_eval(*ck, *data, pair[0], pair[1], regions, tmpl)));
                });
                send_json(res, {{"job_id", id}, {"state", "queued"}}, 202);
              }));

  server.Post("/api/jobs/generate", guarded([this](const httplib::Request& req, httplib::Response& res) {
                const auto body = parse_body(req);
                const std::string name = body.value("name", "");
                if (name.empty() || name.find_first_not_of("abcdefghijklmnopqrstuvwxyz0123456789-_") != std::string::npos) {
                  throw UsageError("name must be a non-empty [a-z0-9_-] string", "bad_request");
                }
                if (fs::exists(workspace_.datasets_dir() / name)) {
                  throw UsageError("dataset '" + name + "' already exists", "dataset_exists");
                }
                const GenConfig config = body.value("config", nlohmann::json::object()).get<GenConfig>();
                config.validate(options_.region_template);
                const fs::path out = workspace_.datasets_dir() / name;
                const RegionTemplate tmpl = options_.region_template;
                const std::string id = jobs_.submit("generate", true, [config, out, name, tmpl](JobContext& ctx) {
                  const fs::path staging = out.string() + ".partial";
                  fs::remove_all(staging);
                  generate(config, staging, tmpl);
                  fs::rename(staging, out);
                  ctx.set_dataset(name);
                });
                send_json(res, {{"job_id", id}, {"state", "queued"}}, 202);
              }));

  server.Get("/api/jobs", guarded([this](const httplib::Request&, httplib::Response& res) {
               ojson out = ojson::array();
               for (const auto& j : jobs_.list()) {
                 out.push_back({{"id", j.id}, {"kind", j.kind}, {"state", to_string(j.state)}, {"progress", j.progress}});
               }
               send_json(res, {{"jobs", out}});
             }));

  server.Get(R"(/api/jobs/([^/]+)/loss\.csv)", guarded([this](const httplib::Request& req, httplib::Response& res) {
               const auto job = jobs_.get(req.matches[1]);
               if (!job) throw UsageError("unknown job '" + std::string(req.matches[1]) + "'", "unknown_job");
               res.set_content(loss_csv(job->loss_curve), "text/csv");
             }));

  server.Get(R"(/api/jobs/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
               const auto job = jobs_.get(req.matches[1]);
               if (!job) throw UsageError("unknown job '" + std::string(req.matches[1]) + "'", "unknown_job");
               send_json(res, job_to_json(*job));
             }));

  server.Get("/api/reports", guarded([this](const httplib::Request&, httplib::Response& res) {
               send_json(res, {{"reports", workspace_.reports()}});
             }));

  server.Get(R"(/api/reports/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
               send_json(res, workspace_.report(req.matches[1]));
             }));

  server.Get("/api/checkpoints", guarded([this](const httplib::Request&, httplib::Response& res) {
               const auto all = workspace_.checkpoints();
               ojson out = ojson::array();
               for (const auto& c : all) out.push_back(checkpoint_json(c, all));
               send_json(res, {{"checkpoints", out}});
             }));

  server.Get(R"(/api/checkpoints/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
               const std::string id = req.matches[1];
               workspace_.checkpoint(id);
               const auto all = workspace_.checkpoints();
               for (const auto& c : all) {
                 if (c.id == id) return send_json(res, checkpoint_json(c, all));
               }
             }));

  if (!options_.ui_dir.empty() && fs::is_directory(options_.ui_dir)) {
    server.set_mount_point("/", options_.ui_dir.string());
  } else {
    server.Get("/", [](const httplib::Request&, httplib::Response& res) {
      send_json(res, {{"service", "attnsteer"}, {"ui", false}, {"api", "/api"}});
    });
  }
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty() && res.status == 404) send_error(res, 404, "not_found", "no such endpoint");
  });
}

void serve(const fs::path& workspace_root, const std::string& host, int port, ServiceOptions options) {
  Workspace workspace(workspace_root);
  JobRunner jobs(workspace.jobs_dir());
  ApiService api(workspace, jobs, std::move(options));
  httplib::Server server;
  api.install(server);
  if (port == 0) {
    port = server.bind_to_any_port(host);
  } else if (!server.bind_to_port(host, port)) {
    throw DataError("cannot bind " + host + ":" + std::to_string(port), "io");
  }
  std::cout << "attnsteer serving " << workspace_root.string() << " on http://" << host << ":" << port << std::endl;
  server.listen_after_bind();
}

}  // namespace attnsteer
