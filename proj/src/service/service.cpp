// SPDX-License-Identifier: Apache-2.0
#include "shortlens/service/service.hpp"

#include <httplib.h>

#include <cstdio>
#include <regex>

#include "shortlens/concepts/concepts.hpp"
#include "shortlens/error.hpp"
#include "shortlens/pipeline/pipeline.hpp"

namespace shortlens::service {

using pipeline::Pipeline;
using store::Stage;

namespace {

ApiResponse error_response(int status, const std::string& message) {
  return {status, {{"error", message}}};
}

std::size_t parse_index(const std::string& text, const char* what) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size() || text.front() == '-') {
    throw InvalidInput(std::string("invalid ") + what + " '" + text + "'");
  }
  return static_cast<std::size_t>(v);
}

json stages_json(const store::RunRecord& record) {
  json out = json::object();
  for (Stage s : store::all_stages()) out[store::to_string(s)] = record.done(s);
  return out;
}

}  // namespace

Service::Service(std::filesystem::path root) : store_(std::move(root)) {}

std::mutex& Service::run_lock(const std::string& run_id) {
  std::lock_guard<std::mutex> guard(locks_guard_);
  auto& slot = locks_[run_id];
  if (!slot) slot = std::make_unique<std::mutex>();
  return *slot;
}

ApiResponse Service::handle(const std::string& method, const std::string& path,
                            const std::map<std::string, std::string>& query,
                            const std::string& body) {
  static const std::regex kRunRoute(R"(^/runs/([A-Za-z0-9_.-]+)(/[a-z]+)?/?$)");
  try {
    if (path == "/runs" || path == "/runs/") {
      if (method != "GET") return error_response(405, "method not allowed");
      return list_runs();
    }
    std::smatch m;
    if (!std::regex_match(path, m, kRunRoute)) {
      return error_response(404, "no route for " + path);
    }
    const std::string id = m[1];
    const std::string leaf = m[2].matched ? m[2].str() : "";
    if (!store_.exists(id)) return error_response(404, "unknown run '" + id + "'");
    if (method == "GET") {
      if (leaf.empty()) return get_run(id);
      if (leaf == "/clusters") return get_clusters(id);
      if (leaf == "/prototypes") return get_prototypes(id, query);
      if (leaf == "/concepts") return get_concepts(id);
      if (leaf == "/metrics") return get_metrics(id);
    } else if (method == "POST") {
      if (leaf == "/select") return post_select(id, body);
      if (leaf == "/mitigate") return post_mitigate(id);
    }
    return error_response(404, "no route for " + method + " " + path);
  } catch (const ValidationError& e) {
    return error_response(409, e.what());
  } catch (const InvalidInput& e) {
    return error_response(400, e.what());
  } catch (const NotFound& e) {
    return error_response(404, e.what());
  } catch (const ProviderError& e) {
    return error_response(502, e.what());
  } catch (const json::exception& e) {
    return error_response(400, std::string("malformed JSON: ") + e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

ApiResponse Service::list_runs() {
  json runs = json::array();
  for (const auto& id : store_.list_runs()) {
    try {
      const auto record = store_.load_run(id);
      runs.push_back({{"run_id", id},
                      {"created_at", record.created_at},
                      {"updated_at", record.updated_at},
                      {"seed", record.config.value("seed", 0)},
                      {"stages", stages_json(record)}});
    } catch (const Error& e) {
      runs.push_back({{"run_id", id}, {"error", e.what()}});
    }
  }
  return {200, {{"runs", runs}}};
}

ApiResponse Service::get_run(const std::string& id) {
  const Pipeline p = Pipeline::open(store_, id);
  const auto& r = p.record();
  json out = {{"run_id", id},
              {"created_at", r.created_at},
              {"updated_at", r.updated_at},
              {"config", r.config},
              {"stages", stages_json(r)},
              {"timings", p.timings()},
              {"selection", nullptr}};
  if (r.done(Stage::kSelected)) out["selection"] = p.selection().to_json();
  return {200, out};
}

ApiResponse Service::get_clusters(const std::string& id) {
  const Pipeline p = Pipeline::open(store_, id);
  p.require_before(Stage::kPrototyped);
  if (!p.record().done(Stage::kClustered)) {
    throw ValidationError("stage 'detect' incomplete");
  }
  const auto report = detection::cluster_report_from_artifact(
      store_.read_artifact(id, "clusters"));
  const std::size_t K = report.clustering.assignment.K;
  std::vector<std::size_t> sizes(K, 0);
  for (std::size_t c : report.clustering.assignment.labels) ++sizes[c];
  json clusters = json::array();
  const json stats = detection::stats_to_json(report.stats);
  for (std::size_t c = 0; c < K; ++c) {
    json entry = stats.at(c);
    entry["cluster"] = c;
    entry["size"] = sizes[c];
    entry["representatives"] = report.representatives.at(c);
    clusters.push_back(entry);
  }
  const auto& w = report.weights;
  json out = {{"K", K},
              {"k_pca_used", report.clustering.k_pca_used},
              {"homogeneity_global", report.homogeneity.global},
              {"weights",
               {{"homogeneity", w.homogeneity},
                {"dominant", w.dominant},
                {"non_dominant", w.non_dominant}}},
              {"clusters", clusters},
              {"auto_selection",
               {{"cluster", report.auto_selection.cluster},
                {"scores", report.auto_selection.scores},
                {"tie", report.auto_selection.tie}}},
              {"selection", nullptr}};
  if (p.record().done(Stage::kSelected)) out["selection"] = p.selection().to_json();
  return {200, out};
}

ApiResponse Service::get_prototypes(
    const std::string& id, const std::map<std::string, std::string>& query) {
  const Pipeline p = Pipeline::open(store_, id);
  if (!p.record().done(Stage::kPrototyped)) {
    throw ValidationError("stage 'detect' incomplete");
  }
  const auto it = query.find("cluster");
  if (it == query.end()) throw InvalidInput("query parameter 'cluster' is required");
  const std::size_t cluster = parse_index(it->second, "cluster");
  const auto bank = detection::prototype_bank_from_artifact(
      store_.read_artifact(id, "prototypes"));
  if (cluster >= bank.clusters.size()) {
    throw InvalidInput("cluster " + std::to_string(cluster) + " out of range");
  }
  std::size_t limit = bank.M;
  if (const auto lim = query.find("limit"); lim != query.end()) {
    limit = parse_index(lim->second, "limit");
  }
  const auto data = synth::load_dataset(store_.artifact_dir(id, "dataset"));
  std::map<std::uint64_t, const Image*> image_of;
  for (const auto& s : data.val) image_of[s.id] = &s.image;
  const std::size_t patch = p.config().data.patch_size;
  json patches = json::array();
  const auto top = bank.top(cluster);
  for (std::size_t i = 0; i < top.size() && i < limit; ++i) {
    const auto& sp = top[i];
    const Image crop =
        concepts::patch_crop(*image_of.at(sp.patch.image_id), sp.patch.position, patch);
    patches.push_back({{"rank", i},
                       {"image_id", sp.patch.image_id},
                       {"position", sp.patch.position},
                       {"score", sp.score},
                       {"png_base64", concepts::base64_encode(concepts::encode_png(crop))}});
  }
  return {200,
          {{"cluster", cluster},
           {"M", bank.M},
           {"N", bank.N},
           {"grid", p.config().model.grid()},
           {"patch_size", patch},
           {"scale", 4},
           {"patches", patches}}};
}

ApiResponse Service::get_concepts(const std::string& id) {
  const Pipeline p = Pipeline::open(store_, id);
  if (!p.record().done(Stage::kConcepts)) {
    throw ValidationError("stage 'concepts' incomplete");
  }
  json report = p.concepts_report();
  if (report.value("status", "") == "failed") {
    return {502, {{"error", "concept providers failed for every cluster"},
                  {"concepts", report}}};
  }
  return {200, report};
}

ApiResponse Service::post_select(const std::string& id, const std::string& body) {
  const json req = body.empty() ? json::object() : json::parse(body);
  if (!req.is_object()) throw InvalidInput("request body must be a JSON object");
  const std::string source = req.value("source", "expert");
  std::lock_guard<std::mutex> lock(run_lock(id));
  Pipeline p = Pipeline::open(store_, id);
  pipeline::Outcome outcome;
  if (source == "expert") {
    if (!req.contains("cluster") || !req.at("cluster").is_number_unsigned()) {
      throw InvalidInput("'cluster' must be a non-negative integer");
    }
    outcome = p.select_cluster(req.at("cluster").get<std::size_t>());
  } else if (source == "auto") {
    outcome = p.select_auto(true);
    if (req.contains("cluster") &&
        req.at("cluster") != json(p.selection().cluster)) {
      throw InvalidInput("'cluster' disagrees with the automatic choice");
    }
  } else {
    throw InvalidInput("'source' must be \"expert\" or \"auto\"");
  }
  return {200,
          {{"cached", outcome == pipeline::Outcome::kCached},
           {"selection", p.selection().to_json()}}};
}

ApiResponse Service::post_mitigate(const std::string& id) {
  std::lock_guard<std::mutex> lock(run_lock(id));
  Pipeline p = Pipeline::open(store_, id);
  const bool ran = p.mitigate() == pipeline::Outcome::kRan;
  const bool evaluated = p.evaluate() == pipeline::Outcome::kRan;
  return {200, {{"cached", !ran && !evaluated}, {"metrics", p.metrics()}}};
}

ApiResponse Service::get_metrics(const std::string& id) {
  const Pipeline p = Pipeline::open(store_, id);
  return {200, p.metrics()};
}

void Service::bind(httplib::Server& server) {
  auto dispatch = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query.emplace(k, v);
    const ApiResponse r = handle(req.method, req.path, query, req.body);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server.Get(R"(/runs.*)", dispatch);
  server.Post(R"(/runs.*)", dispatch);
}

void serve(const std::filesystem::path& root, const std::string& host, int port) {
  Service service(root);
  httplib::Server server;
  service.bind(server);
  std::fprintf(stderr, "serving %s on http://%s:%d\n", root.c_str(), host.c_str(),
               port);
  if (!server.listen(host, port)) {
    throw InvalidState("cannot listen on " + host + ":" + std::to_string(port));
  }
}

}  // namespace shortlens::service
