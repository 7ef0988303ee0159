// SPDX-License-Identifier: Apache-2.0
//
// JSON-over-HTTP view of a run-directory root for the expert review UI.
//
//   GET  /runs
//   GET  /runs/{id}
//   GET  /runs/{id}/clusters
//   GET  /runs/{id}/prototypes?cluster=c[&limit=n]
//   GET  /runs/{id}/concepts
//   POST /runs/{id}/select      {"cluster": c, "source": "expert" | "auto"}
//   POST /runs/{id}/mitigate
//   GET  /runs/{id}/metrics
//
// Errors carry {"error": message}: 400 bad request, 404 unknown run or
// route, 409 stage precondition unmet, 502 failed concepts stage.
#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>

#include <nlohmann/json.hpp>

#include "shortlens/store/run_store.hpp"

namespace httplib {
class Server;
}

namespace shortlens::service {

using nlohmann::json;

struct ApiResponse {
  int status = 200;
  json body;
};

class Service {
 public:
  explicit Service(std::filesystem::path root);

  /// Routes one request. `path` excludes the query string.
  ApiResponse handle(const std::string& method, const std::string& path,
                     const std::map<std::string, std::string>& query = {},
                     const std::string& body = {});

  /// Installs every route on `server`.
  void bind(httplib::Server& server);

  store::RunStore& store() noexcept { return store_; }

 private:
  std::mutex& run_lock(const std::string& run_id);

  ApiResponse list_runs();
  ApiResponse get_run(const std::string& id);
  ApiResponse get_clusters(const std::string& id);
  ApiResponse get_prototypes(const std::string& id,
                             const std::map<std::string, std::string>& query);
  ApiResponse get_concepts(const std::string& id);
  ApiResponse post_select(const std::string& id, const std::string& body);
  ApiResponse post_mitigate(const std::string& id);
  ApiResponse get_metrics(const std::string& id);

  store::RunStore store_;
  std::mutex locks_guard_;
  std::map<std::string, std::unique_ptr<std::mutex>> locks_;
};

/// Blocks serving `root` on host:port until the process is stopped.
void serve(const std::filesystem::path& root, const std::string& host, int port);

}  // namespace shortlens::service
