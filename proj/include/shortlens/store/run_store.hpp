// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shortlens/store/tensor_file.hpp"

namespace shortlens::store {

using nlohmann::json;

/// Pipeline stages in completion order. A completed stage implies every
/// earlier stage in `kCoreStages`. `concepts` is a side branch that needs
/// `prototyped` but does not gate selection.
enum class Stage {
  kData,
  kTrained,
  kExported,
  kClustered,
  kPrototyped,
  kConcepts,
  kSelected,
  kMitigated,
  kEvaluated,
};

const char* to_string(Stage stage);
Stage stage_from_string(const std::string& name);
const std::vector<Stage>& all_stages();
/// Stages that must be complete before `stage` may run.
std::vector<Stage> prerequisites(Stage stage);

/// Metadata for one artifact: JSON manifest plus named arrays stored as
/// tensor files next to it.
struct Artifact {
  json meta = json::object();
  std::map<std::string, Tensor> arrays;
};

struct RunRecord {
  std::string run_id;
  json config = json::object();
  std::map<Stage, bool> stages;
  std::map<std::string, std::string> artifacts;  // kind -> relative path
  std::map<Stage, double> stage_seconds;
  std::string created_at;
  std::string updated_at;

  bool done(Stage s) const;
  /// True when no later core stage is complete without its predecessors.
  bool flags_monotone() const;

  json to_json() const;
  static RunRecord from_json(const json& j);
};

std::string make_ulid();
std::string utc_timestamp();

/// One directory per run under `root`:
///   <root>/<run_id>/run.json
///   <root>/<run_id>/<kind>/manifest.json + <array>.slns
class RunStore {
 public:
  explicit RunStore(std::filesystem::path root);

  const std::filesystem::path& root() const noexcept { return root_; }

  RunRecord create_run(const json& config, std::optional<std::string> run_id = {});
  bool exists(const std::string& run_id) const;
  RunRecord load_run(const std::string& run_id) const;
  void save_run(RunRecord& record) const;
  std::vector<std::string> list_runs() const;

  std::filesystem::path run_dir(const std::string& run_id) const;
  std::filesystem::path artifact_dir(const std::string& run_id,
                                     const std::string& kind) const;

  /// Atomically replaces the artifact directory. Returns its path.
  std::filesystem::path write_artifact(const std::string& run_id,
                                       const std::string& kind,
                                       const Artifact& payload) const;
  /// Throws NotFound when absent, IntegrityError when an array disagrees
  /// with its manifest entry.
  Artifact read_artifact(const std::string& run_id,
                         const std::string& kind) const;
  bool has_artifact(const std::string& run_id, const std::string& kind) const;

 private:
  std::filesystem::path root_;
};

/// Writes/reads an artifact rooted at an arbitrary directory (used for
/// datasets and checkpoints that live outside a run).
void write_artifact_dir(const std::filesystem::path& dir,
                        const Artifact& payload);
Artifact read_artifact_dir(const std::filesystem::path& dir);

}  // namespace shortlens::store
