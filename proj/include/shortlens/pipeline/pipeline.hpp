// SPDX-License-Identifier: Apache-2.0
//
// Stage orchestration over a run directory. Every stage reads its inputs
// from the run's artifacts, writes its outputs atomically and then sets its
// completion flag, so an interrupted run resumes from the last completed
// stage and re-running a completed stage is a no-op.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shortlens/concepts/concepts.hpp"
#include "shortlens/detection/detection.hpp"
#include "shortlens/mitigation/mitigation.hpp"
#include "shortlens/store/run_store.hpp"
#include "shortlens/synth/synth.hpp"
#include "shortlens/vit/vit.hpp"

namespace shortlens::pipeline {

using nlohmann::json;
using store::Stage;

struct DetectionParams {
  std::size_t k_pca = 50;
  std::size_t clusters = 2;  // K
  std::size_t representatives = 20;  // N
  std::size_t prototypes = 200;      // M
  detection::SelectionWeights weights;
};

struct MitigationParams {
  std::size_t knn_k = 5;
  mitigation::HeadHyper head;
};

/// Everything that determines a run's artifacts. `seed` is copied into the
/// every seeded component by `resolved()`.
struct PipelineConfig {
  std::uint64_t seed = 1;
  synth::SynthConfig data;
  vit::ViTConfig model;
  vit::TrainHyper train;
  DetectionParams detection;
  MitigationParams mitigation;

  PipelineConfig resolved() const;
  void validate() const;
  json to_json() const;
  static PipelineConfig from_json(const json& j);
};

struct ProviderSettings {
  enum class Kind { kStub, kHttp };
  Kind kind = Kind::kStub;
  concepts::CaptionOptions caption;
  concepts::SummaryOptions summary;
};

/// CLI name of the command that completes `stage` ("detect" for both
/// clustering and prototype scoring).
const char* command_for(Stage stage);

enum class Outcome { kRan, kCached };

struct SelectionDecision {
  std::size_t cluster = 0;
  std::string source;  // "auto" | "expert"
  std::size_t auto_cluster = 0;
  std::vector<double> scores;
  bool tie = false;

  json to_json() const;
  static SelectionDecision from_json(const json& j);
};

/// One run: a directory under a RunStore root named by its run id.
class Pipeline {
 public:
  /// Opens `run_id`, creating it with `config` when absent. An existing run
  /// keeps its stored configuration.
  static Pipeline open_or_create(store::RunStore& store,
                                 const std::string& run_id,
                                 const PipelineConfig& config);
  /// Throws NotFound for an unknown run.
  static Pipeline open(store::RunStore& store, const std::string& run_id);

  const store::RunRecord& record() const noexcept { return record_; }
  const PipelineConfig& config() const noexcept { return config_; }
  const std::string& run_id() const noexcept { return record_.run_id; }
  std::filesystem::path dir() const;

  /// Throws ValidationError "stage '<command>' incomplete" for the first
  /// unmet prerequisite of `stage`.
  void require_before(Stage stage) const;

  Outcome generate_data();
  Outcome train();
  Outcome export_activations();
  Outcome detect();
  /// Captions the top-M prototypes of every cluster and distils one
  /// candidate sentence per cluster. Provider failures are recorded in the
  /// artifact (status "partial" or "failed"), never thrown.
  Outcome concepts(concepts::Captioner& captioner, concepts::Refiner& refiner,
                   const ProviderSettings& settings = {});
  /// Automatic choice from the cluster selection scores. Keeps an existing expert decision unless `force`.
  Outcome select_auto(bool force = false);
  /// Expert override. A changed decision clears the mitigation and
  /// evaluation flags.
  Outcome select_cluster(std::size_t cluster);
  Outcome mitigate();
  Outcome evaluate();

  /// Every core stage plus concepts, in order.
  void run_all(concepts::Captioner& captioner, concepts::Refiner& refiner,
               const ProviderSettings& settings = {},
               const std::function<void(Stage, Outcome)>& on_stage = {});

  SelectionDecision selection() const;
  json metrics() const;
  json timings() const;
  /// WGA / AGA / runtime table in plain text.
  std::string metrics_table() const;
  json concepts_report() const;

 private:
  Pipeline(store::RunStore& store, store::RunRecord record);
  void complete(Stage stage, double seconds);
  void reset(Stage stage);

  store::RunStore* store_;
  store::RunRecord record_;
  PipelineConfig config_;
};

/// Activation records of one split as a store artifact and back.
store::Artifact activations_to_artifact(
    const std::vector<vit::ActivationRecord>& records);
std::vector<vit::ActivationRecord> activations_from_artifact(
    const store::Artifact& artifact);

}  // namespace shortlens::pipeline
