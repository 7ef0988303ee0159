// SPDX-License-Identifier: Apache-2.0
//
// Shortcut mitigation: key bank, KNN token flagging, token ablation, head
// retraining and group-wise evaluation.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "shortlens/detection/detection.hpp"
#include "shortlens/vit/vit.hpp"

namespace shortlens::mitigation {

using numerics::Matrix;

/// Balanced KNN training set in key space. Rows [0, per_side) are
/// shortcut-cluster prototypes (label 1), the rest are low-score keys from
/// the other clusters (label 0).
struct KeyBank {
  Matrix points;
  std::vector<int> labels;
  std::size_t per_side = 0;
  std::size_t k = 5;
  std::size_t shortcut_cluster = 0;
};

/// Positives are the top-M keys of `shortcut_cluster`; negatives are the M
/// lowest-scoring keys pooled over every other cluster. M is clamped to the
/// smaller side.
KeyBank build_key_bank(const detection::PrototypeBank& prototypes,
                       std::size_t shortcut_cluster, std::size_t M,
                       std::size_t k = 5);

struct AblationMask {
  std::uint64_t image_id = 0;
  std::vector<std::uint8_t> flags;  // per token of the record, 1 = ablate
  bool guard_applied = false;

  std::size_t flagged() const noexcept;
};

/// KNN vote per token key. When every token is flagged, the token farthest
/// (mean distance) from the positive keys is kept.
AblationMask flag_patches(const vit::ActivationRecord& record,
                          const KeyBank& bank);

struct AblatedPrediction {
  std::vector<double> logits;
  std::vector<double> probs;
  std::vector<double> cls_embedding;
  std::vector<std::uint32_t> surviving_positions;
};

/// Embeds every patch, drops the flagged tokens and runs the remaining
/// sequence. `mask.flags` indexes the full token grid.
AblatedPrediction ablate_and_classify(const vit::ViTModel& model,
                                      const Image& image,
                                      const AblationMask& mask);

struct HeadHyper {
  double l2 = 1e-3;
  std::size_t max_steps = 500;
  double grad_tol = 1e-8;
  double initial_step = 1.0;
};

/// Linear classifier over the CLS embedding: logits = x W + b.
struct RetrainedHead {
  Matrix weight;  // d x classes
  std::vector<double> bias;
  std::vector<double> loss_trace;  // objective before each step and at exit

  std::vector<double> probs(std::span<const double> embedding) const;
  int predict(std::span<const double> embedding) const;
};

/// The model's own head as a RetrainedHead (no training).
RetrainedHead model_head(const vit::ViTModel& model);

/// Mean cross-entropy + l2/2 |W|^2 minimised by full-batch gradient
/// descent with Armijo backtracking, starting from the model's head.
RetrainedHead retrain_head(const vit::ViTModel& model, const Matrix& embeddings,
                           std::span<const int> labels, const HeadHyper& hyper);

/// Head retrained on a group-balanced subsample: every group is cut to the
/// size of the smallest one by a seeded shuffle. Consumes group labels.
RetrainedHead baseline_group_balanced_retrain(const vit::ViTModel& model,
                                              const Matrix& embeddings,
                                              std::span<const int> labels,
                                              std::span<const int> groups,
                                              const HeadHyper& hyper,
                                              std::uint64_t seed);

/// Indices kept by the group-balanced subsample, ascending.
std::vector<std::size_t> group_balanced_subsample(std::span<const int> groups,
                                                  std::size_t group_count,
                                                  std::uint64_t seed);

/// Accuracies and rates in percent.
struct GroupMetrics {
  std::array<std::optional<double>, 4> group_accuracy;
  std::array<std::size_t, 4> group_count{};
  double wga = 0.0;
  double aga = 0.0;
  double overall_accuracy = 0.0;
  std::optional<double> sp_rate;
  std::optional<double> ns_rate;
  std::vector<std::string> warnings;
};

/// Group g = 2 * label + shortcut_present. Empty groups are undefined and
/// left out of WGA and AGA. `masks` may be empty (no ablation rates).
GroupMetrics evaluate_groups(std::span<const int> predictions,
                             std::span<const int> labels,
                             std::span<const int> shortcut_present,
                             std::span<const AblationMask> masks = {});

nlohmann::json to_json(const GroupMetrics& metrics);
nlohmann::json to_json(const RetrainedHead& head);
RetrainedHead head_from_json(const nlohmann::json& j);

}  // namespace shortlens::mitigation
