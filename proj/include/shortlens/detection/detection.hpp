// SPDX-License-Identifier: Apache-2.0
//
// Unsupervised shortcut detection: image embeddings, clustering,
// representative selection, key-space prototypicality, cluster statistics
// and cluster selection.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "shortlens/numerics/numerics.hpp"
#include "shortlens/store/run_store.hpp"
#include "shortlens/vit/vit.hpp"

namespace shortlens::detection {

using numerics::Matrix;

struct ImageEmbedding {
  std::uint64_t image_id = 0;
  std::vector<double> vector;
};

/// Mean of the record's patch-token embeddings (CLS is not part of them).
ImageEmbedding image_embedding(const vit::ActivationRecord& record);

/// Stacks embeddings into an n x d matrix (row order preserved).
Matrix stack_embeddings(std::span<const ImageEmbedding> embeddings);

struct ClusteringResult {
  numerics::PCAModel pca;
  numerics::ClusterAssignment assignment;
  Matrix reduced;  // n x k_used
  std::size_t k_pca_requested = 0;
  std::size_t k_pca_used = 0;
};

/// PCA to `k_pca` dimensions (clamped to min(k_pca, n - 1, d)) followed by
/// k-means with `K` clusters.
ClusteringResult cluster_images(const Matrix& embeddings, std::size_t k_pca,
                                std::size_t K, std::uint64_t seed);

/// Per cluster, the ids of the `N` members nearest its centroid in the
/// reduced space, nearest first; equal distances order by lower image id.
std::vector<std::vector<std::uint64_t>> representative_samples(
    const numerics::ClusterAssignment& assignment, const Matrix& reduced,
    std::span<const std::uint64_t> image_ids, std::size_t N);

struct PatchKey {
  std::uint64_t image_id = 0;
  std::uint32_t position = 0;  // original patch index
  std::vector<double> key;     // head-averaged, d / H
  std::size_t cluster = 0;

  friend bool operator==(const PatchKey&, const PatchKey&) = default;
};

/// One head-averaged key per surviving token of `record`.
std::vector<PatchKey> patch_key_summary(const vit::ActivationRecord& record,
                                        std::size_t cluster = 0);

struct ScoredPatch {
  PatchKey patch;
  double score = 0.0;

  friend bool operator==(const ScoredPatch&, const ScoredPatch&) = default;
};

/// Every representative patch of every cluster with its prototypicality
/// score, sorted by descending score (ties by image id, then position). The
/// retained prototypes are the first min(M, size) entries of each list; the
/// tail is kept so a key bank can draw its low-score negatives.
struct PrototypeBank {
  std::size_t N = 0;
  std::size_t M = 0;
  std::vector<std::vector<ScoredPatch>> clusters;

  std::span<const ScoredPatch> top(std::size_t cluster) const;
  std::span<const ScoredPatch> bottom(std::size_t cluster,
                                      std::size_t count) const;
};

/// P(p) = mean Euclidean distance from p's key to every key of all other
/// clusters.
PrototypeBank prototypicality_scores(
    const std::vector<std::vector<PatchKey>>& per_cluster, std::size_t N,
    std::size_t M);

struct Homogeneity {
  double global = 0.0;
  std::vector<double> per_cluster;  // clamped to [0, 1]
};

/// h = 1 - H(C|K) / H(C); per cluster, H(C|K) is replaced by that cluster's
/// own label entropy. A label-pure population has h = 1 everywhere.
Homogeneity cluster_homogeneity(std::span<const int> labels,
                                std::span<const std::size_t> assignment,
                                std::size_t K);

struct ClusterBrier {
  bool empty = false;
  int dominant_class = 0;
  std::optional<double> bd;  // Brier over dominant-class members
  std::optional<double> bn;  // Brier over the rest; absent when none
  std::size_t count = 0;
};

/// Brier scores of the class-1 probability against the 0/1 label, split
/// into dominant-class and other members. Majority ties pick class 0.
std::vector<ClusterBrier> cluster_brier(std::span<const double> prob_class1,
                                        std::span<const int> labels,
                                        std::span<const std::size_t> assignment,
                                        std::size_t K);

struct SelectionWeights {
  double homogeneity = 1.0;
  double dominant = 1.0;
  double non_dominant = 1.0;

  void validate() const;
};

struct ClusterStats {
  double homogeneity = 0.0;
  int dominant_class = 0;
  std::optional<double> bd;
  std::optional<double> bn;
  std::size_t count = 0;
  double score = 0.0;
};

struct Selection {
  std::size_t cluster = 0;
  std::vector<double> scores;
  bool tie = false;
};

/// score_c = w1 h_c + w2 exp(-bd_c) + w3 (1 - exp(-bn_c)); an undefined
/// Brier term contributes 0. Exact ties go to the lower index and set `tie`.
Selection select_shortcut_cluster(std::span<const ClusterStats> stats,
                                  const SelectionWeights& weights = {});

/// Combines homogeneity and Brier statistics, fills in the scores.
std::vector<ClusterStats> cluster_stats(std::span<const int> labels,
                                        std::span<const double> prob_class1,
                                        std::span<const std::size_t> assignment,
                                        std::size_t K,
                                        const SelectionWeights& weights = {});

// ---------------------------------------------------------------------------
// Persistence

struct ClusterReport {
  std::vector<std::uint64_t> image_ids;  // clustering population, in order
  ClusteringResult clustering;
  std::vector<std::vector<std::uint64_t>> representatives;
  Homogeneity homogeneity;
  std::vector<ClusterStats> stats;
  Selection auto_selection;
  SelectionWeights weights;
};

store::Artifact to_artifact(const ClusterReport& report);
ClusterReport cluster_report_from_artifact(const store::Artifact& artifact);

store::Artifact to_artifact(const PrototypeBank& bank);
PrototypeBank prototype_bank_from_artifact(const store::Artifact& artifact);

nlohmann::json stats_to_json(std::span<const ClusterStats> stats);

}  // namespace shortlens::detection
