// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "shortlens/numerics/matrix.hpp"

namespace shortlens::numerics {

/// Derives an independent 64-bit stream seed for a named pipeline stage.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

// ---------------------------------------------------------------------------
// PCA

struct PCAModel {
  std::vector<double> mean;         // d
  Matrix components;                // k x d, orthonormal rows
  std::vector<double> explained_variance;  // k, non-increasing

  std::size_t dim() const noexcept { return mean.size(); }
  std::size_t k() const noexcept { return components.rows(); }
};

/// Principal directions of `data` (n x d) by descending variance. `k` is
/// clamped to min(k, n - 1, d). Each component is signed so that its
/// largest-magnitude entry is positive.
PCAModel pca_fit(const Matrix& data, std::size_t k);

/// (data - mean) * components^T.
Matrix pca_transform(const PCAModel& model, const Matrix& data);

/// reduced * components + mean.
Matrix pca_inverse_transform(const PCAModel& model, const Matrix& reduced);

// ---------------------------------------------------------------------------
// k-means

struct KMeansOptions {
  std::size_t max_iter = 100;
  double tol = 1e-6;
  // Independent k-means++ restarts; the lowest-inertia run wins.
  std::size_t n_init = 4;
};

struct ClusterAssignment {
  std::size_t K = 0;
  std::vector<std::size_t> labels;
  Matrix centroids;  // K x dim
  double inertia = 0.0;
  // Inertia after every assignment step of the winning restart.
  std::vector<double> inertia_trace;
  std::size_t iterations = 0;

  std::vector<std::size_t> cluster_sizes() const;
};

ClusterAssignment kmeans(const Matrix& data, std::size_t K, std::uint64_t seed,
                         const KMeansOptions& options = {});

/// Total within-cluster squared distance of `labels` against the per-cluster
/// means (empty clusters contribute nothing).
double partition_inertia(const Matrix& data,
                         std::span<const std::size_t> labels, std::size_t K);

/// True when every point is nearest (ties to lower index) to the mean of
/// its own cluster: a fixed point of Lloyd's iteration.
bool is_lloyd_fixed_point(const Matrix& data,
                          std::span<const std::size_t> labels, std::size_t K);

// ---------------------------------------------------------------------------
// silhouette

/// Mean silhouette coefficient. Singleton clusters score 0.
double silhouette_score(const Matrix& data,
                        std::span<const std::size_t> labels, std::size_t K);

/// K in [k_min, k_max] maximizing the mean silhouette of k-means; ties go to
/// the smaller K.
std::size_t silhouette_select_k(const Matrix& data, std::size_t k_min,
                                std::size_t k_max, std::uint64_t seed);

// ---------------------------------------------------------------------------
// KNN

struct KnnResult {
  int label = 0;
  std::size_t votes0 = 0;
  std::size_t votes1 = 0;
};

/// Majority vote of the `k` nearest bank points (Euclidean). Equidistant
/// neighbours are ordered by bank index; an exact vote tie yields 0.
KnnResult knn_predict(const Matrix& bank_points, std::span<const int> bank_labels,
                      std::span<const double> query, std::size_t k = 5);

/// Indices of the `k` nearest rows of `points`, nearest first (ties by index).
std::vector<std::size_t> nearest_rows(const Matrix& points,
                                      std::span<const double> query,
                                      std::size_t k);

// ---------------------------------------------------------------------------
// information / calibration statistics (natural log)

double entropy(std::span<const double> counts);
double entropy(std::span<const std::size_t> counts);
double label_entropy(std::span<const int> labels);
double conditional_entropy(std::span<const int> labels,
                           std::span<const std::size_t> assignment);

/// Mean squared difference between predicted probabilities and 0/1 outcomes.
double brier(std::span<const double> probs, std::span<const int> outcomes);

}  // namespace shortlens::numerics
