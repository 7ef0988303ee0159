// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <limits>

#include "shortlens/error.hpp"
#include "shortlens/numerics/numerics.hpp"

namespace shortlens::numerics {

double silhouette_score(const Matrix& data,
                        std::span<const std::size_t> labels, std::size_t K) {
  const std::size_t n = data.rows();
  if (n == 0) throw InvalidInput("silhouette_score: empty data");
  std::vector<std::size_t> sizes(K, 0);
  for (std::size_t l : labels) ++sizes[l];

  double total = 0.0;
  std::vector<double> dist_sum(K);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(dist_sum.begin(), dist_sum.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      dist_sum[labels[j]] += euclidean_distance(data.row(i), data.row(j));
    }
    const std::size_t own = labels[i];
    if (sizes[own] <= 1) continue;  // singleton: s = 0
    const double a = dist_sum[own] / static_cast<double>(sizes[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < K; ++c) {
      if (c == own || sizes[c] == 0) continue;
      b = std::min(b, dist_sum[c] / static_cast<double>(sizes[c]));
    }
    if (!std::isfinite(b)) continue;
    const double denom = std::max(a, b);
    if (denom > 0.0) total += (b - a) / denom;
  }
  return total / static_cast<double>(n);
}

std::size_t silhouette_select_k(const Matrix& data, std::size_t k_min,
                                std::size_t k_max, std::uint64_t seed) {
  if (k_min < 2 || k_max < k_min) {
    throw InvalidInput("silhouette_select_k: empty or invalid K range [" +
                       std::to_string(k_min) + ", " + std::to_string(k_max) +
                       "]");
  }
  if (k_max >= data.rows()) {
    throw InvalidInput("silhouette_select_k: k_max must be < sample count");
  }
  std::size_t best_k = k_min;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t k = k_min; k <= k_max; ++k) {
    const ClusterAssignment a = kmeans(data, k, derive_seed(seed, k));
    const double s = silhouette_score(data, a.labels, k);
    if (s > best) {
      best = s;
      best_k = k;
    }
  }
  return best_k;
}

}  // namespace shortlens::numerics
