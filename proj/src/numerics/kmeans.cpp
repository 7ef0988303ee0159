// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "shortlens/error.hpp"
#include "shortlens/numerics/numerics.hpp"

namespace shortlens::numerics {

namespace {

std::size_t nearest_centroid(const Matrix& centroids,
                             std::span<const double> point, double* dist) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    const double d = squared_distance(point, centroids.row(c));
    if (d < best_d) {  // strict: ties keep the lower index
      best_d = d;
      best = c;
    }
  }
  if (dist != nullptr) *dist = best_d;
  return best;
}

Matrix kmeans_plus_plus(const Matrix& data, std::size_t K,
                        std::mt19937_64& rng) {
  const std::size_t n = data.rows();
  Matrix centroids;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  centroids.push_row(data.row(pick(rng)));
  std::vector<double> d2(n);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (centroids.rows() < K) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest_centroid(centroids, data.row(i), &d2[i]);
      total += d2[i];
    }
    std::size_t chosen = 0;
    if (total <= 0.0) {
      chosen = pick(rng);
    } else {
      const double target = unit(rng) * total;
      double acc = 0.0;
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > 0.0) {
          chosen = i;
          break;
        }
      }
    }
    centroids.push_row(data.row(chosen));
  }
  return centroids;
}

// Recomputes centroids as cluster means; an empty cluster takes the point
// farthest from its current centroid (ties: lowest index).
void update_centroids(const Matrix& data, std::vector<std::size_t>& labels,
                      Matrix& centroids) {
  const std::size_t K = centroids.rows();
  const std::size_t dim = data.cols();
  for (;;) {
    std::vector<std::size_t> counts(K, 0);
    Matrix sums(K, dim);
    for (std::size_t i = 0; i < data.rows(); ++i) {
      ++counts[labels[i]];
      auto s = sums.row(labels[i]);
      const auto p = data.row(i);
      for (std::size_t j = 0; j < dim; ++j) s[j] += p[j];
    }
    const auto empty = std::find(counts.begin(), counts.end(), 0u);
    if (empty == counts.end()) {
      for (std::size_t c = 0; c < K; ++c) {
        auto dst = centroids.row(c);
        const auto s = sums.row(c);
        for (std::size_t j = 0; j < dim; ++j) {
          dst[j] = s[j] / static_cast<double>(counts[c]);
        }
      }
      return;
    }
    const auto empty_c = static_cast<std::size_t>(empty - counts.begin());
    std::size_t far = data.rows();
    double far_d = -1.0;
    for (std::size_t i = 0; i < data.rows(); ++i) {
      if (counts[labels[i]] <= 1) continue;  // never empty another cluster
      const double d = squared_distance(data.row(i), centroids.row(labels[i]));
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    labels[far] = empty_c;
    auto dst = centroids.row(empty_c);
    const auto p = data.row(far);
    std::copy(p.begin(), p.end(), dst.begin());
  }
}

ClusterAssignment lloyd(const Matrix& data, std::size_t K, std::uint64_t seed,
                        const KMeansOptions& options) {
  std::mt19937_64 rng(seed);
  ClusterAssignment out;
  out.K = K;
  out.centroids = kmeans_plus_plus(data, K, rng);
  out.labels.assign(data.rows(), 0);

  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t it = 0; it < std::max<std::size_t>(options.max_iter, 1);
       ++it) {
    double inertia = 0.0;
    for (std::size_t i = 0; i < data.rows(); ++i) {
      double d = 0.0;
      out.labels[i] = nearest_centroid(out.centroids, data.row(i), &d);
      inertia += d;
    }
    out.inertia_trace.push_back(inertia);
    out.iterations = it + 1;
    update_centroids(data, out.labels, out.centroids);
    const bool converged =
        inertia == 0.0 ||
        (std::isfinite(prev) && std::abs(prev - inertia) <= options.tol * prev);
    prev = inertia;
    if (converged) break;
  }
  out.inertia = partition_inertia(data, out.labels, K);
  return out;
}

}  // namespace

std::vector<std::size_t> ClusterAssignment::cluster_sizes() const {
  std::vector<std::size_t> sizes(K, 0);
  for (std::size_t l : labels) ++sizes[l];
  return sizes;
}

ClusterAssignment kmeans(const Matrix& data, std::size_t K, std::uint64_t seed,
                         const KMeansOptions& options) {
  if (K < 1) throw InvalidInput("kmeans needs K >= 1");
  if (data.rows() < K) {
    throw InvalidInput("kmeans: " + std::to_string(data.rows()) +
                       " samples < K=" + std::to_string(K));
  }
  if (!data.all_finite()) throw InvalidInput("kmeans: non-finite values");
  ClusterAssignment best;
  const std::size_t restarts = std::max<std::size_t>(options.n_init, 1);
  for (std::size_t r = 0; r < restarts; ++r) {
    ClusterAssignment run = lloyd(data, K, derive_seed(seed, r), options);
    if (r == 0 || run.inertia < best.inertia) best = std::move(run);
  }
  return best;
}

double partition_inertia(const Matrix& data,
                         std::span<const std::size_t> labels, std::size_t K) {
  const std::size_t dim = data.cols();
  Matrix sums(K, dim);
  std::vector<std::size_t> counts(K, 0);
  for (std::size_t i = 0; i < data.rows(); ++i) {
    ++counts[labels[i]];
    auto s = sums.row(labels[i]);
    const auto p = data.row(i);
    for (std::size_t j = 0; j < dim; ++j) s[j] += p[j];
  }
  for (std::size_t c = 0; c < K; ++c) {
    if (counts[c] == 0) continue;
    for (double& v : sums.row(c)) v /= static_cast<double>(counts[c]);
  }
  double inertia = 0.0;
  for (std::size_t i = 0; i < data.rows(); ++i) {
    inertia += squared_distance(data.row(i), sums.row(labels[i]));
  }
  return inertia;
}

bool is_lloyd_fixed_point(const Matrix& data,
                          std::span<const std::size_t> labels, std::size_t K) {
  const std::size_t dim = data.cols();
  Matrix means(K, dim);
  std::vector<std::size_t> counts(K, 0);
  for (std::size_t i = 0; i < data.rows(); ++i) {
    ++counts[labels[i]];
    auto s = means.row(labels[i]);
    const auto p = data.row(i);
    for (std::size_t j = 0; j < dim; ++j) s[j] += p[j];
  }
  for (std::size_t c = 0; c < K; ++c) {
    if (counts[c] == 0) return false;
    for (double& v : means.row(c)) v /= static_cast<double>(counts[c]);
  }
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const double own = squared_distance(data.row(i), means.row(labels[i]));
    for (std::size_t c = 0; c < K; ++c) {
      if (c != labels[i] &&
          squared_distance(data.row(i), means.row(c)) < own - 1e-12) {
        return false;
      }
    }
  }
  return true;
}

}  // namespace shortlens::numerics
