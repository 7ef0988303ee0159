// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <numeric>

#include "shortlens/error.hpp"
#include "shortlens/numerics/numerics.hpp"

namespace shortlens::numerics {

std::vector<std::size_t> nearest_rows(const Matrix& points,
                                      std::span<const double> query,
                                      std::size_t k) {
  std::vector<std::pair<double, std::size_t>> dist(points.rows());
  for (std::size_t i = 0; i < points.rows(); ++i) {
    dist[i] = {squared_distance(points.row(i), query), i};
  }
  k = std::min(k, dist.size());
  std::partial_sort(dist.begin(), dist.begin() + static_cast<long>(k),
                    dist.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = dist[i].second;
  return out;
}

KnnResult knn_predict(const Matrix& bank_points,
                      std::span<const int> bank_labels,
                      std::span<const double> query, std::size_t k) {
  if (bank_points.rows() == 0) throw InvalidState("knn_predict: empty bank");
  if (bank_labels.size() != bank_points.rows()) {
    throw InvalidInput("knn_predict: label count != bank size");
  }
  if (query.size() != bank_points.cols()) {
    throw InvalidInput("knn_predict: query dimension mismatch");
  }
  if (k == 0 || k > bank_points.rows()) {
    throw InvalidInput("knn_predict: k=" + std::to_string(k) +
                       " outside [1, bank size]");
  }
  KnnResult r;
  for (std::size_t idx : nearest_rows(bank_points, query, k)) {
    if (bank_labels[idx] == 1) {
      ++r.votes1;
    } else {
      ++r.votes0;
    }
  }
  r.label = r.votes1 > r.votes0 ? 1 : 0;
  return r;
}

}  // namespace shortlens::numerics
