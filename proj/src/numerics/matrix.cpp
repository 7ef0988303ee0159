// SPDX-License-Identifier: Apache-2.0
#include "shortlens/numerics/matrix.hpp"

#include <cmath>

#include "shortlens/error.hpp"

namespace shortlens::numerics {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw InvalidInput("matrix data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + " x " +
                       std::to_string(cols_));
  }
}

Matrix Matrix::from_rows(
    std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m;
  for (const auto& r : rows) {
    std::vector<double> v(r);
    m.push_row(v);
  }
  return m;
}

void Matrix::push_row(std::span<const double> values) {
  if (rows_ == 0 && data_.empty()) {
    cols_ = values.size();
  } else if (values.size() != cols_) {
    throw InvalidInput("row length " + std::to_string(values.size()) +
                       " != matrix width " + std::to_string(cols_));
  }
  data_.insert(data_.end(), values.begin(), values.end());
  ++rows_;
}

bool Matrix::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double euclidean_distance(std::span<const double> a,
                          std::span<const double> b) {
  return std::sqrt(squared_distance(a, b));
}

}  // namespace shortlens::numerics
