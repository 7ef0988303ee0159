// SPDX-License-Identifier: Apache-2.0
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>

#include "shortlens/error.hpp"
#include "shortlens/numerics/numerics.hpp"

namespace shortlens::numerics {

namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

PCAModel pca_fit(const Matrix& data, std::size_t k) {
  const std::size_t n = data.rows();
  const std::size_t d = data.cols();
  if (n < 2) throw InvalidInput("pca_fit needs at least 2 samples");
  if (k < 1) throw InvalidInput("pca_fit needs k >= 1");
  if (!data.all_finite()) throw InvalidInput("pca_fit: non-finite values");
  k = std::min({k, n - 1, d});

  PCAModel model;
  model.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = data.row(i);
    for (std::size_t j = 0; j < d; ++j) model.mean[j] += r[j];
  }
  for (double& m : model.mean) m /= static_cast<double>(n);

  RowMatrix centered(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      centered(i, j) = data(i, j) - model.mean[j];
    }
  }

  // Thin SVD of the centered data: right singular vectors are the
  // covariance eigenvectors, singular values^2 / (n-1) the variances.
  Eigen::JacobiSVD<RowMatrix> svd(centered, Eigen::ComputeThinV);
  const auto& singular = svd.singularValues();
  const auto& v = svd.matrixV();

  model.components = Matrix(k, d);
  model.explained_variance.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t argmax = 0;
    for (std::size_t j = 1; j < d; ++j) {
      if (std::abs(v(j, c)) > std::abs(v(argmax, c))) argmax = j;
    }
    const double sign = v(argmax, c) < 0.0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < d; ++j) {
      model.components(c, j) = sign * v(j, c);
    }
    const double s = singular(static_cast<Eigen::Index>(c));
    model.explained_variance[c] = s * s / static_cast<double>(n - 1);
  }
  return model;
}

Matrix pca_transform(const PCAModel& model, const Matrix& data) {
  const std::size_t d = model.dim();
  if (data.cols() != d) {
    throw InvalidInput("pca_transform: data has " +
                       std::to_string(data.cols()) + " columns, model expects " +
                       std::to_string(d));
  }
  const std::size_t k = model.k();
  Matrix out(data.rows(), k);
  std::vector<double> centered(d);
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const auto r = data.row(i);
    for (std::size_t j = 0; j < d; ++j) centered[j] = r[j] - model.mean[j];
    for (std::size_t c = 0; c < k; ++c) {
      const auto comp = model.components.row(c);
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += centered[j] * comp[j];
      out(i, c) = s;
    }
  }
  return out;
}

Matrix pca_inverse_transform(const PCAModel& model, const Matrix& reduced) {
  if (reduced.cols() != model.k()) {
    throw InvalidInput("pca_inverse_transform: dimension mismatch");
  }
  const std::size_t d = model.dim();
  Matrix out(reduced.rows(), d);
  for (std::size_t i = 0; i < reduced.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t j = 0; j < d; ++j) o[j] = model.mean[j];
    for (std::size_t c = 0; c < model.k(); ++c) {
      const double w = reduced(i, c);
      const auto comp = model.components.row(c);
      for (std::size_t j = 0; j < d; ++j) o[j] += w * comp[j];
    }
  }
  return out;
}

}  // namespace shortlens::numerics
