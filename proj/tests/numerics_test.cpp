// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "shortlens/error.hpp"
#include "shortlens/numerics/numerics.hpp"

namespace sn = shortlens::numerics;
using sn::Matrix;

namespace {

Matrix random_matrix(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Matrix m(n, d);
  for (double& v : m.values()) v = g(rng);
  return m;
}

Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  return e;
}

}  // namespace

TEST(Matrix, PushRowFixesWidth) {
  Matrix m;
  m.push_row(std::vector<double>{1, 2, 3});
  m.push_row(std::vector<double>{4, 5, 6});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m(1, 2), 6.0);
  EXPECT_THROW(m.push_row(std::vector<double>{1}), shortlens::InvalidInput);
}

TEST(Pca, DiagonalCovarianceGivesAxisVectors) {
  // Columns with variances 1, 9, 4 and zero mean.
  Matrix x = Matrix::from_rows({{1, 3, 2}, {-1, -3, 2}, {1, -3, -2}, {-1, 3, -2}});
  const auto model = sn::pca_fit(x, 3);
  ASSERT_EQ(model.k(), 3u);
  const std::size_t expected_axis[] = {1, 2, 0};
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_NEAR(model.components(r, j), j == expected_axis[r] ? 1.0 : 0.0, 1e-12);
    }
  }
}

TEST(Pca, DiagonalLineFirstComponent) {
  Matrix x = Matrix::from_rows({{1, 1}, {2, 2}, {3, 3}});
  const auto model = sn::pca_fit(x, 1);
  EXPECT_NEAR(model.components(0, 0), 1.0 / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(model.components(0, 1), 1.0 / std::sqrt(2.0), 1e-12);
}

TEST(Pca, ResidualMatchesTrailingEigenvalues) {
  const Matrix x = random_matrix(10, 6, 1);
  const auto model = sn::pca_fit(x, 3);
  const Eigen::MatrixXd e = to_eigen(x);
  const Eigen::MatrixXd c = e.rowwise() - e.colwise().mean();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(c.transpose() * c / 9.0);
  const double trailing = solver.eigenvalues().head(3).sum() * 9.0;
  const Matrix back = sn::pca_inverse_transform(model, sn::pca_transform(model, x));
  double residual = 0.0;
  for (std::size_t i = 0; i < x.values().size(); ++i) {
    residual += std::pow(x.values()[i] - back.values()[i], 2);
  }
  EXPECT_NEAR(residual, trailing, 1e-8);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_NEAR(model.explained_variance[r], solver.eigenvalues()(5 - r), 1e-10);
  }
}

TEST(Pca, FullRankRoundTrip) {
  const Matrix x = random_matrix(30, 5, 2);
  const auto model = sn::pca_fit(x, 5);
  const Matrix back = sn::pca_inverse_transform(model, sn::pca_transform(model, x));
  for (std::size_t i = 0; i < x.values().size(); ++i) {
    EXPECT_NEAR(back.values()[i], x.values()[i], 1e-8);
  }
}

TEST(Pca, MeanRowMapsToZero) {
  const Matrix x = random_matrix(20, 4, 3);
  const auto model = sn::pca_fit(x, 2);
  Matrix mean_row;
  mean_row.push_row(model.mean);
  for (double v : sn::pca_transform(model, mean_row).values()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Pca, ClampsKAndSignRule) {
  const Matrix x = random_matrix(5, 8, 4);
  const auto model = sn::pca_fit(x, 50);
  EXPECT_EQ(model.k(), 4u);
  for (std::size_t r = 0; r < model.k(); ++r) {
    const auto row = model.components.row(r);
    const auto it = std::max_element(row.begin(), row.end(), [](double a, double b) {
      return std::abs(a) < std::abs(b);
    });
    EXPECT_GT(*it, 0.0);
  }
}

TEST(KMeans, OneDimensionalPairs) {
  const Matrix x = Matrix::from_rows({{0.0}, {0.1}, {10.0}, {10.1}});
  const auto a = sn::kmeans(x, 2, 1);
  EXPECT_EQ(a.labels[0], a.labels[1]);
  EXPECT_EQ(a.labels[2], a.labels[3]);
  EXPECT_NE(a.labels[0], a.labels[2]);
  EXPECT_NEAR(a.inertia, 0.01, 1e-12);
}

TEST(KMeans, IdenticalPointsStillValid) {
  const Matrix x(6, 2, 1.5);
  const auto a = sn::kmeans(x, 2, 1);
  const auto sizes = a.cluster_sizes();
  EXPECT_EQ(sizes[0] + sizes[1], 6u);
  EXPECT_EQ(std::min(sizes[0], sizes[1]), 1u);
  EXPECT_EQ(a.inertia, 0.0);
}

TEST(KMeans, SeparatedBlobsRecovered) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.0, 0.1);
  Matrix x;
  std::vector<int> truth;
  for (int i = 0; i < 100; ++i) {
    const int blob = i % 2;
    x.push_row(std::vector<double>{blob * 10.0 + g(rng), g(rng)});
    truth.push_back(blob);
  }
  const auto a = sn::kmeans(x, 2, 3);
  std::size_t agree = 0;
  for (int i = 0; i < 100; ++i) agree += static_cast<int>(a.labels[i]) == truth[i];
  EXPECT_TRUE(agree == 100 || agree == 0);
}

TEST(KMeans, MatchesExhaustiveEnumeration) {
  std::size_t optimal = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const std::size_t n = 4 + seed % 9;
    const Matrix x = random_matrix(n, 2, 100 + seed);
    double best = 1e300;
    std::vector<std::size_t> labels(n);
    for (std::uint32_t mask = 1; mask < (1u << (n - 1)); ++mask) {
      for (std::size_t i = 0; i < n; ++i) labels[i] = (mask >> i) & 1u;
      best = std::min(best, sn::partition_inertia(x, labels, 2));
    }
    const auto a = sn::kmeans(x, 2, seed);
    EXPECT_GE(a.inertia, best - 1e-12);
    if (a.inertia <= best + 1e-9) {
      ++optimal;
    } else {
      EXPECT_TRUE(sn::is_lloyd_fixed_point(x, a.labels, 2)) << "seed " << seed;
    }
  }
  EXPECT_GE(optimal, 27u);
}

TEST(KMeans, InertiaTraceNonIncreasing) {
  const Matrix x = random_matrix(200, 5, 9);
  const auto a = sn::kmeans(x, 4, 2);
  for (std::size_t i = 1; i < a.inertia_trace.size(); ++i) {
    EXPECT_LE(a.inertia_trace[i], a.inertia_trace[i - 1] + 1e-9);
  }
}

TEST(KMeans, SameSeedSameResult) {
  const Matrix x = random_matrix(80, 3, 10);
  const auto a = sn::kmeans(x, 3, 42);
  const auto b = sn::kmeans(x, 3, 42);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.inertia, b.inertia);
}

TEST(KMeans, RejectsTooFewPoints) {
  EXPECT_THROW(sn::kmeans(random_matrix(2, 2, 1), 3, 1), shortlens::InvalidInput);
}

TEST(Silhouette, PicksBlobCount) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 0.1);
  for (std::size_t blobs : {2u, 3u}) {
    Matrix x;
    for (int i = 0; i < 90; ++i) {
      const double c = 10.0 * static_cast<double>(i % blobs);
      x.push_row(std::vector<double>{c + g(rng), -c + g(rng)});
    }
    EXPECT_EQ(sn::silhouette_select_k(x, 2, 5, 1), blobs);
  }
  const Matrix three = Matrix::from_rows({{0, 0}, {1, 0}, {5, 5}});
  EXPECT_EQ(sn::silhouette_select_k(three, 2, 2, 1), 2u);
}

TEST(Knn, ExactPointAndTieRule) {
  const Matrix bank = Matrix::from_rows({{0, 0}, {2, 0}});
  const std::vector<int> labels = {0, 1};
  EXPECT_EQ(sn::knn_predict(bank, labels, std::vector<double>{2, 0}, 1).label, 1);
  const auto tie = sn::knn_predict(bank, labels, std::vector<double>{1, 0}, 2);
  EXPECT_EQ(tie.label, 0);
  EXPECT_EQ(tie.votes0, 1u);
  EXPECT_EQ(tie.votes1, 1u);
}

TEST(Knn, MatchesFullSortOracle) {
  const Matrix bank = random_matrix(40, 3, 11);
  std::vector<int> labels(40);
  for (std::size_t i = 0; i < 40; ++i) labels[i] = bank(i, 0) > 0.0;
  const Matrix queries = random_matrix(20, 3, 12);
  for (std::size_t q = 0; q < 20; ++q) {
    std::vector<std::size_t> order(40);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return sn::squared_distance(bank.row(a), queries.row(q)) <
             sn::squared_distance(bank.row(b), queries.row(q));
    });
    int ones = 0;
    for (std::size_t i = 0; i < 5; ++i) ones += labels[order[i]];
    EXPECT_EQ(sn::knn_predict(bank, labels, queries.row(q), 5).label, ones >= 3 ? 1 : 0);
    const auto near = sn::nearest_rows(bank, queries.row(q), 5);
    EXPECT_EQ(near, std::vector<std::size_t>(order.begin(), order.begin() + 5));
  }
}

TEST(Entropy, WorkedValues) {
  EXPECT_NEAR(sn::entropy(std::vector<std::size_t>{10, 10}), std::log(2.0), 1e-12);
  EXPECT_EQ(sn::entropy(std::vector<std::size_t>{10, 0}), 0.0);
  const std::vector<int> labels = {0, 0, 1, 1};
  const std::vector<std::size_t> assignment = {0, 0, 0, 1};
  EXPECT_NEAR(sn::conditional_entropy(labels, assignment), 0.4774, 1e-4);
  const double h3 = -(2.0 / 3) * std::log(2.0 / 3) - (1.0 / 3) * std::log(1.0 / 3);
  EXPECT_NEAR(sn::conditional_entropy(labels, assignment), 0.75 * h3, 1e-12);
}

TEST(Brier, WorkedValues) {
  EXPECT_EQ(sn::brier(std::vector<double>{1, 0}, std::vector<int>{1, 0}), 0.0);
  EXPECT_NEAR(sn::brier(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}), 0.25, 1e-15);
  EXPECT_NEAR(sn::brier(std::vector<double>{0.9, 0.2}, std::vector<int>{1, 0}), 0.025, 1e-12);
  EXPECT_THROW(sn::brier(std::vector<double>{0.5}, std::vector<int>{1, 0}),
               shortlens::InvalidInput);
}

TEST(DeriveSeed, StagesAreIndependent) {
  EXPECT_NE(sn::derive_seed(1, "kmeans"), sn::derive_seed(1, "dfr"));
  EXPECT_NE(sn::derive_seed(1, "kmeans"), sn::derive_seed(2, "kmeans"));
  EXPECT_EQ(sn::derive_seed(7, "kmeans"), sn::derive_seed(7, "kmeans"));
}
