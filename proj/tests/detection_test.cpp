// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "shortlens/detection/detection.hpp"
#include "shortlens/error.hpp"

using namespace shortlens;
using namespace shortlens::detection;
using numerics::Matrix;

namespace {

vit::ActivationRecord record_with_keys(std::uint64_t id, std::vector<std::uint32_t> positions,
                                       std::vector<Matrix> keys) {
  vit::ActivationRecord r;
  r.image_id = id;
  r.token_positions = std::move(positions);
  r.per_head_keys = std::move(keys);
  r.token_embeddings = Matrix(r.token_positions.size(), 2, 0.0);
  return r;
}

Matrix two_blobs(std::size_t per_blob, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.1);
  Matrix m;
  for (std::size_t i = 0; i < 2 * per_blob; ++i) {
    const double c = i < per_blob ? -5.0 : 5.0;
    const std::vector<double> row = {c + noise(rng), c + noise(rng), noise(rng)};
    m.push_row(row);
  }
  return m;
}

}  // namespace

TEST(ImageEmbedding, MeanOfPatchTokens) {
  vit::ActivationRecord r;
  r.image_id = 3;
  r.token_embeddings = Matrix::from_rows({{1, 2}, {3, 4}, {5, 12}});
  const auto e = image_embedding(r);
  EXPECT_EQ(e.image_id, 3u);
  EXPECT_EQ(e.vector, (std::vector<double>{3, 6}));
}

TEST(ClusterImages, SeparatesBlobsAndClampsPca) {
  const Matrix m = two_blobs(10, 1);
  const auto r = cluster_images(m, 50, 2, 7);
  EXPECT_EQ(r.k_pca_requested, 50u);
  EXPECT_EQ(r.k_pca_used, 3u);
  EXPECT_EQ(r.reduced.rows(), 20u);
  for (std::size_t i = 1; i < 10; ++i) {
    EXPECT_EQ(r.assignment.labels[i], r.assignment.labels[0]);
    EXPECT_EQ(r.assignment.labels[10 + i], r.assignment.labels[10]);
  }
  EXPECT_NE(r.assignment.labels[0], r.assignment.labels[10]);
}

TEST(Representatives, NearestToCentroidOracle) {
  const Matrix m = two_blobs(15, 2);
  const auto r = cluster_images(m, 2, 2, 3);
  std::vector<std::uint64_t> ids(m.rows());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = 100 + (i * 7) % 30;
  const auto reps = representative_samples(r.assignment, r.reduced, ids, 4);
  ASSERT_EQ(reps.size(), 2u);
  for (std::size_t c = 0; c < 2; ++c) {
    std::vector<std::pair<double, std::uint64_t>> order;
    for (std::size_t i = 0; i < m.rows(); ++i) {
      if (r.assignment.labels[i] != c) continue;
      order.emplace_back(numerics::squared_distance(r.reduced.row(i), r.assignment.centroids.row(c)),
                         ids[i]);
    }
    std::sort(order.begin(), order.end());
    std::vector<std::uint64_t> expected;
    for (std::size_t j = 0; j < 4; ++j) expected.push_back(order[j].second);
    EXPECT_EQ(reps[c], expected);
  }
}

TEST(Representatives, SmallClusterYieldsAllMembers) {
  const Matrix m = Matrix::from_rows({{0, 0}, {0.1, 0}, {10, 10}});
  const auto r = cluster_images(m, 2, 2, 1);
  const std::vector<std::uint64_t> ids = {1, 2, 3};
  const auto reps = representative_samples(r.assignment, r.reduced, ids, 5);
  std::size_t total = 0;
  for (const auto& c : reps) total += c.size();
  EXPECT_EQ(total, 3u);
}

TEST(PatchKeySummary, AveragesHeads) {
  const auto r = record_with_keys(9, {3, 5},
                                  {Matrix::from_rows({{1, 2}, {3, 4}}),
                                   Matrix::from_rows({{3, 0}, {5, 8}})});
  const auto keys = patch_key_summary(r, 1);
  ASSERT_EQ(keys.size(), 2u);
  EXPECT_EQ(keys[0].position, 3u);
  EXPECT_EQ(keys[1].position, 5u);
  EXPECT_EQ(keys[0].key, (std::vector<double>{2, 1}));
  EXPECT_EQ(keys[1].key, (std::vector<double>{4, 6}));
  EXPECT_EQ(keys[1].cluster, 1u);
  EXPECT_EQ(keys[1].image_id, 9u);
}

TEST(Prototypicality, WorkedExample) {
  std::vector<std::vector<PatchKey>> per = {
      {{1, 0, {0.0}, 0}, {1, 1, {1.0}, 0}},
      {{2, 0, {10.0}, 1}},
  };
  const auto bank = prototypicality_scores(per, 1, 1);
  ASSERT_EQ(bank.clusters.size(), 2u);
  EXPECT_DOUBLE_EQ(bank.clusters[0][0].score, 10.0);
  EXPECT_DOUBLE_EQ(bank.clusters[0][1].score, 9.0);
  EXPECT_DOUBLE_EQ(bank.clusters[1][0].score, 9.5);
  ASSERT_EQ(bank.top(0).size(), 1u);
  EXPECT_EQ(bank.top(0)[0].patch.position, 0u);
  ASSERT_EQ(bank.bottom(0, 1).size(), 1u);
  EXPECT_EQ(bank.bottom(0, 1)[0].patch.position, 1u);
}

TEST(Prototypicality, MatchesDoubleLoop) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::vector<PatchKey>> per(3);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::uint32_t p = 0; p < 12; ++p) {
      per[c].push_back({c, p, {n(rng), n(rng), n(rng)}, c});
    }
  }
  const auto bank = prototypicality_scores(per, 1, 4);
  for (std::size_t c = 0; c < 3; ++c) {
    ASSERT_EQ(bank.clusters[c].size(), 12u);
    EXPECT_EQ(bank.top(c).size(), 4u);
    for (const auto& sp : bank.clusters[c]) {
      double sum = 0.0;
      std::size_t count = 0;
      for (std::size_t o = 0; o < 3; ++o) {
        if (o == c) continue;
        for (const auto& q : per[o]) {
          sum += numerics::euclidean_distance(sp.patch.key, q.key);
          ++count;
        }
      }
      EXPECT_NEAR(sp.score, sum / count, 1e-12);
    }
    for (std::size_t i = 1; i < 12; ++i) {
      EXPECT_GE(bank.clusters[c][i - 1].score, bank.clusters[c][i].score);
    }
  }
}

TEST(Prototypicality, EqualScoresOrderByImageThenPosition) {
  std::vector<std::vector<PatchKey>> per = {
      {{5, 2, {1.0}, 0}, {4, 7, {-1.0}, 0}, {4, 1, {1.0}, 0}},
      {{9, 0, {0.0}, 1}},
  };
  const auto bank = prototypicality_scores(per, 1, 3);
  EXPECT_EQ(bank.clusters[0][0].patch.image_id, 4u);
  EXPECT_EQ(bank.clusters[0][0].patch.position, 1u);
  EXPECT_EQ(bank.clusters[0][1].patch.position, 7u);
  EXPECT_EQ(bank.clusters[0][2].patch.image_id, 5u);
}

TEST(Homogeneity, WorkedExample) {
  const std::vector<int> labels = {0, 0, 0, 1, 1, 1};
  const std::vector<std::size_t> asg = {0, 0, 0, 0, 1, 1};
  const auto h = cluster_homogeneity(labels, asg, 2);
  EXPECT_NEAR(h.global, 0.459148, 1e-6);
  EXPECT_NEAR(h.per_cluster[0], 0.188722, 1e-6);
  EXPECT_DOUBLE_EQ(h.per_cluster[1], 1.0);
}

TEST(Homogeneity, PureLabelsAreFullyHomogeneous) {
  const std::vector<int> labels = {1, 1, 1};
  const std::vector<std::size_t> asg = {0, 1, 1};
  const auto h = cluster_homogeneity(labels, asg, 2);
  EXPECT_EQ(h.global, 1.0);
  EXPECT_EQ(h.per_cluster, (std::vector<double>{1.0, 1.0}));
}

TEST(Brier, DominantAndOtherMembers) {
  const std::vector<double> p1 = {0.1, 0.1, 0.2, 0.8, 0.9, 0.6};
  const std::vector<int> labels = {0, 0, 0, 1, 1, 1};
  const std::vector<std::size_t> asg = {0, 0, 0, 0, 1, 1};
  const auto b = cluster_brier(p1, labels, asg, 3);
  EXPECT_EQ(b[0].dominant_class, 0);
  EXPECT_NEAR(*b[0].bd, 0.02, 1e-12);
  EXPECT_NEAR(*b[0].bn, 0.04, 1e-12);
  EXPECT_EQ(b[1].dominant_class, 1);
  EXPECT_NEAR(*b[1].bd, 0.085, 1e-12);
  EXPECT_FALSE(b[1].bn.has_value());
  EXPECT_TRUE(b[2].empty);
  EXPECT_EQ(b[2].count, 0u);
}

TEST(Brier, MajorityTiePicksClassZero) {
  const std::vector<double> p1 = {0.5, 0.5};
  const std::vector<int> labels = {1, 0};
  const std::vector<std::size_t> asg = {0, 0};
  EXPECT_EQ(cluster_brier(p1, labels, asg, 1)[0].dominant_class, 0);
}

TEST(Selection, ScoresWorkedExample) {
  const std::vector<double> p1 = {0.1, 0.1, 0.2, 0.8, 0.9, 0.6};
  const std::vector<int> labels = {0, 0, 0, 1, 1, 1};
  const std::vector<std::size_t> asg = {0, 0, 0, 0, 1, 1};
  const auto stats = cluster_stats(labels, p1, asg, 2);
  EXPECT_NEAR(stats[0].score, 0.188722 + std::exp(-0.02) + 1.0 - std::exp(-0.04), 1e-6);
  EXPECT_NEAR(stats[1].score, 1.0 + std::exp(-0.085), 1e-12);
  const auto sel = select_shortcut_cluster(stats);
  EXPECT_EQ(sel.cluster, 1u);
  EXPECT_FALSE(sel.tie);
}

TEST(Selection, ExactTieGoesToLowerIndex) {
  ClusterStats s;
  s.homogeneity = 0.5;
  s.bd = 0.1;
  s.bn = 0.2;
  const std::vector<ClusterStats> stats = {s, s};
  const auto sel = select_shortcut_cluster(stats);
  EXPECT_EQ(sel.cluster, 0u);
  EXPECT_TRUE(sel.tie);
}

TEST(Selection, HomogeneityOnlyWeights) {
  ClusterStats a;
  a.homogeneity = 0.2;
  a.bd = 0.0;
  a.bn = 5.0;
  ClusterStats b;
  b.homogeneity = 0.3;
  b.bd = 2.0;
  const std::vector<ClusterStats> stats = {a, b};
  EXPECT_EQ(select_shortcut_cluster(stats, {1.0, 0.0, 0.0}).cluster, 1u);
  EXPECT_EQ(select_shortcut_cluster(stats).cluster, 0u);
}

TEST(Selection, RejectsInvalidWeights) {
  EXPECT_THROW((SelectionWeights{-1.0, 1.0, 1.0}.validate()), InvalidInput);
  EXPECT_THROW((SelectionWeights{0.0, 0.0, 0.0}.validate()), InvalidInput);
}

TEST(Persistence, ClusterReportRoundTrip) {
  const Matrix m = two_blobs(8, 4);
  ClusterReport report;
  for (std::uint64_t i = 0; i < m.rows(); ++i) report.image_ids.push_back(i * 2);
  report.clustering = cluster_images(m, 2, 2, 1);
  report.representatives =
      representative_samples(report.clustering.assignment, report.clustering.reduced, report.image_ids, 3);
  std::vector<int> labels(m.rows());
  std::vector<double> p1(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    labels[i] = i < 8 ? 0 : 1;
    p1[i] = 0.1 * static_cast<double>(i % 10);
  }
  report.homogeneity = cluster_homogeneity(labels, report.clustering.assignment.labels, 2);
  report.stats = cluster_stats(labels, p1, report.clustering.assignment.labels, 2);
  report.auto_selection = select_shortcut_cluster(report.stats);
  const store::Artifact a = to_artifact(report);
  const store::Artifact b = to_artifact(cluster_report_from_artifact(a));
  EXPECT_EQ(a.meta, b.meta);
  EXPECT_EQ(a.arrays, b.arrays);
}

TEST(Persistence, PrototypeBankRoundTrip) {
  std::vector<std::vector<PatchKey>> per = {
      {{1, 0, {0.0, 1.0}, 0}, {1, 1, {1.0, 1.0}, 0}},
      {{2, 4, {10.0, 3.0}, 1}},
  };
  const auto bank = prototypicality_scores(per, 1, 1);
  const auto back = prototype_bank_from_artifact(to_artifact(bank));
  EXPECT_EQ(back.N, bank.N);
  EXPECT_EQ(back.M, bank.M);
  EXPECT_EQ(back.clusters, bank.clusters);
}
