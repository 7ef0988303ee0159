// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "shortlens/error.hpp"
#include "shortlens/mitigation/mitigation.hpp"
#include "test_support.hpp"

using namespace shortlens;
using namespace shortlens::mitigation;
using detection::PatchKey;
using numerics::Matrix;

namespace {

detection::PrototypeBank bank_of(std::size_t positives, std::size_t negatives) {
  std::vector<std::vector<PatchKey>> per(2);
  for (std::uint32_t i = 0; i < positives; ++i) {
    per[0].push_back({1, i, {10.0 + 0.01 * i}, 0});
  }
  for (std::uint32_t i = 0; i < negatives; ++i) {
    per[1].push_back({2, i, {-0.01 * i}, 1});
  }
  return detection::prototypicality_scores(per, 1, 200);
}

vit::ActivationRecord record_1d(std::vector<double> keys) {
  vit::ActivationRecord r;
  r.image_id = 42;
  Matrix k;
  for (double v : keys) {
    r.token_positions.push_back(static_cast<std::uint32_t>(r.token_positions.size()));
    k.push_row(std::vector<double>{v});
  }
  r.per_head_keys = {k};
  return r;
}

}  // namespace

TEST(KeyBank, ClampsToSmallerSide) {
  const auto bank = build_key_bank(bank_of(120, 300), 0, 200);
  EXPECT_EQ(bank.per_side, 120u);
  EXPECT_EQ(bank.points.rows(), 240u);
  EXPECT_EQ(std::count(bank.labels.begin(), bank.labels.end(), 1), 120);
  EXPECT_EQ(bank.labels.front(), 1);
  EXPECT_EQ(bank.labels.back(), 0);
}

TEST(KeyBank, NegativesAreLowestScoring) {
  // Negatives farther from the positives score higher, so the bank keeps
  // the ones nearest zero.
  const auto bank = build_key_bank(bank_of(3, 10), 0, 3);
  for (std::size_t i = 3; i < 6; ++i) EXPECT_GT(bank.points(i, 0), -0.025);
}

TEST(KeyBank, RejectsBadCluster) {
  EXPECT_THROW(build_key_bank(bank_of(3, 3), 2, 3), InvalidInput);
}

TEST(FlagPatches, NearestVoteWithKOne) {
  KeyBank bank;
  bank.points = Matrix::from_rows({{10.0}, {0.0}});
  bank.labels = {1, 0};
  bank.per_side = 1;
  bank.k = 1;
  const auto mask = flag_patches(record_1d({9.0, 1.0, 6.0, 4.0}), bank);
  EXPECT_EQ(mask.image_id, 42u);
  EXPECT_EQ(mask.flags, (std::vector<std::uint8_t>{1, 0, 1, 0}));
  EXPECT_EQ(mask.flagged(), 2u);
  EXPECT_FALSE(mask.guard_applied);
}

TEST(FlagPatches, GuardKeepsFarthestToken) {
  KeyBank bank;
  bank.points = Matrix::from_rows({{10.0}, {0.0}});
  bank.labels = {1, 0};
  bank.per_side = 1;
  bank.k = 1;
  const auto mask = flag_patches(record_1d({9.0, 8.0, 12.0}), bank);
  EXPECT_TRUE(mask.guard_applied);
  EXPECT_EQ(mask.flags, (std::vector<std::uint8_t>{1, 0, 1}));
}

TEST(Ablation, EmptyMaskIsIdentity) {
  const vit::ViTModel model(test_support::tiny_vit(2));
  const Image img = test_support::random_image(16, 9);
  AblationMask mask;
  mask.flags.assign(16, 0);
  const auto a = ablate_and_classify(model, img, mask);
  const auto f = vit::forward(model, img);
  EXPECT_EQ(a.logits, f.logits);
  EXPECT_EQ(a.cls_embedding, f.cls_embedding);
  EXPECT_EQ(a.surviving_positions.size(), 16u);
}

TEST(Ablation, DropsFlaggedPositions) {
  const vit::ViTModel model(test_support::tiny_vit(2));
  AblationMask mask;
  mask.flags.assign(16, 0);
  mask.flags[0] = mask.flags[5] = 1;
  const auto a = ablate_and_classify(model, test_support::random_image(16, 9), mask);
  EXPECT_EQ(a.surviving_positions.size(), 14u);
  EXPECT_EQ(std::count(a.surviving_positions.begin(), a.surviving_positions.end(), 5u), 0);
  mask.flags.resize(10);
  EXPECT_THROW(ablate_and_classify(model, test_support::random_image(16, 9), mask), InvalidInput);
}

TEST(RetrainHead, SeparableDataReachesFullAccuracy) {
  const vit::ViTModel model(test_support::tiny_vit(3));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix x;
  std::vector<int> y;
  for (int i = 0; i < 60; ++i) {
    std::vector<double> row(16);
    for (double& v : row) v = n(rng);
    const int label = i % 2;
    row[0] = label == 1 ? 2.0 + std::abs(row[0]) : -2.0 - std::abs(row[0]);
    x.push_row(row);
    y.push_back(label);
  }
  HeadHyper h;
  h.l2 = 1e-4;
  const auto head = retrain_head(model, x, y, h);
  for (std::size_t i = 0; i < x.rows(); ++i) EXPECT_EQ(head.predict(x.row(i)), y[i]);
  for (std::size_t i = 1; i < head.loss_trace.size(); ++i) {
    EXPECT_LE(head.loss_trace[i], head.loss_trace[i - 1]);
  }
}

TEST(RetrainHead, ZeroStepsReturnsModelHead) {
  const vit::ViTModel model(test_support::tiny_vit(3));
  const Matrix x = Matrix(4, 16, 0.5);
  const std::vector<int> y = {0, 1, 0, 1};
  HeadHyper h;
  h.max_steps = 0;
  const auto head = retrain_head(model, x, y, h);
  const auto base = model_head(model);
  EXPECT_EQ(head.weight, base.weight);
  EXPECT_EQ(head.bias, base.bias);
}

TEST(RetrainHead, StrongL2ShrinksWeights) {
  const vit::ViTModel model(test_support::tiny_vit(3));
  Matrix x;
  std::vector<int> y;
  for (int i = 0; i < 20; ++i) {
    std::vector<double> row(16, 0.0);
    row[1] = i % 2 == 0 ? -1.0 : 1.0;
    x.push_row(row);
    y.push_back(i % 2);
  }
  HeadHyper h;
  h.l2 = 1e4;
  const auto head = retrain_head(model, x, y, h);
  double norm = 0.0;
  for (double w : head.weight.values()) norm += w * w;
  EXPECT_LT(std::sqrt(norm), 1e-2);
}

TEST(RetrainHead, JsonRoundTrip) {
  const auto head = model_head(vit::ViTModel(test_support::tiny_vit(3)));
  const auto back = head_from_json(to_json(head));
  EXPECT_EQ(back.weight, head.weight);
  EXPECT_EQ(back.bias, head.bias);
}

TEST(GroupMetrics, WorstAndAverageGroupAccuracy) {
  // Groups 0..3 with 2 samples each; group 3 gets one error.
  const std::vector<int> labels = {0, 0, 0, 0, 1, 1, 1, 1};
  const std::vector<int> sp = {0, 0, 1, 1, 0, 0, 1, 1};
  std::vector<int> pred = labels;
  pred[7] = 0;
  const auto m = evaluate_groups(pred, labels, sp);
  EXPECT_DOUBLE_EQ(m.wga, 50.0);
  EXPECT_DOUBLE_EQ(m.aga, 87.5);
  EXPECT_DOUBLE_EQ(m.overall_accuracy, 87.5);
  EXPECT_FALSE(m.sp_rate.has_value());
  EXPECT_TRUE(m.warnings.empty());
}

TEST(GroupMetrics, EmptyGroupExcluded) {
  const std::vector<int> labels = {0, 0, 1, 1};
  const std::vector<int> sp = {0, 0, 0, 0};
  const std::vector<int> pred = {0, 0, 1, 0};
  const auto m = evaluate_groups(pred, labels, sp);
  EXPECT_DOUBLE_EQ(m.wga, 50.0);
  EXPECT_DOUBLE_EQ(m.aga, 75.0);
  EXPECT_FALSE(m.group_accuracy[1].has_value());
  EXPECT_EQ(m.warnings.size(), 2u);
}

TEST(GroupMetrics, AblationRates) {
  std::vector<int> labels(40, 0);
  std::vector<int> sp(40, 0);
  std::vector<AblationMask> masks(40);
  for (std::size_t i = 0; i < 40; ++i) {
    masks[i].flags.assign(4, 0);
    if (i < 20) {
      sp[i] = 1;
      if (i < 18) masks[i].flags[0] = 1;
    } else if (i == 20) {
      masks[i].flags[2] = 1;
    }
  }
  const auto m = evaluate_groups(labels, labels, sp, masks);
  EXPECT_DOUBLE_EQ(*m.sp_rate, 90.0);
  EXPECT_DOUBLE_EQ(*m.ns_rate, 5.0);
}

TEST(Subsample, BalancedSortedAndSeeded) {
  std::vector<int> groups;
  for (int g = 0; g < 4; ++g) groups.insert(groups.end(), 3 + 5 * g, g);
  const auto keep = group_balanced_subsample(groups, 4, 7);
  ASSERT_EQ(keep.size(), 12u);
  EXPECT_TRUE(std::is_sorted(keep.begin(), keep.end()));
  std::array<int, 4> per{};
  for (std::size_t i : keep) ++per[static_cast<std::size_t>(groups[i])];
  for (int c : per) EXPECT_EQ(c, 3);
  EXPECT_EQ(keep, group_balanced_subsample(groups, 4, 7));
  EXPECT_NE(keep, group_balanced_subsample(groups, 4, 8));
  groups.erase(groups.begin(), groups.begin() + 3);
  EXPECT_THROW(group_balanced_subsample(groups, 4, 7), InvalidInput);
}
