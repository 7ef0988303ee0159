// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "shortlens/error.hpp"
#include "shortlens/vit/vit.hpp"
#include "test_support.hpp"

using namespace shortlens;
using shortlens::test_support::random_image;
using shortlens::test_support::tiny_vit;

TEST(ViTConfig, RejectsBadGeometry) {
  vit::ViTConfig c = tiny_vit();
  c.patch_size = 5;
  EXPECT_THROW(c.validate(), InvalidInput);
  c = tiny_vit();
  c.heads = 3;
  EXPECT_THROW(c.validate(), InvalidInput);
  c = tiny_vit();
  c.classes = 3;
  EXPECT_THROW(c.validate(), InvalidInput);
}

TEST(ViTModel, SeededInitIsReproducible) {
  EXPECT_EQ(vit::ViTModel(tiny_vit(3)), vit::ViTModel(tiny_vit(3)));
  EXPECT_NE(vit::ViTModel(tiny_vit(3)), vit::ViTModel(tiny_vit(4)));
}

TEST(Forward, ZeroHeadGivesEvenOdds) {
  vit::ViTModel model(tiny_vit());
  for (double& w : model.values("head.w")) w = 0.0;
  const auto r = vit::forward(model, random_image(16, 1));
  EXPECT_EQ(r.logits[0], r.logits[1]);
  EXPECT_DOUBLE_EQ(r.probs[0], 0.5);
  EXPECT_DOUBLE_EQ(r.probs[1], 0.5);
}

TEST(Forward, RecordShapes) {
  const vit::ViTModel model(tiny_vit());
  const auto r = vit::forward(model, random_image(16, 2), 17);
  EXPECT_EQ(r.image_id, 17u);
  EXPECT_EQ(r.token_embeddings.rows(), 16u);
  EXPECT_EQ(r.token_embeddings.cols(), 16u);
  ASSERT_EQ(r.per_head_keys.size(), 2u);
  EXPECT_EQ(r.per_head_keys[0].cols(), 8u);
  EXPECT_EQ(r.cls_embedding.size(), 16u);
  std::vector<std::uint32_t> expected(16);
  std::iota(expected.begin(), expected.end(), 0u);
  EXPECT_EQ(r.token_positions, expected);
  EXPECT_NEAR(r.probs[0] + r.probs[1], 1.0, 1e-15);
}

TEST(Forward, DeterministicRepeat) {
  const vit::ViTModel model(tiny_vit());
  const Image img = random_image(16, 3);
  EXPECT_EQ(vit::forward(model, img, 1), vit::forward(model, img, 1));
}

TEST(Forward, RejectsWrongImageSize) {
  const vit::ViTModel model(tiny_vit());
  EXPECT_THROW(vit::forward(model, random_image(20, 1)), InvalidInput);
}

TEST(ForwardTokens, FullSetBitwiseEqualsForward) {
  const vit::ViTModel model(tiny_vit());
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Image img = random_image(16, s);
    const auto full = vit::forward(model, img);
    const auto tok = vit::forward_tokens(model, vit::embed(model, img));
    EXPECT_EQ(full.logits, tok.logits);
    EXPECT_EQ(full.probs, tok.probs);
    EXPECT_EQ(full.cls_embedding, tok.cls_embedding);
  }
}

TEST(ForwardTokens, PermutedStorageOrderInvariant) {
  const vit::ViTModel model(tiny_vit());
  const auto seq = vit::embed(model, random_image(16, 4));
  vit::TokenSequence permuted;
  std::vector<std::size_t> order(seq.positions.size());
  std::iota(order.begin(), order.end(), 0);
  std::reverse(order.begin(), order.end());
  for (std::size_t i : order) {
    permuted.embedded.push_row(seq.embedded.row(i));
    permuted.positions.push_back(seq.positions[i]);
  }
  const auto a = vit::forward_tokens(model, seq);
  const auto b = vit::forward_tokens(model, permuted);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(a.logits[c], b.logits[c], 1e-12);
}

TEST(ForwardTokens, SingleTokenAndEmpty) {
  const vit::ViTModel model(tiny_vit());
  const auto seq = vit::embed(model, random_image(16, 5));
  std::unique_ptr<bool[]> drop(new bool[16]);
  for (int i = 0; i < 16; ++i) drop[i] = i != 7;
  const auto one = vit::drop_tokens(seq, std::span<const bool>(drop.get(), 16));
  ASSERT_EQ(one.positions, std::vector<std::uint32_t>{7});
  const auto p = vit::forward_tokens(model, one);
  EXPECT_TRUE(std::isfinite(p.logits[0]) && std::isfinite(p.logits[1]));
  drop[7] = true;
  EXPECT_THROW(vit::drop_tokens(seq, std::span<const bool>(drop.get(), 16)), InvalidInput);
}

TEST(GradCheck, TinyModelBelowTolerance) {
  const vit::ViTModel model(tiny_vit(9));
  const auto report = vit::grad_check(model, random_image(16, 6), 1, 1e-5, 300, 2);
  EXPECT_LT(report.max_relative_error, 1e-4);
  for (auto k : {vit::LayerKind::kPatchEmbed, vit::LayerKind::kAttention,
                 vit::LayerKind::kMlp, vit::LayerKind::kLayerNorm, vit::LayerKind::kHead}) {
    EXPECT_GT(report.count_for(k), 0u) << vit::to_string(k);
  }
}

TEST(GradCheck, RichardsonOrder) {
  const vit::ViTModel model(tiny_vit(9));
  const Image img = random_image(16, 7);
  const std::size_t idx = model.tensor("head.w").offset + 1;
  const double f1 = vit::finite_difference(model, img, 0, idx, 1e-3);
  const double f2 = vit::finite_difference(model, img, 0, idx, 2e-3);
  const double f4 = vit::finite_difference(model, img, 0, idx, 4e-3);
  // Central differences: error scales with eps^2, so doubling eps
  // multiplies the change by about four.
  const double d1 = f2 - f1;
  const double d2 = f4 - f2;
  if (std::abs(d1) > 1e-12) EXPECT_NEAR(d2 / d1, 4.0, 0.5);
}

TEST(Gradient, UnusedParameterHasZeroGradient) {
  // With the image fully dropped except one token, the positional rows of
  // dropped tokens never enter the loss.
  const vit::ViTModel model(tiny_vit(2));
  std::vector<double> grad(model.params().size(), 0.0);
  std::unique_ptr<bool[]> drop(new bool[16]);
  for (int i = 0; i < 16; ++i) drop[i] = i != 3;
  vit::loss_and_gradient(model, random_image(16, 8), 1, grad,
                         std::span<const bool>(drop.get(), 16));
  const auto& pos = model.tensor("pos");
  const std::size_t d = model.config().embed_dim;
  for (std::size_t t = 0; t < 16; ++t) {
    if (t == 3) continue;
    for (std::size_t j = 0; j < d; ++j) {
      EXPECT_EQ(grad[pos.offset + (t + 1) * d + j], 0.0);
    }
  }
}

TEST(Train, LearnsBrightPatchTask) {
  std::vector<Image> images;
  std::vector<vit::LabeledImage> data;
  images.reserve(200);
  for (int i = 0; i < 200; ++i) {
    Image img = random_image(16, 100 + i);
    for (float& p : img.pixels) p *= 0.5f;
    const int label = i % 2;
    if (label == 1) {
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) img.at(y, x) = 1.0f;
    }
    images.push_back(std::move(img));
  }
  for (int i = 0; i < 200; ++i) data.push_back({&images[i], i % 2});
  vit::TrainHyper h;
  h.lr = 3e-3;
  h.epochs = 30;
  h.batch = 20;
  h.seed = 1;
  const auto result = vit::train(tiny_vit(1), data, h);
  EXPECT_GE(vit::accuracy(result.model, data), 0.99);
  EXPECT_EQ(result.epoch_loss.size(), 30u);
}

TEST(Train, ZeroEpochsKeepsInitAndSeedIsDeterministic) {
  std::vector<Image> images = {random_image(16, 1), random_image(16, 2)};
  std::vector<vit::LabeledImage> data = {{&images[0], 0}, {&images[1], 1}};
  vit::TrainHyper h;
  h.epochs = 0;
  EXPECT_EQ(vit::train(tiny_vit(5), data, h).model, vit::ViTModel(tiny_vit(5)));
  h.epochs = 2;
  h.batch = 1;
  h.seed = 4;
  EXPECT_EQ(vit::train(tiny_vit(5), data, h).model, vit::train(tiny_vit(5), data, h).model);
}

TEST(Train, DivergenceIsReported) {
  std::vector<Image> images = {random_image(16, 1), random_image(16, 2)};
  std::vector<vit::LabeledImage> data = {{&images[0], 0}, {&images[1], 1}};
  vit::TrainHyper h;
  h.lr = std::numeric_limits<double>::infinity();
  h.epochs = 2;
  EXPECT_THROW(vit::train(tiny_vit(5), data, h), TrainingDiverged);
}

TEST(ExportActivations, OneRecordPerImage) {
  const vit::ViTModel model(tiny_vit());
  std::vector<Image> images;
  std::vector<std::uint64_t> ids;
  for (std::uint64_t i = 0; i < 10; ++i) {
    images.push_back(random_image(16, i));
    ids.push_back(i * 3);
  }
  const auto recs = vit::export_activations(model, images, ids);
  ASSERT_EQ(recs.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(recs[i].image_id, ids[i]);
    EXPECT_EQ(recs[i].token_embeddings.rows(), 16u);
    EXPECT_EQ(recs[i], vit::forward(model, images[i], ids[i]));
  }
}

TEST(Checkpoint, RoundTripAndCorruption) {
  shortlens::test_support::TempDir dir("ckpt");
  vit::ViTModel model(tiny_vit(8));
  vit::save_checkpoint(model, dir.path() / "m");
  EXPECT_EQ(vit::load_checkpoint(dir.path() / "m"), model);
  std::filesystem::resize_file(dir.path() / "m" / "weights.bin", 100);
  EXPECT_THROW(vit::load_checkpoint(dir.path() / "m"), IntegrityError);
  EXPECT_THROW(vit::load_checkpoint(dir.path() / "missing"), NotFound);
}
