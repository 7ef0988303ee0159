// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>

#include "shortlens/error.hpp"
#include "shortlens/pipeline/pipeline.hpp"
#include "shortlens/store/run_store.hpp"
#include "shortlens/store/tensor_file.hpp"
#include "test_support.hpp"

using namespace shortlens;
using namespace shortlens::store;

TEST(Tensor, EncodeDecodeEveryDtype) {
  const std::vector<double> f64 = {1.5, -2.25, 3.0, 0.0, 1e-300, -7.0};
  const std::vector<float> f32 = {1.5f, -2.0f};
  const std::vector<std::uint32_t> u32 = {0, 4000000000u};
  const std::vector<std::int64_t> i64 = {-5, 1LL << 40};
  const std::vector<std::uint8_t> u8 = {0, 255, 7};
  for (const Tensor& t : {Tensor::from_f64({2, 3}, f64), Tensor::from_f32({2}, f32),
                          Tensor::from_u32({2}, u32), Tensor::from_i64({1, 2}, i64),
                          Tensor::from_u8({3}, u8)}) {
    const auto bytes = encode_tensor(t);
    EXPECT_EQ(decode_tensor(bytes), t);
  }
  EXPECT_EQ(Tensor::from_f64({2, 3}, f64).to_f64(), f64);
  EXPECT_EQ(Tensor::from_i64({1, 2}, i64).to_i64(), i64);
}

TEST(Tensor, HeaderLayout) {
  const auto bytes = encode_tensor(Tensor::from_u8({2, 1}, std::vector<std::uint8_t>{9, 8}));
  ASSERT_EQ(bytes.size(), 4u + 4 + 1 + 4 + 16 + 2);
  EXPECT_EQ(static_cast<char>(bytes[0]), 'S');
  EXPECT_EQ(static_cast<char>(bytes[3]), 'S');
  EXPECT_EQ(static_cast<int>(bytes[4]), 1);  // version, little-endian
  EXPECT_EQ(static_cast<int>(bytes[8]), static_cast<int>(DType::kU8));
  EXPECT_EQ(static_cast<int>(bytes[9]), 2);  // rank
  EXPECT_EQ(static_cast<int>(bytes[13]), 2);
  EXPECT_EQ(static_cast<int>(bytes[29]), 9);
}

TEST(Tensor, RejectsShapeMismatchOnBuild) {
  EXPECT_THROW(Tensor::from_f64({2, 2}, std::vector<double>{1, 2, 3}), InvalidInput);
}

TEST(Tensor, TruncationIsAnIntegrityError) {
  auto bytes = encode_tensor(Tensor::from_f64({4}, std::vector<double>{1, 2, 3, 4}));
  bytes.resize(bytes.size() - 3);
  try {
    decode_tensor(bytes);
    FAIL() << "expected IntegrityError";
  } catch (const IntegrityError& e) {
    EXPECT_GT(e.offset(), 0u);
  }
  bytes.resize(6);
  EXPECT_THROW(decode_tensor(bytes), IntegrityError);
  auto bad = encode_tensor(Tensor::from_u8({1}, std::vector<std::uint8_t>{1}));
  bad[0] = std::byte{'X'};
  EXPECT_THROW(decode_tensor(bad), IntegrityError);
}

TEST(Tensor, WrongAccessorDtypeThrows) {
  EXPECT_THROW(Tensor::from_u8({1}, std::vector<std::uint8_t>{1}).to_f64(), InvalidInput);
}

TEST(Stages, NamesAndPrerequisites) {
  for (Stage s : all_stages()) EXPECT_EQ(stage_from_string(to_string(s)), s);
  EXPECT_THROW(stage_from_string("nope"), InvalidInput);
  const auto pre = prerequisites(Stage::kMitigated);
  EXPECT_NE(std::find(pre.begin(), pre.end(), Stage::kPrototyped), pre.end());
  EXPECT_NE(std::find(pre.begin(), pre.end(), Stage::kSelected), pre.end());
  EXPECT_EQ(std::find(pre.begin(), pre.end(), Stage::kConcepts), pre.end());
  EXPECT_TRUE(prerequisites(Stage::kData).empty());
}

TEST(RunStore, CreateLoadList) {
  test_support::TempDir dir("store");
  RunStore store(dir.path());
  auto a = store.create_run({{"seed", 1}}, "alpha");
  a.stages[Stage::kData] = true;
  a.stage_seconds[Stage::kData] = 1.25;
  store.save_run(a);
  const auto back = store.load_run("alpha");
  EXPECT_TRUE(back.done(Stage::kData));
  EXPECT_FALSE(back.done(Stage::kTrained));
  EXPECT_EQ(back.stage_seconds.at(Stage::kData), 1.25);
  EXPECT_EQ(back.config, a.config);
  store.create_run({{"seed", 2}});
  EXPECT_EQ(store.list_runs().size(), 2u);
  EXPECT_TRUE(store.exists("alpha"));
  EXPECT_FALSE(store.exists("beta"));
  EXPECT_FALSE(store.exists("../x"));
  EXPECT_THROW(store.load_run("beta"), NotFound);
}

TEST(RunStore, UlidsSortByCreation) {
  const std::string a = make_ulid();
  const std::string b = make_ulid();
  EXPECT_EQ(a.size(), 26u);
  EXPECT_NE(a, b);
}

TEST(RunStore, ArtifactRoundTripAndTruncation) {
  test_support::TempDir dir("artifact");
  RunStore store(dir.path());
  store.create_run({}, "r");
  Artifact a;
  a.meta = {{"k", "v"}};
  a.arrays["x"] = Tensor::from_f64({3}, std::vector<double>{1, 2, 3});
  store.write_artifact("r", "thing", a);
  EXPECT_TRUE(store.has_artifact("r", "thing"));
  const Artifact back = store.read_artifact("r", "thing");
  EXPECT_EQ(back.meta, a.meta);
  EXPECT_EQ(back.arrays.at("x"), a.arrays.at("x"));
  EXPECT_THROW(store.read_artifact("r", "other"), NotFound);

  for (const auto& entry : std::filesystem::directory_iterator(store.artifact_dir("r", "thing"))) {
    if (entry.path().extension() == ".slns") {
      std::filesystem::resize_file(entry.path(), std::filesystem::file_size(entry.path()) - 4);
    }
  }
  EXPECT_THROW(store.read_artifact("r", "thing"), IntegrityError);
}

TEST(RunStore, ActivationRecordsRoundTripBitwise) {
  test_support::TempDir dir("acts");
  RunStore store(dir.path());
  store.create_run({}, "r");
  const vit::ViTModel model(test_support::tiny_vit(3));
  std::vector<Image> images = {test_support::random_image(16, 1), test_support::random_image(16, 2)};
  const std::vector<std::uint64_t> ids = {4, 9};
  const auto recs = vit::export_activations(model, images, ids);
  store.write_artifact("r", "activations", pipeline::activations_to_artifact(recs));
  EXPECT_EQ(pipeline::activations_from_artifact(store.read_artifact("r", "activations")), recs);
}

TEST(RunStore, SameSeedSameArtifactBytes) {
  test_support::TempDir dir("bytes");
  RunStore store(dir.path());
  const vit::ViTModel model(test_support::tiny_vit(3));
  std::vector<Image> images = {test_support::random_image(16, 1)};
  const std::vector<std::uint64_t> ids = {1};
  for (const char* run : {"a", "b"}) {
    store.create_run({}, run);
    store.write_artifact(run, "activations",
                         pipeline::activations_to_artifact(vit::export_activations(model, images, ids)));
  }
  for (const char* file : {"manifest.json", "keys.slns", "cls.slns"}) {
    EXPECT_EQ(read_bytes(store.artifact_dir("a", "activations") / file),
              read_bytes(store.artifact_dir("b", "activations") / file))
        << file;
  }
}

TEST(AtomicWrite, ReplacesWholeFile) {
  test_support::TempDir dir("atomic");
  const auto p = dir.path() / "f.txt";
  atomic_write(p, std::string("first version"));
  atomic_write(p, std::string("2"));
  EXPECT_EQ(read_text(p), "2");
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
  EXPECT_EQ(files, 1u);
}
