// SPDX-License-Identifier: Apache-2.0
//
// A small pre-norm vision transformer with hand-written backpropagation.
//
// Besides predictions, a forward pass records the last-layer token
// embeddings and the per-head attention keys of the last block.
// `forward_tokens` runs any subset of already position-embedded tokens.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shortlens/image.hpp"
#include "shortlens/numerics/matrix.hpp"

namespace shortlens::vit {

using numerics::Matrix;

struct ViTConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t channels = 1;
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t blocks = 4;
  std::size_t mlp_ratio = 2;
  std::size_t classes = 2;
  // Pixels enter the patch embedding as (value - input_mean) / input_std.
  double input_mean = 0.5;
  double input_std = 0.25;
  std::uint64_t seed = 0;

  std::size_t grid() const noexcept { return image_size / patch_size; }
  std::size_t tokens() const noexcept { return grid() * grid(); }
  std::size_t patch_dim() const noexcept {
    return patch_size * patch_size * channels;
  }
  std::size_t head_dim() const noexcept { return embed_dim / heads; }
  std::size_t mlp_dim() const noexcept { return embed_dim * mlp_ratio; }

  /// Throws InvalidInput on inconsistent geometry.
  void validate() const;

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

struct ParamTensor {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;

  std::size_t size() const noexcept { return rows * cols; }

  friend bool operator==(const ParamTensor&, const ParamTensor&) = default;
};

/// Parameter-tensor family, used to report gradient checks per layer type.
enum class LayerKind { kPatchEmbed, kAttention, kMlp, kLayerNorm, kHead };
const char* to_string(LayerKind kind);
LayerKind layer_kind(const std::string& param_name);

class ViTModel {
 public:
  ViTModel() = default;
  /// Randomly initialized model (N(0, 0.02) weights, zero
  /// biases, unit layer-norm gains) seeded from config.seed.
  explicit ViTModel(const ViTConfig& config);

  const ViTConfig& config() const noexcept { return config_; }
  const std::vector<ParamTensor>& layout() const noexcept { return layout_; }
  std::span<double> params() noexcept { return params_; }
  std::span<const double> params() const noexcept { return params_; }

  const ParamTensor& tensor(const std::string& name) const;
  std::span<double> values(const std::string& name);
  std::span<const double> values(const std::string& name) const;

  friend bool operator==(const ViTModel&, const ViTModel&) = default;

 private:
  ViTConfig config_;
  std::vector<ParamTensor> layout_;
  std::vector<double> params_;
};

/// Patch-embedded tokens with the positional embedding already added.
/// `positions` index the patch grid (row-major) and are strictly increasing.
struct TokenSequence {
  Matrix embedded;  // T' x d
  std::vector<std::uint32_t> positions;
};

struct ActivationRecord {
  std::uint64_t image_id = 0;
  Matrix token_embeddings;            // T' x d, last layer, CLS excluded
  std::vector<double> cls_embedding;  // d, head input
  std::vector<Matrix> per_head_keys;  // H of T' x d/H, last block
  std::vector<double> logits;
  std::vector<double> probs;
  std::vector<std::uint32_t> token_positions;

  friend bool operator==(const ActivationRecord&,
                         const ActivationRecord&) = default;
};

struct Prediction {
  std::vector<double> logits;
  std::vector<double> probs;
  std::vector<double> cls_embedding;
};

/// Flattened pixels of every patch (T x patch_dim), row-major grid order.
Matrix extract_patches(const ViTConfig& config, const Image& image);

TokenSequence embed(const ViTModel& model, const Image& image);

/// Keeps the tokens whose flag is false. Throws InvalidInput if nothing
/// survives.
TokenSequence drop_tokens(const TokenSequence& tokens,
                          std::span<const bool> drop);

ActivationRecord forward(const ViTModel& model, const Image& image,
                         std::uint64_t image_id = 0);
ActivationRecord forward_record(const ViTModel& model,
                                const TokenSequence& tokens,
                                std::uint64_t image_id = 0);
Prediction forward_tokens(const ViTModel& model, const TokenSequence& tokens);

std::vector<ActivationRecord> export_activations(
    const ViTModel& model, std::span<const Image> images,
    std::span<const std::uint64_t> image_ids);

/// Softmax cross-entropy of one sample and its gradient w.r.t. every
/// parameter (accumulated into `grad`, same layout as params). `drop`, when
/// non-empty, removes the flagged tokens before the first block.
double loss_and_gradient(const ViTModel& model, const Image& image, int label,
                         std::span<double> grad,
                         std::span<const bool> drop = {});
double loss(const ViTModel& model, const Image& image, int label,
            std::span<const bool> drop = {});

// ---------------------------------------------------------------------------
// training

struct TrainHyper {
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::size_t epochs = 8;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
};

struct LabeledImage {
  const Image* image = nullptr;
  int label = 0;
};

struct TrainResult {
  ViTModel model;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
};

/// AdamW on softmax cross-entropy with a cosine learning-rate schedule and
/// seeded per-epoch shuffling. Throws TrainingDiverged on a non-finite loss.
TrainResult train(const ViTConfig& config, std::span<const LabeledImage> data,
                  const TrainHyper& hyper);

double accuracy(const ViTModel& model, std::span<const LabeledImage> data);

// ---------------------------------------------------------------------------
// gradient check

struct GradCheckEntry {
  std::size_t param_index = 0;
  LayerKind kind = LayerKind::kHead;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::vector<GradCheckEntry> entries;
  double max_error_for(LayerKind kind) const;
  std::size_t count_for(LayerKind kind) const;
};

/// Compares the analytic gradient to central finite differences on at least
/// `samples` parameters drawn from every tensor. Relative error is
/// |a - n| / max(|a|, |n|, floor).
GradCheckReport grad_check(const ViTModel& model, const Image& image,
                           int label, double epsilon = 1e-5,
                           std::size_t samples = 200, std::uint64_t seed = 0,
                           double floor = 1e-6);

double finite_difference(const ViTModel& model, const Image& image, int label,
                         std::size_t param_index, double epsilon);

// ---------------------------------------------------------------------------
// checkpoint: manifest.json + weights.bin (raw little-endian f64, manifest
// order)

void save_checkpoint(const ViTModel& model, const std::filesystem::path& dir);
nlohmann::json config_to_json(const ViTConfig& config);
ViTConfig config_from_json(const nlohmann::json& j);
ViTModel load_checkpoint(const std::filesystem::path& dir);

}  // namespace shortlens::vit
