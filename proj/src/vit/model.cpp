// SPDX-License-Identifier: Apache-2.0
#include <random>

#include "shortlens/error.hpp"
#include "shortlens/vit/vit.hpp"

namespace shortlens::vit {

void ViTConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw InvalidInput("image_size " + std::to_string(image_size) +
                       " not divisible by patch_size " +
                       std::to_string(patch_size));
  }
  if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0) {
    throw InvalidInput("embed_dim " + std::to_string(embed_dim) +
                       " not divisible by heads " + std::to_string(heads));
  }
  if (channels == 0 || blocks == 0 || mlp_ratio == 0) {
    throw InvalidInput("channels, blocks and mlp_ratio must be positive");
  }
  if (!(input_std > 0.0)) throw InvalidInput("input_std must be positive");
  if (classes != 2) throw InvalidInput("only binary classifiers are supported");
}

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kPatchEmbed:
      return "patch_embed";
    case LayerKind::kAttention:
      return "attention";
    case LayerKind::kMlp:
      return "mlp";
    case LayerKind::kLayerNorm:
      return "layer_norm";
    case LayerKind::kHead:
      return "head";
  }
  return "?";
}

LayerKind layer_kind(const std::string& name) {
  if (name.starts_with("patch.") || name == "cls" || name == "pos") {
    return LayerKind::kPatchEmbed;
  }
  if (name.find(".attn.") != std::string::npos) return LayerKind::kAttention;
  if (name.find(".mlp.") != std::string::npos) return LayerKind::kMlp;
  if (name.starts_with("head.")) return LayerKind::kHead;
  return LayerKind::kLayerNorm;
}

ViTModel::ViTModel(const ViTConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.embed_dim;
  const std::size_t m = config_.mlp_dim();
  std::size_t offset = 0;
  auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
    layout_.push_back({std::move(name), rows, cols, offset});
    offset += rows * cols;
  };
  // Order matters: forward.cpp indexes tensors positionally.
  add("patch.w", config_.patch_dim(), d);
  add("patch.b", 1, d);
  add("cls", 1, d);
  add("pos", config_.tokens() + 1, d);
  for (std::size_t l = 0; l < config_.blocks; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    add(p + "ln1.g", 1, d);
    add(p + "ln1.b", 1, d);
    add(p + "attn.wq", d, d);
    add(p + "attn.bq", 1, d);
    add(p + "attn.wk", d, d);
    add(p + "attn.bk", 1, d);
    add(p + "attn.wv", d, d);
    add(p + "attn.bv", 1, d);
    add(p + "attn.wo", d, d);
    add(p + "attn.bo", 1, d);
    add(p + "ln2.g", 1, d);
    add(p + "ln2.b", 1, d);
    add(p + "mlp.w1", d, m);
    add(p + "mlp.b1", 1, m);
    add(p + "mlp.w2", m, d);
    add(p + "mlp.b2", 1, d);
  }
  add("final_ln.g", 1, d);
  add("final_ln.b", 1, d);
  add("head.w", d, config_.classes);
  add("head.b", 1, config_.classes);
  params_.assign(offset, 0.0);

  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (const auto& t : layout_) {
    const bool gain = t.name.ends_with(".g");
    const bool bias = t.rows == 1 && !gain && t.name != "cls";
    for (std::size_t i = 0; i < t.size(); ++i) {
      double& v = params_[t.offset + i];
      if (gain) {
        v = 1.0;
      } else if (bias) {
        v = 0.0;
      } else {
        v = normal(rng);
      }
    }
  }
}

const ParamTensor& ViTModel::tensor(const std::string& name) const {
  for (const auto& t : layout_) {
    if (t.name == name) return t;
  }
  throw InvalidInput("unknown parameter tensor '" + name + "'");
}

std::span<double> ViTModel::values(const std::string& name) {
  const auto& t = tensor(name);
  return std::span<double>(params_).subspan(t.offset, t.size());
}

std::span<const double> ViTModel::values(const std::string& name) const {
  const auto& t = tensor(name);
  return std::span<const double>(params_).subspan(t.offset, t.size());
}

}  // namespace shortlens::vit
