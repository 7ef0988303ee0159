// SPDX-License-Identifier: Apache-2.0
//
// Procedural binary-class images whose core feature is the dominant spatial
// frequency of band-limited noise, with an optional bright glyph composited
// in a corner. Group annotations (label x glyph presence) are produced for
// evaluation only; pipeline stages never read them.
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <vector>

#include <nlohmann/json.hpp>

#include "shortlens/image.hpp"

namespace shortlens::synth {

enum class Corner : std::uint8_t { kTopLeft, kTopRight, kBottomLeft, kBottomRight };
enum class GlyphShape : std::uint8_t { kSquare, kRing, kCross, kChecker };

struct GlyphSpec {
  GlyphShape shape = GlyphShape::kSquare;
  std::size_t size_px = 32;
  // Blend weight of the glyph over the underlying pixels; 0 leaves the image
  // untouched.
  double intensity = 1.0;
  std::vector<float> color = {1.0f};  // one value per channel
  std::vector<Corner> corners = {Corner::kTopLeft, Corner::kTopRight,
                                 Corner::kBottomLeft, Corner::kBottomRight};
  std::size_t margin_px = 4;      // max offset of the glyph box from its corner
  double max_rotation_deg = 5.0;  // uniform jitter in [-max, max]
};

struct CoreFeatureSpec {
  double class0_frequency = 4.0;  // cycles per image width
  double class1_frequency = 6.0;
  double frequency_sigma = 0.7;   // per-image class overlap
  std::size_t waves = 6;
  double amplitude = 0.18;
  double pixel_noise = 0.04;
};

struct SynthConfig {
  std::size_t image_size = 64;
  std::size_t channels = 1;
  std::size_t patch_size = 8;  // grid used to report glyph footprints
  CoreFeatureSpec core;
  GlyphSpec glyph;
  double rate0 = 0.5;    // fraction of class 0 carrying the glyph
  double rate1 = 0.025;  // fraction of class 1 carrying the glyph
  std::size_t train_per_class = 1000;
  std::size_t val_per_class = 200;
  std::size_t test_per_group = 100;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthSample {
  std::uint64_t id = 0;
  Image image;
  int label = 0;
  int shortcut_present = 0;
  std::set<std::uint32_t> glyph_patch_indices;

  /// Group index 2 * label + shortcut_present.
  int group() const noexcept { return 2 * label + shortcut_present; }

  friend bool operator==(const SynthSample&, const SynthSample&) = default;
};

struct SynthDataset {
  SynthConfig config;
  std::vector<SynthSample> train;
  std::vector<SynthSample> val;
  std::vector<SynthSample> test;
};

struct GlyphPlacement {
  double x = 0.0;  // top-left of the unrotated glyph box, pixels
  double y = 0.0;
  double angle_deg = 0.0;
  Corner corner = Corner::kTopLeft;
};

struct InjectionResult {
  Image image;
  std::set<std::uint32_t> glyph_patch_indices;
  GlyphPlacement placement;
};

/// Number of glyph carriers out of `n` for rate `r` by largest-remainder
/// rounding of the (r n, (1 - r) n) quotas; an exact .5 tie favours the
/// glyph group.
std::size_t quota(std::size_t n, double rate);

Image render_core(const SynthConfig& config, int label, std::mt19937_64& rng);

/// Composites the glyph at an explicit placement.
InjectionResult render_glyph(const Image& image, const GlyphSpec& glyph,
                             const GlyphPlacement& placement,
                             std::size_t patch_size);

/// Samples a random placement, then composites the glyph.
InjectionResult inject_shortcut(const Image& image, const GlyphSpec& glyph,
                                std::mt19937_64& rng,
                                std::size_t patch_size = 8);

/// Axis-aligned pixel box [x0, x1) x [y0, y1) that any glyph placed in
/// `corner` can touch.
struct PixelBox {
  std::size_t x0, y0, x1, y1;
};
PixelBox corner_region(const GlyphSpec& glyph, std::size_t image_size,
                       Corner corner);

/// train/val keep the biased (rate0, rate1) group mix; test is balanced
/// with `test_per_group` samples in every (label, glyph) group.
SynthDataset generate(const SynthConfig& config);

// Dataset directory: manifest.json (config + per-sample annotations) and
// {train,val,test}_images.slns (f32, n x H x W x C).
void save_dataset(const SynthDataset& data, const std::filesystem::path& dir);
SynthDataset load_dataset(const std::filesystem::path& dir);

nlohmann::json to_json(const SynthConfig& config);
SynthConfig synth_config_from_json(const nlohmann::json& j);

const char* to_string(Corner corner);
const char* to_string(GlyphShape shape);

}  // namespace shortlens::synth
