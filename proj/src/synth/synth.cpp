// SPDX-License-Identifier: Apache-2.0
#include "shortlens/synth/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "shortlens/error.hpp"
#include "shortlens/numerics/numerics.hpp"
#include "shortlens/store/run_store.hpp"

namespace shortlens::synth {

using nlohmann::json;
using numerics::derive_seed;

namespace {

bool glyph_contains(const GlyphSpec& g, double u, double v) {
  const double s = static_cast<double>(g.size_px);
  if (u < 0.0 || v < 0.0 || u >= s || v >= s) return false;
  switch (g.shape) {
    case GlyphShape::kSquare:
    case GlyphShape::kChecker:
      return true;
    case GlyphShape::kRing: {
      const double border = std::max(2.0, std::floor(s / 4.0));
      return u < border || v < border || u >= s - border || v >= s - border;
    }
    case GlyphShape::kCross: {
      const double half = std::max(1.0, s / 6.0);
      const double c = s / 2.0;
      return std::abs(u - c) < half || std::abs(v - c) < half;
    }
  }
  return false;
}

// Largest distance (pixels) from the glyph centre to its rotated bounding
// box edge along an axis.
double rotated_half_extent(const GlyphSpec& g) {
  const double a = g.max_rotation_deg * M_PI / 180.0;
  const double half = static_cast<double>(g.size_px) / 2.0;
  return half * (std::abs(std::cos(a)) + std::abs(std::sin(a)));
}

std::vector<SynthSample> make_split(const SynthConfig& cfg,
                                    std::uint64_t split_seed,
                                    std::uint64_t& next_id,
                                    const std::vector<std::pair<int, int>>& groups) {
  std::vector<SynthSample> out;
  out.reserve(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    std::mt19937_64 rng(derive_seed(split_seed, i));
    SynthSample s;
    s.id = next_id++;
    s.label = groups[i].first;
    s.shortcut_present = groups[i].second;
    s.image = render_core(cfg, s.label, rng);
    if (s.shortcut_present != 0) {
      InjectionResult inj = inject_shortcut(s.image, cfg.glyph, rng, cfg.patch_size);
      s.image = std::move(inj.image);
      s.glyph_patch_indices = std::move(inj.glyph_patch_indices);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// Biased split: per class, a seeded shuffle picks exactly quota(n, rate)
// glyph carriers.
std::vector<std::pair<int, int>> biased_groups(std::size_t per_class, double rate0,
                                               double rate1, std::uint64_t seed) {
  std::vector<std::pair<int, int>> groups;
  for (int label = 0; label < 2; ++label) {
    const std::size_t k = quota(per_class, label == 0 ? rate0 : rate1);
    std::vector<std::size_t> order(per_class);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(label)));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> flags(per_class, 0);
    for (std::size_t i = 0; i < k; ++i) flags[order[i]] = 1;
    for (std::size_t i = 0; i < per_class; ++i) groups.emplace_back(label, flags[i]);
  }
  return groups;
}

}  // namespace

void SynthConfig::validate() const {
  if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) {
    throw InvalidInput("synth: image_size must be a positive multiple of patch_size");
  }
  if (channels == 0) throw InvalidInput("synth: channels must be positive");
  if (rate0 < 0.0 || rate0 > 1.0 || rate1 < 0.0 || rate1 > 1.0) {
    throw InvalidInput("synth: correlation rates must lie in [0, 1]");
  }
  if (train_per_class == 0 || val_per_class == 0 || test_per_group == 0) {
    throw InvalidInput("synth: split sizes must be positive");
  }
  if (glyph.size_px == 0 || glyph.size_px + glyph.margin_px > image_size) {
    throw InvalidInput("synth: glyph (" + std::to_string(glyph.size_px) +
                       "px + margin) does not fit a " +
                       std::to_string(image_size) + "px image");
  }
  if (glyph.corners.empty()) throw InvalidInput("synth: glyph needs at least one corner");
  if (glyph.color.size() != channels) {
    throw InvalidInput("synth: glyph colour needs one value per channel");
  }
}

std::size_t quota(std::size_t n, double rate) {
  const double exact = rate * static_cast<double>(n);
  const auto base_glyph = static_cast<std::size_t>(std::floor(exact));
  const double rem_glyph = exact - static_cast<double>(base_glyph);
  const double rest = static_cast<double>(n) - exact;
  const double rem_rest = rest - std::floor(rest);
  // One unit left to hand out whenever the remainders are non-zero.
  if (base_glyph + static_cast<std::size_t>(std::floor(rest)) < n) {
    return rem_glyph >= rem_rest ? base_glyph + 1 : base_glyph;
  }
  return base_glyph;
}

Image render_core(const SynthConfig& cfg, int label, std::mt19937_64& rng) {
  const CoreFeatureSpec& core = cfg.core;
  std::normal_distribution<double> jitter(0.0, core.frequency_sigma);
  std::uniform_real_distribution<double> angle(0.0, M_PI);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
  std::normal_distribution<double> noise(0.0, core.pixel_noise);

  const double centre = label == 0 ? core.class0_frequency : core.class1_frequency;
  const double freq = std::max(0.5, centre + jitter(rng));
  const double n = static_cast<double>(cfg.image_size);
  struct Wave {
    double kx, ky, phi;
  };
  std::vector<Wave> waves(core.waves);
  for (auto& w : waves) {
    const double th = angle(rng);
    w.kx = 2.0 * M_PI * freq * std::cos(th) / n;
    w.ky = 2.0 * M_PI * freq * std::sin(th) / n;
    w.phi = phase(rng);
  }
  const double norm = core.amplitude / std::sqrt(static_cast<double>(
                                           std::max<std::size_t>(core.waves, 1)));
  Image img(cfg.image_size, cfg.channels);
  for (std::size_t y = 0; y < cfg.image_size; ++y) {
    for (std::size_t x = 0; x < cfg.image_size; ++x) {
      double v = 0.0;
      for (const auto& w : waves) {
        v += std::cos(w.kx * static_cast<double>(x) + w.ky * static_cast<double>(y) + w.phi);
      }
      const double px = std::clamp(0.5 + norm * v + noise(rng), 0.05, 0.95);
      for (std::size_t c = 0; c < cfg.channels; ++c) {
        img.at(y, x, c) = static_cast<float>(px);
      }
    }
  }
  return img;
}

InjectionResult render_glyph(const Image& image, const GlyphSpec& glyph,
                             const GlyphPlacement& placement,
                             std::size_t patch_size) {
  if (glyph.size_px > image.size) {
    throw InvalidInput("glyph of " + std::to_string(glyph.size_px) +
                       "px is larger than the " + std::to_string(image.size) +
                       "px image");
  }
  if (glyph.color.size() != image.channels) {
    throw InvalidInput("glyph colour needs one value per image channel");
  }
  if (patch_size == 0 || image.size % patch_size != 0) {
    throw InvalidInput("patch grid does not tile the image");
  }
  InjectionResult out{image, {}, placement};
  const double s = static_cast<double>(glyph.size_px);
  const double cx = placement.x + s / 2.0;
  const double cy = placement.y + s / 2.0;
  const double a = -placement.angle_deg * M_PI / 180.0;
  const double ca = std::cos(a);
  const double sa = std::sin(a);
  const double reach = s * 0.75 + 1.0;
  const auto lo = [&](double c) {
    return static_cast<std::size_t>(std::max(0.0, std::floor(c - reach)));
  };
  const auto hi = [&](double c) {
    return static_cast<std::size_t>(
        std::clamp(std::ceil(c + reach), 0.0, static_cast<double>(image.size)));
  };
  const std::size_t grid = image.size / patch_size;
  for (std::size_t y = lo(cy); y < hi(cy); ++y) {
    for (std::size_t x = lo(cx); x < hi(cx); ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx;
      const double dy = static_cast<double>(y) + 0.5 - cy;
      const double u = ca * dx - sa * dy + s / 2.0;
      const double v = sa * dx + ca * dy + s / 2.0;
      if (!glyph_contains(glyph, u, v)) continue;
      // Checker cells are 2 px; odd cells take the inverted colour.
      const bool invert =
          glyph.shape == GlyphShape::kChecker &&
          (static_cast<int>(std::floor(u / 2.0)) + static_cast<int>(std::floor(v / 2.0))) % 2 != 0;
      for (std::size_t c = 0; c < image.channels; ++c) {
        float& p = out.image.at(y, x, c);
        const double target = invert ? 1.0 - glyph.color[c] : glyph.color[c];
        p = static_cast<float>(p + glyph.intensity * (target - p));
      }
      out.glyph_patch_indices.insert(
          static_cast<std::uint32_t>((y / patch_size) * grid + x / patch_size));
    }
  }
  return out;
}

InjectionResult inject_shortcut(const Image& image, const GlyphSpec& glyph,
                                std::mt19937_64& rng, std::size_t patch_size) {
  if (glyph.size_px + glyph.margin_px > image.size) {
    throw InvalidInput("glyph does not fit inside the image");
  }
  if (glyph.corners.empty()) throw InvalidInput("glyph needs at least one corner");
  std::uniform_int_distribution<std::size_t> pick_corner(0, glyph.corners.size() - 1);
  std::uniform_real_distribution<double> offset(0.0, static_cast<double>(glyph.margin_px));
  std::uniform_real_distribution<double> rot(-glyph.max_rotation_deg, glyph.max_rotation_deg);

  GlyphPlacement p;
  p.corner = glyph.corners[pick_corner(rng)];
  const double ox = offset(rng);
  const double oy = offset(rng);
  p.angle_deg = glyph.max_rotation_deg > 0.0 ? rot(rng) : 0.0;
  const double far = static_cast<double>(image.size - glyph.size_px);
  const bool right = p.corner == Corner::kTopRight || p.corner == Corner::kBottomRight;
  const bool bottom = p.corner == Corner::kBottomLeft || p.corner == Corner::kBottomRight;
  p.x = right ? far - ox : ox;
  p.y = bottom ? far - oy : oy;
  return render_glyph(image, glyph, p, patch_size);
}

PixelBox corner_region(const GlyphSpec& glyph, std::size_t image_size, Corner corner) {
  const double half = static_cast<double>(glyph.size_px) / 2.0;
  const auto side = std::min<std::size_t>(
      image_size, static_cast<std::size_t>(std::ceil(
                      static_cast<double>(glyph.margin_px) + half +
                      rotated_half_extent(glyph) + 1.0)));
  const bool right = corner == Corner::kTopRight || corner == Corner::kBottomRight;
  const bool bottom = corner == Corner::kBottomLeft || corner == Corner::kBottomRight;
  PixelBox b;
  b.x0 = right ? image_size - side : 0;
  b.x1 = right ? image_size : side;
  b.y0 = bottom ? image_size - side : 0;
  b.y1 = bottom ? image_size : side;
  return b;
}

SynthDataset generate(const SynthConfig& cfg) {
  cfg.validate();
  SynthDataset out;
  out.config = cfg;
  std::uint64_t next_id = 0;

  out.train = make_split(cfg, derive_seed(cfg.seed, "synth/train"), next_id,
                         biased_groups(cfg.train_per_class, cfg.rate0, cfg.rate1,
                                       derive_seed(cfg.seed, "synth/train/quota")));
  out.val = make_split(cfg, derive_seed(cfg.seed, "synth/val"), next_id,
                       biased_groups(cfg.val_per_class, cfg.rate0, cfg.rate1,
                                     derive_seed(cfg.seed, "synth/val/quota")));
  std::vector<std::pair<int, int>> balanced;
  for (int label = 0; label < 2; ++label) {
    for (int glyph = 0; glyph < 2; ++glyph) {
      for (std::size_t i = 0; i < cfg.test_per_group; ++i) balanced.emplace_back(label, glyph);
    }
  }
  out.test = make_split(cfg, derive_seed(cfg.seed, "synth/test"), next_id, balanced);
  return out;
}

const char* to_string(Corner corner) {
  switch (corner) {
    case Corner::kTopLeft:
      return "top_left";
    case Corner::kTopRight:
      return "top_right";
    case Corner::kBottomLeft:
      return "bottom_left";
    case Corner::kBottomRight:
      return "bottom_right";
  }
  return "?";
}

const char* to_string(GlyphShape shape) {
  switch (shape) {
    case GlyphShape::kSquare:
      return "square";
    case GlyphShape::kRing:
      return "ring";
    case GlyphShape::kCross:
      return "cross";
    case GlyphShape::kChecker:
      return "checker";
  }
  return "?";
}

namespace {

Corner corner_from_string(const std::string& s) {
  for (Corner c : {Corner::kTopLeft, Corner::kTopRight, Corner::kBottomLeft,
                   Corner::kBottomRight}) {
    if (s == to_string(c)) return c;
  }
  throw InvalidInput("unknown corner '" + s + "'");
}

GlyphShape shape_from_string(const std::string& s) {
  for (GlyphShape g : {GlyphShape::kSquare, GlyphShape::kRing, GlyphShape::kCross,
                       GlyphShape::kChecker}) {
    if (s == to_string(g)) return g;
  }
  throw InvalidInput("unknown glyph shape '" + s + "'");
}

}  // namespace

json to_json(const SynthConfig& c) {
  json corners = json::array();
  for (Corner k : c.glyph.corners) corners.push_back(to_string(k));
  return {
      {"image_size", c.image_size},
      {"channels", c.channels},
      {"patch_size", c.patch_size},
      {"core",
       {{"class0_frequency", c.core.class0_frequency},
        {"class1_frequency", c.core.class1_frequency},
        {"frequency_sigma", c.core.frequency_sigma},
        {"waves", c.core.waves},
        {"amplitude", c.core.amplitude},
        {"pixel_noise", c.core.pixel_noise}}},
      {"glyph",
       {{"shape", to_string(c.glyph.shape)},
        {"size_px", c.glyph.size_px},
        {"intensity", c.glyph.intensity},
        {"color", c.glyph.color},
        {"corners", corners},
        {"margin_px", c.glyph.margin_px},
        {"max_rotation_deg", c.glyph.max_rotation_deg}}},
      {"rate0", c.rate0},
      {"rate1", c.rate1},
      {"train_per_class", c.train_per_class},
      {"val_per_class", c.val_per_class},
      {"test_per_group", c.test_per_group},
      {"seed", c.seed},
  };
}

SynthConfig synth_config_from_json(const json& j) {
  SynthConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.channels = j.value("channels", c.channels);
  c.patch_size = j.value("patch_size", c.patch_size);
  if (j.contains("core")) {
    const json& k = j["core"];
    c.core.class0_frequency = k.value("class0_frequency", c.core.class0_frequency);
    c.core.class1_frequency = k.value("class1_frequency", c.core.class1_frequency);
    c.core.frequency_sigma = k.value("frequency_sigma", c.core.frequency_sigma);
    c.core.waves = k.value("waves", c.core.waves);
    c.core.amplitude = k.value("amplitude", c.core.amplitude);
    c.core.pixel_noise = k.value("pixel_noise", c.core.pixel_noise);
  }
  if (j.contains("glyph")) {
    const json& g = j["glyph"];
    if (g.contains("shape")) c.glyph.shape = shape_from_string(g["shape"]);
    c.glyph.size_px = g.value("size_px", c.glyph.size_px);
    c.glyph.intensity = g.value("intensity", c.glyph.intensity);
    c.glyph.color = g.value("color", c.glyph.color);
    if (g.contains("corners")) {
      c.glyph.corners.clear();
      for (const auto& k : g["corners"]) c.glyph.corners.push_back(corner_from_string(k));
    }
    c.glyph.margin_px = g.value("margin_px", c.glyph.margin_px);
    c.glyph.max_rotation_deg = g.value("max_rotation_deg", c.glyph.max_rotation_deg);
  }
  c.rate0 = j.value("rate0", c.rate0);
  c.rate1 = j.value("rate1", c.rate1);
  c.train_per_class = j.value("train_per_class", c.train_per_class);
  c.val_per_class = j.value("val_per_class", c.val_per_class);
  c.test_per_group = j.value("test_per_group", c.test_per_group);
  c.seed = j.value("seed", c.seed);
  if (c.glyph.color.size() != c.channels) c.glyph.color.assign(c.channels, 1.0f);
  return c;
}

namespace {

json samples_to_json(const std::vector<SynthSample>& split) {
  json arr = json::array();
  for (const auto& s : split) {
    arr.push_back({{"id", s.id},
                   {"label", s.label},
                   {"shortcut_present", s.shortcut_present},
                   {"group", s.group()},
                   {"glyph_patch_indices", s.glyph_patch_indices}});
  }
  return arr;
}

store::Tensor images_tensor(const SynthConfig& cfg, const std::vector<SynthSample>& split) {
  std::vector<float> flat;
  flat.reserve(split.size() * cfg.image_size * cfg.image_size * cfg.channels);
  for (const auto& s : split) flat.insert(flat.end(), s.image.pixels.begin(), s.image.pixels.end());
  return store::Tensor::from_f32(
      {split.size(), cfg.image_size, cfg.image_size, cfg.channels}, flat);
}

std::vector<SynthSample> split_from(const SynthConfig& cfg, const json& meta,
                                    const store::Tensor& images) {
  const std::size_t px = cfg.image_size * cfg.image_size * cfg.channels;
  const std::vector<float> flat = images.to_f32();
  if (images.shape.size() != 4 || images.shape[0] != meta.size() ||
      flat.size() != meta.size() * px) {
    throw IntegrityError("dataset images disagree with manifest sample list", 13);
  }
  std::vector<SynthSample> out;
  for (std::size_t i = 0; i < meta.size(); ++i) {
    SynthSample s;
    s.id = meta[i].at("id");
    s.label = meta[i].at("label");
    s.shortcut_present = meta[i].at("shortcut_present");
    s.glyph_patch_indices = meta[i].at("glyph_patch_indices").get<std::set<std::uint32_t>>();
    s.image = Image(cfg.image_size, cfg.channels);
    std::copy_n(flat.begin() + static_cast<long>(i * px), px, s.image.pixels.begin());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

void save_dataset(const SynthDataset& data, const std::filesystem::path& dir) {
  store::Artifact a;
  a.meta = {{"format", "shortlens-synth"},
            {"version", 1},
            {"config", to_json(data.config)},
            {"splits",
             {{"train", samples_to_json(data.train)},
              {"val", samples_to_json(data.val)},
              {"test", samples_to_json(data.test)}}}};
  a.arrays["train_images"] = images_tensor(data.config, data.train);
  a.arrays["val_images"] = images_tensor(data.config, data.val);
  a.arrays["test_images"] = images_tensor(data.config, data.test);
  store::write_artifact_dir(dir, a);
}

SynthDataset load_dataset(const std::filesystem::path& dir) {
  const store::Artifact a = store::read_artifact_dir(dir);
  SynthDataset out;
  out.config = synth_config_from_json(a.meta.at("config"));
  const json& splits = a.meta.at("splits");
  out.train = split_from(out.config, splits.at("train"), a.arrays.at("train_images"));
  out.val = split_from(out.config, splits.at("val"), a.arrays.at("val_images"));
  out.test = split_from(out.config, splits.at("test"), a.arrays.at("test_images"));
  return out;
}

}  // namespace shortlens::synth
