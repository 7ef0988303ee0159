// SPDX-License-Identifier: Apache-2.0
//
// Concept identification: caption prototypical patch crops with a
// multimodal provider, then distil each cluster's captions into a single
// shortcut candidate sentence with a text provider.
#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "shortlens/image.hpp"

namespace shortlens::concepts {

inline constexpr std::string_view kCaptionPrompt =
    "What is in this picture? Describe in a few words.";

inline constexpr std::string_view kRefinePrompt =
    "I extracted patches from images in my dataset where my model seems to "
    "focus on the most. I let an LLM caption these images for you. I am "
    "searching for potential shortcuts in the dataset. Can you identify one "
    "or more possible shortcuts in this dataset? Describe it in one sentence "
    "(only!) and pick the most significant. No other explanations are "
    "needed. Descriptions:";

inline constexpr std::string_view kStubMarkerCaption =
    "a bright geometric marker on dark background";
inline constexpr std::string_view kStubTextureCaption = "noisy gray texture";
inline constexpr std::string_view kStubMarkerSummary =
    "The model may rely on a bright marker glyph rather than the texture.";
inline constexpr std::string_view kStubTextureSummary =
    "The model appears to rely on the background texture itself.";

/// Pixels of patch `position` (row-major grid) upscaled by nearest
/// neighbour.
Image patch_crop(const Image& source, std::size_t position,
                 std::size_t patch_size, std::size_t scale = 4);

/// 8-bit PNG (gray or RGB) of an image with values clamped to [0, 1].
std::vector<std::uint8_t> encode_png(const Image& image);
std::string base64_encode(std::span<const std::uint8_t> bytes);

class Captioner {
 public:
  virtual ~Captioner() = default;
  virtual std::string id() const = 0;
  /// Throws ProviderError on failure.
  virtual std::string caption(const Image& crop, std::string_view prompt) = 0;
};

class Refiner {
 public:
  virtual ~Refiner() = default;
  virtual std::string id() const = 0;
  /// `prompt` already carries the captions.
  virtual std::string refine(std::string_view prompt) = 0;
};

/// Fraction of pixels whose brightest channel reaches `threshold`.
double bright_fraction(const Image& crop, double threshold = 0.97);

/// Deterministic captioner keyed on the share of saturated pixels.
class StubCaptioner final : public Captioner {
 public:
  explicit StubCaptioner(double marker_fraction = 0.25)
      : marker_fraction_(marker_fraction) {}
  std::string id() const override { return "stub-captioner"; }
  std::string caption(const Image& crop, std::string_view prompt) override;

 private:
  double marker_fraction_;
};

/// Majority rule over the caption lines that follow the prompt: at least
/// 60% mentioning "marker" yields the marker sentence.
class StubRefiner final : public Refiner {
 public:
  std::string id() const override { return "stub-refiner"; }
  std::string refine(std::string_view prompt) override;
};

struct HttpProviderConfig {
  std::string api_base;  // e.g. https://host/v1
  std::string api_key;
  std::string caption_model;
  std::string refine_model;
  std::chrono::milliseconds timeout{60000};

  /// CONCEPT_API_BASE, CONCEPT_API_KEY, CONCEPT_CAPTION_MODEL,
  /// CONCEPT_REFINE_MODEL. Throws InvalidInput when the base URL is unset.
  static HttpProviderConfig from_env();
};

/// POSTs an OpenAI-style chat completion to <api_base>/chat/completions.
/// Non-2xx statuses and malformed replies throw ProviderError.
class HttpChatProvider final : public Captioner, public Refiner {
 public:
  explicit HttpChatProvider(HttpProviderConfig config);
  std::string id() const override;
  std::string caption(const Image& crop, std::string_view prompt) override;
  std::string refine(std::string_view prompt) override;

  /// Request body for a prompt and an optional PNG image.
  static nlohmann::json request_body(const std::string& model,
                                     std::string_view prompt,
                                     const std::string* png_base64);

 private:
  std::string complete(const std::string& model, std::string_view prompt,
                       const std::string* png_base64);

  HttpProviderConfig config_;
};

struct PatchRef {
  std::uint64_t image_id = 0;
  std::uint32_t position = 0;
  std::size_t cluster = 0;
  double score = 0.0;
};

struct Caption {
  PatchRef patch;
  std::string text;
  std::string provider;
  double latency_ms = 0.0;
  std::optional<std::string> error;

  bool ok() const noexcept { return !error.has_value(); }
};

struct CaptionOptions {
  std::size_t parallelism = 4;
  std::size_t retries = 3;
  std::chrono::milliseconds backoff{250};  // doubled after every failure
};

/// One caption per crop, in input order. Failures (exceptions or empty
/// text after all retries) become per-item error markers.
std::vector<Caption> caption_patches(std::span<const PatchRef> patches,
                                     std::span<const Image> crops,
                                     Captioner& captioner,
                                     const CaptionOptions& options = {});

struct ConceptSummary {
  std::size_t cluster = 0;
  std::string shortcut_candidate;
  std::vector<std::string> captions;  // successful captions, input order
  std::size_t captions_used = 0;      // after truncation to max_prompt_chars
  std::string captioner;
  std::string refiner;
  std::optional<std::string> error;
};

struct SummaryOptions {
  std::size_t max_prompt_chars = 16000;
  std::size_t retries = 3;
  std::chrono::milliseconds backoff{250};
};

/// Prompt sent to the refiner: the fixed instruction followed by one
/// caption per line.
std::string refine_prompt(std::span<const std::string> captions);

/// Throws InvalidInput when `captions` holds no successful caption. A
/// refiner failure is recorded in `error`.
ConceptSummary summarize_concepts(std::size_t cluster,
                                  std::span<const Caption> captions,
                                  Refiner& refiner,
                                  const SummaryOptions& options = {});

nlohmann::json to_json(const Caption& caption);
nlohmann::json to_json(const ConceptSummary& summary);

}  // namespace shortlens::concepts
