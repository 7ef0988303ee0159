// SPDX-License-Identifier: Apache-2.0
#include "shortlens/concepts/concepts.hpp"

#include <algorithm>
#include <atomic>
#include <thread>

#include "shortlens/error.hpp"

namespace shortlens::concepts {

using nlohmann::json;

Image patch_crop(const Image& source, std::size_t position,
                 std::size_t patch_size, std::size_t scale) {
  if (patch_size == 0 || scale == 0 || source.size % patch_size != 0) {
    throw InvalidInput("patch_crop: bad patch geometry");
  }
  const std::size_t grid = source.size / patch_size;
  if (position >= grid * grid) {
    throw InvalidInput("patch_crop: position " + std::to_string(position) +
                       " outside a " + std::to_string(grid) + "x" +
                       std::to_string(grid) + " grid");
  }
  const std::size_t y0 = (position / grid) * patch_size;
  const std::size_t x0 = (position % grid) * patch_size;
  Image out(patch_size * scale, source.channels);
  for (std::size_t y = 0; y < out.size; ++y) {
    for (std::size_t x = 0; x < out.size; ++x) {
      for (std::size_t c = 0; c < source.channels; ++c) {
        out.at(y, x, c) = source.at(y0 + y / scale, x0 + x / scale, c);
      }
    }
  }
  return out;
}

double bright_fraction(const Image& crop, double threshold) {
  const std::size_t n = crop.size * crop.size;
  if (n == 0) return 0.0;
  std::size_t bright = 0;
  for (std::size_t i = 0; i < n; ++i) {
    float m = crop.pixels[i * crop.channels];
    for (std::size_t c = 1; c < crop.channels; ++c) {
      m = std::max(m, crop.pixels[i * crop.channels + c]);
    }
    if (m >= threshold) ++bright;
  }
  return static_cast<double>(bright) / static_cast<double>(n);
}

std::string StubCaptioner::caption(const Image& crop, std::string_view) {
  return std::string(bright_fraction(crop) >= marker_fraction_
                         ? kStubMarkerCaption
                         : kStubTextureCaption);
}

std::string StubRefiner::refine(std::string_view prompt) {
  const std::size_t at = prompt.find(kRefinePrompt);
  std::string_view rest =
      at == std::string_view::npos ? prompt
                                   : prompt.substr(at + kRefinePrompt.size());
  std::size_t lines = 0;
  std::size_t markers = 0;
  while (!rest.empty()) {
    const std::size_t nl = rest.find('\n');
    const std::string_view line = rest.substr(0, nl);
    if (!line.empty()) {
      ++lines;
      if (line.find("marker") != std::string_view::npos) ++markers;
    }
    if (nl == std::string_view::npos) break;
    rest.remove_prefix(nl + 1);
  }
  if (lines > 0 && markers * 10 >= lines * 6) {
    return std::string(kStubMarkerSummary);
  }
  return std::string(kStubTextureSummary);
}

namespace {

template <typename Fn>
std::string with_retries(Fn&& call, std::size_t retries,
                         std::chrono::milliseconds backoff,
                         std::optional<std::string>& error) {
  for (std::size_t attempt = 0;; ++attempt) {
    try {
      std::string text = call();
      if (!text.empty()) {
        error.reset();
        return text;
      }
      error = "provider returned an empty response";
    } catch (const std::exception& e) {
      error = e.what();
    }
    if (attempt >= retries) return {};
    std::this_thread::sleep_for(backoff * (1LL << attempt));
  }
}

}  // namespace

std::vector<Caption> caption_patches(std::span<const PatchRef> patches,
                                     std::span<const Image> crops,
                                     Captioner& captioner,
                                     const CaptionOptions& options) {
  if (patches.size() != crops.size()) {
    throw InvalidInput("caption_patches: patches/crops length mismatch");
  }
  std::vector<Caption> out(patches.size());
  std::atomic<std::size_t> next{0};
  const std::string provider = captioner.id();
  auto worker = [&] {
    for (std::size_t i = next++; i < patches.size(); i = next++) {
      Caption& c = out[i];
      c.patch = patches[i];
      c.provider = provider;
      const auto t0 = std::chrono::steady_clock::now();
      c.text = with_retries(
          [&] { return captioner.caption(crops[i], kCaptionPrompt); },
          options.retries, options.backoff, c.error);
      c.latency_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    }
  };
  const std::size_t n_threads =
      std::clamp<std::size_t>(options.parallelism, 1, std::max<std::size_t>(patches.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  return out;
}

std::string refine_prompt(std::span<const std::string> captions) {
  std::string out(kRefinePrompt);
  for (const std::string& c : captions) {
    out += '\n';
    out += c;
  }
  return out;
}

ConceptSummary summarize_concepts(std::size_t cluster,
                                  std::span<const Caption> captions,
                                  Refiner& refiner,
                                  const SummaryOptions& options) {
  ConceptSummary s;
  s.cluster = cluster;
  s.refiner = refiner.id();
  for (const Caption& c : captions) {
    if (!c.ok()) continue;
    s.captions.push_back(c.text);
    if (s.captioner.empty()) s.captioner = c.provider;
  }
  if (s.captions.empty()) {
    throw InvalidInput("summarize_concepts: cluster " +
                       std::to_string(cluster) + " has no captions");
  }
  std::size_t chars = kRefinePrompt.size();
  for (const std::string& c : s.captions) {
    if (s.captions_used > 0 && chars + c.size() + 1 > options.max_prompt_chars) {
      break;
    }
    chars += c.size() + 1;
    ++s.captions_used;
  }
  const std::string prompt = refine_prompt(
      std::span<const std::string>(s.captions.data(), s.captions_used));
  s.shortcut_candidate = with_retries([&] { return refiner.refine(prompt); },
                                      options.retries, options.backoff,
                                      s.error);
  return s;
}

json to_json(const Caption& c) {
  return {{"image_id", c.patch.image_id},
          {"position", c.patch.position},
          {"cluster", c.patch.cluster},
          {"score", c.patch.score},
          {"text", c.text},
          {"provider", c.provider},
          {"latency_ms", c.latency_ms},
          {"error", c.error ? json(*c.error) : json(nullptr)}};
}

json to_json(const ConceptSummary& s) {
  return {{"cluster", s.cluster},
          {"shortcut_candidate", s.shortcut_candidate},
          {"captions", s.captions},
          {"captions_used", s.captions_used},
          {"captioner", s.captioner},
          {"refiner", s.refiner},
          {"error", s.error ? json(*s.error) : json(nullptr)}};
}

}  // namespace shortlens::concepts
