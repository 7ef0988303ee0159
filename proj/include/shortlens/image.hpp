// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

namespace shortlens {

/// Square image, row-major HWC, values nominally in [0, 1].
struct Image {
  std::size_t size = 0;
  std::size_t channels = 1;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t size_px, std::size_t channel_count, float fill = 0.0f)
      : size(size_px),
        channels(channel_count),
        pixels(size_px * size_px * channel_count, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c = 0) {
    return pixels[(y * size + x) * channels + c];
  }
  float at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * size + x) * channels + c];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

}  // namespace shortlens
