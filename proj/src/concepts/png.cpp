// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>

#include <openssl/evp.h>
#include <png.h>

#include "shortlens/concepts/concepts.hpp"
#include "shortlens/error.hpp"

namespace shortlens::concepts {

namespace {

void append_bytes(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void flush_nothing(png_structp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.size == 0 || (image.channels != 1 && image.channels != 3)) {
    throw InvalidInput("encode_png: need a non-empty gray or RGB image");
  }
  const std::size_t row_bytes = image.size * image.channels;
  std::vector<std::uint8_t> raw(image.size * row_bytes);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
    raw[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  std::vector<png_bytep> rows(image.size);
  for (std::size_t y = 0; y < image.size; ++y) rows[y] = raw.data() + y * row_bytes;

  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw InvalidState("encode_png: libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw InvalidState("encode_png: libpng init failed");
  }
  std::vector<std::uint8_t> out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw InvalidState("encode_png: libpng write failed");
  }
  png_set_write_fn(png, &out, append_bytes, flush_nothing);
  const auto side = static_cast<png_uint_32>(image.size);
  png_set_IHDR(png, info, side, side, 8,
               image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

}  // namespace shortlens::concepts
