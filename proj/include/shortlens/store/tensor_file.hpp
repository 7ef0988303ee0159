// SPDX-License-Identifier: Apache-2.0
//
// Binary array files shared by every artifact.
//
//   offset  size   field
//   0       4      magic "SLNS"
//   4       4      u32 version (1)
//   8       1      u8 dtype code (see DType)
//   9       4      u32 rank
//   13      8*rank u64 dims
//   ...            raw little-endian elements, row-major
//
// All integers are little-endian. The reader rejects any file whose size
// disagrees with the element count declared in its header.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace shortlens::store {

inline constexpr char kTensorMagic[4] = {'S', 'L', 'N', 'S'};
inline constexpr std::uint32_t kTensorVersion = 1;

enum class DType : std::uint8_t {
  kF32 = 1,
  kF64 = 2,
  kU32 = 3,
  kI64 = 4,
  kU8 = 5,
};

std::size_t dtype_size(DType dtype);
const char* dtype_name(DType dtype);
DType dtype_from_name(const std::string& name);

/// Type-erased array: dtype, shape, raw little-endian payload.
struct Tensor {
  DType dtype = DType::kF64;
  std::vector<std::uint64_t> shape;
  std::vector<std::byte> bytes;

  std::uint64_t element_count() const;

  static Tensor from_f64(std::vector<std::uint64_t> shape,
                         std::span<const double> values);
  static Tensor from_f32(std::vector<std::uint64_t> shape,
                         std::span<const float> values);
  static Tensor from_u32(std::vector<std::uint64_t> shape,
                         std::span<const std::uint32_t> values);
  static Tensor from_i64(std::vector<std::uint64_t> shape,
                         std::span<const std::int64_t> values);
  static Tensor from_u8(std::vector<std::uint64_t> shape,
                        std::span<const std::uint8_t> values);

  std::vector<double> to_f64() const;
  std::vector<float> to_f32() const;
  std::vector<std::uint32_t> to_u32() const;
  std::vector<std::int64_t> to_i64() const;
  std::vector<std::uint8_t> to_u8() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

std::vector<std::byte> encode_tensor(const Tensor& tensor);
/// Throws IntegrityError (with byte offset) on any header/size problem.
Tensor decode_tensor(std::span<const std::byte> bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor(const std::filesystem::path& path);

/// Writes via a sibling temporary file and rename.
void atomic_write(const std::filesystem::path& path,
                  std::span<const std::byte> bytes);
void atomic_write(const std::filesystem::path& path, const std::string& text);
std::vector<std::byte> read_bytes(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

}  // namespace shortlens::store
