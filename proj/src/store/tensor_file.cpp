// SPDX-License-Identifier: Apache-2.0
#include "shortlens/store/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>

#include "shortlens/error.hpp"

namespace shortlens::store {

static_assert(std::endian::native == std::endian::little,
              "tensor files are written in host order; big-endian hosts "
              "need byte swapping");

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kFixedHeader = 4 + 4 + 1 + 4;

template <typename T>
void put(std::vector<std::byte>& out, T value) {
  const auto* p = reinterpret_cast<const std::byte*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(std::span<const std::byte> in, std::size_t offset) {
  T value;
  std::memcpy(&value, in.data() + offset, sizeof(T));
  return value;
}

template <typename T>
Tensor make(DType dtype, std::vector<std::uint64_t> shape,
            std::span<const T> values) {
  Tensor t;
  t.dtype = dtype;
  t.shape = std::move(shape);
  if (t.element_count() != values.size()) {
    throw InvalidInput("tensor shape does not match value count");
  }
  t.bytes.resize(values.size_bytes());
  if (!values.empty()) std::memcpy(t.bytes.data(), values.data(), t.bytes.size());
  return t;
}

template <typename T>
std::vector<T> view(const Tensor& t, DType expected) {
  if (t.dtype != expected) {
    throw InvalidInput(std::string("tensor dtype is ") + dtype_name(t.dtype) +
                       ", expected " + dtype_name(expected));
  }
  std::vector<T> out(t.bytes.size() / sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), t.bytes.data(), t.bytes.size());
  return out;
}

}  // namespace

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kF32:
    case DType::kU32:
      return 4;
    case DType::kF64:
    case DType::kI64:
      return 8;
    case DType::kU8:
      return 1;
  }
  throw InvalidInput("unknown dtype");
}

const char* dtype_name(DType dtype) {
  switch (dtype) {
    case DType::kF32:
      return "f32";
    case DType::kF64:
      return "f64";
    case DType::kU32:
      return "u32";
    case DType::kI64:
      return "i64";
    case DType::kU8:
      return "u8";
  }
  return "?";
}

DType dtype_from_name(const std::string& name) {
  for (DType d : {DType::kF32, DType::kF64, DType::kU32, DType::kI64,
                  DType::kU8}) {
    if (name == dtype_name(d)) return d;
  }
  throw InvalidInput("unknown dtype name '" + name + "'");
}

std::uint64_t Tensor::element_count() const {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor Tensor::from_f64(std::vector<std::uint64_t> shape,
                        std::span<const double> values) {
  return make(DType::kF64, std::move(shape), values);
}
Tensor Tensor::from_f32(std::vector<std::uint64_t> shape,
                        std::span<const float> values) {
  return make(DType::kF32, std::move(shape), values);
}
Tensor Tensor::from_u32(std::vector<std::uint64_t> shape,
                        std::span<const std::uint32_t> values) {
  return make(DType::kU32, std::move(shape), values);
}
Tensor Tensor::from_i64(std::vector<std::uint64_t> shape,
                        std::span<const std::int64_t> values) {
  return make(DType::kI64, std::move(shape), values);
}
Tensor Tensor::from_u8(std::vector<std::uint64_t> shape,
                       std::span<const std::uint8_t> values) {
  return make(DType::kU8, std::move(shape), values);
}

std::vector<double> Tensor::to_f64() const { return view<double>(*this, DType::kF64); }
std::vector<float> Tensor::to_f32() const { return view<float>(*this, DType::kF32); }
std::vector<std::uint32_t> Tensor::to_u32() const {
  return view<std::uint32_t>(*this, DType::kU32);
}
std::vector<std::int64_t> Tensor::to_i64() const {
  return view<std::int64_t>(*this, DType::kI64);
}
std::vector<std::uint8_t> Tensor::to_u8() const {
  return view<std::uint8_t>(*this, DType::kU8);
}

std::vector<std::byte> encode_tensor(const Tensor& tensor) {
  std::vector<std::byte> out;
  out.reserve(kFixedHeader + 8 * tensor.shape.size() + tensor.bytes.size());
  for (char c : kTensorMagic) out.push_back(static_cast<std::byte>(c));
  put<std::uint32_t>(out, kTensorVersion);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.dtype));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.shape.size()));
  for (auto d : tensor.shape) put<std::uint64_t>(out, d);
  out.insert(out.end(), tensor.bytes.begin(), tensor.bytes.end());
  return out;
}

Tensor decode_tensor(std::span<const std::byte> in) {
  if (in.size() < kFixedHeader) {
    throw IntegrityError("tensor header truncated", in.size());
  }
  if (std::memcmp(in.data(), kTensorMagic, 4) != 0) {
    throw IntegrityError("bad tensor magic", 0);
  }
  const auto version = get<std::uint32_t>(in, 4);
  if (version != kTensorVersion) {
    throw IntegrityError("unsupported tensor version " + std::to_string(version),
                         4);
  }
  const auto code = get<std::uint8_t>(in, 8);
  if (code < 1 || code > 5) {
    throw IntegrityError("unknown dtype code " + std::to_string(code), 8);
  }
  Tensor t;
  t.dtype = static_cast<DType>(code);
  const auto rank = get<std::uint32_t>(in, 9);
  std::size_t offset = kFixedHeader;
  if (rank > 16 || in.size() < offset + 8ull * rank) {
    throw IntegrityError("tensor shape header truncated", in.size());
  }
  for (std::uint32_t r = 0; r < rank; ++r) {
    t.shape.push_back(get<std::uint64_t>(in, offset));
    offset += 8;
  }
  const std::uint64_t expected = t.element_count() * dtype_size(t.dtype);
  if (in.size() - offset != expected) {
    throw IntegrityError("tensor payload holds " +
                             std::to_string(in.size() - offset) +
                             " bytes, header declares " +
                             std::to_string(expected),
                         in.size() < offset + expected ? in.size()
                                                       : offset + expected);
  }
  t.bytes.assign(in.begin() + static_cast<long>(offset), in.end());
  return t;
}

void write_tensor(const fs::path& path, const Tensor& tensor) {
  atomic_write(path, encode_tensor(tensor));
}

Tensor read_tensor(const fs::path& path) { return decode_tensor(read_bytes(path)); }

void atomic_write(const fs::path& path, std::span<const std::byte> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  static thread_local std::mt19937_64 rng(std::random_device{}());
  fs::path tmp = path;
  tmp += ".tmp-" + std::to_string(rng());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InvalidState("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InvalidState("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void atomic_write(const fs::path& path, const std::string& text) {
  atomic_write(path, std::as_bytes(std::span(text.data(), text.size())));
}

std::vector<std::byte> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> out(size);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size));
  return out;
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

}  // namespace shortlens::store
