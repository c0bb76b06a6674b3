#pragma once

// Binary tensor container:
//   magic "CDPIRTEN" (8 bytes) | version u32 | rank u32 | dims u32[rank] |
//   payload f32[prod(dims)], all little-endian, row-major.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cdpir/errors.hpp"
#include "cdpir/geometry.hpp"

namespace cdpir {

inline constexpr std::array<char, 8> kTensorMagic{'C', 'D', 'P', 'I', 'R', 'T', 'E', 'N'};
inline constexpr std::uint32_t kTensorVersion = 1;

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  std::size_t numel() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           [](std::size_t a, std::uint32_t b) { return a * b; });
  }
  bool operator==(const Tensor&) const = default;
};

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::string& buf, float f) { put_u32(buf, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& path() const { return path_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError(path_ + ": truncated file");
  }
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open for reading");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError(path.string() + ": write failed");
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  require(t.data.size() == t.numel(), "encode_tensor: payload does not match dims");
  std::string buf(kTensorMagic.begin(), kTensorMagic.end());
  detail::put_u32(buf, kTensorVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) detail::put_u32(buf, d);
  buf.reserve(buf.size() + 4 * t.data.size());
  for (float f : t.data) detail::put_f32(buf, f);
  return buf;
}

inline Tensor decode_tensor(const std::string& bytes, const std::string& origin = "<memory>") {
  detail::ByteReader in(bytes, origin);
  const std::string magic = in.raw(kTensorMagic.size());
  if (std::memcmp(magic.data(), kTensorMagic.data(), kTensorMagic.size()) != 0)
    throw DataError(origin + ": not a tensor file (bad magic)");
  const std::uint32_t version = in.u32();
  if (version != kTensorVersion)
    throw DataError(origin + ": unsupported tensor version " + std::to_string(version));
  Tensor t;
  const std::uint32_t rank = in.u32();
  if (rank > 16) throw DataError(origin + ": corrupt header (rank " + std::to_string(rank) + ")");
  for (std::uint32_t i = 0; i < rank; ++i) t.dims.push_back(in.u32());
  const std::size_t n = t.numel();
  if (in.remaining() != 4 * n)
    throw DataError(origin + ": payload size does not match dims (truncated or corrupt)");
  t.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) t.data[i] = in.f32();
  return t;
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  detail::write_file(path, encode_tensor(t));
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  return decode_tensor(detail::read_file(path), path.string());
}

inline Tensor to_tensor(const Image& image) {
  Tensor t;
  t.dims = {std::uint32_t(image.grid.ny), std::uint32_t(image.grid.nx)};
  t.data.assign(image.values.begin(), image.values.end());
  return t;
}

inline Tensor to_tensor(const Sinogram& sino) {
  Tensor t;
  t.dims = {std::uint32_t(sino.geometry.n_views()), std::uint32_t(sino.geometry.n_det)};
  t.data.assign(sino.values.begin(), sino.values.end());
  return t;
}

inline Image image_from_tensor(const Tensor& t, ImageGrid grid) {
  if (t.dims.size() != 2 || t.dims[0] != std::uint32_t(grid.ny) || t.dims[1] != std::uint32_t(grid.nx))
    throw DataError("tensor shape does not match the image grid");
  return Image(grid, std::vector<double>(t.data.begin(), t.data.end()));
}

inline Sinogram sinogram_from_tensor(const Tensor& t, ScanGeometry geometry) {
  // Accept views x det and the views x det x 1 stack layout.
  const bool ok = (t.dims.size() == 2 || (t.dims.size() == 3 && t.dims[2] == 1)) &&
                  t.dims[0] == std::uint32_t(geometry.n_views()) && t.dims[1] == std::uint32_t(geometry.n_det);
  if (!ok) throw DataError("tensor shape does not match the scan geometry");
  return Sinogram(std::move(geometry), std::vector<double>(t.data.begin(), t.data.end()));
}

}  // namespace cdpir
