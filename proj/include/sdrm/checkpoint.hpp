// SPDX-License-Identifier: Apache-2.0
//
// Binary parameter container and SHA-256 helpers.
//
// Layout (little-endian):
//   "SDRM"            4 bytes magic
//   version           u32 (currently 1)
//   repeated blocks:  rows u32, cols u32, rows*cols f64 row-major payload
//
// An MlpNet contributes two blocks per layer: weight (fan_in x fan_out) and
// bias (1 x fan_out). Activation tags are not stored; the loader rebuilds the
// architecture from the sidecar configuration and fills it block by block.

#pragma once

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sdrm/common.hpp"
#include "sdrm/tensor_nn.hpp"

namespace sdrm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as native little-endian doubles");

inline constexpr std::array<char, 4> kCheckpointMagic{'S', 'D', 'R', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof v));
}

}  // namespace detail

inline void write_container(std::ostream& os, std::span<const Matrix> blocks) {
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_u32(os, kCheckpointVersion);
  for (const auto& m : blocks) {
    detail::put_u32(os, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(os, static_cast<std::uint32_t>(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()),
             static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
  }
  if (!os) throw IoError("checkpoint write failed");
}

inline std::vector<Matrix> read_container(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic)
    throw IoError("checkpoint: bad magic");
  std::uint32_t version = 0;
  if (!detail::get_u32(is, version) || version != kCheckpointVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  std::vector<Matrix> blocks;
  std::uint32_t rows = 0, cols = 0;
  while (detail::get_u32(is, rows)) {
    if (!detail::get_u32(is, cols)) throw IoError("checkpoint: truncated block header");
    Matrix m(rows, cols);
    if (!is.read(reinterpret_cast<char*>(m.data()),
                 static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size()))))
      throw IoError("checkpoint: truncated payload");
    blocks.push_back(std::move(m));
  }
  return blocks;
}

inline void append_blocks(std::vector<Matrix>& blocks, const MlpNet& net) {
  for (const auto& l : net.layers()) {
    blocks.push_back(l.weight);
    blocks.push_back(Matrix(l.bias));
  }
}

/// Fills `net` from `blocks` starting at `cursor`; advances the cursor.
inline void restore_blocks(std::span<const Matrix> blocks, std::size_t& cursor, MlpNet& net) {
  for (auto& l : net.layers()) {
    if (cursor + 2 > blocks.size()) throw ConfigError("checkpoint: fewer blocks than layers");
    const Matrix& w = blocks[cursor++];
    const Matrix& b = blocks[cursor++];
    if (w.rows() != l.weight.rows() || w.cols() != l.weight.cols() || b.rows() != 1 ||
        b.cols() != l.bias.size())
      throw ConfigError("checkpoint: block shape does not match architecture");
    l.weight = w;
    l.bias = b.row(0);
  }
}

inline void save_checkpoint(const std::filesystem::path& path, std::span<const MlpNet* const> nets) {
  std::vector<Matrix> blocks;
  for (const auto* n : nets) append_blocks(blocks, *n);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_container(os, blocks);
}

inline void load_checkpoint(const std::filesystem::path& path, std::span<MlpNet* const> nets) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  const auto blocks = read_container(is);
  std::size_t cursor = 0;
  for (auto* n : nets) restore_blocks(blocks, cursor, *n);
  if (cursor != blocks.size()) throw ConfigError("checkpoint: trailing blocks in " + path.string());
}

inline std::string to_hex(const unsigned char* data, std::size_t n) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(2 * n, '0');
  for (std::size_t i = 0; i < n; ++i) {
    s[2 * i] = kDigits[data[i] >> 4];
    s[2 * i + 1] = kDigits[data[i] & 0xf];
  }
  return s;
}

inline std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  return to_hex(md.data(), len);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::string sha256_file(const std::filesystem::path& path) {
  return sha256_hex(read_file(path));
}

}  // namespace sdrm
