#pragma once

// Self-describing binary checkpoint container shared by the detector and the
// flow model:
//
//   magic[6] | u32 version | u32 len + JSON metadata | u32 tensor count |
//   per tensor: u32 len + name, u8 dtype (0 = f32, 1 = f64), u32 rank,
//               u32 dims[rank], row-major little-endian data
//
// Serialization is canonical, so load followed by save reproduces the bytes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "uvflow/tensor.hpp"

namespace uvflow::ckpt {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct NamedTensor {
  std::string name;
  DType dtype = DType::f64;
  std::vector<int> shape;
  std::vector<std::uint8_t> bytes;

  static NamedTensor from(std::string name, const Tensor& t);
  static NamedTensor from(std::string name, const TensorF& t);
  Tensor as_double() const;
  TensorF as_float() const;
};

struct File {
  std::string magic;  // exactly 6 bytes
  std::uint32_t version = 1;
  std::string metadata;  // JSON text
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

std::string serialize(const File& f);
File parse(const std::string& bytes, const std::string& expected_magic, std::uint32_t expected_version);

void save(const std::filesystem::path& path, const File& f);
File load(const std::filesystem::path& path, const std::string& expected_magic, std::uint32_t expected_version);

}  // namespace uvflow::ckpt
