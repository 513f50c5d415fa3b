#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "uvflow/tensor.hpp"

namespace uvflow::io {

/// Writes an H x W x 3 image in [0,1] as 8-bit RGB PNG (values are clamped
/// and rounded to the nearest code).
void write_png(const std::filesystem::path& path, const Tensor& image);
/// Reads an 8-bit PNG into H x W x 3 values in [0,1]. Gray and alpha inputs
/// are converted to RGB.
Tensor read_png(const std::filesystem::path& path);

/// Values an image takes after a PNG round trip.
Tensor quantize8(const Tensor& image);

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_file(const std::filesystem::path& path);

std::string read_text(const std::filesystem::path& path);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
/// Writes to a sibling temp file and renames it into place.
void write_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace uvflow::io
