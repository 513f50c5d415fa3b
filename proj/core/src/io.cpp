#include "uvflow/io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "uvflow/error.hpp"

namespace uvflow::io {

namespace {

std::uint8_t to_code(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

}  // namespace

void write_png(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw ValidationError("write_png expects H x W x 3, got " + image.shape_str());
  }
  if (!image.all_finite()) throw NumericError("write_png: non-finite pixel in " + path.string());
  const int h = image.dim(0);
  const int w = image.dim(1);
  std::vector<std::uint8_t> buf(image.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_code(image[i]);

  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = PNG_FORMAT_RGB;
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  if (!png_image_write_to_file(&img, tmp.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write " + path.string() + ": " + img.message);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename into " + path.string() + ": " + ec.message());
}

Tensor read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw FormatError("cannot decode " + path.string() + ": " + img.message);
  }
  Tensor out({static_cast<int>(img.height), static_cast<int>(img.width), 3});
  for (std::size_t i = 0; i < buf.size(); ++i) out[i] = buf[i] / 255.0;
  return out;
}

Tensor quantize8(const Tensor& image) {
  Tensor out = image;
  for (double& v : out.storage()) v = to_code(v) / 255.0;
  return out;
}

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(data, size, md, &len, EVP_sha256(), nullptr)) throw Error("sha256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string s;
  s.reserve(2 * len);
  for (unsigned i = 0; i < len; ++i) {
    s.push_back(hex[md[i] >> 4]);
    s.push_back(hex[md[i] & 15]);
  }
  return s;
}

std::string sha256_file(const std::filesystem::path& path) {
  auto bytes = read_bytes(path);
  return sha256_hex(bytes.data(), bytes.size());
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename into " + path.string() + ": " + ec.message());
}

}  // namespace uvflow::io
