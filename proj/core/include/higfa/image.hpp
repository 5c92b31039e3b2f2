#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace higfa {

/// 8-bit grayscale raster, row-major.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, std::uint8_t fill = 0);
  GrayImage(int w, int h, std::vector<std::uint8_t> px);

  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y * width + x)]; }
  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y * width + x)]; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

/// Pixel values mapped from [0, 255] to [-1, 1].
std::vector<double> to_unit_range(const GrayImage& img);
/// Inverse of to_unit_range with clamping and rounding.
GrayImage from_unit_range(std::span<const double> values, int width, int height);

// Binary PGM (P5, maxval 255).
std::vector<std::uint8_t> encode_pgm(const GrayImage& img);
GrayImage decode_pgm(std::span<const std::uint8_t> bytes);
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_pgm(const std::filesystem::path& path);

// 8-bit grayscale PNG.
void write_png(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_png(const std::filesystem::path& path);

/// Dispatch on extension (.pgm or .png).
GrayImage read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const GrayImage& img);

/// 64-bit FNV-1a of a byte range, as 16 lowercase hex digits.
std::string fnv1a_hex(std::span<const std::uint8_t> bytes);

}  // namespace higfa
