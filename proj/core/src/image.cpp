#include "higfa/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>

#include "higfa/error.hpp"

namespace higfa {

GrayImage::GrayImage(int w, int h, std::uint8_t fill)
    : width(w), height(h), pixels(static_cast<std::size_t>(std::max(0, w * h)), fill) {
  if (w < 0 || h < 0) throw ShapeError("negative image extent");
}

GrayImage::GrayImage(int w, int h, std::vector<std::uint8_t> px) : width(w), height(h), pixels(std::move(px)) {
  if (w < 0 || h < 0 || pixels.size() != static_cast<std::size_t>(w * h)) {
    throw ShapeError("image " + std::to_string(w) + "x" + std::to_string(h) + " needs " +
                     std::to_string(w * h) + " pixels, got " + std::to_string(pixels.size()));
  }
}

std::vector<double> to_unit_range(const GrayImage& img) {
  std::vector<double> out(img.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = img.pixels[i] / 127.5 - 1.0;
  return out;
}

GrayImage from_unit_range(std::span<const double> values, int width, int height) {
  if (values.size() != static_cast<std::size_t>(width * height)) {
    throw ShapeError("from_unit_range: value count does not match image extent");
  }
  GrayImage img(width, height);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = std::clamp((values[i] + 1.0) * 127.5, 0.0, 255.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v));
  }
  return img;
}

std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
  const std::string header =
      "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

GrayImage decode_pgm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> int {
    skip_ws();
    int v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
    }
    if (!any) throw Error("malformed PGM header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw Error("not a binary PGM (P5)");
  pos = 2;
  const int w = read_int();
  const int h = read_int();
  const int maxval = read_int();
  if (maxval != 255) throw Error("only 8-bit PGM (maxval 255) is supported");
  ++pos;  // single whitespace before raster
  const auto n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() < pos + n) throw Error("truncated PGM raster");
  return GrayImage(w, h, std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + n)));
}

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  const auto bytes = encode_pgm(img);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing " + path.string());
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_pgm(bytes);
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const GrayImage& img) {
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw Error("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + static_cast<std::size_t>(y * img.width)));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

GrayImage read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw Error("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng failed reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY || depth != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(path.string() + ": only 8-bit grayscale PNG is supported");
  }
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  GrayImage img(w, h);
  for (int y = 0; y < h; ++y) png_read_row(png, img.pixels.data() + static_cast<std::size_t>(y * w), nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

GrayImage read_image(const std::filesystem::path& path) {
  return path.extension() == ".png" ? read_png(path) : read_pgm(path);
}

void write_image(const std::filesystem::path& path, const GrayImage& img) {
  if (path.extension() == ".png") {
    write_png(path, img);
  } else {
    write_pgm(path, img);
  }
}

std::string fnv1a_hex(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace higfa
