#pragma once

// Depth maps, grayscale images and their PNG encodings.

#include "vortx/common.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

namespace vortx {

/// Metric depth (camera-frame z, meters); 0 marks an invalid pixel.
struct DepthMap {
  int width = 0, height = 0;
  std::vector<float> data;

  DepthMap() = default;
  DepthMap(int w, int h, float fill = 0.f) : width(w), height(h), data(std::size_t(w) * h, fill) {}

  float& at(int x, int y) { return data[std::size_t(y) * width + x]; }
  float at(int x, int y) const { return data[std::size_t(y) * width + x]; }
  bool in_bounds(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
};

/// Single-channel float image with values in [0, 1].
struct Image {
  int width = 0, height = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, float fill = 0.f) : width(w), height(h), data(std::size_t(w) * h, fill) {}

  float& at(int x, int y) { return data[std::size_t(y) * width + x]; }
  float at(int x, int y) const { return data[std::size_t(y) * width + x]; }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void write_gray_png(const std::string& path, int w, int h, int bit_depth,
                           const std::vector<std::uint16_t>& px) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw Error("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng write failed for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, w, h, bit_depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const int bpp = bit_depth / 8;
  std::vector<png_byte> row(std::size_t(w) * bpp);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::uint16_t v = px[std::size_t(y) * w + x];
      if (bpp == 2) {
        row[2 * x] = png_byte(v >> 8);  // PNG stores 16-bit samples big-endian
        row[2 * x + 1] = png_byte(v & 0xff);
      } else {
        row[x] = png_byte(v);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline std::vector<std::uint16_t> read_gray_png(const std::string& path, int& w, int& h,
                                                int& bit_depth) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw Error("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng read failed for " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  w = int(png_get_image_width(png, info));
  h = int(png_get_image_height(png, info));
  bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color != PNG_COLOR_TYPE_GRAY || (bit_depth != 8 && bit_depth != 16)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(path + ": expected 8- or 16-bit grayscale PNG");
  }
  const int bpp = bit_depth / 8;
  std::vector<png_byte> row(std::size_t(w) * bpp);
  std::vector<std::uint16_t> px(std::size_t(w) * h);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      px[std::size_t(y) * w + x] =
          bpp == 2 ? std::uint16_t((row[2 * x] << 8) | row[2 * x + 1]) : std::uint16_t(row[x]);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return px;
}

}  // namespace detail

/// 16-bit PNG, millimeters, 0 = invalid. Depths beyond 65.535 m are dropped.
inline void write_depth_png(const std::string& path, const DepthMap& d) {
  std::vector<std::uint16_t> px(d.data.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double mm = std::round(double(d.data[i]) * 1000.0);
    px[i] = (d.data[i] > 0 && mm <= 65535.0) ? std::uint16_t(mm) : 0;
  }
  detail::write_gray_png(path, d.width, d.height, 16, px);
}

inline DepthMap read_depth_png(const std::string& path) {
  int w, h, bits;
  const auto px = detail::read_gray_png(path, w, h, bits);
  if (bits != 16) throw Error(path + ": depth PNG must be 16-bit");
  DepthMap d(w, h);
  for (std::size_t i = 0; i < px.size(); ++i) d.data[i] = float(px[i]) / 1000.f;
  return d;
}

inline void write_image_png(const std::string& path, const Image& img) {
  std::vector<std::uint16_t> px(img.data.size());
  for (std::size_t i = 0; i < px.size(); ++i)
    px[i] = std::uint16_t(std::lround(std::clamp(img.data[i], 0.f, 1.f) * 255.f));
  detail::write_gray_png(path, img.width, img.height, 8, px);
}

inline Image read_image_png(const std::string& path) {
  int w, h, bits;
  const auto px = detail::read_gray_png(path, w, h, bits);
  const float scale = bits == 16 ? 65535.f : 255.f;
  Image img(w, h);
  for (std::size_t i = 0; i < px.size(); ++i) img.data[i] = float(px[i]) / scale;
  return img;
}

}  // namespace vortx
