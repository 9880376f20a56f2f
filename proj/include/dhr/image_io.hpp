#ifndef DHR_IMAGE_IO_HPP
#define DHR_IMAGE_IO_HPP

// PNG persistence. Images are stored as lossless 16-bit RGB, masks and
// label rasters as 8-bit single channel.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dhr/error.hpp"
#include "dhr/tensor.hpp"

namespace dhr {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return f;
}

// Errors surface as IoError; libpng's default handlers would also print to stderr.
inline void png_quiet_error(png_structp png, png_const_charp) { png_longjmp(png, 1); }
inline void png_quiet_warning(png_structp, png_const_charp) {}

struct RawPng {
  std::size_t width = 0, height = 0, channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;  // row-major interleaved
};

inline void write_raw_png(const std::filesystem::path& path, const RawPng& raw) {
  auto f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_quiet_error, png_quiet_warning);
  if (!png) throw IoError("png: cannot create write struct");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    throw IoError("png: failed writing '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  const int color = raw.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
  png_set_IHDR(png, info, static_cast<png_uint_32>(raw.width), static_cast<png_uint_32>(raw.height), raw.bit_depth,
               color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t bytes_per_sample = raw.bit_depth == 16 ? 2 : 1;
  std::vector<png_byte> row(raw.width * raw.channels * bytes_per_sample);
  for (std::size_t y = 0; y < raw.height; ++y) {
    for (std::size_t i = 0; i < raw.width * raw.channels; ++i) {
      const std::uint16_t v = raw.samples[y * raw.width * raw.channels + i];
      if (bytes_per_sample == 2) {
        row[2 * i] = static_cast<png_byte>(v >> 8);
        row[2 * i + 1] = static_cast<png_byte>(v & 0xff);
      } else {
        row[i] = static_cast<png_byte>(v);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline RawPng read_raw_png(const std::filesystem::path& path) {
  auto f = open_file(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IoError("'" + path.string() + "' is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_quiet_error, png_quiet_warning);
  if (!png) throw IoError("png: cannot create read struct");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    throw IoError("png: corrupt file '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  RawPng raw;
  raw.width = png_get_image_width(png, info);
  raw.height = png_get_image_height(png, info);
  raw.channels = png_get_channels(png, info);
  depth = png_get_bit_depth(png, info);
  raw.bit_depth = depth;
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<png_byte> buf(rowbytes * raw.height);
  std::vector<png_bytep> rows(raw.height);
  for (std::size_t y = 0; y < raw.height; ++y) rows[y] = buf.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  const std::size_t n = raw.width * raw.height * raw.channels;
  raw.samples.resize(n);
  for (std::size_t y = 0; y < raw.height; ++y)
    for (std::size_t i = 0; i < raw.width * raw.channels; ++i) {
      const png_byte* r = rows[y];
      raw.samples[y * raw.width * raw.channels + i] =
          depth == 16 ? static_cast<std::uint16_t>((r[2 * i] << 8) | r[2 * i + 1]) : r[i];
    }
  return raw;
}

}  // namespace detail

inline std::uint16_t quantize16(float v) {
  const double c = std::clamp(static_cast<double>(v), -1.0, 1.0);
  return static_cast<std::uint16_t>(std::lround((c + 1.0) * 0.5 * 65535.0));
}

inline float dequantize16(std::uint16_t q) { return static_cast<float>(q / 65535.0 * 2.0 - 1.0); }

// Clamps to [-1, 1] and writes 16-bit RGB.
inline void write_image(const std::filesystem::path& path, const Image& img) {
  detail::RawPng raw;
  raw.width = img.width();
  raw.height = img.height();
  raw.channels = 3;
  raw.bit_depth = 16;
  raw.samples.resize(raw.width * raw.height * 3);
  for (std::size_t y = 0; y < raw.height; ++y)
    for (std::size_t x = 0; x < raw.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) raw.samples[(y * raw.width + x) * 3 + c] = quantize16(img(c, y, x));
  detail::write_raw_png(path, raw);
}

// Accepts 8/16-bit gray, RGB, RGBA or palette PNGs; returns values in [-1, 1].
inline Image read_image(const std::filesystem::path& path) {
  auto raw = detail::read_raw_png(path);
  Image img(raw.height, raw.width);
  const double maxv = raw.bit_depth == 16 ? 65535.0 : 255.0;
  for (std::size_t y = 0; y < raw.height; ++y)
    for (std::size_t x = 0; x < raw.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src = raw.channels == 1 ? 0 : c;
        const auto q = raw.samples[(y * raw.width + x) * raw.channels + src];
        img(c, y, x) = raw.bit_depth == 16 ? dequantize16(q) : static_cast<float>(q / maxv * 2.0 - 1.0);
      }
  return img;
}

// Same quantization a write/read cycle applies.
inline Image quantized(const Image& img) {
  Image out(img.height(), img.width());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = dequantize16(quantize16(img[i]));
  return out;
}

inline void write_gray8(const std::filesystem::path& path, const Grid<std::uint8_t>& g) {
  detail::RawPng raw;
  raw.width = g.width();
  raw.height = g.height();
  raw.channels = 1;
  raw.bit_depth = 8;
  raw.samples.assign(g.values().begin(), g.values().end());
  detail::write_raw_png(path, raw);
}

inline Grid<std::uint8_t> read_gray8(const std::filesystem::path& path) {
  auto raw = detail::read_raw_png(path);
  if (raw.bit_depth != 8) throw IoError("'" + path.string() + "' must be an 8-bit raster");
  Grid<std::uint8_t> g(raw.height, raw.width);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<std::uint8_t>(raw.samples[i * raw.channels]);
  return g;
}

// 255 = in-domain, 0 = out-of-domain.
inline void write_mask(const std::filesystem::path& path, const DomainMask& m) {
  Grid<std::uint8_t> g(m.height(), m.width());
  for (std::size_t i = 0; i < m.size(); ++i) g[i] = m[i] ? 255 : 0;
  write_gray8(path, g);
}

inline DomainMask read_mask(const std::filesystem::path& path) {
  auto g = read_gray8(path);
  DomainMask m(g.height(), g.width());
  for (std::size_t i = 0; i < g.size(); ++i) m.set(i, g[i] >= 128);
  return m;
}

}  // namespace dhr

#endif  // DHR_IMAGE_IO_HPP
