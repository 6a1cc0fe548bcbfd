#include "pflrm/image.hpp"

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>

namespace pflrm {

std::vector<unsigned char> quantize_rgb8(const Image& img) {
  std::vector<unsigned char> out(img.rgb.size());
  for (std::size_t i = 0; i < img.rgb.size(); ++i) {
    const double v = std::clamp(img.rgb[i], 0.0, 1.0);
    out[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void save_png(const std::string& path, const Image& img) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw Error("save_png: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("save_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("save_png: write failed for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  auto bytes = quantize_rgb8(img);
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, bytes.data() + static_cast<std::size_t>(y) * img.width * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image load_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw Error("load_png: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("load_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("load_png: read failed for " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const png_uint_32 width = png_get_image_width(png, info);
  const png_uint_32 height = png_get_image_height(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  const std::size_t row_bytes = png_get_rowbytes(png, info);
  const std::size_t channels = row_bytes / width;
  std::vector<unsigned char> row(row_bytes);
  Image img(static_cast<int>(width), static_cast<int>(height));
  for (png_uint_32 y = 0; y < height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < width; ++x) {
      double r = row[x * channels + 0] / 255.0;
      double g = row[x * channels + 1] / 255.0;
      double b = row[x * channels + 2] / 255.0;
      if (channels == 4) {
        const double a = row[x * channels + 3] / 255.0;
        r = r * a + (1.0 - a);
        g = g * a + (1.0 - a);
        b = b * a + (1.0 - a);
      }
      img.at(static_cast<int>(y), static_cast<int>(x), 0) = r;
      img.at(static_cast<int>(y), static_cast<int>(x), 1) = g;
      img.at(static_cast<int>(y), static_cast<int>(x), 2) = b;
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace pflrm
