#include "threejoin/raster.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <string>
#include <system_error>

#include "threejoin/error.hpp"
#include "threejoin/io_util.hpp"

namespace threejoin {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Raster read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open image '" + path.string() + "'");

  png_byte signature[8];
  if (std::fread(signature, 1, 8, file.get()) != 8 ||
      png_sig_cmp(signature, 0, 8) != 0) {
    throw IoError("not a PNG file: '" + path.string() + "'");
  }

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialization failed for '" + path.string() + "'");
  }

  Raster raster;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG file: '" + path.string() + "'");
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const auto color_type = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  raster.width = static_cast<int>(png_get_image_width(png, info));
  raster.height = static_cast<int>(png_get_image_height(png, info));
  raster.channels = static_cast<int>(png_get_channels(png, info));
  raster.pixels.resize(static_cast<std::size_t>(raster.width) * raster.height *
                       raster.channels);
  rows.resize(static_cast<std::size_t>(raster.height));
  for (int y = 0; y < raster.height; ++y) {
    rows[y] = raster.pixels.data() +
              static_cast<std::size_t>(y) * raster.width * raster.channels;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  if (raster.channels != 1 && raster.channels != 3) {
    throw IoError("unsupported channel count in '" + path.string() + "'");
  }
  return raster;
}

void write_png(const std::filesystem::path& path, const Raster& raster) {
  if (raster.empty() || (raster.channels != 1 && raster.channels != 3)) {
    throw IoError("refusing to write empty or non gray/RGB raster to '" +
                  path.string() + "'");
  }
  ensure_parent_directory(path);
  const std::filesystem::path tmp = temp_sibling(path);
  {
    FilePtr file(std::fopen(tmp.c_str(), "wb"));
    if (!file) throw IoError("cannot write '" + path.string() + "'");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                              nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
      png_destroy_write_struct(&png, &info);
      throw IoError("libpng initialization failed for '" + path.string() + "'");
    }
    std::vector<png_bytep> rows(static_cast<std::size_t>(raster.height));
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw IoError("PNG encoding failed for '" + path.string() + "'");
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(raster.width),
                 static_cast<png_uint_32>(raster.height), 8,
                 raster.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    auto* base = const_cast<std::uint8_t*>(raster.pixels.data());
    for (int y = 0; y < raster.height; ++y) {
      rows[y] = base + static_cast<std::size_t>(y) * raster.width * raster.channels;
    }
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  commit_temp(tmp, path);
}

Raster to_grayscale(const Raster& raster) {
  if (raster.channels == 1) return raster;
  Raster gray(raster.height, raster.width, 1);
  for (int y = 0; y < raster.height; ++y) {
    for (int x = 0; x < raster.width; ++x) {
      const unsigned r = raster.at(y, x, 0);
      const unsigned g = raster.at(y, x, 1);
      const unsigned b = raster.at(y, x, 2);
      gray.at(y, x) = static_cast<std::uint8_t>((77 * r + 150 * g + 29 * b + 128) >> 8);
    }
  }
  return gray;
}

}  // namespace threejoin
