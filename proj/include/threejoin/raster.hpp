#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace threejoin {

// 8-bit interleaved raster, 1 (gray) or 3 (RGB) channels.
struct Raster {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;

  Raster() = default;
  Raster(int h, int w, int c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c),
        pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  std::uint8_t& at(int y, int x, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  bool empty() const { return height == 0 || width == 0; }

  friend bool operator==(const Raster&, const Raster&) = default;
};

// Throws IoError naming the path on any failure.
Raster read_png(const std::filesystem::path& path);

// Writes to a sibling temp file and renames, so readers never observe a
// partial file.
void write_png(const std::filesystem::path& path, const Raster& raster);

// Integer luma with weights summing to 256, so a uniform shift of all RGB
// channels shifts the result by exactly the same amount.
Raster to_grayscale(const Raster& raster);

}  // namespace threejoin
