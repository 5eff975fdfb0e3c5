#include "threejoin/plot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "threejoin/raster.hpp"

namespace threejoin {
namespace {

void put(Raster& img, int x, int y, const std::array<std::uint8_t, 3>& c) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[ch];
}

void line(Raster& img, double x0, double y0, double x1, double y1,
          const std::array<std::uint8_t, 3>& c) {
  const int steps = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
    const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
    put(img, x, y, c);
    put(img, x, y + 1, c);
  }
}

}  // namespace

void write_line_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series,
                     int width, int height) {
  Raster img(height, width, 3, 255);
  const int left = 40, right = width - 12, top = 12, bottom = height - 28;

  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  std::size_t n = 0;
  for (const auto& s : series) {
    for (double v : s.y) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    n = std::max(n, s.y.size());
  }
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 1.0;
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }

  const std::array<std::uint8_t, 3> grid{225, 225, 225}, axis{40, 40, 40};
  for (int g = 0; g <= 4; ++g) {
    const double y = top + (bottom - top) * g / 4.0;
    line(img, left, y, right, y, grid);
  }
  line(img, left, top, left, bottom, axis);
  line(img, left, bottom, right, bottom, axis);

  const auto px = [&](std::size_t i) {
    return n <= 1 ? left : left + (right - left) * static_cast<double>(i) / (n - 1);
  };
  const auto py = [&](double v) { return bottom - (bottom - top) * (v - lo) / (hi - lo); };
  for (const auto& s : series) {
    for (std::size_t i = 1; i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i - 1]) || !std::isfinite(s.y[i])) continue;
      line(img, px(i - 1), py(s.y[i - 1]), px(i), py(s.y[i]), s.color);
    }
  }
  write_png(path, img);
}

}  // namespace threejoin
