#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace threejoin {

struct PlotSeries {
  std::vector<double> y;
  std::array<std::uint8_t, 3> color{31, 119, 180};
};

// Static line chart as an RGB PNG: axes frame, horizontal grid lines, one
// polyline per series over x = 0..n-1. Axis ranges are fitted to the data.
void write_line_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series,
                     int width = 480, int height = 320);

}  // namespace threejoin
