#include "threejoin/edgemap.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "threejoin/error.hpp"
#include "threejoin/log.hpp"

namespace threejoin {

void ExtractorConfig::validate() const {
  if (!(gaussian_sigma > 0.0)) throw ValidationError("gaussian sigma must be > 0");
  const auto in_unit = [](double v) { return v > 0.0 && v < 1.0; };
  if (!in_unit(low_threshold) || !in_unit(high_threshold)) {
    throw ValidationError("hysteresis thresholds must lie in (0, 1)");
  }
  if (!(low_threshold < high_threshold)) {
    throw ValidationError("low threshold must be below high threshold");
  }
  if (name.empty()) throw ValidationError("extractor name must be non-empty");
}

CannyExtractor::CannyExtractor(ExtractorConfig config) : config_(std::move(config)) {
  config_.validate();
}

int CannyExtractor::kernel_size() const {
  return 2 * static_cast<int>(std::ceil(3.0 * config_.gaussian_sigma)) + 1;
}

namespace {

using Plane = std::vector<double>;

// Separable blur with clamped borders.
Plane gaussian_blur(const Plane& src, int h, int w, double sigma, int radius) {
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    norm += kernel[i + radius];
  }
  for (auto& k : kernel) k /= norm;

  Plane tmp(src.size()), out(src.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        acc += kernel[i + radius] * src[y * w + std::clamp(x + i, 0, w - 1)];
      }
      tmp[y * w + x] = acc;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        acc += kernel[i + radius] * tmp[std::clamp(y + i, 0, h - 1) * w + x];
      }
      out[y * w + x] = acc;
    }
  }
  return out;
}

}  // namespace

Raster CannyExtractor::extract(const Raster& image) const {
  const int size = kernel_size();
  if (image.empty() || image.height < size || image.width < size) {
    throw ValidationError("image " + std::to_string(image.height) + "x" +
                          std::to_string(image.width) +
                          " is smaller than the blur kernel (" +
                          std::to_string(size) + ")");
  }
  const int h = image.height, w = image.width;
  const Raster gray = to_grayscale(image);

  // Subtracting the minimum makes the pipeline exactly invariant to a
  // global additive intensity shift.
  const int min_v = *std::min_element(gray.pixels.begin(), gray.pixels.end());
  Plane src(gray.pixels.size());
  for (std::size_t i = 0; i < src.size(); ++i) src[i] = gray.pixels[i] - min_v;

  const Plane blurred = gaussian_blur(src, h, w, config_.gaussian_sigma, size / 2);
  const auto px = [&](int y, int x) {
    return blurred[std::clamp(y, 0, h - 1) * w + std::clamp(x, 0, w - 1)];
  };

  Plane mag(src.size(), 0.0);
  std::vector<std::uint8_t> dir(src.size(), 0);
  double max_mag = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1));
      const double gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1));
      const double m = std::hypot(gx, gy);
      mag[y * w + x] = m;
      max_mag = std::max(max_mag, m);
      // Quantize orientation to 0, 45, 90, 135 degrees.
      double angle = std::atan2(gy, gx) * 180.0 / 3.14159265358979323846;
      if (angle < 0) angle += 180.0;
      std::uint8_t d = 0;
      if (angle >= 22.5 && angle < 67.5) d = 1;
      else if (angle >= 67.5 && angle < 112.5) d = 2;
      else if (angle >= 112.5 && angle < 157.5) d = 3;
      dir[y * w + x] = d;
    }
  }

  Raster out(h, w, 1, 255);
  // Rounding noise on flat images must not produce edges.
  if (max_mag <= 1e-9) return out;

  const auto mag_at = [&](int y, int x) {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
    return mag[y * w + x];
  };
  Plane nms(src.size(), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double m = mag[y * w + x];
      if (m <= 0.0) continue;
      double a = 0, b = 0;
      switch (dir[y * w + x]) {
        case 0: a = mag_at(y, x - 1); b = mag_at(y, x + 1); break;
        case 1: a = mag_at(y - 1, x - 1); b = mag_at(y + 1, x + 1); break;
        case 2: a = mag_at(y - 1, x); b = mag_at(y + 1, x); break;
        default: a = mag_at(y - 1, x + 1); b = mag_at(y + 1, x - 1); break;
      }
      // Ties resolved toward the earlier neighbor so plateaus stay thin.
      if (m > a && m >= b) nms[y * w + x] = m;
    }
  }

  const double high = config_.high_threshold * max_mag;
  const double low = config_.low_threshold * max_mag;
  std::vector<std::uint8_t> state(src.size(), 0);  // 0 none, 1 weak, 2 strong
  std::vector<int> stack;
  for (int i = 0; i < h * w; ++i) {
    if (nms[i] >= high) {
      state[i] = 2;
      stack.push_back(i);
    } else if (nms[i] >= low) {
      state[i] = 1;
    }
  }
  while (!stack.empty()) {
    const int i = stack.back();
    stack.pop_back();
    const int y = i / w, x = i % w;
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int ny = y + dy, nx = x + dx;
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        const int j = ny * w + nx;
        if (state[j] == 1) {
          state[j] = 2;
          stack.push_back(j);
        }
      }
    }
  }
  for (int i = 0; i < h * w; ++i) {
    if (state[i] == 2) out.pixels[i] = 0;
  }
  return out;
}

EdgeMap extract_edge_map(const Sample& image, const EdgeExtractor& extractor) {
  if (image.modality != Modality::image) {
    throw ValidationError("edge maps are extracted from natural images only; '" +
                          image.id + "' is a " + std::string(to_string(image.modality)));
  }
  return {extractor.extract(image.load()), image.id};
}

EdgeMap extract_edge_map(const Sample& image, const ExtractorConfig& config) {
  return extract_edge_map(image, CannyExtractor(config));
}

std::filesystem::path edge_map_path(const std::filesystem::path& root,
                                    const std::string& extractor_name,
                                    const std::string& class_name,
                                    const std::string& source_id) {
  return root / "edges" / extractor_name / class_name / (source_id + ".png");
}

EdgeCorpus extract_corpus(const ZeroShotSplit& split, const EdgeExtractor& extractor,
                          const std::filesystem::path& root) {
  EdgeCorpus corpus;
  corpus.extractor_name = extractor.name();
  for (const auto& img : split.train_images) {
    const auto path = edge_map_path(root, extractor.name(),
                                    split.label_space.name(img.class_label), img.id);
    if (std::filesystem::exists(path)) {
      try {
        const Raster cached = read_png(path);
        if (cached.channels == 1) {
          corpus.by_source_id[img.id] = path;
          ++corpus.reused;
          continue;
        }
      } catch (const IoError&) {
      }
      log::warn("re-extracting unreadable edge map '" + path.string() + "'");
    }
    Raster source;
    try {
      source = img.load();
    } catch (const IoError& e) {
      throw IoError("cannot read train image '" + img.id + "': " + e.what());
    }
    write_png(path, extractor.extract(source));
    corpus.by_source_id[img.id] = path;
    ++corpus.extracted;
  }
  return corpus;
}

EdgeCorpus locate_corpus(const ZeroShotSplit& split, const std::string& extractor_name,
                         const std::filesystem::path& root) {
  EdgeCorpus corpus;
  corpus.extractor_name = extractor_name;
  for (const auto& img : split.train_images) {
    const auto path = edge_map_path(root, extractor_name,
                                    split.label_space.name(img.class_label), img.id);
    if (!std::filesystem::exists(path)) {
      throw IoError("missing edge map for train image '" + img.id + "' at '" +
                    path.string() + "'; run extract-edges first");
    }
    corpus.by_source_id[img.id] = path;
    ++corpus.reused;
  }
  return corpus;
}

}  // namespace threejoin
