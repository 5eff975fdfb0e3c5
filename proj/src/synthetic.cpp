#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>
#include <iomanip>

#include "threejoin/dataset.hpp"
#include "threejoin/error.hpp"
#include "threejoin/rng.hpp"

namespace threejoin {
namespace {

constexpr double kPi = std::numbers::pi;

struct Point {
  double x;
  double y;
};
using Polygon = std::vector<Point>;

// Shape outline in unit coordinates (radius ~1, centered at origin).
struct ShapeFamily {
  std::vector<Polygon> parts;
};

Polygon regular_polygon(int sides, double radius, double phase, Point offset = {0, 0},
                        double aspect = 1.0) {
  Polygon p;
  for (int i = 0; i < sides; ++i) {
    const double a = phase + 2.0 * kPi * i / sides;
    p.push_back({offset.x + radius * std::cos(a), offset.y + aspect * radius * std::sin(a)});
  }
  return p;
}

Polygon star(int points, double inner, double phase) {
  Polygon p;
  for (int i = 0; i < 2 * points; ++i) {
    const double r = (i % 2 == 0) ? 1.0 : inner;
    const double a = phase + kPi * i / points;
    p.push_back({r * std::cos(a), r * std::sin(a)});
  }
  return p;
}

// Four family kinds cycle over class indices; the variant index selects
// parameters within a family so that every class is a distinct shape.
ShapeFamily make_family(int class_index) {
  const int kind = class_index % 4;
  const int variant = class_index / 4;
  ShapeFamily f;
  switch (kind) {
    case 0: {
      static constexpr std::array<int, 5> sides{3, 4, 6, 5, 8};
      f.parts.push_back(regular_polygon(sides[variant % sides.size()], 1.0, -kPi / 2));
      break;
    }
    case 1: {
      static constexpr std::array<double, 3> aspect{0.45, 0.75, 0.3};
      f.parts.push_back(regular_polygon(40, 1.0, 0.0, {0, 0}, aspect[variant % aspect.size()]));
      break;
    }
    case 2: {
      static constexpr std::array<int, 3> points{5, 8, 4};
      static constexpr std::array<double, 3> inner{0.42, 0.62, 0.3};
      f.parts.push_back(star(points[variant % 3], inner[variant % 3], -kPi / 2));
      break;
    }
    default: {
      switch (variant % 3) {
        case 0:  // square with a disc on top
          f.parts.push_back(regular_polygon(4, 0.75, kPi / 4, {0, 0.3}));
          f.parts.push_back(regular_polygon(32, 0.45, 0.0, {0, -0.55}));
          break;
        case 1:  // hourglass of two triangles
          f.parts.push_back(regular_polygon(3, 0.6, kPi / 2, {0, -0.5}));
          f.parts.push_back(regular_polygon(3, 0.6, -kPi / 2, {0, 0.5}));
          break;
        default:  // cross
          f.parts.push_back({{-1, -0.3}, {1, -0.3}, {1, 0.3}, {-1, 0.3}});
          f.parts.push_back({{-0.3, -1}, {0.3, -1}, {0.3, 1}, {-0.3, 1}});
          break;
      }
      break;
    }
  }
  return f;
}

struct Placement {
  double cx, cy, scale, angle;
};

Placement random_placement(Rng& rng, int size) {
  const double s = size;
  return {s * 0.5 + rng.uniform(-0.08, 0.08) * s, s * 0.5 + rng.uniform(-0.08, 0.08) * s,
          s * rng.uniform(0.28, 0.38), rng.uniform(-0.3, 0.3)};
}

Polygon place(const Polygon& unit, const Placement& pl) {
  const double c = std::cos(pl.angle), s = std::sin(pl.angle);
  Polygon out;
  out.reserve(unit.size());
  for (const auto& p : unit) {
    out.push_back({pl.cx + pl.scale * (c * p.x - s * p.y),
                   pl.cy + pl.scale * (s * p.x + c * p.y)});
  }
  return out;
}

bool inside(const Polygon& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) {
      in = !in;
    }
  }
  return in;
}

double segment_distance(Point p, Point a, Point b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

Raster render_image(const ShapeFamily& family, int size, Rng& rng) {
  // Light cluttered background (smooth gradient plus faint bars) behind a
  // dark textured object whose hue varies per sample.
  Raster img(size, size, 3);
  std::array<double, 3> base{};
  for (auto& b : base) b = rng.uniform(0.6, 0.9);
  const double hue = rng.uniform();
  std::array<double, 3> fill{};
  for (int ch = 0; ch < 3; ++ch) {
    fill[ch] = 0.1 + 0.25 * (0.5 + 0.5 * std::cos(2.0 * kPi * (hue + ch / 3.0)));
  }
  const double gx = rng.uniform(-0.2, 0.2), gy = rng.uniform(-0.2, 0.2);
  struct Bar {
    Point a, b;
    double width;
    std::array<double, 3> color;
  };
  std::vector<Bar> bars(static_cast<std::size_t>(2 + rng.index(3)));
  for (auto& bar : bars) {
    bar.a = {rng.uniform(0, size), rng.uniform(0, size)};
    bar.b = {rng.uniform(0, size), rng.uniform(0, size)};
    bar.width = rng.uniform(1.0, 2.5);
    for (auto& c : bar.color) c = rng.uniform(0.4, 0.9);
  }
  const Placement pl = random_placement(rng, size);
  std::vector<Polygon> parts;
  for (const auto& p : family.parts) parts.push_back(place(p, pl));
  const double brightness = rng.uniform(0.85, 1.1);
  const double stripe_angle = rng.uniform(0.0, kPi);
  const double ca = std::cos(stripe_angle), sa = std::sin(stripe_angle);
  const double period = rng.uniform(4.0, 10.0) * size / 64.0;

  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      std::array<double, 3> c{};
      for (int ch = 0; ch < 3; ++ch) {
        c[ch] = base[ch] + gx * (px / size - 0.5) + gy * (py / size - 0.5);
      }
      for (const auto& bar : bars) {
        const double d = segment_distance({px, py}, bar.a, bar.b);
        if (d < bar.width) {
          const double w = 0.35 * (1.0 - d / bar.width);
          for (int ch = 0; ch < 3; ++ch) c[ch] = (1 - w) * c[ch] + w * bar.color[ch];
        }
      }
      const bool in = std::any_of(parts.begin(), parts.end(),
                                  [&](const Polygon& p) { return inside(p, px, py); });
      if (in) {
        const double phase = (ca * px + sa * py) / period;
        const double stripe = 1.0 + 0.25 * std::cos(2.0 * kPi * phase);
        for (int ch = 0; ch < 3; ++ch) c[ch] = fill[ch] * stripe * brightness;
      }
      for (int ch = 0; ch < 3; ++ch) {
        img.at(y, x, ch) = to_byte(c[ch] + 0.02 * rng.normal());
      }
    }
  }
  return img;
}

// Subdivides every edge and displaces the points with a smooth random walk,
// imitating freehand strokes.
std::vector<std::pair<Point, Point>> jittered_strokes(const std::vector<Polygon>& parts,
                                                      double amplitude, Rng& rng) {
  std::vector<std::pair<Point, Point>> segments;
  for (const auto& poly : parts) {
    Polygon corners = poly;
    for (auto& p : corners) {
      p.x += amplitude * rng.normal();
      p.y += amplitude * rng.normal();
    }
    for (std::size_t i = 0; i < corners.size(); ++i) {
      const Point a = corners[i];
      const Point b = corners[(i + 1) % corners.size()];
      const double len = std::hypot(b.x - a.x, b.y - a.y);
      const int pieces = std::max(1, static_cast<int>(len / 3.0));
      const double nx = len > 0 ? -(b.y - a.y) / len : 0.0;
      const double ny = len > 0 ? (b.x - a.x) / len : 0.0;
      double offset = 0.0;
      Point prev = a;
      for (int k = 1; k <= pieces; ++k) {
        const double t = static_cast<double>(k) / pieces;
        offset = (k == pieces) ? 0.0 : 0.7 * offset + 0.35 * amplitude * rng.normal();
        const Point cur{a.x + t * (b.x - a.x) + offset * nx,
                        a.y + t * (b.y - a.y) + offset * ny};
        segments.emplace_back(prev, cur);
        prev = cur;
      }
    }
  }
  return segments;
}

Raster render_sketch(const ShapeFamily& family, int size, Rng& rng) {
  const Placement pl = random_placement(rng, size);
  std::vector<Polygon> parts;
  for (const auto& p : family.parts) parts.push_back(place(p, pl));
  const auto segments = jittered_strokes(parts, 0.02 * size, rng);
  const double half_width = rng.uniform(0.3, 0.6) * size / 64.0;

  Raster img(size, size, 1, 255);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double d = 1e9;
      for (const auto& [a, b] : segments) {
        d = std::min(d, segment_distance({x + 0.5, y + 0.5}, a, b));
      }
      // 1px linear falloff outside the stroke core.
      const double ink = std::clamp(1.0 - (d - half_width), 0.0, 1.0);
      img.at(y, x) = to_byte(1.0 - ink);
    }
  }
  return img;
}

std::string sample_id(std::string_view prefix, int cls, int k) {
  std::ostringstream ss;
  ss << prefix << "_c" << std::setw(3) << std::setfill('0') << cls << "_"
     << std::setw(4) << std::setfill('0') << k;
  return ss.str();
}

}  // namespace

ZeroShotSplit generate_synthetic_corpus(const SyntheticCorpusConfig& config,
                                        const std::filesystem::path& root) {
  if (config.num_classes < 4) {
    throw ValidationError("synthetic corpus needs at least 4 classes (>=2 seen "
                          "and >=1 unseen); got " + std::to_string(config.num_classes));
  }
  if (config.image_size < 32) {
    throw ValidationError("synthetic image size must be >= 32");
  }
  if (config.images_per_class < 1 || config.sketches_per_class < 1) {
    throw ValidationError("synthetic corpus needs >=1 image and sketch per class");
  }
  if (!(config.unseen_fraction > 0.0 && config.unseen_fraction < 1.0)) {
    throw ValidationError("unseen fraction must be in (0, 1)");
  }

  const int n = config.num_classes;
  const int num_unseen = std::clamp(
      static_cast<int>(std::lround(n * config.unseen_fraction)), 1, n - 2);

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng split_rng(mix_seed(config.seed, 0x5eed));
  split_rng.shuffle(std::span(order));
  std::vector<bool> seen(static_cast<std::size_t>(n), true);
  for (int i = 0; i < num_unseen; ++i) seen[order[i]] = false;

  std::vector<std::string> names;
  for (int c = 0; c < n; ++c) {
    std::ostringstream ss;
    ss << "shape" << std::setw(2) << std::setfill('0') << c;
    names.push_back(ss.str());
  }

  ZeroShotSplit split;
  split.label_space = LabelSpace(names, seen);

  for (int c = 0; c < n; ++c) {
    const ShapeFamily family = make_family(c);
    const bool is_seen = seen[c];
    const std::string split_dir = is_seen ? "train" : "test";
    for (int k = 0; k < config.images_per_class; ++k) {
      Rng rng(mix_seed(mix_seed(config.seed, 1000 + c), k));
      Sample s;
      s.id = sample_id("img", c, k);
      s.modality = Modality::image;
      s.class_label = c;
      s.path = root / split_dir / "image" / names[c] / (s.id + ".png");
      write_png(s.path, render_image(family, config.image_size, rng));
      (is_seen ? split.train_images : split.test_images).push_back(std::move(s));
    }
    for (int k = 0; k < config.sketches_per_class; ++k) {
      Rng rng(mix_seed(mix_seed(config.seed, 2000 + c), k));
      Sample s;
      s.id = sample_id("skt", c, k);
      s.modality = Modality::sketch;
      s.class_label = c;
      s.path = root / split_dir / "sketch" / names[c] / (s.id + ".png");
      write_png(s.path, render_sketch(family, config.image_size, rng));
      (is_seen ? split.train_sketches : split.test_sketches).push_back(std::move(s));
    }
  }
  split.validate();
  write_manifest(root / "manifest.jsonl", split);
  // Reloading puts the label space in manifest order (seen classes first).
  return load_manifest(root / "manifest.jsonl");
}

}  // namespace threejoin
