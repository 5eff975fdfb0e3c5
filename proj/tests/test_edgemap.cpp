#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "test_support.hpp"
#include "threejoin/edgemap.hpp"
#include "threejoin/error.hpp"

using namespace threejoin;
using namespace threejoin::testing;
namespace fs = std::filesystem;

namespace {

Raster vertical_step(int h, int w, int column, std::uint8_t left, std::uint8_t right) {
  Raster r(h, w, 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) r.at(y, x, c) = x < column ? left : right;
    }
  }
  return r;
}

// Columns where the horizontal derivative of the blurred 1-D step profile
// peaks, computed directly from the Gaussian.
std::vector<int> step_peak_columns(int w, int column, double sigma) {
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-i * i / (2 * sigma * sigma));
  std::vector<double> blurred(w, 0.0);
  for (int x = 0; x < w; ++x) {
    for (int i = -radius; i <= radius; ++i) {
      const int xx = std::clamp(x + i, 0, w - 1);
      blurred[x] += k[i + radius] / sum * (xx < column ? 0.0 : 1.0);
    }
  }
  std::vector<double> grad(w, 0.0);
  for (int x = 0; x < w; ++x) {
    grad[x] = std::abs(blurred[std::min(x + 1, w - 1)] - blurred[std::max(x - 1, 0)]);
  }
  const double best = *std::max_element(grad.begin(), grad.end());
  std::vector<int> cols;
  for (int x = 0; x < w; ++x) {
    if (grad[x] >= best - 1e-12) cols.push_back(x);
  }
  return cols;
}

std::size_t edge_pixels(const Raster& r) {
  return static_cast<std::size_t>(std::count(r.pixels.begin(), r.pixels.end(), 0));
}

}  // namespace

TEST_CASE("extractor config validation") {
  CHECK_NOTHROW(ExtractorConfig{}.validate());
  CHECK_THROWS_AS((ExtractorConfig{0.0, 0.1, 0.2, "canny"}.validate()), ValidationError);
  CHECK_THROWS_AS((ExtractorConfig{1.4, 0.3, 0.2, "canny"}.validate()), ValidationError);
  CHECK_THROWS_AS((ExtractorConfig{1.4, 0.1, 1.2, "canny"}.validate()), ValidationError);
  CHECK(CannyExtractor().kernel_size() == 11);
}

TEST_CASE("constant image has no edges") {
  for (std::uint8_t v : {0, 97, 255}) {
    const Raster out = CannyExtractor().extract(Raster(32, 40, 3, v));
    CHECK(out.height == 32);
    CHECK(out.width == 40);
    CHECK(out.channels == 1);
    CHECK(edge_pixels(out) == 0);
  }
}

TEST_CASE("vertical step yields one vertical line at the step") {
  const CannyExtractor canny;
  for (int column : {9, 20, 31}) {
    const Raster out = canny.extract(vertical_step(36, 40, column, 40, 210));
    const auto peaks = step_peak_columns(40, column, canny.config().gaussian_sigma);
    REQUIRE_FALSE(peaks.empty());
    std::set<int> edge_cols;
    for (int y = 0; y < out.height; ++y) {
      int in_row = 0;
      for (int x = 0; x < out.width; ++x) {
        if (out.at(y, x) == 0) {
          edge_cols.insert(x);
          ++in_row;
        }
      }
      CHECK(in_row == 1);
    }
    REQUIRE(edge_cols.size() == 1);
    const int col = *edge_cols.begin();
    const bool near = std::any_of(peaks.begin(), peaks.end(),
                                  [&](int p) { return std::abs(p - col) <= 1; });
    CHECK(near);
    CHECK(std::abs(col - column) <= 1);
  }
}

TEST_CASE("output is invariant to a global intensity shift") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    Raster img(32, 32, 3);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(40 + rng.index(150));
    Raster shifted = img;
    for (auto& p : shifted.pixels) p = static_cast<std::uint8_t>(p + 30);
    const CannyExtractor canny;
    CHECK(canny.extract(img) == canny.extract(shifted));
  }
}

TEST_CASE("extraction preconditions") {
  CHECK_THROWS_AS(CannyExtractor().extract(Raster(8, 40, 1, 0)), ValidationError);
  Sample sketch;
  sketch.modality = Modality::sketch;
  sketch.raster = std::make_shared<Raster>(32, 32, 1, 255);
  CHECK_THROWS_AS(extract_edge_map(sketch, ExtractorConfig{}), ValidationError);

  Sample image;
  image.id = "im";
  Rng rng(2);
  image.raster = std::make_shared<Raster>(random_raster(rng, 33, 45, 3));
  const EdgeMap e = extract_edge_map(image, ExtractorConfig{});
  CHECK(e.source_id == "im");
  CHECK(e.raster.height == 33);
  CHECK(e.raster.width == 45);
}

TEST_CASE("corpus extraction is bijective and cached") {
  const fs::path root = scratch_dir("edges");
  ZeroShotSplit split;
  split.label_space = LabelSpace({"a", "b", "c"}, {true, true, false});
  Rng rng(3);
  for (int i = 0; i < 6; ++i) {
    Sample s;
    s.id = "img" + std::to_string(i);
    s.class_label = i % 2;
    s.path = root / "src" / (s.id + ".png");
    write_png(s.path, random_raster(rng, 32, 32, 3));
    split.train_images.push_back(s);
  }
  const CannyExtractor canny;
  const EdgeCorpus first = extract_corpus(split, canny, root);
  CHECK(first.extracted == 6);
  CHECK(first.reused == 0);
  REQUIRE(first.by_source_id.size() == 6);
  for (const auto& img : split.train_images) {
    REQUIRE(first.by_source_id.contains(img.id));
    CHECK(first.by_source_id.at(img.id) ==
          edge_map_path(root, "canny", split.label_space.name(img.class_label), img.id));
    CHECK(read_png(first.by_source_id.at(img.id)) == canny.extract(img.load()));
  }

  const EdgeCorpus second = extract_corpus(split, canny, root);
  CHECK(second.extracted == 0);
  CHECK(second.reused == 6);

  // A corrupted cache entry is re-extracted.
  const fs::path victim = first.by_source_id.at("img3");
  std::ofstream(victim, std::ios::trunc) << "garbage";
  const EdgeCorpus third = extract_corpus(split, canny, root);
  CHECK(third.extracted == 1);
  CHECK(read_png(victim) == canny.extract(split.train_images[3].load()));

  CHECK(locate_corpus(split, "canny", root).by_source_id.size() == 6);
  fs::remove(victim);
  CHECK_THROWS_AS(locate_corpus(split, "canny", root), IoError);

  fs::remove(split.train_images[1].path);
  fs::remove(first.by_source_id.at("img1"));
  try {
    extract_corpus(split, canny, root);
    FAIL("expected an I/O error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("img1") != std::string::npos);
  }
}
