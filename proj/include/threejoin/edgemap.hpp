#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>

#include "threejoin/dataset.hpp"
#include "threejoin/raster.hpp"

namespace threejoin {

// Black lines (0) on a white (255) background, same size as the source.
struct EdgeMap {
  Raster raster;
  std::string source_id;
};

struct ExtractorConfig {
  double gaussian_sigma = 1.4;
  // Hysteresis thresholds as fractions of the per-image maximum gradient.
  double low_threshold = 0.1;
  double high_threshold = 0.2;
  std::string name = "canny";

  void validate() const;
};

class EdgeExtractor {
 public:
  virtual ~EdgeExtractor() = default;
  virtual const std::string& name() const = 0;
  virtual Raster extract(const Raster& image) const = 0;
};

// grayscale -> Gaussian blur -> Sobel -> non-maximum suppression ->
// hysteresis -> polarity inversion.
class CannyExtractor final : public EdgeExtractor {
 public:
  explicit CannyExtractor(ExtractorConfig config = {});

  const std::string& name() const override { return config_.name; }
  Raster extract(const Raster& image) const override;
  const ExtractorConfig& config() const { return config_; }

  // 2*ceil(3*sigma)+1.
  int kernel_size() const;

 private:
  ExtractorConfig config_;
};

EdgeMap extract_edge_map(const Sample& image, const EdgeExtractor& extractor);
EdgeMap extract_edge_map(const Sample& image, const ExtractorConfig& config);

struct EdgeCorpus {
  std::string extractor_name;
  std::map<std::string, std::filesystem::path> by_source_id;
  std::size_t extracted = 0;
  std::size_t reused = 0;
};

// Cache path: <root>/edges/<extractor-name>/<class>/<source_id>.png
std::filesystem::path edge_map_path(const std::filesystem::path& root,
                                    const std::string& extractor_name,
                                    const std::string& class_name,
                                    const std::string& source_id);

// One edge map per train image. Existing readable outputs are reused;
// unreadable ones are re-extracted with a warning.
EdgeCorpus extract_corpus(const ZeroShotSplit& split, const EdgeExtractor& extractor,
                          const std::filesystem::path& root);

// Resolves cached edge maps without extracting; throws IoError if any train
// image lacks one.
EdgeCorpus locate_corpus(const ZeroShotSplit& split, const std::string& extractor_name,
                         const std::filesystem::path& root);

}  // namespace threejoin
