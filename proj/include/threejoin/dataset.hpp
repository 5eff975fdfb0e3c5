#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "threejoin/raster.hpp"

namespace threejoin {

enum class Modality { image, sketch, edge };

std::string_view to_string(Modality modality);
// Accepts only "image" and "sketch"; edge samples are never ingested.
Modality parse_ingest_modality(std::string_view token);

// One image or sketch record. The raster is either on disk (`path`) or held
// in memory (`raster`); in-memory wins when both are set.
struct Sample {
  std::string id;
  Modality modality = Modality::image;
  int class_label = 0;
  std::filesystem::path path;
  std::shared_ptr<const Raster> raster;

  Raster load() const;
};

class LabelSpace {
 public:
  LabelSpace() = default;
  // Throws ValidationError on duplicate names or size mismatch.
  LabelSpace(std::vector<std::string> class_names, std::vector<bool> seen_mask);

  std::size_t size() const { return class_names_.size(); }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::vector<bool>& seen_mask() const { return seen_mask_; }
  const std::string& name(int label) const;

  bool is_valid(int label) const {
    return label >= 0 && static_cast<std::size_t>(label) < size();
  }
  bool is_seen(int label) const { return is_valid(label) && seen_mask_[label]; }

  std::vector<int> seen_classes() const;
  std::vector<int> unseen_classes() const;
  std::size_t num_seen() const;

  // Dense index of a seen class in [0, num_seen()), used by heads and the
  // center bank. Throws ValidationError for unseen or invalid labels.
  int seen_rank(int label) const;
  std::optional<int> find(std::string_view name) const;

  friend bool operator==(const LabelSpace&, const LabelSpace&) = default;

 private:
  std::vector<std::string> class_names_;
  std::vector<bool> seen_mask_;
  std::vector<int> seen_rank_;
};

struct ZeroShotSplit {
  std::vector<Sample> train_images;
  std::vector<Sample> train_sketches;
  std::vector<Sample> test_images;
  std::vector<Sample> test_sketches;
  LabelSpace label_space;

  // Throws ValidationError if any split invariant is violated.
  void validate() const;
};

struct BatchSpec {
  int batch_size = 24;
  int classes_per_batch = 6;
  std::uint64_t seed = 0;

  void validate() const;
};

struct BatchPair {
  Sample image;
  Sample sketch;
};

// Manifest: first line {"seen": [...], "unseen": [...]}, then one
// {"id", "modality", "class", "path"} object per line. Relative paths
// resolve against the manifest's directory.
ZeroShotSplit load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const ZeroShotSplit& split);

struct SyntheticCorpusConfig {
  int num_classes = 8;
  int images_per_class = 40;
  int sketches_per_class = 40;
  int image_size = 64;
  std::uint64_t seed = 7;
  // seen:unseen ratio is 3:1 by default.
  double unseen_fraction = 0.25;
};

// Renders the corpus under `root/<split>/<modality>/<class>/<id>.png` and
// writes `root/manifest.jsonl`. Images are RGB, sketches grayscale.
ZeroShotSplit generate_synthetic_corpus(const SyntheticCorpusConfig& config,
                                        const std::filesystem::path& root);

// Class-balanced draw: classes_per_batch seen classes, batch/classes images
// and sketches each, sampled independently. Pure in (split, spec, step).
std::vector<BatchPair> sample_batch(const ZeroShotSplit& split,
                                    const BatchSpec& spec, std::int64_t step);

}  // namespace threejoin
