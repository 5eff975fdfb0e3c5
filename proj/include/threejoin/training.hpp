#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "threejoin/dataset.hpp"
#include "threejoin/edgemap.hpp"
#include "threejoin/losses.hpp"
#include "threejoin/network.hpp"
#include "threejoin/retrieval.hpp"

namespace threejoin {

// Enabled loss terms. Classification is mandatory in every variant.
struct Ablation {
  bool cls = true;
  bool kd = true;
  bool align = true;
  bool center = true;
  bool triplet = true;

  static Ablation all() { return {}; }
  // Comma-separated subset of {cls, kd, align, center, triplet, domain, all};
  // "domain" expands to center+triplet and cls is always implied.
  static Ablation parse(std::string_view terms);
  std::string to_string() const;
  bool needs_edges() const { return align || center || triplet; }

  friend bool operator==(const Ablation&, const Ablation&) = default;
};

struct TrainConfig {
  LossWeights weights = LossWeights::sketchy();
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  int batch_size = 24;
  int classes_per_batch = 6;
  int epochs = 10;
  int retrieval_dim = 64;
  std::uint64_t seed = 0;
  Ablation ablation;
  BackboneConfig backbone;
  int teacher_epochs = 15;
  double teacher_learning_rate = 1e-3;
  std::string extractor = "canny";
  // Start both student backbones from the teacher's pretrained backbone.
  bool init_from_teacher = true;

  void validate() const;
};

// Flat "key = value" text; '#' starts a comment. Unknown keys are errors.
TrainConfig parse_train_config(std::string_view text, TrainConfig base = {});
TrainConfig load_train_config(const std::filesystem::path& path);
std::string to_config_text(const TrainConfig& config);

struct TrainState {
  ThreeStreamNetwork network;
  std::shared_ptr<const TeacherModel> teacher;
  std::uint64_t teacher_checksum = 0;
  CenterBank bank;
  Adam optimizer;
  LabelSpace label_space;
  int epoch = 0;           // completed epochs
  std::int64_t step = 0;   // completed optimizer steps
};

TrainState init_train_state(const LabelSpace& labels, const TrainConfig& config,
                            std::shared_ptr<const TeacherModel> teacher);

// One mini-batch: images with their edge maps (row-aligned) and sketches.
// Labels are dense seen-class indices.
struct StepBatch {
  std::vector<Raster> images;
  std::vector<Raster> edges;
  std::vector<Raster> sketches;
  std::vector<int> image_labels;
  std::vector<int> sketch_labels;
};

// Caches decoded rasters and resolves the edge map of each image by id.
class RasterStore {
 public:
  RasterStore(const ZeroShotSplit& split, const EdgeCorpus* edges);

  const Raster& get(const Sample& sample);
  const Raster& edge_of(const Sample& image);
  StepBatch assemble(const std::vector<BatchPair>& pairs, bool with_edges);

 private:
  const ZeroShotSplit& split_;
  const EdgeCorpus* edges_;
  std::map<std::string, Raster> cache_;
  std::map<std::string, Raster> edge_cache_;
};

// Forward all streams, refresh centers from edge features, evaluate the
// enabled terms, then take one optimizer step. The teacher is untouched.
LossReport train_step(TrainState& state, const StepBatch& batch, const TrainConfig& config);

std::int64_t steps_per_epoch(const ZeroShotSplit& split, const TrainConfig& config);

struct TrainOptions {
  std::shared_ptr<const TeacherModel> teacher;   // trained on demand when null
  std::optional<std::filesystem::path> resume_from;
  std::optional<int> stop_after_epoch;           // simulate an interruption
  bool write_plots = true;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics_log;
  std::vector<LossReport> reports;
  std::uint64_t teacher_checksum_before = 0;
  std::uint64_t teacher_checksum_after = 0;
};

// Writes <out>/metrics.jsonl, <out>/checkpoint.ckpt (latest) and
// <out>/checkpoints/epoch_<e>.ckpt at every epoch end.
TrainResult train(const ZeroShotSplit& split, const EdgeCorpus& edges, const TrainConfig& config,
                  const std::filesystem::path& out_dir, const TrainOptions& options = {});

std::shared_ptr<const TeacherModel> train_teacher(const ZeroShotSplit& split,
                                                  const TrainConfig& config);

void save_train_state(const std::filesystem::path& path, const TrainState& state,
                      const TrainConfig& config);
TrainState load_train_state(const std::filesystem::path& path);

nlohmann::json metrics_line(std::int64_t step, const LossReport& report);

// Retrieval features of a sample list through the stream for its modality.
EmbeddingSet encode_samples(const ThreeStreamNetwork& network, const std::vector<Sample>& samples,
                            Modality modality, EmbeddingRole role);

struct EncodedSplit {
  EmbeddingSet train_images, train_sketches, test_images, test_sketches;

  // Seen-class image and sketch features stacked, used to fit ITQ.
  Matrix itq_training_features() const;
};

EncodedSplit encode_split(const ThreeStreamNetwork& network, const ZeroShotSplit& split);

struct AblationVariant {
  int index;
  std::string name;
  Ablation terms;
};

// The seven loss-term combinations, baseline first and the full model last.
const std::vector<AblationVariant>& ablation_variants();

struct AblationRow {
  AblationVariant variant;
  EvalReport cosine;
  double final_total_loss = 0.0;
};

// Trains and evaluates every variant from identical seeds and a shared
// teacher; writes ablation.csv, ablation.txt and ablation.json into out_dir.
std::vector<AblationRow> ablate(const ZeroShotSplit& split, const EdgeCorpus& edges,
                                const TrainConfig& base, const std::filesystem::path& out_dir,
                                std::shared_ptr<const TeacherModel> teacher = nullptr);

}  // namespace threejoin
