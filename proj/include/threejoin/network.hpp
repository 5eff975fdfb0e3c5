#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "threejoin/dataset.hpp"
#include "threejoin/matrix.hpp"
#include "threejoin/raster.hpp"
#include "threejoin/rng.hpp"

namespace threejoin {

struct Param {
  std::string name;
  std::vector<double> value;
  std::vector<double> grad;

  Param() = default;
  Param(std::string n, std::size_t size)
      : name(std::move(n)), value(size, 0.0), grad(size, 0.0) {}

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

// N x C x H x W tensor of inputs in [0, 1].
struct ImageBatch {
  std::size_t count = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  std::size_t sample_size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  const double* sample(std::size_t i) const { return data.data() + i * sample_size(); }
};

// Grayscale rasters are replicated to `channels`. Throws ShapeError on an
// empty batch or mismatched dimensions.
ImageBatch make_batch(std::span<const Raster> rasters, int channels = 3);

// 3x3 convolution, padding 1.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_channels, int out_channels, int stride);

  void init(Rng& rng, double gain);

  int out_size(int in) const { return (in - 1) / stride_ + 1; }

  // Returns im2col columns of `x` for reuse in backward.
  std::vector<double> im2col(const double* x, int h, int w) const;
  void forward(const std::vector<double>& cols, int h, int w, double* out) const;
  // Accumulates parameter gradients; writes input gradient to `dx` when it
  // is non-null.
  void backward(const std::vector<double>& cols, int h, int w, const double* dout,
                double* dx);

  Param weight;
  Param bias;

 private:
  int in_ = 0;
  int out_ = 0;
  int stride_ = 1;
};

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in_features, int out_features);

  void init(Rng& rng, double gain = 1.0);
  int in_features() const { return in_; }
  int out_features() const { return out_; }

  Matrix forward(const Matrix& x) const;
  // Accumulates parameter gradients and returns dL/dx.
  Matrix backward(const Matrix& x, const Matrix& dy);

  Param weight;  // out x in
  Param bias;

 private:
  int in_ = 0;
  int out_ = 0;
};

struct BackboneConfig {
  int in_channels = 3;
  std::vector<int> widths = {8, 16, 32};

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

// Residual CNN: per stage a stride-2 conv + ReLU followed by one residual
// block relu(a + conv(relu(conv(a)))), then global average pooling.
class Backbone {
 public:
  struct StageTape {
    int in_h, in_w, out_h, out_w;
    std::vector<double> cols_down, z_down, cols_r1, z_r1, cols_r2, sum;
  };
  struct Tape {
    std::vector<std::vector<StageTape>> samples;
  };

  Backbone() = default;
  Backbone(const std::string& name, const BackboneConfig& config);

  void init(Rng& rng);
  const BackboneConfig& config() const { return config_; }
  int feature_dim() const { return config_.widths.back(); }

  // batch x feature_dim. Records activations into `tape` when non-null.
  Matrix forward(const ImageBatch& batch, Tape* tape) const;
  void backward(const Tape& tape, const Matrix& dfeatures);

  std::vector<Param*> params();
  std::vector<const Param*> params() const;

 private:
  struct Stage {
    Conv2d down, res1, res2;
  };
  BackboneConfig config_;
  std::vector<Stage> stages_;
};

struct NetworkConfig {
  BackboneConfig backbone;
  int retrieval_dim = 64;
  int num_seen = 0;
  int teacher_classes = 0;
  std::uint64_t seed = 0;
};

// theta_x (image) and theta_s (shared by sketch and edge streams) plus the
// three unshared retrieval heads.
struct EncoderStack {
  Backbone image_backbone;
  Backbone sketch_edge_backbone;
  Linear image_head;
  Linear edge_head;
  Linear sketch_head;
  int retrieval_dim = 0;
};

// Frozen classifier providing pseudo-label distributions. Only const access
// is exposed once constructed.
class TeacherModel {
 public:
  TeacherModel() = default;
  TeacherModel(Backbone backbone, Linear classifier);

  int num_classes() const { return classifier_.out_features(); }
  const Backbone& backbone() const { return backbone_; }
  const Linear& classifier() const { return classifier_; }

  Matrix logits(const ImageBatch& batch) const;
  std::uint64_t checksum() const;

  std::map<std::string, std::vector<double>> export_tensors() const;
  static TeacherModel import_tensors(const BackboneConfig& config, int num_classes,
                                     const std::map<std::string, std::vector<double>>& tensors);

 private:
  Backbone backbone_;
  Linear classifier_;
};

struct StreamOutput {
  Matrix backbone_features;
  Matrix retrieval;
  Backbone::Tape tape;
};

struct ImageForward : StreamOutput {
  Matrix class_logits;    // batch x num_seen
  Matrix student_logits;  // batch x teacher classes
  Matrix teacher_logits;  // empty when no teacher was given
};

struct SketchForward : StreamOutput {
  Matrix class_logits;
};

using EdgeForward = StreamOutput;

class ThreeStreamNetwork {
 public:
  ThreeStreamNetwork() = default;
  explicit ThreeStreamNetwork(const NetworkConfig& config);

  const NetworkConfig& config() const { return config_; }
  EncoderStack& encoders() { return encoders_; }
  const EncoderStack& encoders() const { return encoders_; }
  Linear& classifier() { return classifier_; }
  const Linear& classifier() const { return classifier_; }
  Linear& kd_head() { return kd_head_; }
  const Linear& kd_head() const { return kd_head_; }

  // Copies the teacher's backbone into both theta_x and theta_s.
  void init_backbones_from(const TeacherModel& teacher);

  ImageForward forward_image(const ImageBatch& batch, const TeacherModel* teacher,
                             bool record) const;
  SketchForward forward_sketch(const ImageBatch& batch, bool record) const;
  EdgeForward forward_edge(const ImageBatch& batch, bool record) const;

  void backward_image(const ImageForward& out, const Matrix& d_retrieval,
                      const Matrix& d_class_logits, const Matrix& d_student_logits);
  void backward_sketch(const SketchForward& out, const Matrix& d_retrieval,
                       const Matrix& d_class_logits);
  void backward_edge(const EdgeForward& out, const Matrix& d_retrieval);

  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  void zero_grad();

  std::map<std::string, std::vector<double>> export_tensors() const;
  void import_tensors(const std::map<std::string, std::vector<double>>& tensors);

 private:
  NetworkConfig config_;
  EncoderStack encoders_;
  Linear classifier_;
  Linear kd_head_;
};

class Adam {
 public:
  struct Options {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  Adam() = default;
  explicit Adam(Options options) : options_(options) {}

  void step(const std::vector<Param*>& params);
  std::int64_t steps() const { return steps_; }

  void export_state(std::map<std::string, std::vector<double>>& tensors,
                    nlohmann::json& meta) const;
  void import_state(const std::map<std::string, std::vector<double>>& tensors,
                    const nlohmann::json& meta);

 private:
  Options options_;
  std::int64_t steps_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

struct TeacherTrainConfig {
  int epochs = 15;
  int batch_size = 24;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  BackboneConfig backbone;
};

// Pretrains a classifier on seen-class images. Throws ValidationError if any
// sample belongs to an unseen class.
TeacherModel make_teacher(std::span<const Sample> pretrain, const LabelSpace& labels,
                          const TeacherTrainConfig& config);

// Versioned binary container: magic "3JCK", u16 version, JSON metadata,
// then named f64 tensors.
struct Checkpoint {
  nlohmann::json meta;
  std::map<std::string, std::vector<double>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json to_json(const LabelSpace& labels);
LabelSpace label_space_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BackboneConfig& config);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);

}  // namespace threejoin
