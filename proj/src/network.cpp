#include "threejoin/network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "threejoin/error.hpp"
#include "threejoin/io_util.hpp"
#include "threejoin/log.hpp"
#include "threejoin/simd/kernels.hpp"

namespace threejoin {

ImageBatch make_batch(std::span<const Raster> rasters, int channels) {
  if (rasters.empty()) throw ShapeError("empty raster batch");
  if (channels != 1 && channels != 3) throw ShapeError("batch channels must be 1 or 3");
  ImageBatch batch;
  batch.count = rasters.size();
  batch.channels = channels;
  batch.height = rasters.front().height;
  batch.width = rasters.front().width;
  if (batch.height <= 0 || batch.width <= 0) throw ShapeError("empty raster in batch");
  batch.data.resize(batch.count * batch.sample_size());
  const std::size_t plane = static_cast<std::size_t>(batch.height) * batch.width;
  for (std::size_t n = 0; n < rasters.size(); ++n) {
    const Raster& r = rasters[n];
    if (r.height != batch.height || r.width != batch.width) {
      throw ShapeError("raster " + std::to_string(n) + " is " + std::to_string(r.height) +
                       "x" + std::to_string(r.width) + ", batch expects " +
                       std::to_string(batch.height) + "x" + std::to_string(batch.width));
    }
    if (r.channels != 1 && r.channels != channels) {
      throw ShapeError("raster " + std::to_string(n) + " has " +
                       std::to_string(r.channels) + " channels");
    }
    double* dst = batch.data.data() + n * batch.sample_size();
    for (int c = 0; c < channels; ++c) {
      const int src_c = r.channels == 1 ? 0 : c;
      for (std::size_t i = 0; i < plane; ++i) {
        dst[c * plane + i] = r.pixels[i * r.channels + src_c] / 255.0;
      }
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(const std::string& name, int in_channels, int out_channels, int stride)
    : weight(name + "/weight", static_cast<std::size_t>(out_channels) * in_channels * 9),
      bias(name + "/bias", static_cast<std::size_t>(out_channels)),
      in_(in_channels), out_(out_channels), stride_(stride) {}

void Conv2d::init(Rng& rng, double gain) {
  const double std_dev = gain * std::sqrt(2.0 / (in_ * 9.0));
  for (auto& w : weight.value) w = std_dev * rng.normal();
  std::fill(bias.value.begin(), bias.value.end(), 0.0);
}

std::vector<double> Conv2d::im2col(const double* x, int h, int w) const {
  const int ho = out_size(h), wo = out_size(w);
  const std::size_t p_count = static_cast<std::size_t>(ho) * wo;
  std::vector<double> cols(static_cast<std::size_t>(in_) * 9 * p_count, 0.0);
  for (int c = 0; c < in_; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* row = cols.data() + ((c * 3 + ky) * 3 + kx) * p_count;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride_ + ky - 1;
          if (iy < 0 || iy >= h) continue;
          const double* src = x + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride_ + kx - 1;
            if (ix >= 0 && ix < w) row[oy * wo + ox] = src[ix];
          }
        }
      }
    }
  }
  return cols;
}

void Conv2d::forward(const std::vector<double>& cols, int h, int w, double* out) const {
  const std::size_t p_count = static_cast<std::size_t>(out_size(h)) * out_size(w);
  const std::size_t k_count = static_cast<std::size_t>(in_) * 9;
  for (int o = 0; o < out_; ++o) {
    double* dst = out + o * p_count;
    std::fill(dst, dst + p_count, bias.value[o]);
    const double* wrow = weight.value.data() + o * k_count;
    for (std::size_t k = 0; k < k_count; ++k) {
      if (wrow[k] != 0.0) simd::axpy(wrow[k], cols.data() + k * p_count, dst, p_count);
    }
  }
}

void Conv2d::backward(const std::vector<double>& cols, int h, int w, const double* dout,
                      double* dx) {
  const int ho = out_size(h), wo = out_size(w);
  const std::size_t p_count = static_cast<std::size_t>(ho) * wo;
  const std::size_t k_count = static_cast<std::size_t>(in_) * 9;
  for (int o = 0; o < out_; ++o) {
    const double* g = dout + o * p_count;
    bias.grad[o] += std::accumulate(g, g + p_count, 0.0);
    double* gw = weight.grad.data() + o * k_count;
    for (std::size_t k = 0; k < k_count; ++k) {
      gw[k] += simd::dot(g, cols.data() + k * p_count, p_count);
    }
  }
  if (dx == nullptr) return;

  std::vector<double> dcols(k_count * p_count, 0.0);
  for (int o = 0; o < out_; ++o) {
    const double* g = dout + o * p_count;
    const double* wrow = weight.value.data() + o * k_count;
    for (std::size_t k = 0; k < k_count; ++k) {
      simd::axpy(wrow[k], g, dcols.data() + k * p_count, p_count);
    }
  }
  std::fill(dx, dx + static_cast<std::size_t>(in_) * h * w, 0.0);
  for (int c = 0; c < in_; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* row = dcols.data() + ((c * 3 + ky) * 3 + kx) * p_count;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride_ + ky - 1;
          if (iy < 0 || iy >= h) continue;
          double* dst = dx + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride_ + kx - 1;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(const std::string& name, int in_features, int out_features)
    : weight(name + "/weight", static_cast<std::size_t>(in_features) * out_features),
      bias(name + "/bias", static_cast<std::size_t>(out_features)),
      in_(in_features), out_(out_features) {}

void Linear::init(Rng& rng, double gain) {
  const double std_dev = gain * std::sqrt(1.0 / in_);
  for (auto& w : weight.value) w = std_dev * rng.normal();
  std::fill(bias.value.begin(), bias.value.end(), 0.0);
}

Matrix Linear::forward(const Matrix& x) const {
  if (x.cols != static_cast<std::size_t>(in_)) {
    throw ShapeError(weight.name + ": expected " + std::to_string(in_) +
                     " input features, got " + std::to_string(x.cols));
  }
  Matrix y(x.rows, static_cast<std::size_t>(out_));
  for (std::size_t n = 0; n < x.rows; ++n) {
    const double* xr = x.row(n).data();
    for (int o = 0; o < out_; ++o) {
      y(n, o) = bias.value[o] +
                simd::dot(weight.value.data() + static_cast<std::size_t>(o) * in_, xr, in_);
    }
  }
  return y;
}

Matrix Linear::backward(const Matrix& x, const Matrix& dy) {
  if (dy.rows != x.rows || dy.cols != static_cast<std::size_t>(out_)) {
    throw ShapeError(weight.name + ": gradient shape mismatch");
  }
  Matrix dx(x.rows, static_cast<std::size_t>(in_));
  for (std::size_t n = 0; n < x.rows; ++n) {
    for (int o = 0; o < out_; ++o) {
      const double g = dy(n, o);
      if (g == 0.0) continue;
      bias.grad[o] += g;
      simd::axpy(g, x.row(n).data(), weight.grad.data() + static_cast<std::size_t>(o) * in_,
                 in_);
      simd::axpy(g, weight.value.data() + static_cast<std::size_t>(o) * in_,
                 dx.row(n).data(), in_);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Backbone

Backbone::Backbone(const std::string& name, const BackboneConfig& config)
    : config_(config) {
  if (config.widths.empty()) throw ValidationError("backbone needs at least one stage");
  int in = config.in_channels;
  for (std::size_t s = 0; s < config.widths.size(); ++s) {
    const int w = config.widths[s];
    const std::string prefix = name + "/stage" + std::to_string(s);
    stages_.push_back({Conv2d(prefix + "/down", in, w, 2), Conv2d(prefix + "/res1", w, w, 1),
                       Conv2d(prefix + "/res2", w, w, 1)});
    in = w;
  }
}

void Backbone::init(Rng& rng) {
  for (auto& st : stages_) {
    st.down.init(rng, 1.0);
    st.res1.init(rng, 1.0);
    // Small residual branch keeps activations bounded without normalization.
    st.res2.init(rng, 0.25);
  }
}

namespace {

inline double relu(double v) { return v > 0.0 ? v : 0.0; }

}  // namespace

Matrix Backbone::forward(const ImageBatch& batch, Tape* tape) const {
  if (batch.count == 0) throw ShapeError("empty batch");
  if (batch.channels != config_.in_channels) {
    throw ShapeError("backbone expects " + std::to_string(config_.in_channels) +
                     " channels, got " + std::to_string(batch.channels));
  }
  Matrix features(batch.count, static_cast<std::size_t>(feature_dim()));
  if (tape) tape->samples.assign(batch.count, {});

  for (std::size_t n = 0; n < batch.count; ++n) {
    std::vector<double> x(batch.sample(n), batch.sample(n) + batch.sample_size());
    for (auto& v : x) v -= 0.5;
    int h = batch.height, w = batch.width;
    for (const auto& st : stages_) {
      StageTape t;
      t.in_h = h;
      t.in_w = w;
      t.out_h = st.down.out_size(h);
      t.out_w = st.down.out_size(w);
      const std::size_t channels = st.res1.bias.value.size();
      const std::size_t size = channels * t.out_h * t.out_w;

      t.cols_down = st.down.im2col(x.data(), h, w);
      t.z_down.resize(size);
      st.down.forward(t.cols_down, h, w, t.z_down.data());
      std::vector<double> a(size);
      std::transform(t.z_down.begin(), t.z_down.end(), a.begin(), relu);

      t.cols_r1 = st.res1.im2col(a.data(), t.out_h, t.out_w);
      t.z_r1.resize(size);
      st.res1.forward(t.cols_r1, t.out_h, t.out_w, t.z_r1.data());
      std::vector<double> b(size);
      std::transform(t.z_r1.begin(), t.z_r1.end(), b.begin(), relu);

      t.cols_r2 = st.res2.im2col(b.data(), t.out_h, t.out_w);
      t.sum.resize(size);
      st.res2.forward(t.cols_r2, t.out_h, t.out_w, t.sum.data());
      for (std::size_t i = 0; i < size; ++i) t.sum[i] += a[i];

      x.resize(size);
      std::transform(t.sum.begin(), t.sum.end(), x.begin(), relu);
      h = t.out_h;
      w = t.out_w;
      if (tape) {
        tape->samples[n].push_back(std::move(t));
      }
    }
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int c = 0; c < feature_dim(); ++c) {
      const double* p = x.data() + c * plane;
      features(n, c) = std::accumulate(p, p + plane, 0.0) / static_cast<double>(plane);
    }
  }
  return features;
}

void Backbone::backward(const Tape& tape, const Matrix& dfeatures) {
  if (tape.samples.size() != dfeatures.rows) {
    throw ShapeError("backbone backward: tape/gradient batch mismatch");
  }
  for (std::size_t n = 0; n < dfeatures.rows; ++n) {
    const auto& stapes = tape.samples[n];
    if (stapes.size() != stages_.size()) {
      throw StateError("backbone backward called without a recorded forward pass");
    }
    const auto& last = stapes.back();
    const std::size_t plane = static_cast<std::size_t>(last.out_h) * last.out_w;
    std::vector<double> dout(static_cast<std::size_t>(feature_dim()) * plane);
    for (int c = 0; c < feature_dim(); ++c) {
      std::fill_n(dout.begin() + c * plane, plane, dfeatures(n, c) / static_cast<double>(plane));
    }
    for (std::size_t s = stages_.size(); s-- > 0;) {
      auto& st = stages_[s];
      const auto& t = stapes[s];
      const std::size_t size = dout.size();
      std::vector<double> ds(size);
      for (std::size_t i = 0; i < size; ++i) ds[i] = t.sum[i] > 0.0 ? dout[i] : 0.0;

      std::vector<double> db(size);
      st.res2.backward(t.cols_r2, t.out_h, t.out_w, ds.data(), db.data());
      for (std::size_t i = 0; i < size; ++i) {
        if (t.z_r1[i] <= 0.0) db[i] = 0.0;
      }
      std::vector<double> da(size);
      st.res1.backward(t.cols_r1, t.out_h, t.out_w, db.data(), da.data());
      for (std::size_t i = 0; i < size; ++i) {
        da[i] = t.z_down[i] > 0.0 ? da[i] + ds[i] : 0.0;
      }
      if (s == 0) {
        st.down.backward(t.cols_down, t.in_h, t.in_w, da.data(), nullptr);
      } else {
        const std::size_t in_size = static_cast<std::size_t>(config_.widths[s - 1]) *
                                    t.in_h * t.in_w;
        std::vector<double> dx(in_size);
        st.down.backward(t.cols_down, t.in_h, t.in_w, da.data(), dx.data());
        dout = std::move(dx);
      }
    }
  }
}

std::vector<Param*> Backbone::params() {
  std::vector<Param*> out;
  for (auto& st : stages_) {
    for (Conv2d* c : {&st.down, &st.res1, &st.res2}) {
      out.push_back(&c->weight);
      out.push_back(&c->bias);
    }
  }
  return out;
}

std::vector<const Param*> Backbone::params() const {
  std::vector<const Param*> out;
  for (const auto& st : stages_) {
    for (const Conv2d* c : {&st.down, &st.res1, &st.res2}) {
      out.push_back(&c->weight);
      out.push_back(&c->bias);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Teacher

TeacherModel::TeacherModel(Backbone backbone, Linear classifier)
    : backbone_(std::move(backbone)), classifier_(std::move(classifier)) {
  if (classifier_.out_features() < 2) {
    throw ValidationError("teacher must classify at least 2 classes");
  }
  for (Param* p : backbone_.params()) p->grad.clear();
  classifier_.weight.grad.clear();
  classifier_.bias.grad.clear();
}

Matrix TeacherModel::logits(const ImageBatch& batch) const {
  return classifier_.forward(backbone_.forward(batch, nullptr));
}

std::uint64_t TeacherModel::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto all = backbone_.params();
  all.push_back(&classifier_.weight);
  all.push_back(&classifier_.bias);
  for (const Param* p : all) {
    h = fnv1a(std::as_bytes(std::span(p->value)), h);
  }
  return h;
}

std::map<std::string, std::vector<double>> TeacherModel::export_tensors() const {
  std::map<std::string, std::vector<double>> out;
  for (const Param* p : backbone_.params()) out[p->name] = p->value;
  out[classifier_.weight.name] = classifier_.weight.value;
  out[classifier_.bias.name] = classifier_.bias.value;
  return out;
}

namespace {

void import_into(const std::vector<Param*>& params,
                 const std::map<std::string, std::vector<double>>& tensors) {
  for (Param* p : params) {
    const auto it = tensors.find(p->name);
    if (it == tensors.end()) throw ValidationError("checkpoint lacks tensor '" + p->name + "'");
    if (it->second.size() != p->value.size()) {
      throw ShapeError("checkpoint tensor '" + p->name + "' has wrong size");
    }
    p->value = it->second;
    p->grad.assign(p->value.size(), 0.0);
  }
}

}  // namespace

TeacherModel TeacherModel::import_tensors(
    const BackboneConfig& config, int num_classes,
    const std::map<std::string, std::vector<double>>& tensors) {
  Backbone backbone("teacher/backbone", config);
  Linear classifier("teacher/classifier", backbone.feature_dim(), num_classes);
  auto params = backbone.params();
  params.push_back(&classifier.weight);
  params.push_back(&classifier.bias);
  import_into(params, tensors);
  return TeacherModel(std::move(backbone), std::move(classifier));
}

// ---------------------------------------------------------------------------
// ThreeStreamNetwork

ThreeStreamNetwork::ThreeStreamNetwork(const NetworkConfig& config) : config_(config) {
  if (config.retrieval_dim <= 0) throw ValidationError("retrieval_dim must be positive");
  if (config.num_seen < 2) throw ValidationError("need at least 2 seen classes");
  auto& e = encoders_;
  e.retrieval_dim = config.retrieval_dim;
  e.image_backbone = Backbone("image_backbone", config.backbone);
  e.sketch_edge_backbone = Backbone("sketch_edge_backbone", config.backbone);
  const int fdim = e.image_backbone.feature_dim();
  e.image_head = Linear("image_head", fdim, config.retrieval_dim);
  e.edge_head = Linear("edge_head", fdim, config.retrieval_dim);
  e.sketch_head = Linear("sketch_head", fdim, config.retrieval_dim);
  classifier_ = Linear("classifier", config.retrieval_dim, config.num_seen);
  if (config.teacher_classes >= 2) {
    kd_head_ = Linear("kd_head", fdim, config.teacher_classes);
  }

  Rng rng(mix_seed(config.seed, 0xB0B));
  e.image_backbone.init(rng);
  // Both backbones start from the same weights.
  auto src = e.image_backbone.params();
  auto dst = e.sketch_edge_backbone.params();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
  e.image_head.init(rng);
  e.edge_head.init(rng);
  e.sketch_head.init(rng);
  classifier_.init(rng);
  if (config.teacher_classes >= 2) kd_head_.init(rng);
}

void ThreeStreamNetwork::init_backbones_from(const TeacherModel& teacher) {
  if (!(teacher.backbone().config() == config_.backbone)) {
    throw ShapeError("teacher backbone architecture differs from student");
  }
  const auto src = teacher.backbone().params();
  for (Backbone* b : {&encoders_.image_backbone, &encoders_.sketch_edge_backbone}) {
    auto dst = b->params();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
  }
}

ImageForward ThreeStreamNetwork::forward_image(const ImageBatch& batch,
                                               const TeacherModel* teacher,
                                               bool record) const {
  ImageForward out;
  out.backbone_features =
      encoders_.image_backbone.forward(batch, record ? &out.tape : nullptr);
  out.retrieval = encoders_.image_head.forward(out.backbone_features);
  out.class_logits = classifier_.forward(out.retrieval);
  if (kd_head_.out_features() > 0) {
    out.student_logits = kd_head_.forward(out.backbone_features);
  }
  if (teacher != nullptr) out.teacher_logits = teacher->logits(batch);
  return out;
}

SketchForward ThreeStreamNetwork::forward_sketch(const ImageBatch& batch, bool record) const {
  SketchForward out;
  out.backbone_features =
      encoders_.sketch_edge_backbone.forward(batch, record ? &out.tape : nullptr);
  out.retrieval = encoders_.sketch_head.forward(out.backbone_features);
  out.class_logits = classifier_.forward(out.retrieval);
  return out;
}

EdgeForward ThreeStreamNetwork::forward_edge(const ImageBatch& batch, bool record) const {
  EdgeForward out;
  out.backbone_features =
      encoders_.sketch_edge_backbone.forward(batch, record ? &out.tape : nullptr);
  out.retrieval = encoders_.edge_head.forward(out.backbone_features);
  return out;
}

void ThreeStreamNetwork::backward_image(const ImageForward& out, const Matrix& d_retrieval,
                                        const Matrix& d_class_logits,
                                        const Matrix& d_student_logits) {
  Matrix dr = d_retrieval;
  if (!d_class_logits.empty()) {
    const Matrix extra = classifier_.backward(out.retrieval, d_class_logits);
    for (std::size_t i = 0; i < dr.data.size(); ++i) dr.data[i] += extra.data[i];
  }
  Matrix df = encoders_.image_head.backward(out.backbone_features, dr);
  if (!d_student_logits.empty()) {
    const Matrix extra = kd_head_.backward(out.backbone_features, d_student_logits);
    for (std::size_t i = 0; i < df.data.size(); ++i) df.data[i] += extra.data[i];
  }
  encoders_.image_backbone.backward(out.tape, df);
}

void ThreeStreamNetwork::backward_sketch(const SketchForward& out, const Matrix& d_retrieval,
                                         const Matrix& d_class_logits) {
  Matrix dr = d_retrieval;
  if (!d_class_logits.empty()) {
    const Matrix extra = classifier_.backward(out.retrieval, d_class_logits);
    for (std::size_t i = 0; i < dr.data.size(); ++i) dr.data[i] += extra.data[i];
  }
  const Matrix df = encoders_.sketch_head.backward(out.backbone_features, dr);
  encoders_.sketch_edge_backbone.backward(out.tape, df);
}

void ThreeStreamNetwork::backward_edge(const EdgeForward& out, const Matrix& d_retrieval) {
  const Matrix df = encoders_.edge_head.backward(out.backbone_features, d_retrieval);
  encoders_.sketch_edge_backbone.backward(out.tape, df);
}

std::vector<Param*> ThreeStreamNetwork::params() {
  auto out = encoders_.image_backbone.params();
  for (Param* p : encoders_.sketch_edge_backbone.params()) out.push_back(p);
  for (Linear* l : {&encoders_.image_head, &encoders_.edge_head, &encoders_.sketch_head,
                    &classifier_, &kd_head_}) {
    if (l->out_features() == 0) continue;
    out.push_back(&l->weight);
    out.push_back(&l->bias);
  }
  return out;
}

std::vector<const Param*> ThreeStreamNetwork::params() const {
  std::vector<const Param*> out;
  for (Param* p : const_cast<ThreeStreamNetwork*>(this)->params()) out.push_back(p);
  return out;
}

void ThreeStreamNetwork::zero_grad() {
  for (Param* p : params()) p->zero_grad();
}

std::map<std::string, std::vector<double>> ThreeStreamNetwork::export_tensors() const {
  std::map<std::string, std::vector<double>> out;
  for (const Param* p : params()) out[p->name] = p->value;
  return out;
}

void ThreeStreamNetwork::import_tensors(
    const std::map<std::string, std::vector<double>>& tensors) {
  import_into(params(), tensors);
}

// ---------------------------------------------------------------------------
// Adam

void Adam::step(const std::vector<Param*>& params) {
  ++steps_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (Param* p : params) {
    auto& m = m_[p->name];
    auto& v = v_[p->name];
    if (m.size() != p->value.size()) {
      m.assign(p->value.size(), 0.0);
      v.assign(p->value.size(), 0.0);
    }
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      p->value[i] -= options_.learning_rate * (m[i] / c1) /
                     (std::sqrt(v[i] / c2) + options_.epsilon);
    }
  }
}

void Adam::export_state(std::map<std::string, std::vector<double>>& tensors,
                        nlohmann::json& meta) const {
  for (const auto& [name, m] : m_) tensors["adam.m/" + name] = m;
  for (const auto& [name, v] : v_) tensors["adam.v/" + name] = v;
  meta["adam_steps"] = steps_;
}

void Adam::import_state(const std::map<std::string, std::vector<double>>& tensors,
                        const nlohmann::json& meta) {
  m_.clear();
  v_.clear();
  for (const auto& [name, values] : tensors) {
    if (name.starts_with("adam.m/")) m_[name.substr(7)] = values;
    if (name.starts_with("adam.v/")) v_[name.substr(7)] = values;
  }
  steps_ = meta.value("adam_steps", std::int64_t{0});
}

// ---------------------------------------------------------------------------
// Teacher pretraining

namespace {

// Mean softmax cross-entropy; writes dL/dlogits.
double softmax_xent(const Matrix& logits, std::span<const int> labels, Matrix& grad) {
  grad = Matrix(logits.rows, logits.cols);
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(logits.rows);
  for (std::size_t n = 0; n < logits.rows; ++n) {
    const auto row = logits.row(n);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    total += log_z - row[labels[n]];
    for (std::size_t c = 0; c < logits.cols; ++c) {
      grad(n, c) = (std::exp(row[c] - log_z) - (static_cast<int>(c) == labels[n] ? 1.0 : 0.0)) * inv_n;
    }
  }
  return total * inv_n;
}

}  // namespace

TeacherModel make_teacher(std::span<const Sample> pretrain, const LabelSpace& labels,
                          const TeacherTrainConfig& config) {
  if (pretrain.empty()) throw ValidationError("teacher pretraining set is empty");
  if (config.epochs < 1) throw ValidationError("teacher epochs must be >= 1");
  std::vector<int> targets;
  std::vector<Raster> rasters;
  for (const auto& s : pretrain) {
    if (!labels.is_seen(s.class_label)) {
      throw ValidationError("teacher pretraining sample '" + s.id +
                            "' belongs to an unseen class");
    }
    targets.push_back(labels.seen_rank(s.class_label));
    rasters.push_back(s.load());
  }
  const int classes = static_cast<int>(labels.num_seen());

  Backbone backbone("teacher/backbone", config.backbone);
  Linear classifier("teacher/classifier", backbone.feature_dim(), classes);
  Rng rng(mix_seed(config.seed, 0x7EAC));
  backbone.init(rng);
  classifier.init(rng);

  auto params = backbone.params();
  params.push_back(&classifier.weight);
  params.push_back(&classifier.bias);
  Adam adam({config.learning_rate, 0.9, 0.999, 1e-8});

  std::vector<std::size_t> order(rasters.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(config.seed, 0x5000 + epoch));
    shuffle_rng.shuffle(std::span(order));
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Raster> batch_rasters;
      std::vector<int> batch_labels;
      for (std::size_t i = start; i < end; ++i) {
        batch_rasters.push_back(rasters[order[i]]);
        batch_labels.push_back(targets[order[i]]);
      }
      const ImageBatch batch = make_batch(batch_rasters, config.backbone.in_channels);
      for (Param* p : params) p->zero_grad();
      Backbone::Tape tape;
      const Matrix feats = backbone.forward(batch, &tape);
      const Matrix logits = classifier.forward(feats);
      Matrix dlogits;
      const double loss = softmax_xent(logits, batch_labels, dlogits);
      if (!std::isfinite(loss)) throw NumericError("teacher pretraining loss is not finite");
      backbone.backward(tape, classifier.backward(feats, dlogits));
      adam.step(params);
      epoch_loss += loss;
      ++batches;
    }
    log::info("teacher epoch " + std::to_string(epoch + 1) + "/" +
              std::to_string(config.epochs) + " loss " +
              std::to_string(epoch_loss / static_cast<double>(batches)));
  }
  return TeacherModel(std::move(backbone), std::move(classifier));
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {
constexpr char kCheckpointMagic[4] = {'3', 'J', 'C', 'K'};
constexpr std::uint16_t kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  ensure_parent_directory(path);
  const auto tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
    out.write(kCheckpointMagic, 4);
    write_u16(out, kCheckpointVersion);
    write_string(out, checkpoint.meta.dump());
    write_u32(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
    for (const auto& [name, values] : checkpoint.tensors) {
      write_string(out, name);
      write_u64(out, values.size());
      out.write(reinterpret_cast<const char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(double)));
    }
    if (!out) throw IoError("write failed for checkpoint '" + path.string() + "'");
  }
  commit_temp(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || !std::equal(magic, magic + 4, kCheckpointMagic)) {
    throw IoError("'" + path.string() + "' is not a checkpoint");
  }
  const auto version = read_u16(in);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  try {
    ck.meta = nlohmann::json::parse(read_string(in));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint metadata in '" + path.string() + "': " + e.what());
  }
  const auto count = read_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = read_string(in);
    const auto size = read_u64(in);
    if (size > (std::uint64_t{1} << 32)) throw IoError("implausible tensor size in checkpoint");
    std::vector<double> values(size);
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(size * sizeof(double)));
    if (!in) throw IoError("truncated checkpoint '" + path.string() + "'");
    ck.tensors.emplace(std::move(name), std::move(values));
  }
  return ck;
}

nlohmann::json to_json(const LabelSpace& labels) {
  nlohmann::json j;
  j["class_names"] = labels.class_names();
  j["seen_mask"] = labels.seen_mask();
  return j;
}

LabelSpace label_space_from_json(const nlohmann::json& j) {
  return LabelSpace(j.at("class_names").get<std::vector<std::string>>(),
                    j.at("seen_mask").get<std::vector<bool>>());
}

nlohmann::json to_json(const BackboneConfig& config) {
  return {{"in_channels", config.in_channels}, {"widths", config.widths}};
}

BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  return c;
}

}  // namespace threejoin
