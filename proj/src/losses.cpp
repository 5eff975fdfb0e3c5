#include "threejoin/losses.hpp"

#include <algorithm>
#include <cmath>

#include "threejoin/error.hpp"
#include "threejoin/simd/kernels.hpp"

namespace threejoin {

void LossWeights::validate() const {
  for (double v : {gamma, lambda1, lambda2, lambda3, eta, margin}) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ValidationError("loss weights and margin must be finite and non-negative");
    }
  }
}

LossWeights LossWeights::sketchy() { return {100.0, 0.1, 0.1, 0.1, 10.0, 0.2}; }
LossWeights LossWeights::tu_berlin() { return {100.0, 0.01, 0.01, 1.0, 100.0, 0.2}; }

namespace {

void require_finite(const Matrix& m, const char* what) {
  for (double v : m.data) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + " contains non-finite values");
  }
}

void check_labels(std::span<const int> labels, std::size_t rows, std::size_t classes,
                  const char* what) {
  if (labels.size() != rows) {
    throw ShapeError(std::string(what) + ": " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(rows) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ValidationError(std::string(what) + ": label " + std::to_string(y) +
                            " outside the " + std::to_string(classes) + " seen classes");
    }
  }
}

void log_softmax_row(std::span<const double> logits, std::span<double> out) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double log_z = mx + std::log(z);
  for (std::size_t c = 0; c < logits.size(); ++c) out[c] = logits[c] - log_z;
}

}  // namespace

double parameter_divergence(std::span<const double> theta_x, std::span<const double> theta_s,
                            double gamma, std::span<double> grad_x, std::span<double> grad_s) {
  if (theta_x.size() != theta_s.size()) {
    throw ShapeError("parameter divergence: theta_x and theta_s differ in size");
  }
  const double sq = simd::l2_sq(theta_x.data(), theta_s.data(), theta_x.size());
  if (!grad_x.empty() || !grad_s.empty()) {
    for (std::size_t i = 0; i < theta_x.size(); ++i) {
      const double g = 2.0 * gamma * (theta_x[i] - theta_s[i]);
      if (!grad_x.empty()) grad_x[i] += g;
      if (!grad_s.empty()) grad_s[i] -= g;
    }
  }
  return gamma * sq;
}

KdLoss kd_loss(const Matrix& teacher_logits, const Matrix& student_logits,
               std::span<const double> theta_x, std::span<const double> theta_s,
               double gamma) {
  if (!teacher_logits.same_shape(student_logits) || teacher_logits.rows == 0) {
    throw ShapeError("kd loss: teacher and student logits must share a non-empty shape");
  }
  if (teacher_logits.cols < 2) throw ShapeError("kd loss: needs at least 2 classes");
  require_finite(teacher_logits, "teacher logits");
  require_finite(student_logits, "student logits");

  const std::size_t n = student_logits.rows, classes = student_logits.cols;
  KdLoss out;
  out.grad_student = Matrix(n, classes);
  std::vector<double> log_q(classes), log_p(classes);
  double ce = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    log_softmax_row(teacher_logits.row(i), log_q);
    log_softmax_row(student_logits.row(i), log_p);
    for (std::size_t c = 0; c < classes; ++c) {
      const double q = std::exp(log_q[c]);
      ce -= q * log_p[c];
      out.grad_student(i, c) = (std::exp(log_p[c]) - q) / static_cast<double>(n);
    }
  }
  out.cross_entropy = ce / static_cast<double>(n);
  out.grad_theta_x.assign(theta_x.size(), 0.0);
  out.grad_theta_s.assign(theta_s.size(), 0.0);
  out.divergence = parameter_divergence(theta_x, theta_s, gamma, out.grad_theta_x,
                                        out.grad_theta_s);
  out.value = out.cross_entropy + out.divergence;
  return out;
}

PairLoss alignment_loss(const Matrix& image_retrieval, const Matrix& edge_retrieval) {
  if (!image_retrieval.same_shape(edge_retrieval) || image_retrieval.rows == 0) {
    throw ShapeError("alignment loss: image and edge features must share a non-empty shape");
  }
  const std::size_t n = image_retrieval.rows;
  PairLoss out;
  out.grad_a = Matrix(n, image_retrieval.cols);
  out.grad_b = Matrix(n, image_retrieval.cols);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += simd::l2_sq(image_retrieval.row(i).data(), edge_retrieval.row(i).data(),
                         image_retrieval.cols);
  }
  const double scale = 2.0 / static_cast<double>(n);
  for (std::size_t k = 0; k < image_retrieval.data.size(); ++k) {
    const double g = scale * (image_retrieval.data[k] - edge_retrieval.data[k]);
    out.grad_a.data[k] = g;
    out.grad_b.data[k] = -g;
  }
  out.value = total / static_cast<double>(n);
  return out;
}

// ---------------------------------------------------------------------------
// CenterBank

CenterBank::CenterBank(std::size_t num_classes, std::size_t dim)
    : centers_(num_classes, dim), counts_(num_classes, 0) {}

void CenterBank::update(const Matrix& edge_retrieval, std::span<const int> labels) {
  if (edge_retrieval.cols != dim()) {
    throw ShapeError("center bank: feature dim " + std::to_string(edge_retrieval.cols) +
                     " != bank dim " + std::to_string(dim()));
  }
  check_labels(labels, edge_retrieval.rows, num_classes(), "center bank");
  require_finite(edge_retrieval, "edge retrieval features");

  Matrix sums(num_classes(), dim());
  std::vector<std::uint64_t> batch_counts(num_classes(), 0);
  for (std::size_t i = 0; i < edge_retrieval.rows; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    simd::axpy(1.0, edge_retrieval.row(i).data(), sums.row(y).data(), dim());
    ++batch_counts[y];
  }
  for (std::size_t y = 0; y < num_classes(); ++y) {
    if (batch_counts[y] == 0) continue;
    const double prev = static_cast<double>(counts_[y]);
    const double total = prev + static_cast<double>(batch_counts[y]);
    auto c = centers_.row(y);
    const auto s = sums.row(y);
    for (std::size_t k = 0; k < dim(); ++k) c[k] = (c[k] * prev + s[k]) / total;
    counts_[y] += batch_counts[y];
  }
}

void CenterBank::reset() {
  std::fill(centers_.data.begin(), centers_.data.end(), 0.0);
  std::fill(counts_.begin(), counts_.end(), 0);
}

bool CenterBank::defined(int label) const {
  return label >= 0 && static_cast<std::size_t>(label) < num_classes() &&
         counts_[static_cast<std::size_t>(label)] > 0;
}

std::span<const double> CenterBank::center(int label) const {
  if (label < 0 || static_cast<std::size_t>(label) >= num_classes()) {
    throw ValidationError("center bank: label " + std::to_string(label) + " out of range");
  }
  if (!defined(label)) {
    throw StateError("center of class " + std::to_string(label) +
                     " is undefined; update the center bank before computing "
                     "center or triplet losses");
  }
  return centers_.row(static_cast<std::size_t>(label));
}

void CenterBank::restore(Matrix centers, std::vector<std::uint64_t> counts) {
  if (centers.rows != counts.size()) throw ShapeError("center bank restore: size mismatch");
  centers_ = std::move(centers);
  counts_ = std::move(counts);
}

// ---------------------------------------------------------------------------
// Sketch-edge losses

FeatureLoss center_loss(const Matrix& sketch_retrieval, std::span<const int> labels,
                        const CenterBank& bank) {
  if (sketch_retrieval.rows == 0) throw ShapeError("center loss: empty batch");
  if (sketch_retrieval.cols != bank.dim()) throw ShapeError("center loss: dim mismatch");
  check_labels(labels, sketch_retrieval.rows, bank.num_classes(), "center loss");
  const std::size_t n = sketch_retrieval.rows;
  FeatureLoss out;
  out.grad = Matrix(n, sketch_retrieval.cols);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = bank.center(labels[i]);
    const auto s = sketch_retrieval.row(i);
    total += simd::l2_sq(s.data(), c.data(), s.size());
    for (std::size_t k = 0; k < s.size(); ++k) {
      out.grad(i, k) = 2.0 * (s[k] - c[k]) / static_cast<double>(n);
    }
  }
  out.value = total / static_cast<double>(n);
  return out;
}

std::size_t hardest_negative(int anchor_class, const Matrix& sketch_retrieval,
                             std::span<const int> labels, const CenterBank& bank) {
  if (sketch_retrieval.cols != bank.dim()) throw ShapeError("mining: dim mismatch");
  check_labels(labels, sketch_retrieval.rows, bank.num_classes(), "mining");
  const auto anchor = bank.center(anchor_class);
  std::size_t best = sketch_retrieval.rows;
  double best_d = 0.0;
  for (std::size_t i = 0; i < sketch_retrieval.rows; ++i) {
    if (labels[i] == anchor_class) continue;
    const double d = simd::l2_sq(anchor.data(), sketch_retrieval.row(i).data(), bank.dim());
    if (best == sketch_retrieval.rows || d < best_d) {
      best = i;
      best_d = d;
    }
  }
  if (best == sketch_retrieval.rows) {
    throw SamplingError("no negative sketch for class " + std::to_string(anchor_class) +
                        " in the mini-batch");
  }
  return best;
}

FeatureLoss triplet_loss(const Matrix& sketch_retrieval, std::span<const int> labels,
                         const CenterBank& bank, double margin) {
  if (sketch_retrieval.rows == 0) throw ShapeError("triplet loss: empty batch");
  if (margin < 0.0) throw ValidationError("triplet margin must be >= 0");
  check_labels(labels, sketch_retrieval.rows, bank.num_classes(), "triplet loss");
  const std::size_t n = sketch_retrieval.rows, d = sketch_retrieval.cols;
  FeatureLoss out;
  out.grad = Matrix(n, d);
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    const std::size_t j = hardest_negative(y, sketch_retrieval, labels, bank);
    const auto c = bank.center(y);
    const auto pos = sketch_retrieval.row(i);
    const auto neg = sketch_retrieval.row(j);
    const double d_pos = std::sqrt(simd::l2_sq(c.data(), pos.data(), d));
    const double d_neg = std::sqrt(simd::l2_sq(c.data(), neg.data(), d));
    const double slack = margin + d_pos - d_neg;
    if (slack <= 0.0) continue;
    total += slack;
    // Distance gradients are taken as 0 where the distance itself is 0.
    if (d_pos > 0.0) {
      for (std::size_t k = 0; k < d; ++k) out.grad(i, k) += inv_n * (pos[k] - c[k]) / d_pos;
    }
    if (d_neg > 0.0) {
      for (std::size_t k = 0; k < d; ++k) out.grad(j, k) -= inv_n * (neg[k] - c[k]) / d_neg;
    }
  }
  out.value = total * inv_n;
  return out;
}

double domain_loss(double center, double triplet, double eta) {
  return center + eta * triplet;
}

ClassificationLoss classification_loss(const Matrix& features, std::span<const int> labels,
                                       const Linear& classifier) {
  if (features.rows == 0) throw ShapeError("classification loss: empty batch");
  const auto classes = static_cast<std::size_t>(classifier.out_features());
  check_labels(labels, features.rows, classes, "classification loss");
  const Matrix logits = classifier.forward(features);
  require_finite(logits, "classifier logits");

  const std::size_t n = features.rows;
  const double inv_n = 1.0 / static_cast<double>(n);
  ClassificationLoss out;
  Matrix dlogits(n, classes);
  std::vector<double> log_p(classes);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    log_softmax_row(logits.row(i), log_p);
    total -= log_p[static_cast<std::size_t>(labels[i])];
    for (std::size_t c = 0; c < classes; ++c) {
      dlogits(i, c) = (std::exp(log_p[c]) - (static_cast<int>(c) == labels[i] ? 1.0 : 0.0)) * inv_n;
    }
  }
  out.value = total * inv_n;

  const std::size_t dim = features.cols;
  out.grad_features = Matrix(n, dim);
  out.grad_weight = Matrix(classes, dim);
  out.grad_bias.assign(classes, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < classes; ++c) {
      const double g = dlogits(i, c);
      out.grad_bias[c] += g;
      simd::axpy(g, features.row(i).data(), out.grad_weight.row(c).data(), dim);
      simd::axpy(g, classifier.weight.value.data() + c * dim, out.grad_features.row(i).data(),
                 dim);
    }
  }
  return out;
}

LossReport total_loss(const LossTerms& terms, const LossWeights& weights) {
  const auto check = [](const std::optional<double>& v, const char* name) {
    if (v && !std::isfinite(*v)) {
      throw NumericError(std::string("loss term '") + name + "' is not finite");
    }
  };
  check(terms.kd, "kd");
  check(terms.align, "align");
  check(terms.center, "center");
  check(terms.triplet, "triplet");
  check(terms.cls, "cls");

  LossReport r;
  r.kd = terms.kd;
  r.align = terms.align;
  r.center = terms.center;
  r.triplet = terms.triplet;
  r.cls = terms.cls;
  if (terms.center || terms.triplet) {
    r.domain = domain_loss(terms.center.value_or(0.0), terms.triplet.value_or(0.0), weights.eta);
  }
  r.total = r.kd.value_or(0.0) + weights.lambda1 * r.align.value_or(0.0) +
            weights.lambda2 * r.domain.value_or(0.0) + weights.lambda3 * r.cls.value_or(0.0);
  if (!std::isfinite(r.total)) throw NumericError("loss term 'total' is not finite");
  return r;
}

}  // namespace threejoin
