#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "threejoin/matrix.hpp"
#include "threejoin/network.hpp"

namespace threejoin {

// All labels in this module are dense seen-class indices in [0, num_seen).

struct LossWeights {
  double gamma = 100.0;    // parameter divergence
  double lambda1 = 0.1;    // alignment
  double lambda2 = 0.1;    // sketch-edge domain
  double lambda3 = 0.1;    // classification
  double eta = 10.0;       // triplet share of the domain term
  double margin = 0.2;     // triplet margin mu

  void validate() const;

  static LossWeights sketchy();
  static LossWeights tu_berlin();
};

struct KdLoss {
  double value = 0.0;
  double cross_entropy = 0.0;
  double divergence = 0.0;  // gamma * ||theta_x - theta_s||_F^2
  Matrix grad_student;      // dL/d student logits
  std::vector<double> grad_theta_x;
  std::vector<double> grad_theta_s;
};

// (1/N) sum_i -sum_c q_ic log p_ic + gamma ||theta_x - theta_s||^2 with
// q = softmax(teacher), p = softmax(student). The teacher side is constant.
KdLoss kd_loss(const Matrix& teacher_logits, const Matrix& student_logits,
               std::span<const double> theta_x, std::span<const double> theta_s,
               double gamma);

// gamma * ||x - s||^2, accumulating 2 gamma (x - s) into grad_x and its
// negation into grad_s when they are non-empty.
double parameter_divergence(std::span<const double> theta_x, std::span<const double> theta_s,
                            double gamma, std::span<double> grad_x, std::span<double> grad_s);

struct PairLoss {
  double value = 0.0;
  Matrix grad_a;
  Matrix grad_b;
};

// Mean over rows of ||a_i - b_i||^2.
PairLoss alignment_loss(const Matrix& image_retrieval, const Matrix& edge_retrieval);

// Running per-class means of edge retrieval features.
class CenterBank {
 public:
  CenterBank() = default;
  CenterBank(std::size_t num_classes, std::size_t dim);

  std::size_t num_classes() const { return counts_.size(); }
  std::size_t dim() const { return centers_.cols; }

  // c_y <- (c_y n_y + sum_{i: y_i = y} f_i) / (n_y + count_y). Throws
  // ValidationError for labels outside the bank.
  void update(const Matrix& edge_retrieval, std::span<const int> labels);
  void reset();

  bool defined(int label) const;
  std::span<const double> center(int label) const;
  std::uint64_t count(int label) const { return counts_.at(static_cast<std::size_t>(label)); }

  const Matrix& centers() const { return centers_; }
  const std::vector<std::uint64_t>& counts() const { return counts_; }
  void restore(Matrix centers, std::vector<std::uint64_t> counts);

 private:
  Matrix centers_;
  std::vector<std::uint64_t> counts_;
};

struct FeatureLoss {
  double value = 0.0;
  Matrix grad;
};

// (1/N) sum_i ||s_i - c_{y_i}||^2; centers are constants.
FeatureLoss center_loss(const Matrix& sketch_retrieval, std::span<const int> labels,
                        const CenterBank& bank);

// Index of the sketch of another class closest to the center of
// `anchor_class`; ties go to the lowest index.
std::size_t hardest_negative(int anchor_class, const Matrix& sketch_retrieval,
                             std::span<const int> labels, const CenterBank& bank);

// (1/N) sum_i max(0, mu + |c_y - s_i| - |c_y - s_j(i)|) with j(i) the hardest
// negative for anchor c_{y_i}.
FeatureLoss triplet_loss(const Matrix& sketch_retrieval, std::span<const int> labels,
                         const CenterBank& bank, double margin);

double domain_loss(double center, double triplet, double eta);

struct ClassificationLoss {
  double value = 0.0;
  Matrix grad_features;
  Matrix grad_weight;  // classes x dim
  std::vector<double> grad_bias;
};

// Mean softmax cross-entropy of (W f + b) against labels.
ClassificationLoss classification_loss(const Matrix& features, std::span<const int> labels,
                                       const Linear& classifier);

// Enabled terms of the objective; unset terms are disabled.
struct LossTerms {
  std::optional<double> kd;
  std::optional<double> align;
  std::optional<double> center;
  std::optional<double> triplet;
  std::optional<double> cls;
};

struct LossReport {
  std::optional<double> kd, align, center, triplet, domain, cls;
  double total = 0.0;
  // Norm of each weighted term's gradient w.r.t. the features it touches,
  // plus per parameter group norms filled in by the trainer.
  std::map<std::string, double> grad_norms;
};

// total = kd + l1 align + l2 (center + eta triplet) + l3 cls over the enabled
// terms. Throws NumericError naming the first non-finite term.
LossReport total_loss(const LossTerms& terms, const LossWeights& weights);

}  // namespace threejoin
