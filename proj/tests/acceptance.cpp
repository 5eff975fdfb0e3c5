#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "threejoin/dataset.hpp"
#include "threejoin/edgemap.hpp"
#include "threejoin/error.hpp"
#include "threejoin/log.hpp"
#include "threejoin/losses.hpp"
#include "threejoin/network.hpp"
#include "threejoin/retrieval.hpp"
#include "threejoin/rng.hpp"
#include "threejoin/training.hpp"

using namespace threejoin;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream ss;
  ss.precision(precision);
  ss << v;
  return ss.str();
}

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data) v = scale * rng.normal();
  return m;
}

std::vector<int> random_labels(Rng& rng, std::size_t n, int classes) {
  std::vector<int> out(n);
  for (auto& y : out) y = static_cast<int>(rng.index(static_cast<std::size_t>(classes)));
  return out;
}

// ---------------------------------------------------------------------------
// 1. Gradients against central differences.

constexpr double kFdStep = 1e-3;
constexpr double kFdTol = 1e-4;
constexpr int kGradSeeds = 25;

struct GradCheck {
  double worst = 0.0;
  std::size_t excluded = 0;
  std::size_t checked = 0;
};

// Relative error ||a - n|| / max(||a||, ||n||) of a whole gradient tensor.
// `skip(i)` drops coordinates whose difference stencil crosses a kink.
void check_gradient(std::vector<double>& x, const std::vector<double>& analytic,
                    const std::function<double()>& f, GradCheck& acc,
                    const std::function<bool(std::size_t)>& skip = nullptr) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (skip && skip(i)) {
      ++acc.excluded;
      continue;
    }
    const double keep = x[i];
    x[i] = keep + kFdStep;
    const double up = f();
    x[i] = keep - kFdStep;
    const double down = f();
    x[i] = keep;
    const double numeric = (up - down) / (2 * kFdStep);
    diff += (analytic[i] - numeric) * (analytic[i] - numeric);
    na += analytic[i] * analytic[i];
    nn += numeric * numeric;
    ++acc.checked;
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  acc.worst = std::max(acc.worst, std::sqrt(diff) / denom);
}

CenterBank random_bank(Rng& rng, int classes, std::size_t dim) {
  CenterBank bank(static_cast<std::size_t>(classes), dim);
  std::vector<int> labels(static_cast<std::size_t>(classes));
  std::iota(labels.begin(), labels.end(), 0);
  bank.update(random_matrix(rng, labels.size(), dim), labels);
  bank.update(random_matrix(rng, 2 * labels.size(), dim), random_labels(rng, 2 * labels.size(), classes));
  return bank;
}

Outcome criterion_gradients() {
  std::map<std::string, GradCheck> checks;
  for (int seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng(1000 + seed);
    const std::size_t n = 3 + rng.index(6);
    const std::size_t d = 2 + rng.index(10);
    const int classes = 2 + static_cast<int>(rng.index(5));

    {  // kd with parameter divergence
      Matrix teacher = random_matrix(rng, n, static_cast<std::size_t>(classes) + 1, 2.0);
      Matrix student = random_matrix(rng, teacher.rows, teacher.cols, 2.0);
      std::vector<double> tx(4 + rng.index(12)), ts(tx.size());
      for (auto& v : tx) v = rng.normal();
      for (auto& v : ts) v = rng.normal();
      const double gamma = rng.uniform(0.1, 100.0);
      const auto f = [&] { return kd_loss(teacher, student, tx, ts, gamma).value; };
      const KdLoss base = kd_loss(teacher, student, tx, ts, gamma);
      check_gradient(student.data, base.grad_student.data, f, checks["kd"]);
      check_gradient(tx, base.grad_theta_x, f, checks["kd"]);
      check_gradient(ts, base.grad_theta_s, f, checks["kd"]);
    }
    {  // alignment
      Matrix a = random_matrix(rng, n, d), b = random_matrix(rng, n, d);
      const auto f = [&] { return alignment_loss(a, b).value; };
      const PairLoss base = alignment_loss(a, b);
      check_gradient(a.data, base.grad_a.data, f, checks["align"]);
      check_gradient(b.data, base.grad_b.data, f, checks["align"]);
    }
    const CenterBank bank = random_bank(rng, classes, d);
    {  // center
      Matrix s = random_matrix(rng, n, d);
      const auto labels = random_labels(rng, n, classes);
      const auto f = [&] { return center_loss(s, labels, bank).value; };
      check_gradient(s.data, center_loss(s, labels, bank).grad.data, f, checks["center"]);
    }
    {  // triplet
      Matrix s = random_matrix(rng, n, d);
      auto labels = random_labels(rng, n, classes);
      labels[0] = 0;
      labels[1] = 1;
      const double margin = rng.uniform(0.0, 1.0);
      // Mined negatives and hinge activity, to detect stencils crossing a kink.
      const auto pattern = [&] {
        std::vector<long> p;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t j = hardest_negative(labels[i], s, labels, bank);
          const auto c = bank.center(labels[i]);
          double dp = 0, dn = 0;
          for (std::size_t k = 0; k < d; ++k) {
            dp += (s(i, k) - c[k]) * (s(i, k) - c[k]);
            dn += (s(j, k) - c[k]) * (s(j, k) - c[k]);
          }
          const double slack = margin + std::sqrt(dp) - std::sqrt(dn);
          p.push_back(static_cast<long>(j));
          p.push_back(std::abs(slack) < 1e-6 ? -1 : slack > 0);
        }
        return p;
      };
      const auto base_pattern = pattern();
      const auto crosses = [&](std::size_t idx) {
        const double keep = s.data[idx];
        bool changed = false;
        for (double sign : {1.0, -1.0}) {
          s.data[idx] = keep + sign * kFdStep;
          changed = changed || pattern() != base_pattern;
        }
        s.data[idx] = keep;
        return changed || std::count(base_pattern.begin(), base_pattern.end(), -1L) > 0;
      };
      const auto f = [&] { return triplet_loss(s, labels, bank, margin).value; };
      check_gradient(s.data, triplet_loss(s, labels, bank, margin).grad.data, f, checks["triplet"],
                     crosses);
    }
    {  // classification
      Linear clf("classifier", static_cast<int>(d), classes);
      clf.init(rng);
      Matrix feats = random_matrix(rng, n, d);
      const auto labels = random_labels(rng, n, classes);
      const auto f = [&] { return classification_loss(feats, labels, clf).value; };
      const ClassificationLoss base = classification_loss(feats, labels, clf);
      check_gradient(feats.data, base.grad_features.data, f, checks["cls"]);
      check_gradient(clf.weight.value, base.grad_weight.data, f, checks["cls"]);
      check_gradient(clf.bias.value, base.grad_bias, f, checks["cls"]);
    }
  }
  Outcome out{true, {}};
  for (const auto& [name, c] : checks) {
    out.pass = out.pass && c.worst < kFdTol && c.checked > 0;
    out.detail += name + " rel " + fmt(c.worst, 2) + "; ";
  }
  out.detail += "triplet coords excluded " + std::to_string(checks["triplet"].excluded) + "/" +
                std::to_string(checks["triplet"].excluded + checks["triplet"].checked) + ", " +
                std::to_string(kGradSeeds) + " seeds";
  return out;
}

// ---------------------------------------------------------------------------
// 2. Center bank against a brute-force running mean.

Outcome criterion_center_bank() {
  double worst = 0.0;
  bool reset_ok = true, defined_ok = true;
  for (int seq = 0; seq < 50; ++seq) {
    Rng rng(2000 + seq);
    const int classes = 2 + static_cast<int>(rng.index(10));
    const std::size_t dim = 1 + rng.index(16);
    CenterBank bank(static_cast<std::size_t>(classes), dim);
    std::vector<std::vector<std::vector<double>>> seen(static_cast<std::size_t>(classes));
    const int updates = 1 + static_cast<int>(rng.index(20));
    for (int u = 0; u < updates; ++u) {
      // Each batch draws from a random subset so some classes are absent.
      const int present = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(classes)));
      const std::size_t rows = 1 + rng.index(24);
      const Matrix f = random_matrix(rng, rows, dim, rng.uniform(0.1, 10.0));
      const auto labels = random_labels(rng, rows, present);
      bank.update(f, labels);
      for (std::size_t i = 0; i < rows; ++i) {
        seen[labels[i]].emplace_back(f.row(i).begin(), f.row(i).end());
      }
      for (int c = 0; c < classes; ++c) {
        if (seen[c].empty()) {
          defined_ok = defined_ok && !bank.defined(c);
          continue;
        }
        defined_ok = defined_ok && bank.defined(c) && bank.count(c) == seen[c].size();
        for (std::size_t k = 0; k < dim; ++k) {
          double mean = 0.0;
          for (const auto& v : seen[c]) mean += v[k];
          mean /= static_cast<double>(seen[c].size());
          worst = std::max(worst, std::abs(bank.center(c)[k] - mean));
        }
      }
    }
    bank.reset();
    for (int c = 0; c < classes; ++c) reset_ok = reset_ok && !bank.defined(c) && bank.count(c) == 0;
  }
  return {worst <= 1e-6 && reset_ok && defined_ok,
          "max |center - mean| " + fmt(worst, 3) + ", reset " + (reset_ok ? "ok" : "broken") +
              ", absent classes " + (defined_ok ? "undefined" : "wrong")};
}

// ---------------------------------------------------------------------------
// 3. Hardest-negative mining against an exhaustive scan.

Outcome criterion_mining() {
  std::size_t mismatches = 0, tie_batches = 0;
  for (int b = 0; b < 1000; ++b) {
    Rng rng(3000 + b);
    const std::size_t dim = 4 + rng.index(61);
    const std::size_t n = 4 + rng.index(29);
    const int classes = 2 + static_cast<int>(rng.index(6));
    const CenterBank bank = random_bank(rng, classes, dim);
    Matrix s = random_matrix(rng, n, dim);
    auto labels = random_labels(rng, n, classes);
    labels[0] = 0;
    labels[1] = 1;
    // Duplicate rows force exact distance ties.
    if (b % 2 == 0) {
      ++tie_batches;
      const std::size_t copies = 1 + rng.index(3);
      for (std::size_t k = 0; k < copies; ++k) {
        const std::size_t src = rng.index(n), dst = rng.index(n);
        std::copy(s.row(src).begin(), s.row(src).end(), s.row(dst).begin());
        labels[dst] = labels[src];
      }
      if (std::all_of(labels.begin(), labels.end(), [&](int y) { return y == labels[0]; })) {
        labels[n - 1] = (labels[0] + 1) % classes;
      }
    }
    for (int anchor = 0; anchor < classes; ++anchor) {
      std::optional<std::size_t> best;
      double best_d = 0.0;
      const auto c = bank.center(anchor);
      for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] == anchor) continue;
        double dist = 0.0;
        for (std::size_t k = 0; k < dim; ++k) dist += (s(i, k) - c[k]) * (s(i, k) - c[k]);
        if (!best || dist < best_d) {
          best = i;
          best_d = dist;
        }
      }
      if (!best) {
        try {
          hardest_negative(anchor, s, labels, bank);
          ++mismatches;
        } catch (const SamplingError&) {
        }
        continue;
      }
      if (hardest_negative(anchor, s, labels, bank) != *best) ++mismatches;
    }
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches over 1000 batches (" +
                               std::to_string(tie_batches) + " with forced ties)"};
}

// ---------------------------------------------------------------------------
// 4. AP and Prec@100 against brute force.

Outcome criterion_metrics() {
  std::size_t mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    Rng rng(4000 + t);
    const std::size_t n = 1 + rng.index(300);
    const double p = rng.uniform(0.02, 0.8);
    std::unique_ptr<bool[]> rel(new bool[n]);
    for (std::size_t i = 0; i < n; ++i) rel[i] = rng.uniform() < p;
    rel[rng.index(n)] = true;
    const std::span<const bool> ranked(rel.get(), n);

    double sum = 0.0;
    std::size_t total = 0;
    for (std::size_t r = 0; r < n; ++r) {
      if (!rel[r]) continue;
      std::size_t hits = 0;
      for (std::size_t j = 0; j <= r; ++j) hits += rel[j];
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
      ++total;
    }
    const double ap = sum / static_cast<double>(total);
    std::size_t top = 0;
    for (std::size_t r = 0; r < std::min<std::size_t>(n, 100); ++r) top += rel[r];
    const double prec = static_cast<double>(top) / 100.0;
    if (std::abs(average_precision(ranked) - ap) > 1e-12) ++mismatches;
    if (std::abs(precision_at_k(ranked, 100) - prec) > 1e-12) ++mismatches;
  }
  const bool perfect[] = {true, true, true, false, false, false};
  const bool mixed[] = {true, false, true};
  // 5/6 itself is not representable; accept the few ulps a summation order can cost.
  const double ulp = std::nextafter(5.0 / 6.0, 1.0) - 5.0 / 6.0;
  const bool hand = average_precision(perfect) == 1.0 &&
                    std::abs(average_precision(mixed) - 5.0 / 6.0) <= 4 * ulp;
  return {mismatches == 0 && hand, std::to_string(mismatches) + " mismatches over 1000 lists, " +
                                       "hand cases " + (hand ? "hold" : "wrong")};
}

// ---------------------------------------------------------------------------
// 5. ITQ.

Outcome criterion_itq() {
  double worst_orth = 0.0, worst_rise = 0.0;
  bool deterministic = true, bijective = true;
  for (int t = 0; t < 100; ++t) {
    Rng rng(5000 + t);
    Matrix v = random_matrix(rng, 200, 32);
    // Anisotropic columns make the PCA step non-trivial.
    for (std::size_t i = 0; i < 200; ++i) {
      for (std::size_t k = 0; k < 32; ++k) v(i, k) *= 1.0 + 0.1 * static_cast<double>(k);
    }
    ItqOptions opt;
    opt.bits = 16;
    opt.iterations = 50;
    opt.seed = static_cast<std::uint64_t>(t);
    const ItqCodec codec = itq_fit(v, opt);
    if (codec.quantization_loss.size() != 50) deterministic = false;
    for (std::size_t i = 1; i < codec.quantization_loss.size(); ++i) {
      const double rise = codec.quantization_loss[i] - codec.quantization_loss[i - 1];
      worst_rise = std::max(worst_rise, rise / std::max(1.0, codec.quantization_loss[i - 1]));
    }
    double err = 0.0;
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) {
        double dot = 0.0;
        for (int k = 0; k < 16; ++k) dot += codec.rotation(k, i) * codec.rotation(k, j);
        err += (dot - (i == j)) * (dot - (i == j));
      }
    }
    worst_orth = std::max(worst_orth, std::sqrt(err));

    EmbeddingSet set;
    set.vectors = v;
    for (std::size_t i = 0; i < 200; ++i) {
      set.ids.push_back("r" + std::to_string(i));
      set.labels.push_back(static_cast<std::uint32_t>(i % 7));
    }
    const HashCodes a = itq_encode(codec, set);
    const HashCodes b = itq_encode(codec, set);
    const ItqCodec again = itq_fit(v, opt);
    deterministic = deterministic && a.words == b.words && again.rotation == codec.rotation &&
                    itq_encode(again, set).words == a.words;
    bijective = bijective && a.size() == set.size() && a.ids == set.ids && a.labels == set.labels &&
                a.words.size() == set.size() * a.words_per_code;
  }
  // Non-increasing up to floating-point rounding of the loss itself.
  const bool monotone = worst_rise <= 1e-12;
  return {monotone && worst_orth <= 1e-6 && deterministic && bijective,
          "max loss rise " + fmt(worst_rise, 2) + ", max ||R^T R - I||_F " + fmt(worst_orth, 2) +
              ", deterministic " + (deterministic ? "yes" : "no") + ", bijective " +
              (bijective ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 7-9. Synthetic end-to-end pipeline.

TrainConfig acceptance_config() {
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 24;
  cfg.classes_per_batch = 6;
  cfg.retrieval_dim = 64;
  cfg.seed = 7;
  return cfg;
}

SyntheticCorpusConfig acceptance_corpus() {
  SyntheticCorpusConfig c;
  c.num_classes = 8;
  c.images_per_class = 40;
  c.sketches_per_class = 40;
  c.image_size = 64;
  c.seed = 7;
  return c;
}

struct PipelineRun {
  ZeroShotSplit split;
  EdgeCorpus edges;
  std::shared_ptr<const TeacherModel> teacher;
  std::uint64_t teacher_checksum = 0;
  EvalReport cosine, hamming;
  fs::path run_dir;
};

// Corpus, edges, teacher, full-model training and both evaluations.
PipelineRun full_pipeline(const fs::path& root) {
  PipelineRun p;
  fs::remove_all(root);
  p.split = generate_synthetic_corpus(acceptance_corpus(), root / "data");
  p.edges = extract_corpus(p.split, CannyExtractor(), root / "data");
  const TrainConfig cfg = acceptance_config();
  p.teacher = train_teacher(p.split, cfg);
  p.teacher_checksum = p.teacher->checksum();
  TrainOptions opt;
  opt.teacher = p.teacher;
  p.run_dir = root / "run";
  const TrainResult tr = train(p.split, p.edges, cfg, p.run_dir, opt);
  const TrainState state = load_train_state(tr.checkpoint);
  const EncodedSplit enc = encode_split(state.network, p.split);
  p.cosine = evaluate(enc.test_sketches, enc.test_images, EvalMode::cosine);
  const Matrix itq = enc.itq_training_features();
  p.hamming = evaluate(enc.test_sketches, enc.test_images, EvalMode::hamming64, &itq, cfg.seed);
  return p;
}

std::vector<json> read_metrics(const fs::path& path) {
  std::vector<json> out;
  std::ifstream in(path);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct EndToEnd {
  PipelineRun full;
  std::vector<AblationRow> rows;
  fs::path ablation_dir;
  double seconds = 0.0;
  std::uint64_t checksum_after = 0;
};

EndToEnd run_end_to_end(const fs::path& root) {
  EndToEnd e;
  const auto t0 = Clock::now();
  e.full = full_pipeline(root / "first");
  e.ablation_dir = root / "ablation";
  fs::remove_all(e.ablation_dir);
  e.rows = ablate(e.full.split, e.full.edges, acceptance_config(), e.ablation_dir, e.full.teacher);
  e.checksum_after = e.full.teacher->checksum();
  e.seconds = seconds_since(t0);
  return e;
}

Outcome criterion_sharing(const EndToEnd& e) {
  NetworkConfig nc;
  nc.backbone.widths = {8, 16, 32};
  nc.retrieval_dim = 16;
  nc.num_seen = 6;
  nc.teacher_classes = 6;
  nc.seed = 3;
  const ThreeStreamNetwork net(nc);
  Rng rng(6);
  Raster r(64, 64, 1);
  for (auto& px : r.pixels) px = static_cast<std::uint8_t>(rng.index(256));
  const std::vector<Raster> rasters{r, r};
  const ImageBatch batch = make_batch(rasters);
  const SketchForward s = net.forward_sketch(batch, false);
  const EdgeForward ed = net.forward_edge(batch, false);
  const bool bitwise = s.backbone_features.data == ed.backbone_features.data;

  bool stored = true;
  for (int i = 1; i <= 7; ++i) {
    const TrainState st =
        load_train_state(e.ablation_dir / ("variant_" + std::to_string(i)) / "checkpoint.ckpt");
    stored = stored && st.teacher_checksum == e.full.teacher_checksum;
  }
  const bool frozen = e.checksum_after == e.full.teacher_checksum && stored;
  return {bitwise && frozen, std::string("sketch/edge backbone features ") +
                                 (bitwise ? "bitwise equal" : "differ") +
                                 ", teacher checksum " + (frozen ? "unchanged" : "changed") +
                                 " across 8 training runs"};
}

Outcome criterion_end_to_end(const EndToEnd& e) {
  bool finite = true;
  std::vector<double> totals;
  for (int i = 1; i <= 7; ++i) {
    for (const auto& m : read_metrics(e.ablation_dir / ("variant_" + std::to_string(i)) /
                                      "metrics.jsonl")) {
      for (const auto& [k, v] : m.items()) {
        if (v.is_number() && !std::isfinite(v.get<double>())) finite = false;
      }
      if (i == 7) totals.push_back(m.at("total").get<double>());
    }
  }
  const std::size_t per_epoch = totals.size() / 10;
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < per_epoch; ++i) {
    first += totals[i];
    last += totals[totals.size() - per_epoch + i];
  }
  first /= static_cast<double>(per_epoch);
  last /= static_cast<double>(per_epoch);
  const bool decreased = per_epoch > 0 && last < first;

  const double base = e.rows.front().cosine.map_all;
  const double full = e.rows.back().cosine.map_all;
  const bool gap = full >= base + 0.05;
  const double ham_gap = std::abs(e.full.hamming.map_all - e.full.cosine.map_all);
  const bool ham = ham_gap <= 0.15;
  const bool fast = e.seconds < 30 * 60;

  std::string d;
  d += std::string("(a) finite ") + (finite ? "yes" : "no");
  d += "; (b) epoch-mean total " + fmt(first) + " -> " + fmt(last);
  d += "; (c) mAP variant 7 " + fmt(full) + " vs variant 1 " + fmt(base) + " (need +0.05)";
  d += "; (d) hamming64 " + fmt(e.full.hamming.map_all) + " vs cosine " + fmt(e.full.cosine.map_all);
  d += "; " + fmt(e.seconds / 60.0, 3) + " min";
  std::cout << "  7a " << (finite ? "PASS" : "FAIL") << "  7b " << (decreased ? "PASS" : "FAIL")
            << "  7c " << (gap ? "PASS" : "FAIL") << "  7d " << (ham ? "PASS" : "FAIL")
            << "  runtime " << (fast ? "PASS" : "FAIL") << "\n";
  return {finite && decreased && gap && ham && fast, d};
}

Outcome criterion_ablation_rows(const EndToEnd& e) {
  const auto& expected = ablation_variants();
  bool ok = e.rows.size() == 7;
  for (std::size_t i = 0; ok && i < 7; ++i) {
    ok = e.rows[i].variant.index == static_cast<int>(i) + 1 &&
         e.rows[i].variant.name == expected[i].name;
  }
  const json table = json::parse(slurp(e.ablation_dir / "ablation.json"));
  ok = ok && table.is_array() && table.size() == 7;
  for (const auto& row : table) {
    ok = ok && row.contains("variant") && row.contains("mAP_all") && row.contains("prec_100");
  }
  std::ifstream csv(e.ablation_dir / "ablation.csv");
  std::size_t csv_rows = 0;
  for (std::string line; std::getline(csv, line);) csv_rows += !line.empty();
  ok = ok && csv_rows == 8;
  return {ok, std::to_string(e.rows.size()) + " rows; ablation.json " +
                  std::to_string(table.size()) + " entries; ablation.csv " +
                  std::to_string(csv_rows - 1) + " data lines"};
}

Outcome criterion_determinism(const EndToEnd& e, const fs::path& root) {
  const PipelineRun again = full_pipeline(root / "second");
  const std::string m1 = slurp(e.full.run_dir / "metrics.jsonl");
  const std::string m2 = slurp(again.run_dir / "metrics.jsonl");
  const std::string m3 = slurp(e.ablation_dir / "variant_7" / "metrics.jsonl");
  const bool metrics = !m1.empty() && m1 == m2 && m1 == m3;
  const bool eval = e.full.cosine.to_json().dump() == again.cosine.to_json().dump() &&
                    e.full.hamming.to_json().dump() == again.hamming.to_json().dump();
  return {metrics && eval, std::string("metrics logs ") + (metrics ? "identical" : "differ") +
                               ", evaluation JSON " + (eval ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  log::set_level(log::Level::warn);
  fs::path root = fs::temp_directory_path() / "threejoin_acceptance";
  if (argc > 1) root = argv[1];

  int failures = 0;
  const auto report = [&](int id, const std::string& name, const Outcome& o, double secs) {
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): "
              << o.detail << " [" << fmt(secs, 3) << " s]" << std::endl;
  };
  const auto timed = [&](int id, const std::string& name, double limit, auto&& fn) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& ex) {
      o = {false, std::string("threw: ") + ex.what()};
    }
    const double secs = seconds_since(t0);
    if (limit > 0 && secs >= limit) {
      o.pass = false;
      o.detail += ", over the " + fmt(limit, 3) + " s budget";
    }
    report(id, name, o, secs);
  };

  timed(1, "loss gradients vs finite differences", 120, criterion_gradients);
  timed(2, "center bank oracle", 30, criterion_center_bank);
  timed(3, "hardest-negative oracle", 30, criterion_mining);
  timed(4, "AP and Prec@100 oracles", 30, criterion_metrics);
  timed(5, "ITQ properties", 120, criterion_itq);

  std::optional<EndToEnd> e2e;
  std::string e2e_error;
  try {
    e2e = run_end_to_end(root);
  } catch (const std::exception& ex) {
    e2e_error = std::string("pipeline threw: ") + ex.what();
  }
  const auto needs_pipeline = [&](auto&& fn) {
    return [&, fn]() -> Outcome {
      if (!e2e) return {false, e2e_error};
      return fn(*e2e);
    };
  };
  timed(6, "weight sharing and teacher freeze", 0, needs_pipeline(criterion_sharing));
  timed(7, "synthetic zero-shot run", 0, needs_pipeline(criterion_end_to_end));
  timed(8, "ablation table", 0, needs_pipeline(criterion_ablation_rows));
  timed(9, "determinism", 0,
        needs_pipeline([&](const EndToEnd& e) { return criterion_determinism(e, root); }));

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
