#include "threejoin/retrieval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "threejoin/error.hpp"
#include "threejoin/io_util.hpp"
#include "threejoin/log.hpp"
#include "threejoin/rng.hpp"
#include "threejoin/simd/kernels.hpp"

namespace threejoin {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace {

Eigen::Map<const RowMajor> view(const Matrix& m) {
  return {m.data.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols)};
}

Matrix from_eigen(const Eigen::MatrixXd& e) {
  Matrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
  Eigen::Map<RowMajor>(m.data.data(), e.rows(), e.cols()) = e;
  return m;
}

constexpr char kEmbeddingMagic[4] = {'3', 'J', 'E', 'M'};
constexpr char kCodesMagic[4] = {'3', 'J', 'H', 'C'};
constexpr std::uint16_t kFormatVersion = 1;

void expect_magic(std::istream& in, const char (&magic)[4], const std::filesystem::path& path) {
  char got[4];
  in.read(got, 4);
  if (!in || !std::equal(got, got + 4, magic)) {
    throw IoError("'" + path.string() + "' has wrong magic bytes");
  }
  const auto version = read_u16(in);
  if (version != kFormatVersion) {
    throw IoError("'" + path.string() + "' has unsupported version " + std::to_string(version));
  }
}

}  // namespace

void EmbeddingSet::validate() const {
  if (labels.size() != ids.size() || vectors.rows != ids.size()) {
    throw ShapeError("embedding set: ids, labels and vectors are misaligned");
  }
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingSet& set) {
  set.validate();
  ensure_parent_directory(path);
  const auto tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out.write(kEmbeddingMagic, 4);
    write_u16(out, kFormatVersion);
    write_u32(out, static_cast<std::uint32_t>(set.size()));
    write_u32(out, static_cast<std::uint32_t>(set.dim()));
    for (double v : set.vectors.data) write_f32(out, static_cast<float>(v));
    for (auto l : set.labels) write_u32(out, l);
    for (const auto& id : set.ids) write_string(out, id);
    if (!out) throw IoError("write failed for '" + path.string() + "'");
  }
  commit_temp(tmp, path);
}

EmbeddingSet load_embeddings(const std::filesystem::path& path, EmbeddingRole role) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open embeddings '" + path.string() + "'");
  expect_magic(in, kEmbeddingMagic, path);
  EmbeddingSet set;
  set.role = role;
  const auto count = read_u32(in);
  const auto dim = read_u32(in);
  set.vectors = Matrix(count, dim);
  for (auto& v : set.vectors.data) v = read_f32(in);
  set.labels.resize(count);
  for (auto& l : set.labels) l = read_u32(in);
  set.ids.resize(count);
  for (auto& id : set.ids) id = read_string(in);
  return set;
}

std::vector<std::size_t> rank_cosine(std::span<const double> query, const EmbeddingSet& gallery) {
  gallery.validate();
  if (query.size() != gallery.dim()) {
    throw ShapeError("query dim " + std::to_string(query.size()) + " != gallery dim " +
                     std::to_string(gallery.dim()));
  }
  const double qn = std::sqrt(simd::dot(query.data(), query.data(), query.size()));
  if (!(qn > 0.0)) throw NumericError("query vector has zero norm");
  std::vector<double> dist(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    const auto row = gallery.vectors.row(i);
    const double gn = std::sqrt(simd::dot(row.data(), row.data(), row.size()));
    if (!(gn > 0.0)) {
      throw NumericError("gallery row " + std::to_string(i) + " ('" + gallery.ids[i] +
                         "') has zero norm");
    }
    dist[i] = 1.0 - simd::dot(query.data(), row.data(), row.size()) / (qn * gn);
  }
  std::vector<std::size_t> order(gallery.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  return order;
}

// ---------------------------------------------------------------------------
// ITQ

namespace {

double quantization_loss(const Eigen::MatrixXd& v, const Eigen::MatrixXd& r) {
  const Eigen::MatrixXd vr = v * r;
  const Eigen::MatrixXd b = vr.unaryExpr([](double x) { return x >= 0.0 ? 1.0 : -1.0; });
  return (b - vr).squaredNorm();
}

}  // namespace

ItqCodec itq_fit(const Matrix& train_vectors, const ItqOptions& options) {
  const auto n = static_cast<Eigen::Index>(train_vectors.rows);
  const auto d = static_cast<Eigen::Index>(train_vectors.cols);
  int k = options.bits;
  if (k <= 0) throw ValidationError("ITQ bits must be positive");
  if (options.iterations < 0) throw ValidationError("ITQ iterations must be >= 0");
  if (n <= k) {
    throw ValidationError("ITQ needs more training rows (" + std::to_string(n) +
                          ") than bits (" + std::to_string(k) + ")");
  }
  if (k > d) {
    throw ValidationError("ITQ bits (" + std::to_string(k) + ") exceed feature dim (" +
                          std::to_string(d) + ")");
  }
  for (double v : train_vectors.data) {
    if (!std::isfinite(v)) throw NumericError("ITQ training data contains non-finite values");
  }

  const auto x = view(train_vectors);
  ItqCodec codec;
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(d);
  if (options.center) mean = x.colwise().mean();
  codec.mean.assign(mean.data(), mean.data() + d);
  const Eigen::MatrixXd centered = x.rowwise() - mean;

  Eigen::MatrixXd projection;
  if (options.use_pca) {
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    // Eigenvalues ascend; take the top-k columns in descending order.
    const Eigen::VectorXd& values = eig.eigenvalues();
    const double scale = std::max(values.maxCoeff(), 1e-300);
    int usable = 0;
    for (Eigen::Index i = 0; i < d; ++i) {
      if (values(i) > 1e-10 * scale) ++usable;
    }
    if (usable < k) {
      log::warn("ITQ: covariance has rank " + std::to_string(usable) + " < " +
                std::to_string(k) + " bits; reducing bits");
      k = std::max(usable, 1);
    }
    projection.resize(d, k);
    for (int j = 0; j < k; ++j) projection.col(j) = eig.eigenvectors().col(d - 1 - j);
  } else {
    if (k != d) throw ValidationError("ITQ without PCA requires bits == dim");
    projection = Eigen::MatrixXd::Identity(d, d);
  }
  codec.bits = k;
  codec.projection = from_eigen(projection);

  const Eigen::MatrixXd v = centered * projection;
  Eigen::MatrixXd r;
  if (options.initial_rotation) {
    const auto& init = *options.initial_rotation;
    if (init.rows != static_cast<std::size_t>(k) || init.cols != static_cast<std::size_t>(k)) {
      throw ShapeError("ITQ initial rotation must be bits x bits");
    }
    r = view(init);
  } else {
    Rng rng(mix_seed(options.seed, 0x17A));
    Eigen::MatrixXd g(k, k);
    for (Eigen::Index i = 0; i < k; ++i) {
      for (Eigen::Index j = 0; j < k; ++j) g(i, j) = rng.normal();
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    r = qr.householderQ() * Eigen::MatrixXd::Identity(k, k);
  }

  for (int it = 0; it < options.iterations; ++it) {
    const Eigen::MatrixXd vr = v * r;
    const Eigen::MatrixXd b = vr.unaryExpr([](double z) { return z >= 0.0 ? 1.0 : -1.0; });
    // Orthogonal Procrustes: B^T V = U S W^T  =>  R = W U^T.
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(b.transpose() * v,
                                          Eigen::ComputeFullU | Eigen::ComputeFullV);
    r = svd.matrixV() * svd.matrixU().transpose();
    codec.quantization_loss.push_back((b - v * r).squaredNorm());
  }
  if (options.iterations == 0) codec.quantization_loss.push_back(quantization_loss(v, r));
  codec.rotation = from_eigen(r);
  return codec;
}

HashCodes itq_encode(const ItqCodec& codec, const EmbeddingSet& set) {
  set.validate();
  if (set.dim() != codec.dim()) {
    throw ShapeError("ITQ codec expects dim " + std::to_string(codec.dim()) + ", got " +
                     std::to_string(set.dim()));
  }
  HashCodes codes;
  codes.bits = codec.bits;
  codes.words_per_code = (static_cast<std::size_t>(codec.bits) + 63) / 64;
  codes.words.assign(set.size() * codes.words_per_code, 0);
  codes.ids = set.ids;
  codes.labels = set.labels;
  if (set.size() == 0) return codes;

  const Eigen::Map<const Eigen::RowVectorXd> mean(codec.mean.data(),
                                                  static_cast<Eigen::Index>(codec.mean.size()));
  const Eigen::MatrixXd centered = view(set.vectors).rowwise() - mean;
  const Eigen::MatrixXd z = centered * view(codec.projection) * view(codec.rotation);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    std::uint64_t* row = codes.words.data() + static_cast<std::size_t>(i) * codes.words_per_code;
    for (int j = 0; j < codec.bits; ++j) {
      if (z(i, j) >= 0.0) row[j / 64] |= std::uint64_t{1} << (j % 64);
    }
  }
  return codes;
}

void save_codes(const std::filesystem::path& path, const HashCodes& codes) {
  ensure_parent_directory(path);
  const auto tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out.write(kCodesMagic, 4);
    write_u16(out, kFormatVersion);
    write_u32(out, static_cast<std::uint32_t>(codes.size()));
    write_u32(out, static_cast<std::uint32_t>(codes.bits));
    for (auto w : codes.words) write_u64(out, w);
    for (auto l : codes.labels) write_u32(out, l);
    for (const auto& id : codes.ids) write_string(out, id);
    if (!out) throw IoError("write failed for '" + path.string() + "'");
  }
  commit_temp(tmp, path);
}

HashCodes load_codes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open hash codes '" + path.string() + "'");
  expect_magic(in, kCodesMagic, path);
  HashCodes codes;
  const auto count = read_u32(in);
  codes.bits = static_cast<int>(read_u32(in));
  codes.words_per_code = (static_cast<std::size_t>(codes.bits) + 63) / 64;
  codes.words.resize(count * codes.words_per_code);
  for (auto& w : codes.words) w = read_u64(in);
  codes.labels.resize(count);
  for (auto& l : codes.labels) l = read_u32(in);
  codes.ids.resize(count);
  for (auto& id : codes.ids) id = read_string(in);
  return codes;
}

std::vector<std::size_t> rank_hamming(std::span<const std::uint64_t> query,
                                      const HashCodes& gallery) {
  if (query.size() != gallery.words_per_code) {
    throw ShapeError("hash code width mismatch between query and gallery");
  }
  std::vector<std::uint64_t> dist(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    dist[i] = simd::hamming(query.data(), gallery.code(i).data(), gallery.words_per_code);
  }
  std::vector<std::size_t> order(gallery.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  return order;
}

// ---------------------------------------------------------------------------
// Metrics

double average_precision(std::span<const bool> ranked_relevance) {
  if (ranked_relevance.empty()) throw ValidationError("average precision of an empty ranking");
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < ranked_relevance.size(); ++r) {
    if (ranked_relevance[r]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  if (hits == 0) throw ValidationError("average precision undefined: no relevant items");
  return sum / static_cast<double>(hits);
}

double precision_at_k(std::span<const bool> ranked_relevance, std::size_t k) {
  if (k == 0) throw ValidationError("precision@k needs k >= 1");
  const std::size_t top = std::min(k, ranked_relevance.size());
  const auto hits = std::count(ranked_relevance.begin(), ranked_relevance.begin() + top, true);
  return static_cast<double>(hits) / static_cast<double>(k);
}

std::string to_string(EvalMode mode) {
  return mode == EvalMode::cosine ? "cosine" : "hamming64";
}

EvalMode parse_eval_mode(std::string_view token) {
  if (token == "cosine") return EvalMode::cosine;
  if (token == "hamming64") return EvalMode::hamming64;
  throw UsageError("unknown evaluation mode '" + std::string(token) +
                   "' (expected cosine or hamming64)");
}

nlohmann::json EvalReport::to_json() const {
  return {{"mode", to_string(mode)},
          {"mAP_all", map_all},
          {"prec_100", prec_100},
          {"num_queries", num_queries},
          {"num_gallery", num_gallery},
          {"skipped_queries", skipped_queries}};
}

EvalReport evaluate(const EmbeddingSet& queries, const EmbeddingSet& gallery, EvalMode mode,
                    const Matrix* itq_train, std::uint64_t seed) {
  queries.validate();
  gallery.validate();
  if (queries.size() == 0) throw ValidationError("evaluation needs at least one query");
  if (gallery.size() == 0) throw ValidationError("evaluation needs a non-empty gallery");

  EvalReport report;
  report.mode = mode;
  report.num_queries = queries.size();
  report.num_gallery = gallery.size();

  std::optional<HashCodes> query_codes, gallery_codes;
  if (mode == EvalMode::hamming64) {
    if (itq_train == nullptr) {
      throw ValidationError("hamming64 evaluation needs training features to fit ITQ");
    }
    ItqOptions opts;
    opts.bits = 64;
    opts.seed = seed;
    const ItqCodec codec = itq_fit(*itq_train, opts);
    query_codes = itq_encode(codec, queries);
    gallery_codes = itq_encode(codec, gallery);
  }

  constexpr std::size_t kPrecisionDepth = 100;
  const std::size_t curve_len = std::min(gallery.size(), kPrecisionDepth);
  report.precision_curve.assign(curve_len, 0.0);
  double ap_sum = 0.0, prec_sum = 0.0;
  std::size_t used = 0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto order = mode == EvalMode::cosine
                           ? rank_cosine(queries.vectors.row(q), gallery)
                           : rank_hamming(query_codes->code(q), *gallery_codes);
    auto relevance = std::make_unique<bool[]>(order.size());
    std::size_t relevant = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      relevance[r] = gallery.labels[order[r]] == queries.labels[q];
      relevant += relevance[r] ? 1 : 0;
    }
    if (relevant == 0) {
      log::warn("query '" + queries.ids[q] + "' has no relevant gallery items; skipped");
      ++report.skipped_queries;
      continue;
    }
    const std::span<const bool> rel(relevance.get(), order.size());
    ap_sum += average_precision(rel);
    prec_sum += precision_at_k(rel, kPrecisionDepth);
    std::size_t hits = 0;
    for (std::size_t k = 0; k < curve_len; ++k) {
      hits += rel[k] ? 1 : 0;
      report.precision_curve[k] += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
    ++used;
  }
  if (used == 0) throw ValidationError("no query has a relevant gallery item");
  report.map_all = ap_sum / static_cast<double>(used);
  report.prec_100 = prec_sum / static_cast<double>(used);
  for (auto& p : report.precision_curve) p /= static_cast<double>(used);
  return report;
}

}  // namespace threejoin
