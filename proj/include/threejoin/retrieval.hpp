#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "threejoin/matrix.hpp"

namespace threejoin {

enum class EmbeddingRole { query, gallery };

struct EmbeddingSet {
  std::vector<std::string> ids;
  std::vector<std::uint32_t> labels;
  Matrix vectors;
  EmbeddingRole role = EmbeddingRole::gallery;

  std::size_t size() const { return ids.size(); }
  std::size_t dim() const { return vectors.cols; }
  void validate() const;
};

// "3JEM" u16 version, u32 count, u32 dim, count*dim f32, count u32 labels,
// then count length-prefixed ids. Little-endian throughout.
void save_embeddings(const std::filesystem::path& path, const EmbeddingSet& set);
EmbeddingSet load_embeddings(const std::filesystem::path& path,
                             EmbeddingRole role = EmbeddingRole::gallery);

// Gallery indices by ascending cosine distance; ties by index. Throws
// NumericError naming any zero-norm row.
std::vector<std::size_t> rank_cosine(std::span<const double> query, const EmbeddingSet& gallery);

struct ItqOptions {
  int bits = 64;
  int iterations = 50;
  std::uint64_t seed = 0;
  bool center = true;
  bool use_pca = true;
  // Overrides the seeded random orthogonal start when set (bits x bits).
  std::optional<Matrix> initial_rotation;
};

struct ItqCodec {
  std::vector<double> mean;
  Matrix projection;  // d x k
  Matrix rotation;    // k x k
  int bits = 0;
  std::vector<double> quantization_loss;  // ||B - VR||_F^2 after each iteration

  std::size_t dim() const { return projection.rows; }
};

ItqCodec itq_fit(const Matrix& train_vectors, const ItqOptions& options);

struct HashCodes {
  int bits = 0;
  std::size_t words_per_code = 0;
  std::vector<std::uint64_t> words;
  std::vector<std::string> ids;
  std::vector<std::uint32_t> labels;

  std::size_t size() const { return ids.size(); }
  std::span<const std::uint64_t> code(std::size_t i) const {
    return {words.data() + i * words_per_code, words_per_code};
  }
};

// Bit j of row i is set iff ((v_i - mean) P R)_j >= 0; bit j lives in word
// j / 64 at position j % 64.
HashCodes itq_encode(const ItqCodec& codec, const EmbeddingSet& set);

// "3JHC" u16 version, u32 count, u32 bits, packed u64 words, u32 labels, ids.
void save_codes(const std::filesystem::path& path, const HashCodes& codes);
HashCodes load_codes(const std::filesystem::path& path);

std::vector<std::size_t> rank_hamming(std::span<const std::uint64_t> query,
                                      const HashCodes& gallery);

// (1/R) sum over relevant ranks r of precision@r. Throws ValidationError when
// nothing is relevant.
double average_precision(std::span<const bool> ranked_relevance);

// (#relevant in the first k) / k; the denominator stays k for short lists.
double precision_at_k(std::span<const bool> ranked_relevance, std::size_t k);

enum class EvalMode { cosine, hamming64 };
std::string to_string(EvalMode mode);
EvalMode parse_eval_mode(std::string_view token);

struct EvalReport {
  EvalMode mode = EvalMode::cosine;
  double map_all = 0.0;
  double prec_100 = 0.0;
  std::size_t num_queries = 0;
  std::size_t num_gallery = 0;
  std::size_t skipped_queries = 0;
  // Mean precision@k for k = 1..min(gallery, 100).
  std::vector<double> precision_curve;

  nlohmann::json to_json() const;
};

// Sketch queries against an image gallery, relevance = same label. hamming64
// mode fits a 64-bit ITQ codec on `itq_train` (seen-class training features).
EvalReport evaluate(const EmbeddingSet& queries, const EmbeddingSet& gallery, EvalMode mode,
                    const Matrix* itq_train = nullptr, std::uint64_t seed = 0);

}  // namespace threejoin
