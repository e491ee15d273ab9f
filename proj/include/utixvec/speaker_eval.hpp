#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "utixvec/embedding.hpp"

namespace utixvec {

inline constexpr std::uint32_t kEmbeddingFormatVersion = 1;

/// 1 - cos(a, b), accumulated in double and clamped to [0, 2]. Throws
/// DomainError for a zero vector and DimensionError for unequal widths.
double cosine_distance(std::span<const float> a, std::span<const float> b);

struct KnnResult {
  double error_rate = 0.0;
  std::vector<std::size_t> nearest;  // index of the closest other item
  std::vector<double> distance;      // cosine distance to it
  std::vector<bool> correct;         // speaker ids agree
};

/// Leave-one-out 1-NN under cosine distance; ties go to the lowest index.
/// Needs at least two items of one common width (DataError otherwise).
KnnResult knn_loo(const std::vector<Embedding>& set);

struct PairHistogram {
  std::size_t bins = 50;
  std::size_t n_pairs = 10000;
  std::uint64_t seed = 0;
  std::vector<double> same;  // normalized masses over [0, 2]
  std::vector<double> diff;
  double same_mean = 0.0;
  double diff_mean = 0.0;
  std::uint64_t same_population = 0;  // unordered pairs available
  std::uint64_t diff_population = 0;

  double bin_low(std::size_t b) const { return 2.0 * static_cast<double>(b) / bins; }
  double bin_high(std::size_t b) const { return 2.0 * static_cast<double>(b + 1) / bins; }
};

/// Draws n_pairs same-speaker and n_pairs different-speaker unordered pairs,
/// uniformly and with replacement from each population, and bins their
/// cosine distances. Throws DataError when either population is empty.
PairHistogram pair_histogram(const std::vector<Embedding>& set, std::size_t n_pairs = 10000,
                             std::size_t bins = 50, std::uint64_t seed = 0);

// "UXVE" files: magic, u32 version, u32 count, u32 width, then per record
// speaker_id, session_id, chunk_id (u32 each) and width f32 values.
void write_embeddings(const std::string& path, const std::vector<Embedding>& set);
std::vector<Embedding> read_embeddings(const std::string& path);

// Report writers. Numbers are printed with %.17g so reruns compare bytewise.
std::string histogram_csv(const PairHistogram& h);
nlohmann::json histogram_summary(const PairHistogram& h);
std::string knn_table_csv(const std::vector<Embedding>& set, const KnnResult& result);
nlohmann::json knn_summary(const std::vector<Embedding>& set, const KnnResult& result);

std::string format_number(double value);

}  // namespace utixvec
