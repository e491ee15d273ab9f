#include "utixvec/speaker_eval.hpp"

#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "test_util.hpp"
#include "utixvec/errors.hpp"
#include "utixvec/rng.hpp"

namespace utixvec {
namespace {

using testing::read_bytes;
using testing::TempDir;
using testing::write_bytes;

std::vector<Embedding> random_set(std::size_t n, std::size_t width, std::size_t speakers,
                                  std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Embedding> set(n);
  for (std::size_t i = 0; i < n; ++i) {
    set[i].speaker_id = static_cast<std::uint32_t>(rng.below(speakers));
    set[i].session_id = static_cast<std::uint32_t>(rng.below(2));
    set[i].chunk_id = static_cast<std::uint32_t>(i);
    set[i].vector.resize(width);
    for (auto& x : set[i].vector) x = static_cast<float>(rng.normal());
  }
  return set;
}

// Speakers sit around distinct random centres with small per-item noise.
std::vector<Embedding> clustered_set(std::size_t speakers, std::size_t per_speaker,
                                     std::size_t width, double noise, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> centres(speakers, std::vector<double>(width));
  for (auto& c : centres) {
    for (auto& x : c) x = rng.normal();
  }
  std::vector<Embedding> set;
  for (std::size_t s = 0; s < speakers; ++s) {
    for (std::size_t k = 0; k < per_speaker; ++k) {
      Embedding e;
      e.speaker_id = static_cast<std::uint32_t>(s);
      e.chunk_id = static_cast<std::uint32_t>(set.size());
      for (std::size_t d = 0; d < width; ++d) {
        e.vector.push_back(static_cast<float>(centres[s][d] + noise * rng.normal()));
      }
      set.push_back(e);
    }
  }
  return set;
}

std::vector<std::vector<double>> as_double(const std::vector<Embedding>& set) {
  std::vector<std::vector<double>> out;
  for (const auto& e : set) out.emplace_back(e.vector.begin(), e.vector.end());
  return out;
}

TEST(CosineDistanceTest, KnownValues) {
  const std::vector<float> v{0.3f, -1.2f, 2.0f};
  const std::vector<float> neg{-0.3f, 1.2f, -2.0f};
  EXPECT_NEAR(cosine_distance(v, v), 0.0, 1e-12);
  EXPECT_NEAR(cosine_distance(v, neg), 2.0, 1e-12);
  const std::vector<float> ex{1, 0, 0}, ey{0, 1, 0};
  EXPECT_DOUBLE_EQ(cosine_distance(ex, ey), 1.0);
}

TEST(CosineDistanceTest, SymmetricAndScaleInvariant) {
  auto set = random_set(40, 12, 4, 3);
  for (std::size_t i = 0; i + 1 < set.size(); i += 2) {
    const auto& a = set[i].vector;
    const auto& b = set[i + 1].vector;
    EXPECT_EQ(cosine_distance(a, b), cosine_distance(b, a));
    std::vector<float> scaled(a);
    for (auto& x : scaled) x *= 7.5f;
    EXPECT_NEAR(cosine_distance(scaled, b), cosine_distance(a, b), 1e-6);
    const double d = cosine_distance(a, b);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 2.0);
  }
}

TEST(CosineDistanceTest, RejectsZeroAndMismatchedVectors) {
  const std::vector<float> zero(4, 0.0f), one(4, 1.0f), three(3, 1.0f);
  EXPECT_THROW(cosine_distance(zero, one), DomainError);
  EXPECT_THROW(cosine_distance(one, three), DimensionError);
}

TEST(CosineDistanceTest, MatchesOracle) {
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    auto set = random_set(2, 1 + trial % 17, 2, 100 + trial);
    const auto d = as_double(set);
    EXPECT_NEAR(cosine_distance(set[0].vector, set[1].vector), oracle::cosine_distance(d[0], d[1]),
                1e-12);
  }
}

TEST(KnnTest, IdenticalPairsPerSpeakerGiveZeroError) {
  std::vector<Embedding> set{{{1, 0, 0}, 0, 0, 0}, {{1, 0, 0}, 0, 0, 1},
                             {{0, 1, 0}, 1, 0, 2}, {{0, 1, 0}, 1, 0, 3}};
  const auto r = knn_loo(set);
  EXPECT_EQ(r.error_rate, 0.0);
  EXPECT_EQ(r.nearest, (std::vector<std::size_t>{1, 0, 3, 2}));
}

TEST(KnnTest, OneVectorPerSpeakerGivesFullError) {
  auto set = random_set(12, 5, 1, 9);
  for (std::size_t i = 0; i < set.size(); ++i) set[i].speaker_id = static_cast<std::uint32_t>(i);
  EXPECT_EQ(knn_loo(set).error_rate, 1.0);
}

TEST(KnnTest, TiesGoToLowestIndex) {
  std::vector<Embedding> set{{{1, 0}, 0, 0, 0}, {{0, 1}, 1, 0, 1}, {{0, 2}, 2, 0, 2},
                             {{0, 3}, 3, 0, 3}};
  const auto r = knn_loo(set);
  EXPECT_EQ(r.nearest[0], 1u);
  EXPECT_EQ(r.nearest[1], 2u);
  EXPECT_EQ(r.nearest[3], 1u);
}

TEST(KnnTest, MatchesExhaustiveOracle) {
  for (std::uint64_t trial = 0; trial < 60; ++trial) {
    const std::size_t n = 2 + (trial * 37) % 199;
    auto set = random_set(n, 3 + trial % 9, 2 + trial % 6, 1000 + trial);
    const auto r = knn_loo(set);
    const auto expected = oracle::nearest_other(as_double(set));
    ASSERT_EQ(r.nearest, expected) << "trial " << trial;
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < n; ++i) wrong += set[expected[i]].speaker_id != set[i].speaker_id;
    EXPECT_EQ(r.error_rate, static_cast<double>(wrong) / static_cast<double>(n));
  }
}

TEST(KnnTest, InvariantToCommonRotation) {
  auto set = random_set(60, 2, 5, 21);
  auto rotated = set;
  const double a = 0.7;
  for (auto& e : rotated) {
    const float x = e.vector[0], y = e.vector[1];
    e.vector[0] = static_cast<float>(std::cos(a) * x - std::sin(a) * y);
    e.vector[1] = static_cast<float>(std::sin(a) * x + std::cos(a) * y);
  }
  const auto r1 = knn_loo(set);
  const auto r2 = knn_loo(rotated);
  EXPECT_EQ(r1.error_rate, r2.error_rate);
  for (std::size_t i = 0; i < set.size(); ++i) EXPECT_NEAR(r1.distance[i], r2.distance[i], 1e-6);
}

TEST(KnnTest, RejectsBadSets) {
  EXPECT_THROW(knn_loo(random_set(1, 3, 1, 1)), DataError);
  auto set = random_set(5, 3, 2, 1);
  set[3].vector.push_back(1.0f);
  EXPECT_THROW(knn_loo(set), DataError);
}

TEST(PairHistogramTest, MassesSumToOneAndBinsPartitionRange) {
  const auto set = clustered_set(6, 8, 10, 0.5, 4);
  const auto h = pair_histogram(set, 10000, 50, 3);
  EXPECT_NEAR(std::accumulate(h.same.begin(), h.same.end(), 0.0), 1.0, 1e-9);
  EXPECT_NEAR(std::accumulate(h.diff.begin(), h.diff.end(), 0.0), 1.0, 1e-9);
  for (std::size_t b = 0; b < h.bins; ++b) {
    EXPECT_GE(h.same[b], 0.0);
    EXPECT_GE(h.diff[b], 0.0);
    if (b > 0) EXPECT_EQ(h.bin_low(b), h.bin_high(b - 1));
  }
  EXPECT_EQ(h.bin_low(0), 0.0);
  EXPECT_EQ(h.bin_high(h.bins - 1), 2.0);
  EXPECT_EQ(h.same_population, 6u * 28u);
  EXPECT_EQ(h.diff_population, 48u * 47u / 2u - 6u * 28u);
}

TEST(PairHistogramTest, ClusteredSpeakersAreCloserWithinSpeaker) {
  const auto h = pair_histogram(clustered_set(8, 10, 16, 0.4, 5));
  EXPECT_LT(h.same_mean + 0.05, h.diff_mean);
}

TEST(PairHistogramTest, IdenticalVectorsPutSameMassInFirstBin) {
  std::vector<Embedding> set;
  for (std::uint32_t i = 0; i < 6; ++i) set.push_back({{1.0f, 2.0f, 3.0f}, i % 2, 0, i});
  const auto h = pair_histogram(set, 500, 50, 1);
  EXPECT_EQ(h.same[0], 1.0);
  EXPECT_EQ(h.diff[0], 1.0);
}

TEST(PairHistogramTest, SamplesEachPopulationUniformly) {
  // Speaker 0 has 2 items (1 pair), speaker 1 has 3 items (3 pairs); every
  // vector is distinct, so each pair lands on its own distance.
  std::vector<Embedding> set{{{1, 0}, 0, 0, 0}, {{0.8f, 0.6f}, 0, 0, 1},
                             {{0, 1}, 1, 0, 2}, {{-0.6f, 0.8f}, 1, 0, 3}, {{-1, 0}, 1, 0, 4}};
  const auto h = pair_histogram(set, 40000, 200, 7);
  EXPECT_EQ(h.same_population, 4u);
  EXPECT_EQ(h.diff_population, 6u);
  // Exact population means, approached by the sample means.
  double same = 0.0, diff = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    for (std::size_t j = i + 1; j < set.size(); ++j) {
      const double d = cosine_distance(set[i].vector, set[j].vector);
      (set[i].speaker_id == set[j].speaker_id ? same : diff) += d;
    }
  }
  EXPECT_NEAR(h.same_mean, same / 4.0, 0.01);
  EXPECT_NEAR(h.diff_mean, diff / 6.0, 0.01);
}

TEST(PairHistogramTest, DeterministicForSeed) {
  const auto set = clustered_set(4, 5, 6, 0.5, 8);
  const auto a = pair_histogram(set, 2000, 50, 42);
  const auto b = pair_histogram(set, 2000, 50, 42);
  EXPECT_EQ(histogram_csv(a), histogram_csv(b));
  EXPECT_EQ(a.same, b.same);
}

TEST(PairHistogramTest, NeedsBothPopulations) {
  std::vector<Embedding> singles{{{1, 0}, 0, 0, 0}, {{0, 1}, 1, 0, 1}};
  EXPECT_THROW(pair_histogram(singles), DataError);
  std::vector<Embedding> one_speaker{{{1, 0}, 0, 0, 0}, {{0, 1}, 0, 0, 1}};
  EXPECT_THROW(pair_histogram(one_speaker), DataError);
}

TEST(EmbeddingFileTest, RoundTripIsByteIdentical) {
  TempDir dir("uxve");
  const auto set = random_set(25, 250, 5, 12);
  write_embeddings(dir.file("a.uxve"), set);
  const auto back = read_embeddings(dir.file("a.uxve"));
  ASSERT_EQ(back.size(), set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    EXPECT_EQ(back[i].vector, set[i].vector);
    EXPECT_EQ(back[i].speaker_id, set[i].speaker_id);
    EXPECT_EQ(back[i].session_id, set[i].session_id);
    EXPECT_EQ(back[i].chunk_id, set[i].chunk_id);
  }
  write_embeddings(dir.file("b.uxve"), back);
  EXPECT_EQ(read_bytes(dir.file("a.uxve")), read_bytes(dir.file("b.uxve")));
  EXPECT_EQ(read_bytes(dir.file("a.uxve")).size(), 16u + 25u * (12u + 4u * 250u));
}

TEST(EmbeddingFileTest, CorruptionRaisesDocumentedErrors) {
  TempDir dir("uxve");
  const auto path = dir.file("e.uxve");
  write_embeddings(path, random_set(4, 8, 2, 1));
  const auto bytes = read_bytes(path);

  auto bad = bytes;
  bad[0] = 'X';
  write_bytes(path, bad);
  EXPECT_THROW(read_embeddings(path), FormatError);

  bad = bytes;
  bad[4] = 2;
  write_bytes(path, bad);
  EXPECT_THROW(read_embeddings(path), FormatError);

  write_bytes(path, {bytes.begin(), bytes.end() - 3});
  try {
    read_embeddings(path);
    FAIL() << "expected CorruptionError";
  } catch (const CorruptionError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
  }

  auto longer = bytes;
  longer.push_back(0);
  write_bytes(path, longer);
  EXPECT_THROW(read_embeddings(path), CorruptionError);

  write_bytes(path, {bytes.begin(), bytes.begin() + 10});
  EXPECT_THROW(read_embeddings(path), CorruptionError);

  EXPECT_THROW(read_embeddings(dir.file("missing.uxve")), IoError);
}

TEST(EmbeddingFileTest, MixedWidthsAreRejectedOnWrite) {
  TempDir dir("uxve");
  auto set = random_set(3, 4, 2, 1);
  set[1].vector.pop_back();
  EXPECT_THROW(write_embeddings(dir.file("x.uxve"), set), DataError);
}

TEST(ReportTest, CsvAndSummaryShapes) {
  const auto set = clustered_set(3, 4, 5, 0.3, 2);
  const auto h = pair_histogram(set, 100, 50, 9);
  const auto csv = histogram_csv(h);
  EXPECT_EQ(csv.rfind("bin_low,bin_high,same_mass,diff_mass\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 51);
  const auto s = histogram_summary(h);
  EXPECT_EQ(s.at("n_pairs"), 100);
  EXPECT_EQ(s.at("seed"), 9);

  const auto r = knn_loo(set);
  const auto table = knn_table_csv(set, r);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 13);
  EXPECT_EQ(knn_summary(set, r).at("error_rate").get<double>(), r.error_rate);
}

}  // namespace
}  // namespace utixvec
