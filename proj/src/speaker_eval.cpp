#include "utixvec/speaker_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "utixvec/binary_io.hpp"
#include "utixvec/errors.hpp"
#include "utixvec/rng.hpp"

namespace utixvec {

using nlohmann::json;

namespace {

constexpr std::string_view kMagic = "UXVE";
constexpr std::uint64_t kHeaderBytes = 16;

double norm(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

std::size_t common_width(const std::vector<Embedding>& set) {
  if (set.empty()) return 0;
  const std::size_t width = set.front().vector.size();
  for (std::size_t i = 1; i < set.size(); ++i) {
    if (set[i].vector.size() != width) {
      throw DataError("embedding " + std::to_string(i) + " has width " +
                      std::to_string(set[i].vector.size()) + ", expected " +
                      std::to_string(width));
    }
  }
  return width;
}

// Distance with both norms precomputed; same arithmetic as cosine_distance.
double distance_with_norms(std::span<const float> a, double na, std::span<const float> b,
                           double nb) {
  double dot = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) dot += static_cast<double>(a[k]) * b[k];
  return std::clamp(1.0 - dot / (na * nb), 0.0, 2.0);
}

std::vector<double> norms_of(const std::vector<Embedding>& set) {
  std::vector<double> out(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    out[i] = norm(set[i].vector);
    if (out[i] == 0.0) {
      throw DomainError("embedding " + std::to_string(i) + " is the zero vector");
    }
  }
  return out;
}

std::size_t bin_of(double d, std::size_t bins) {
  const auto b = static_cast<std::size_t>(d / 2.0 * static_cast<double>(bins));
  return std::min(b, bins - 1);
}

}  // namespace

std::string format_number(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

double cosine_distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine_distance: widths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine_distance: zero-norm vector");
  return distance_with_norms(a, na, b, nb);
}

KnnResult knn_loo(const std::vector<Embedding>& set) {
  if (set.size() < 2) throw DataError("knn_loo needs at least two embeddings");
  common_width(set);
  const auto norms = norms_of(set);
  const std::size_t n = set.size();

  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = distance_with_norms(set[i].vector, norms[i], set[j].vector, norms[j]);
      dist[i * n + j] = d;
      dist[j * n + i] = d;
    }
  }

  KnnResult r;
  r.nearest.resize(n);
  r.distance.resize(n);
  r.correct.resize(n);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = i == 0 ? 1 : 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && dist[i * n + j] < dist[i * n + best]) best = j;
    }
    r.nearest[i] = best;
    r.distance[i] = dist[i * n + best];
    r.correct[i] = set[best].speaker_id == set[i].speaker_id;
    if (!r.correct[i]) ++wrong;
  }
  r.error_rate = static_cast<double>(wrong) / static_cast<double>(n);
  return r;
}

PairHistogram pair_histogram(const std::vector<Embedding>& set, std::size_t n_pairs,
                             std::size_t bins, std::uint64_t seed) {
  if (bins == 0) throw ConfigError("pair_histogram: bins must be positive");
  if (n_pairs == 0) throw ConfigError("pair_histogram: n_pairs must be positive");
  common_width(set);
  const auto norms = norms_of(set);
  const std::size_t n = set.size();

  // Items grouped by speaker: `order` lists indices speaker by speaker and
  // each group occupies [start, start + count) of it.
  std::map<std::uint32_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[set[i].speaker_id].push_back(i);
  std::vector<std::size_t> order;
  struct Group {
    std::size_t start, count;
  };
  std::vector<Group> group_list;
  std::vector<std::size_t> group_of(n);
  for (const auto& [speaker, members] : groups) {
    group_list.push_back({order.size(), members.size()});
    for (auto i : members) {
      group_of[i] = group_list.size() - 1;
      order.push_back(i);
    }
  }

  PairHistogram h;
  h.bins = bins;
  h.n_pairs = n_pairs;
  h.seed = seed;
  std::vector<std::uint64_t> same_weight;  // pairs inside each group, cumulative
  for (const auto& g : group_list) {
    h.same_population += static_cast<std::uint64_t>(g.count) * (g.count - 1) / 2;
    same_weight.push_back(h.same_population);
  }
  h.diff_population = static_cast<std::uint64_t>(n) * (n - 1) / 2 - h.same_population;
  if (h.same_population == 0) throw DataError("pair_histogram: no same-speaker pair exists");
  if (h.diff_population == 0) {
    throw DataError("pair_histogram: no different-speaker pair exists");
  }

  // Cumulative count of ordered cross-speaker pairs by first item, so that
  // drawing a first item by weight and then a uniform partner from the other
  // speakers is uniform over the population.
  std::vector<std::uint64_t> diff_weight(n);
  std::uint64_t acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += n - group_list[group_of[i]].count;
    diff_weight[i] = acc;
  }

  auto pick = [](const std::vector<std::uint64_t>& cumulative, std::uint64_t r) {
    return static_cast<std::size_t>(
        std::upper_bound(cumulative.begin(), cumulative.end(), r) - cumulative.begin());
  };

  Rng rng(seed);
  h.same.assign(bins, 0.0);
  h.diff.assign(bins, 0.0);
  double same_sum = 0.0, diff_sum = 0.0;
  for (std::size_t s = 0; s < n_pairs; ++s) {
    const auto& g = group_list[pick(same_weight, rng.below(h.same_population))];
    const std::size_t a = rng.below(g.count);
    std::size_t b = rng.below(g.count - 1);
    if (b >= a) ++b;
    const std::size_t i = order[g.start + a], j = order[g.start + b];
    const double d = distance_with_norms(set[i].vector, norms[i], set[j].vector, norms[j]);
    h.same[bin_of(d, bins)] += 1.0;
    same_sum += d;
  }
  for (std::size_t s = 0; s < n_pairs; ++s) {
    const std::size_t i = pick(diff_weight, rng.below(acc));
    const auto& g = group_list[group_of[i]];
    std::size_t k = rng.below(n - g.count);
    if (k >= g.start) k += g.count;
    const std::size_t j = order[k];
    const double d = distance_with_norms(set[i].vector, norms[i], set[j].vector, norms[j]);
    h.diff[bin_of(d, bins)] += 1.0;
    diff_sum += d;
  }
  const double total = static_cast<double>(n_pairs);
  for (auto& m : h.same) m /= total;
  for (auto& m : h.diff) m /= total;
  h.same_mean = same_sum / total;
  h.diff_mean = diff_sum / total;
  return h;
}

void write_embeddings(const std::string& path, const std::vector<Embedding>& set) {
  const std::size_t width = common_width(set);
  BinaryWriter out(path);
  out.magic(kMagic);
  out.u32(kEmbeddingFormatVersion);
  out.u32(static_cast<std::uint32_t>(set.size()));
  out.u32(static_cast<std::uint32_t>(width));
  for (const auto& e : set) {
    out.u32(e.speaker_id);
    out.u32(e.session_id);
    out.u32(e.chunk_id);
    out.f32s(e.vector);
  }
  out.close();
}

std::vector<Embedding> read_embeddings(const std::string& path) {
  BinaryReader in(path);
  in.expect_magic(kMagic);
  const auto version = in.u32();
  if (version != kEmbeddingFormatVersion) {
    throw FormatError(path + ": embedding format version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(kEmbeddingFormatVersion) +
                      ")");
  }
  const std::uint64_t count = in.u32();
  const std::uint64_t width = in.u32();
  const std::uint64_t expected = kHeaderBytes + count * (12 + 4 * width);
  if (expected != in.size()) {
    throw CorruptionError(path + ": header promises " + std::to_string(count) + " records of width " +
                          std::to_string(width) + " (" + std::to_string(expected) +
                          " bytes) but the file has " + std::to_string(in.size()) +
                          " bytes; mismatch after offset " +
                          std::to_string(std::min(expected, in.size())));
  }
  std::vector<Embedding> set(count);
  for (auto& e : set) {
    e.speaker_id = in.u32();
    e.session_id = in.u32();
    e.chunk_id = in.u32();
    e.vector.resize(width);
    in.f32s(e.vector);
  }
  return set;
}

std::string histogram_csv(const PairHistogram& h) {
  std::string out = "bin_low,bin_high,same_mass,diff_mass\n";
  for (std::size_t b = 0; b < h.bins; ++b) {
    out += format_number(h.bin_low(b)) + "," + format_number(h.bin_high(b)) + "," +
           format_number(h.same[b]) + "," + format_number(h.diff[b]) + "\n";
  }
  return out;
}

json histogram_summary(const PairHistogram& h) {
  return json{{"bins", h.bins},
              {"n_pairs", h.n_pairs},
              {"seed", h.seed},
              {"same_mean", h.same_mean},
              {"diff_mean", h.diff_mean},
              {"mean_gap", h.diff_mean - h.same_mean},
              {"same_population", h.same_population},
              {"diff_population", h.diff_population}};
}

std::string knn_table_csv(const std::vector<Embedding>& set, const KnnResult& result) {
  std::string out = "index,speaker_id,session_id,chunk_id,nearest,nearest_speaker_id,distance,correct\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& e = set[i];
    const auto j = result.nearest[i];
    out += std::to_string(i) + "," + std::to_string(e.speaker_id) + "," +
           std::to_string(e.session_id) + "," + std::to_string(e.chunk_id) + "," +
           std::to_string(j) + "," + std::to_string(set[j].speaker_id) + "," +
           format_number(result.distance[i]) + "," + (result.correct[i] ? "1" : "0") + "\n";
  }
  return out;
}

json knn_summary(const std::vector<Embedding>& set, const KnnResult& result) {
  std::map<std::uint32_t, int> speakers;
  for (const auto& e : set) speakers[e.speaker_id]++;
  return json{{"items", set.size()},
              {"speakers", speakers.size()},
              {"width", set.empty() ? 0 : set.front().vector.size()},
              {"error_rate", result.error_rate}};
}

}  // namespace utixvec
