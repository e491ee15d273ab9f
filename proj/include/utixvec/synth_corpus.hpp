#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "utixvec/binary_io.hpp"

namespace utixvec {

inline constexpr std::size_t kControlPoints = 16;
inline constexpr std::size_t kLatentDim = 8;
// [1, a_k, a_i a_j for i <= j]
inline constexpr std::size_t kLiftDim = 1 + kLatentDim + kLatentDim * (kLatentDim + 1) / 2;
inline constexpr std::size_t kSpectrumDim = 80;
inline constexpr std::uint32_t kCorpusFormatVersion = 1;

/// Everything that makes one synthetic speaker distinct. Lengths are
/// fractions of the image height/width so a profile renders at any size.
struct SpeakerProfile {
  std::uint32_t speaker_id = 0;
  std::array<double, kControlPoints> rest_contour{};  // y of each control point
  double contour_left = 0.15;                          // x of the first point
  double contour_right = 0.85;                         // x of the last point
  double thickness = 0.03;
  double gain = 0.8;
  double background = 0.2;
  double deformation_scale = 1.0;
  std::uint64_t speckle_seed = 0;
  std::array<double, kLatentDim> dyn_center{};
  std::array<double, kLatentDim> dyn_range{};
  std::array<double, kLatentDim> dyn_rate{};  // AR(1) coefficient per latent
  std::vector<double> spectral_map;           // [kSpectrumDim, kLiftDim] row-major
};

/// Probe misalignment of one recording session, in pixels of the 64x128
/// reference frame (rescaled for other image sizes).
struct SessionTransform {
  std::uint32_t session_id = 0;
  double dx = 0.0;
  double dy = 0.0;
  double angle_deg = 0.0;
  double gain = 1.0;
};

struct Utterance {
  std::uint32_t speaker_id = 0;
  std::uint32_t session_id = 0;
  std::uint32_t utterance_id = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t length = 0;
  std::vector<float> frames;   // [length, height, width] in [0, 1]
  std::vector<float> spectra;  // [length, 80] in (-1, 1)
};

/// Frame span [start, start + length) of an utterance.
struct ChunkSpan {
  std::size_t start = 0;
  std::size_t length = 0;
};

SpeakerProfile sample_speaker(std::uint64_t corpus_seed, std::uint32_t speaker_index);
SessionTransform sample_session(std::uint64_t corpus_seed, std::uint32_t speaker_index,
                                std::uint32_t session_id);

/// Feature lift shared by all speakers: constant, linear and degree-2 terms.
std::array<double, kLiftDim> feature_lift(const std::array<double, kLatentDim>& a);

/// Renders `duration_frames` frames and their spectra. Throws
/// InputTooShortError when the duration is below 21 frames.
Utterance synth_utterance(const SpeakerProfile& profile, const SessionTransform& transform,
                          std::size_t duration_frames, std::uint64_t utterance_seed,
                          std::size_t height = 64, std::size_t width = 128);

/// Non-overlapping consecutive spans of exactly chunk_len frames; the
/// remainder is dropped. Throws ConfigError for chunk_len < 21.
std::vector<ChunkSpan> chunk_utterance(std::size_t utterance_length, std::size_t chunk_len);

enum class Split { kTrain, kDev, kTest };
std::string to_string(Split split);
Split parse_split(const std::string& name);

enum class SpeakerRole { kXVector, kHeldOut };

struct CorpusConfig {
  std::uint64_t seed = 1;
  std::size_t xvector_speakers = 20;
  std::size_t heldout_speakers = 10;
  std::size_t sessions = 2;
  std::size_t utterances_per_session = 8;
  std::size_t min_frames = 300;
  std::size_t max_frames = 500;
  std::size_t chunk_len = 164;
  std::size_t image_h = 64;
  std::size_t image_w = 128;
  double train_ratio = 0.6;
  double dev_ratio = 0.1;
  double test_ratio = 0.3;

  /// Throws ConfigError on ratios not summing to 1 (within 1e-9) or bad sizes.
  void validate() const;
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

/// Number of (train, dev, test) items for n chunks: dev and test are floored,
/// the remainder goes to train.
std::array<std::size_t, 3> split_counts(std::size_t n, double dev_ratio, double test_ratio);

struct ChunkInfo {
  std::uint32_t chunk_id = 0;
  std::uint32_t speaker_id = 0;
  std::uint32_t session_id = 0;
  std::uint32_t utterance_id = 0;
  std::size_t start_frame = 0;
  std::size_t length = 0;
  Split split = Split::kTrain;
  std::uint64_t offset = 0;  // byte offset of the record in the data file
};

struct SpeakerEntry {
  std::uint32_t speaker_id = 0;
  SpeakerRole role = SpeakerRole::kXVector;
  std::size_t sessions = 0;
  std::size_t utterances = 0;
  std::size_t chunks = 0;
};

struct CorpusManifest {
  CorpusConfig config;
  std::string data_file = "corpus.utsc";
  std::vector<SpeakerEntry> speakers;
  std::vector<ChunkInfo> chunks;
};

nlohmann::json manifest_to_json(const CorpusManifest& m);
CorpusManifest manifest_from_json(const nlohmann::json& j);

/// Utterance `utterance` of `session` for speaker `speaker` exactly as
/// build_corpus renders it (seed and duration derived from the config).
Utterance corpus_utterance(const CorpusConfig& config, std::uint32_t speaker,
                           std::uint32_t session, std::uint32_t utterance);

/// Generates every speaker, session and utterance, writes `corpus.utsc` and
/// `manifest.json` under `out_dir` and returns the manifest.
CorpusManifest build_corpus(const CorpusConfig& config, const std::string& out_dir);

struct Chunk {
  ChunkInfo info;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> frames;   // [length, height, width]
  std::vector<float> spectra;  // [length, 80]
};

/// Streams chunk records into a "UTSC" data file.
class CorpusWriter {
 public:
  CorpusWriter(const std::string& path, std::size_t height, std::size_t width);
  /// Appends one record and returns its byte offset.
  std::uint64_t append(const ChunkInfo& info, const float* frames, const float* spectra);
  void close() { out_.close(); }

 private:
  BinaryWriter out_;
  std::size_t height_, width_;
};

/// Random access over a corpus directory. Every read re-validates the record
/// header against the manifest; mismatches and truncation raise
/// CorruptionError naming the offset.
class CorpusReader {
 public:
  explicit CorpusReader(const std::string& dir);

  const CorpusManifest& manifest() const { return manifest_; }
  std::size_t size() const { return manifest_.chunks.size(); }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  Chunk read(std::size_t index);

  /// Frames [start, start + count) of one chunk into out ([count, H, W]).
  void read_frames(std::size_t index, std::size_t start, std::size_t count, std::span<float> out);
  /// Spectra [start, start + count) of one chunk into out ([count, 80]).
  void read_spectra(std::size_t index, std::size_t start, std::size_t count, std::span<float> out);

 private:
  const ChunkInfo& check_record(std::size_t index);

  CorpusManifest manifest_;
  std::unique_ptr<BinaryReader> data_;
  std::size_t height_ = 0, width_ = 0;
};

CorpusReader read_corpus(const std::string& dir);

}  // namespace utixvec
