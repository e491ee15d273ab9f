#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "utixvec/embedding.hpp"
#include "utixvec/netarch.hpp"
#include "utixvec/synth_corpus.hpp"
#include "utixvec/tensor.hpp"

namespace utixvec {

// Optimizer ------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 0.0002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  /// Throws ConfigError unless lr > 0, 0 <= betas < 1 and epsilon > 0.
  /// adam_step itself accepts lr = 0, which leaves parameters unchanged.
  void validate() const;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t t = 0;
};

/// One Adam update of every parameter, in order, from the matching gradient.
/// Buffers are created on the first call. Throws DimensionError when the
/// gradient list or any gradient size disagrees with the parameters.
template <typename T>
void adam_step(const std::vector<Tensor<T>>& params, const std::vector<std::span<const T>>& grads,
               AdamState<T>& state, const AdamConfig& config);

/// Same, taking each gradient from the parameter's own grad buffer (zero when
/// the parameter received none).
template <typename T>
void adam_step(const std::vector<Tensor<T>>& params, AdamState<T>& state, const AdamConfig& config);

// Data -----------------------------------------------------------------------

/// Chunk payloads addressed by position. Reads copy a frame range, so a
/// training step only touches the frames it uses.
class ChunkSource {
 public:
  virtual ~ChunkSource() = default;
  virtual std::size_t size() const = 0;
  virtual const ChunkInfo& info(std::size_t i) const = 0;
  virtual std::size_t height() const = 0;
  virtual std::size_t width() const = 0;
  /// [count, H, W] frames starting at `start`.
  virtual void frames(std::size_t i, std::size_t start, std::size_t count, std::span<float> out) = 0;
  /// [count, 80] spectra starting at `start`.
  virtual void spectra(std::size_t i, std::size_t start, std::size_t count, std::span<float> out) = 0;
};

class MemoryChunks final : public ChunkSource {
 public:
  explicit MemoryChunks(std::vector<Chunk> chunks);

  std::size_t size() const override { return chunks_.size(); }
  const ChunkInfo& info(std::size_t i) const override { return chunks_.at(i).info; }
  std::size_t height() const override { return height_; }
  std::size_t width() const override { return width_; }
  void frames(std::size_t i, std::size_t start, std::size_t count, std::span<float> out) override;
  void spectra(std::size_t i, std::size_t start, std::size_t count, std::span<float> out) override;

 private:
  std::vector<Chunk> chunks_;
  std::size_t height_ = 0, width_ = 0;
};

/// A subset of a corpus on disk, in the given order.
class CorpusChunks final : public ChunkSource {
 public:
  CorpusChunks(CorpusReader& reader, std::vector<std::size_t> indices);

  std::size_t size() const override { return indices_.size(); }
  const ChunkInfo& info(std::size_t i) const override;
  std::size_t height() const override { return reader_->height(); }
  std::size_t width() const override { return reader_->width(); }
  void frames(std::size_t i, std::size_t start, std::size_t count, std::span<float> out) override;
  void spectra(std::size_t i, std::size_t start, std::size_t count, std::span<float> out) override;

 private:
  CorpusReader* reader_;
  std::vector<std::size_t> indices_;
};

/// Manifest indices of the chunks in `split` whose speaker passes `keep`.
std::vector<std::size_t> select_chunks(const CorpusManifest& manifest, Split split,
                                       const std::function<bool(const ChunkInfo&)>& keep = {});

/// Equal-length segments cut from chunks: floor(L / length) consecutive,
/// non-overlapping segments per chunk, labeled by speaker id.
class SegmentSet {
 public:
  SegmentSet(ChunkSource& source, std::size_t length);

  std::size_t size() const { return refs_.size(); }
  std::size_t length() const { return length_; }
  ChunkSource& source() const { return *source_; }
  std::uint32_t label(std::size_t i) const;
  const ChunkInfo& chunk_info(std::size_t i) const;

  /// [B, length, H, W] for the given segment indices.
  Tensor<float> batch(std::span<const std::size_t> indices) const;

 private:
  struct Ref {
    std::size_t chunk;
    std::size_t start;
  };
  ChunkSource* source_;
  std::size_t length_;
  std::vector<Ref> refs_;
};

struct SessionKey {
  std::uint32_t speaker = 0;
  std::uint32_t session = 0;

  auto operator<=>(const SessionKey&) const = default;
};

/// One speaker vector per (speaker, session).
using SessionEmbeddings = std::map<SessionKey, std::vector<float>>;

/// Averages the chunk embeddings of each (speaker, session).
SessionEmbeddings average_by_session(const std::vector<Embedding>& set);

/// Session averages scaled to unit L2 norm, the form fed to a conditioned
/// spectral model. Raw x-vector activations are large enough to swamp the
/// conv features in a freshly initialized head. Throws DomainError for a
/// zero mean.
SessionEmbeddings conditioning_table(const std::vector<Embedding>& set);

/// Every 21-frame window of every chunk, paired with the spectrum of its
/// centre frame.
class WindowSet {
 public:
  explicit WindowSet(ChunkSource& source);

  std::size_t size() const { return refs_.size(); }
  ChunkSource& source() const { return *source_; }
  const ChunkInfo& chunk_info(std::size_t i) const;

  /// Windows [B, 21, H, W] and centre spectra [B, 80].
  Tensor<float> windows(std::span<const std::size_t> indices) const;
  Tensor<float> targets(std::span<const std::size_t> indices) const;

 private:
  struct Ref {
    std::size_t chunk;
    std::size_t start;
  };
  ChunkSource* source_;
  std::vector<Ref> refs_;
};

/// Rows of `table` for each window's (speaker, session); throws DataError
/// naming the first missing key.
Tensor<float> embedding_rows(const WindowSet& set, std::span<const std::size_t> indices,
                             const SessionEmbeddings& table);

// Training -------------------------------------------------------------------

enum class Task { kXVector, kSpectral };
std::string to_string(Task task);

/// 16 for segments up to 41 frames, 8 up to 82, 4 beyond.
std::size_t xvector_batch_size(std::size_t segment_len);
inline constexpr std::size_t kSpectralBatchSize = 100;

struct TrainConfig {
  Task task = Task::kXVector;
  std::size_t batch_size = 0;  // 0 picks the task default
  std::size_t epochs = 30;
  std::uint64_t seed = 1;
  // Stop once this many epochs pass without a new best dev metric; 0 runs
  // every epoch.
  std::size_t patience = 0;
  // Stop as soon as the dev metric reaches this value or lower; negative
  // disables.
  double target_metric = -1.0;
  // Global gradient-norm clip; 0 leaves gradients untouched.
  double clip_norm = 0.0;
  std::string transfer_source;   // spectral model file to start from
  std::string embedding_source;  // UXVE file, read through conditioning_table()

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const AdamConfig& c);
void from_json(const nlohmann::json& j, AdamConfig& c);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double dev_loss = 0.0;
  double dev_metric = 0.0;  // error rate (xvector) or MSE (spectral)
  double seconds = 0.0;
};

struct TrainReport {
  Task task = Task::kXVector;
  std::size_t train_items = 0;  // segments or windows
  double initial_dev_metric = 0.0;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based; 0 if no epoch ran
  double best_dev_metric = 0.0;
  double seconds = 0.0;

  /// One JSON object per epoch, then a summary object. Timings are left out
  /// unless asked for so that reruns compare bytewise.
  std::string to_json_lines(bool with_timing = false) const;
};

/// Called after each epoch; returning false stops training.
using EpochCallback = std::function<bool(const EpochRecord&)>;

/// Minimizes softmax cross-entropy over shuffled minibatches, evaluates the
/// dev set after every epoch and leaves `model` holding the best-dev
/// parameters. Throws DataError for an empty set or a label outside the
/// model's speakers, NumericalError when the loss stops being finite.
TrainReport train_xvector(XVectorModel<float>& model, const SegmentSet& train,
                          const SegmentSet& dev, const TrainConfig& config,
                          const AdamConfig& adam, const EpochCallback& on_epoch = {});

/// Minimizes MSE between predicted and centre-frame spectra. When the model
/// takes an embedding, `embeddings` (or the file named by
/// config.embedding_source) supplies one per (speaker, session). When
/// config.transfer_source is set, initialize_from() runs before training.
TrainReport train_spectral(SpectralModel<float>& model, const WindowSet& train,
                           const WindowSet& dev, const TrainConfig& config,
                           const AdamConfig& adam, const SessionEmbeddings* embeddings = nullptr,
                           const EpochCallback& on_epoch = {});

/// Backbone copied from `source`; the head as well when both heads have the
/// same shape.
void initialize_from(const SpectralModel<float>& source, SpectralModel<float>& target);

// Metrics --------------------------------------------------------------------

/// Fraction of rows of `scores` [N, K] whose argmax (lowest index on ties)
/// differs from the label. Throws DataError when empty.
double classification_error(const Tensor<float>& scores, std::span<const std::uint32_t> labels);

struct ClassificationResult {
  double error_rate = 0.0;
  double mean_loss = 0.0;
};

ClassificationResult eval_classification(const XVectorModel<float>& model, const SegmentSet& set);

/// Mean over items and elements of (pred - target)^2, accumulated in double.
double mean_squared_error(std::span<const float> pred, std::span<const float> target);

/// Dev/test MSE of a spectral model: every window of every chunk, evaluated
/// densely.
double eval_mse(const SpectralModel<float>& model, const WindowSet& set,
                const SessionEmbeddings* embeddings = nullptr);

}  // namespace utixvec
