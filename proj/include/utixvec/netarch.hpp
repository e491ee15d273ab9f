#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "utixvec/embedding.hpp"
#include "utixvec/ops.hpp"
#include "utixvec/tensor.hpp"

namespace utixvec {

/// Width of every spectral target vector (mel bands).
inline constexpr std::size_t kSpectralDim = 80;
inline constexpr std::size_t kFc1Dim = 500;
inline constexpr std::size_t kFc2Dim = 250;

struct ConvLayerSpec {
  std::size_t channels = 1;
  Dims3 kernel{1, 1, 1};  // (time, height, width)
  Dims3 strides{1, 1, 1};

  bool operator==(const ConvLayerSpec&) const = default;
};

/// Frame-level convolutional stack shared by the speaker and spectral networks.
///
/// Layer 1 is a full 3D convolution over 5-frame blocks with temporal stride
/// 4. Layers 2-4 are factorized: a kernel with both a temporal and a spatial
/// extent runs as a spatial stage followed by a temporal stage; a kernel with
/// time extent 1 is spatial only. Each conv is followed by swish, and a max
/// pool follows layers 2 and 4. Padding is valid throughout, so the stack
/// consumes exactly `input_frames` frames per output position.
struct BackboneConfig {
  std::size_t input_frames = 21;
  std::size_t image_h = 64;
  std::size_t image_w = 128;
  std::array<ConvLayerSpec, 4> convs{{
      {8, {5, 5, 5}, {4, 2, 2}},
      {16, {1, 3, 3}, {1, 1, 1}},
      {16, {1, 3, 3}, {1, 1, 1}},
      {16, {5, 3, 3}, {1, 1, 1}},
  }};
  Dims3 pool_window{1, 2, 2};
  std::size_t frame_fc_dim = 500;

  bool operator==(const BackboneConfig&) const = default;

  /// Throws ConfigError when the layer stack does not map input_frames
  /// frames of image_h x image_w onto exactly one temporal position.
  void validate() const;

  /// Flattened conv output width for one window.
  std::size_t feature_width() const;

  /// Frames seen by one output position.
  std::size_t receptive_field() const;

  /// Tiny variant (8x16 images, few channels) used for gradient checks.
  static BackboneConfig toy();

  /// Same topology, resized for test-scale images.
  static BackboneConfig for_image(std::size_t height, std::size_t width);
};

/// Name of the first field on which two configs disagree, or empty.
std::string first_difference(const BackboneConfig& a, const BackboneConfig& b);

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct DenseLayer {
  Tensor<T> weight;
  Tensor<T> bias;

  Tensor<T> operator()(const Tensor<T>& x) const { return dense(x, weight, bias); }
};

template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& config, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }

  /// [N, input_frames, H, W] -> [N, F]: each sample is one window.
  Tensor<T> window_features(const Tensor<T>& windows) const;

  /// [N, L, H, W] -> [N, L - input_frames + 1, F]: every hop-1 window of each
  /// sample, evaluated in one pass by turning temporal strides into dilation.
  Tensor<T> dense_features(const Tensor<T>& frames) const;

  std::vector<NamedParameter<T>> parameters() const;

  template <typename U>
  Backbone<U> cast() const;

 private:
  template <typename>
  friend class Backbone;

  struct Layer {
    Tensor<T> kernel;    // full kernel, or the spatial factor
    Tensor<T> temporal;  // temporal factor, undefined unless factorized
    Tensor<T> bias;
  };

  Tensor<T> run(const Tensor<T>& input, bool dense) const;

  BackboneConfig config_;
  std::array<Layer, 4> layers_;
};

struct XVectorConfig {
  BackboneConfig backbone;
  std::size_t num_speakers = 50;

  bool operator==(const XVectorConfig&) const = default;
  void validate() const;
};

template <typename T>
struct SegmentActivations {
  Tensor<T> fc1_linear;
  Tensor<T> fc1;
  Tensor<T> fc2_linear;
  Tensor<T> fc2;
  Tensor<T> logits;
};

/// Speaker classifier: frame-level stack, temporal mean pooling, two fully
/// connected segment layers and a speaker softmax.
template <typename T>
class XVectorModel {
 public:
  XVectorModel() = default;
  XVectorModel(const XVectorConfig& config, std::uint64_t seed);

  const XVectorConfig& config() const { return config_; }
  const Backbone<T>& backbone() const { return backbone_; }

  /// [B, L, H, W] -> [B, L - 20, D] (or [L, H, W] -> [L - 20, D]).
  Tensor<T> frame_level(const Tensor<T>& frames) const;

  /// Same result as frame_level, computed by materializing every 21-frame
  /// window as a separate batch item. Reference path for tests.
  Tensor<T> frame_level_windowed(const Tensor<T>& frames) const;

  /// Segment part applied to pooled frame-level vectors [B, D].
  SegmentActivations<T> segment(const Tensor<T>& pooled) const;

  /// Whole network on a batch [B, L, H, W] of equal-length segments.
  SegmentActivations<T> forward(const Tensor<T>& frames) const;

  std::vector<NamedParameter<T>> parameters() const;

  const DenseLayer<T>& output_layer() const { return out_; }
  DenseLayer<T>& output_layer() { return out_; }

  template <typename U>
  XVectorModel<U> cast() const;

 private:
  template <typename>
  friend class XVectorModel;

  XVectorConfig config_;
  Backbone<T> backbone_;
  DenseLayer<T> frame_fc_;
  DenseLayer<T> fc1_;
  DenseLayer<T> fc2_;
  DenseLayer<T> out_;
};

struct SpectralConfig {
  BackboneConfig backbone;
  std::size_t embed_dim = 0;

  bool operator==(const SpectralConfig&) const = default;
  void validate() const;
};

/// Frame-by-frame regressor from a 21-frame window to an 80-band spectrum.
/// When embed_dim > 0 a speaker embedding is appended to the flattened conv
/// features before the hidden dense layer.
template <typename T>
class SpectralModel {
 public:
  SpectralModel() = default;
  SpectralModel(const SpectralConfig& config, std::uint64_t seed);

  const SpectralConfig& config() const { return config_; }
  const Backbone<T>& backbone() const { return backbone_; }
  Backbone<T>& backbone() { return backbone_; }

  /// windows [N, 21, H, W], embeddings [N, E] (undefined iff embed_dim == 0)
  /// -> [N, 80].
  Tensor<T> forward(const Tensor<T>& windows, const Tensor<T>& embeddings = {}) const;

  /// frames [L, H, W] -> [L - 20, 80], one prediction per window centre.
  Tensor<T> forward_dense(const Tensor<T>& frames, std::span<const T> embedding = {}) const;

  std::vector<NamedParameter<T>> parameters() const;

  const DenseLayer<T>& head() const { return head_fc_; }
  DenseLayer<T>& head() { return head_fc_; }

  template <typename U>
  SpectralModel<U> cast() const;

 private:
  template <typename>
  friend class SpectralModel;

  Tensor<T> head_forward(const Tensor<T>& features, const Tensor<T>& embeddings) const;

  SpectralConfig config_;
  Backbone<T> backbone_;
  DenseLayer<T> head_fc_;
  DenseLayer<T> out_;
};

// Free-standing entry points -------------------------------------------------

/// frames [L, H, W], L >= 21 -> [L - 20, D].
template <typename T>
Tensor<T> frame_level_forward(const XVectorModel<T>& model, const Tensor<T>& frames);

/// frames [L, H, W] -> speaker posteriors [num_speakers].
template <typename T>
Tensor<T> xvector_forward(const XVectorModel<T>& model, const Tensor<T>& frames);

/// Speaker vector for one segment [L, H, W].
Embedding extract_embedding(const XVectorModel<float>& model, const Tensor<float>& frames,
                            const EmbeddingSpec& spec);

/// Embeddings for a batch of equal-length segments [B, L, H, W].
std::vector<std::vector<float>> extract_embeddings(const XVectorModel<float>& model,
                                                   const Tensor<float>& frames,
                                                   const EmbeddingSpec& spec);

std::size_t embedding_width(const XVectorConfig& config, const EmbeddingSpec& spec);

/// window [21, H, W] -> [80].
template <typename T>
Tensor<T> spectral_forward(const SpectralModel<T>& model, const Tensor<T>& window,
                           std::optional<std::span<const T>> embedding = std::nullopt);

/// Copies every backbone parameter of `source` into `target`; head layers of
/// `target` are left as initialized. Throws ConfigError naming the first
/// differing backbone field.
template <typename T>
void transfer_conv_weights(const SpectralModel<T>& source, SpectralModel<T>& target);

extern template class Backbone<float>;
extern template class Backbone<double>;
extern template class XVectorModel<float>;
extern template class XVectorModel<double>;
extern template class SpectralModel<float>;
extern template class SpectralModel<double>;

}  // namespace utixvec
