#include "utixvec/netarch.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "utixvec/errors.hpp"
#include "utixvec/rng.hpp"

namespace utixvec {

// BackboneConfig --------------------------------------------------------------

namespace {

bool is_factorized(std::size_t layer, const ConvLayerSpec& spec) {
  return layer > 0 && spec.kernel[0] > 1 && (spec.kernel[1] > 1 || spec.kernel[2] > 1);
}

bool is_pool_layer(std::size_t layer) { return layer == 1 || layer == 3; }

std::string dims_string(const Dims3& d) {
  return "(" + std::to_string(d[0]) + "," + std::to_string(d[1]) + "," + std::to_string(d[2]) +
         ")";
}

}  // namespace

void BackboneConfig::validate() const {
  if (input_frames < 1 || image_h < 1 || image_w < 1 || frame_fc_dim < 1) {
    throw ConfigError("backbone: frame count, image size and frame_fc_dim must be positive");
  }
  if (convs[0].kernel[0] != 5 || convs[0].strides[0] != 4) {
    throw ConfigError("backbone: layer 1 must read 5-frame blocks with temporal stride 4, got kernel " +
                      dims_string(convs[0].kernel) + " strides " + dims_string(convs[0].strides));
  }
  if (pool_window[0] != 1) {
    throw ConfigError("backbone: pooling must not span time, got window " +
                      dims_string(pool_window));
  }
  Dims3 extent{input_frames, image_h, image_w};
  for (std::size_t l = 0; l < convs.size(); ++l) {
    const auto& c = convs[l];
    if (c.channels < 1) throw ConfigError("backbone: conv" + std::to_string(l + 1) + " has no channels");
    for (std::size_t a = 0; a < 3; ++a) {
      if (c.kernel[a] < 1 || c.strides[a] < 1 || c.kernel[a] > extent[a]) {
        throw ConfigError("backbone: conv" + std::to_string(l + 1) + " kernel " +
                          dims_string(c.kernel) + " does not fit its input " + dims_string(extent));
      }
      extent[a] = conv_output_extent(extent[a], c.kernel[a], c.strides[a]);
    }
    if (is_pool_layer(l)) {
      for (std::size_t a = 0; a < 3; ++a) {
        if (pool_window[a] < 1 || pool_window[a] > extent[a]) {
          throw ConfigError("backbone: pool window " + dims_string(pool_window) +
                            " after conv" + std::to_string(l + 1) + " does not fit " +
                            dims_string(extent));
        }
        extent[a] /= pool_window[a];
      }
    }
  }
  if (extent[0] != 1) {
    throw ConfigError("backbone: " + std::to_string(input_frames) + " input frames leave " +
                      std::to_string(extent[0]) + " temporal positions, expected exactly 1");
  }
  if (receptive_field() != input_frames) {
    throw ConfigError("backbone: temporal receptive field is " + std::to_string(receptive_field()) +
                      " frames but input_frames is " + std::to_string(input_frames));
  }
}

std::size_t BackboneConfig::receptive_field() const {
  std::size_t rf = 1, step = 1;
  for (const auto& c : convs) {
    rf += (c.kernel[0] - 1) * step;
    step *= c.strides[0];
  }
  return rf;
}

std::size_t BackboneConfig::feature_width() const {
  std::size_t h = image_h, w = image_w;
  for (std::size_t l = 0; l < convs.size(); ++l) {
    h = conv_output_extent(h, convs[l].kernel[1], convs[l].strides[1]);
    w = conv_output_extent(w, convs[l].kernel[2], convs[l].strides[2]);
    if (is_pool_layer(l)) {
      h /= pool_window[1];
      w /= pool_window[2];
    }
  }
  return h * w * convs.back().channels;
}

BackboneConfig BackboneConfig::toy() {
  BackboneConfig c;
  c.image_h = 8;
  c.image_w = 16;
  c.convs = {{
      {2, {5, 3, 3}, {4, 1, 1}},
      {3, {1, 3, 3}, {1, 1, 1}},
      {3, {1, 1, 1}, {1, 1, 1}},
      {3, {5, 1, 3}, {1, 1, 1}},
  }};
  c.frame_fc_dim = 8;
  return c;
}

BackboneConfig BackboneConfig::for_image(std::size_t height, std::size_t width) {
  BackboneConfig c;
  c.image_h = height;
  c.image_w = width;
  return c;
}

std::string first_difference(const BackboneConfig& a, const BackboneConfig& b) {
  if (a.input_frames != b.input_frames) return "input_frames";
  if (a.image_h != b.image_h) return "image_h";
  if (a.image_w != b.image_w) return "image_w";
  for (std::size_t l = 0; l < a.convs.size(); ++l) {
    const std::string prefix = "conv" + std::to_string(l + 1);
    if (a.convs[l].channels != b.convs[l].channels) return prefix + ".channels";
    if (a.convs[l].kernel != b.convs[l].kernel) return prefix + ".kernel";
    if (a.convs[l].strides != b.convs[l].strides) return prefix + ".strides";
  }
  if (a.pool_window != b.pool_window) return "pool_window";
  if (a.frame_fc_dim != b.frame_fc_dim) return "frame_fc_dim";
  return {};
}

void XVectorConfig::validate() const {
  backbone.validate();
  if (num_speakers < 1) throw ConfigError("xvector: num_speakers must be positive");
}

void SpectralConfig::validate() const { backbone.validate(); }

// Initialization ----------------------------------------------------------------

namespace {

// Fan-in scaled uniform U(-a, a), a = sqrt(6 / fan_in).
template <typename T>
Tensor<T> init_weight(Shape shape, std::size_t fan_in, std::uint64_t seed) {
  Rng rng(seed);
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-limit, limit));
  return Tensor<T>(std::move(shape), std::move(values), true);
}

template <typename T>
Tensor<T> init_bias(std::size_t width) {
  return Tensor<T>::zeros({width}, true);
}

template <typename T>
DenseLayer<T> init_dense(std::size_t din, std::size_t dout, std::uint64_t seed) {
  return {init_weight<T>({din, dout}, din, seed), init_bias<T>(dout)};
}

template <typename U, typename T>
Tensor<U> cast_param(const Tensor<T>& t) {
  if (!t.defined()) return {};
  return t.template cast<U>();
}

template <typename U, typename T>
DenseLayer<U> cast_dense(const DenseLayer<T>& d) {
  return {cast_param<U>(d.weight), cast_param<U>(d.bias)};
}

template <typename T>
Tensor<T> add_channel_axis(const Tensor<T>& frames) {
  Shape s = frames.shape();
  s.push_back(1);
  return reshape(frames, std::move(s));
}

}  // namespace

// Backbone ------------------------------------------------------------------------

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::size_t cin = 1;
  for (std::size_t l = 0; l < 4; ++l) {
    const auto& c = config_.convs[l];
    const auto [kt, kh, kw] = c.kernel;
    auto& layer = layers_[l];
    if (is_factorized(l, c)) {
      layer.kernel = init_weight<T>({1, kh, kw, cin, c.channels}, kh * kw * cin,
                                    derive_seed(seed, l, 0));
      layer.temporal = init_weight<T>({kt, 1, 1, c.channels, c.channels}, kt * c.channels,
                                      derive_seed(seed, l, 1));
    } else {
      layer.kernel = init_weight<T>({kt, kh, kw, cin, c.channels}, kt * kh * kw * cin,
                                    derive_seed(seed, l, 0));
    }
    layer.bias = init_bias<T>(c.channels);
    cin = c.channels;
  }
}

template <typename T>
Tensor<T> Backbone<T>::run(const Tensor<T>& input, bool dense) const {
  Tensor<T> x = input;
  std::size_t step = 1;
  for (std::size_t l = 0; l < 4; ++l) {
    const auto& c = config_.convs[l];
    Conv3dOptions opt;
    if (dense) {
      opt.strides = {1, c.strides[1], c.strides[2]};
      opt.dilation = {step, 1, 1};
    } else {
      opt.strides = c.strides;
    }
    const auto& layer = layers_[l];
    x = layer.temporal.defined() ? conv2plus1d(x, layer.kernel, layer.temporal, layer.bias, opt)
                                 : conv3d(x, layer.kernel, layer.bias, opt);
    x = swish(x);
    if (is_pool_layer(l)) x = maxpool3d(x, config_.pool_window);
    step *= c.strides[0];
  }
  return x;
}

template <typename T>
Tensor<T> Backbone<T>::window_features(const Tensor<T>& windows) const {
  const auto& s = windows.shape();
  if (s.size() != 4 || s[1] != config_.input_frames || s[2] != config_.image_h ||
      s[3] != config_.image_w) {
    throw DimensionError("backbone: expected windows [N," + std::to_string(config_.input_frames) +
                         "," + std::to_string(config_.image_h) + "," +
                         std::to_string(config_.image_w) + "], got " + shape_string(s));
  }
  auto out = run(add_channel_axis(windows), false);
  return reshape(out, {s[0], config_.feature_width()});
}

template <typename T>
Tensor<T> Backbone<T>::dense_features(const Tensor<T>& frames) const {
  const auto& s = frames.shape();
  if (s.size() != 4 || s[2] != config_.image_h || s[3] != config_.image_w) {
    throw DimensionError("backbone: expected frames [N,L," + std::to_string(config_.image_h) + "," +
                         std::to_string(config_.image_w) + "], got " + shape_string(s));
  }
  if (s[1] < config_.input_frames) {
    throw InputTooShortError("segment of " + std::to_string(s[1]) +
                             " frames is shorter than the minimum of " +
                             std::to_string(config_.input_frames));
  }
  auto out = run(add_channel_axis(frames), true);
  const std::size_t positions = s[1] - config_.input_frames + 1;
  return reshape(out, {s[0], positions, config_.feature_width()});
}

template <typename T>
std::vector<NamedParameter<T>> Backbone<T>::parameters() const {
  std::vector<NamedParameter<T>> out;
  for (std::size_t l = 0; l < 4; ++l) {
    const std::string prefix = "conv" + std::to_string(l + 1);
    const auto& layer = layers_[l];
    if (layer.temporal.defined()) {
      out.push_back({prefix + ".spatial", layer.kernel});
      out.push_back({prefix + ".temporal", layer.temporal});
    } else {
      out.push_back({prefix + ".kernel", layer.kernel});
    }
    out.push_back({prefix + ".bias", layer.bias});
  }
  return out;
}

template <typename T>
template <typename U>
Backbone<U> Backbone<T>::cast() const {
  Backbone<U> b;
  b.config_ = config_;
  for (std::size_t l = 0; l < 4; ++l) {
    b.layers_[l].kernel = cast_param<U>(layers_[l].kernel);
    b.layers_[l].temporal = cast_param<U>(layers_[l].temporal);
    b.layers_[l].bias = cast_param<U>(layers_[l].bias);
  }
  return b;
}

// XVectorModel ------------------------------------------------------------------

template <typename T>
XVectorModel<T>::XVectorModel(const XVectorConfig& config, std::uint64_t seed)
    : config_(config), backbone_(config.backbone, derive_seed(seed, 100)) {
  config_.validate();
  const auto& b = config_.backbone;
  frame_fc_ = init_dense<T>(b.feature_width(), b.frame_fc_dim, derive_seed(seed, 101));
  fc1_ = init_dense<T>(b.frame_fc_dim, kFc1Dim, derive_seed(seed, 102));
  fc2_ = init_dense<T>(kFc1Dim, kFc2Dim, derive_seed(seed, 103));
  out_ = init_dense<T>(kFc2Dim, config_.num_speakers, derive_seed(seed, 104));
}

template <typename T>
Tensor<T> XVectorModel<T>::frame_level(const Tensor<T>& frames) const {
  if (frames.rank() == 3) {
    const auto& s = frames.shape();
    auto batched = frame_level(reshape(frames, {1, s[0], s[1], s[2]}));
    return reshape(batched, {batched.dim(1), batched.dim(2)});
  }
  auto features = backbone_.dense_features(frames);
  return swish(frame_fc_(features));
}

template <typename T>
Tensor<T> XVectorModel<T>::frame_level_windowed(const Tensor<T>& frames) const {
  const auto& s = frames.shape();
  if (s.size() != 3) throw DimensionError("frame_level_windowed: expected [L,H,W], got " + shape_string(s));
  const std::size_t window = config_.backbone.input_frames;
  if (s[0] < window) {
    throw InputTooShortError("segment of " + std::to_string(s[0]) +
                             " frames is shorter than the minimum of " + std::to_string(window));
  }
  const std::size_t positions = s[0] - window + 1;
  const std::size_t frame_size = s[1] * s[2];
  std::vector<T> stacked(positions * window * frame_size);
  auto src = frames.data();
  for (std::size_t p = 0; p < positions; ++p) {
    std::copy_n(src.data() + p * frame_size, window * frame_size,
                stacked.data() + p * window * frame_size);
  }
  Tensor<T> windows({positions, window, s[1], s[2]}, std::move(stacked));
  return swish(frame_fc_(backbone_.window_features(windows)));
}

template <typename T>
SegmentActivations<T> XVectorModel<T>::segment(const Tensor<T>& pooled) const {
  SegmentActivations<T> a;
  a.fc1_linear = fc1_(pooled);
  a.fc1 = swish(a.fc1_linear);
  a.fc2_linear = fc2_(a.fc1);
  a.fc2 = swish(a.fc2_linear);
  a.logits = out_(a.fc2);
  return a;
}

template <typename T>
SegmentActivations<T> XVectorModel<T>::forward(const Tensor<T>& frames) const {
  if (frames.rank() == 3) {
    const auto& s = frames.shape();
    return forward(reshape(frames, {1, s[0], s[1], s[2]}));
  }
  auto local = frame_level(frames);        // [B, P, D]
  return segment(mean_over_axis(local, 1));  // [B, D]
}

template <typename T>
std::vector<NamedParameter<T>> XVectorModel<T>::parameters() const {
  auto out = backbone_.parameters();
  out.push_back({"frame_fc.weight", frame_fc_.weight});
  out.push_back({"frame_fc.bias", frame_fc_.bias});
  out.push_back({"fc1.weight", fc1_.weight});
  out.push_back({"fc1.bias", fc1_.bias});
  out.push_back({"fc2.weight", fc2_.weight});
  out.push_back({"fc2.bias", fc2_.bias});
  out.push_back({"out.weight", out_.weight});
  out.push_back({"out.bias", out_.bias});
  return out;
}

template <typename T>
template <typename U>
XVectorModel<U> XVectorModel<T>::cast() const {
  XVectorModel<U> m;
  m.config_ = config_;
  m.backbone_ = backbone_.template cast<U>();
  m.frame_fc_ = cast_dense<U>(frame_fc_);
  m.fc1_ = cast_dense<U>(fc1_);
  m.fc2_ = cast_dense<U>(fc2_);
  m.out_ = cast_dense<U>(out_);
  return m;
}

// SpectralModel -----------------------------------------------------------------

template <typename T>
SpectralModel<T>::SpectralModel(const SpectralConfig& config, std::uint64_t seed)
    : config_(config), backbone_(config.backbone, derive_seed(seed, 200)) {
  config_.validate();
  const auto& b = config_.backbone;
  head_fc_ = init_dense<T>(b.feature_width() + config_.embed_dim, b.frame_fc_dim,
                           derive_seed(seed, 201));
  out_ = init_dense<T>(b.frame_fc_dim, kSpectralDim, derive_seed(seed, 202));
}

template <typename T>
Tensor<T> SpectralModel<T>::head_forward(const Tensor<T>& features,
                                         const Tensor<T>& embeddings) const {
  const std::size_t n = features.dim(0);
  Tensor<T> x = features;
  if (config_.embed_dim > 0) {
    if (!embeddings.defined()) {
      throw ConfigError("spectral model expects a " + std::to_string(config_.embed_dim) +
                        "-wide speaker embedding, none given");
    }
    if (embeddings.shape() != Shape{n, config_.embed_dim}) {
      throw ConfigError("spectral model expects embeddings [" + std::to_string(n) + "," +
                        std::to_string(config_.embed_dim) + "], got " +
                        shape_string(embeddings.shape()));
    }
    x = concat_last(features, embeddings);
  } else if (embeddings.defined() && embeddings.numel() > 0) {
    throw ConfigError("spectral model has no embedding input but one was given");
  }
  return out_(swish(head_fc_(x)));
}

template <typename T>
Tensor<T> SpectralModel<T>::forward(const Tensor<T>& windows, const Tensor<T>& embeddings) const {
  return head_forward(backbone_.window_features(windows), embeddings);
}

template <typename T>
Tensor<T> SpectralModel<T>::forward_dense(const Tensor<T>& frames,
                                          std::span<const T> embedding) const {
  const auto& s = frames.shape();
  if (s.size() != 3) throw DimensionError("forward_dense: expected [L,H,W], got " + shape_string(s));
  auto features = backbone_.dense_features(reshape(frames, {1, s[0], s[1], s[2]}));
  const std::size_t positions = features.dim(1);
  features = reshape(features, {positions, features.dim(2)});
  Tensor<T> emb;
  if (!embedding.empty()) {
    std::vector<T> tiled(positions * embedding.size());
    for (std::size_t p = 0; p < positions; ++p) {
      std::copy(embedding.begin(), embedding.end(), tiled.begin() + p * embedding.size());
    }
    emb = Tensor<T>({positions, embedding.size()}, std::move(tiled));
  }
  return head_forward(features, emb);
}

template <typename T>
std::vector<NamedParameter<T>> SpectralModel<T>::parameters() const {
  auto out = backbone_.parameters();
  out.push_back({"head_fc.weight", head_fc_.weight});
  out.push_back({"head_fc.bias", head_fc_.bias});
  out.push_back({"out.weight", out_.weight});
  out.push_back({"out.bias", out_.bias});
  return out;
}

template <typename T>
template <typename U>
SpectralModel<U> SpectralModel<T>::cast() const {
  SpectralModel<U> m;
  m.config_ = config_;
  m.backbone_ = backbone_.template cast<U>();
  m.head_fc_ = cast_dense<U>(head_fc_);
  m.out_ = cast_dense<U>(out_);
  return m;
}

// Free functions --------------------------------------------------------------------

template <typename T>
Tensor<T> frame_level_forward(const XVectorModel<T>& model, const Tensor<T>& frames) {
  if (frames.rank() != 3) {
    throw DimensionError("frame_level_forward: expected [L,H,W], got " +
                         shape_string(frames.shape()));
  }
  return model.frame_level(frames);
}

template <typename T>
Tensor<T> xvector_forward(const XVectorModel<T>& model, const Tensor<T>& frames) {
  if (frames.rank() != 3) {
    throw DimensionError("xvector_forward: expected [L,H,W], got " + shape_string(frames.shape()));
  }
  auto probs = softmax_rows(model.forward(frames).logits);
  return reshape(probs, {probs.dim(1)});
}

std::size_t embedding_width(const XVectorConfig&, const EmbeddingSpec& spec) {
  return spec.layer == EmbeddingLayer::kFc1 ? kFc1Dim : kFc2Dim;
}

std::vector<std::vector<float>> extract_embeddings(const XVectorModel<float>& model,
                                                   const Tensor<float>& frames,
                                                   const EmbeddingSpec& spec) {
  NoGradGuard no_grad;
  const auto acts = model.forward(frames);
  const Tensor<float>* source = nullptr;
  if (spec.layer == EmbeddingLayer::kFc1) {
    source = spec.activation == EmbeddingActivation::kLinear ? &acts.fc1_linear : &acts.fc1;
  } else {
    source = spec.activation == EmbeddingActivation::kLinear ? &acts.fc2_linear : &acts.fc2;
  }
  const std::size_t rows = source->dim(0), width = source->dim(1);
  std::vector<std::vector<float>> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    out[r].assign(source->data().begin() + r * width, source->data().begin() + (r + 1) * width);
  }
  return out;
}

Embedding extract_embedding(const XVectorModel<float>& model, const Tensor<float>& frames,
                            const EmbeddingSpec& spec) {
  if (frames.rank() != 3) {
    throw DimensionError("extract_embedding: expected [L,H,W], got " + shape_string(frames.shape()));
  }
  Embedding e;
  e.vector = std::move(extract_embeddings(model, frames, spec).front());
  return e;
}

template <typename T>
Tensor<T> spectral_forward(const SpectralModel<T>& model, const Tensor<T>& window,
                           std::optional<std::span<const T>> embedding) {
  const auto& s = window.shape();
  if (s.size() != 3) throw DimensionError("spectral_forward: expected [21,H,W], got " + shape_string(s));
  Tensor<T> emb;
  if (embedding) {
    emb = Tensor<T>({1, embedding->size()}, std::vector<T>(embedding->begin(), embedding->end()));
  }
  auto out = model.forward(reshape(window, {1, s[0], s[1], s[2]}), emb);
  return reshape(out, {kSpectralDim});
}

template <typename T>
void transfer_conv_weights(const SpectralModel<T>& source, SpectralModel<T>& target) {
  const auto diff = first_difference(source.config().backbone, target.config().backbone);
  if (!diff.empty()) {
    throw ConfigError("transfer_conv_weights: backbone configs differ in " + diff);
  }
  auto src = source.backbone().parameters();
  auto dst = target.backbone().parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto from = src[i].tensor.data();
    auto to = dst[i].tensor.mutable_data();
    std::copy(from.begin(), from.end(), to.begin());
  }
}

// Embedding spec parsing ----------------------------------------------------------

EmbeddingLayer parse_embedding_layer(std::string_view name) {
  if (name == "fc1") return EmbeddingLayer::kFc1;
  if (name == "fc2") return EmbeddingLayer::kFc2;
  throw ConfigError("unknown embedding layer '" + std::string(name) + "' (expected fc1 or fc2)");
}

EmbeddingActivation parse_embedding_activation(std::string_view name) {
  if (name == "linear") return EmbeddingActivation::kLinear;
  if (name == "swish") return EmbeddingActivation::kSwish;
  throw ConfigError("unknown embedding activation '" + std::string(name) +
                    "' (expected linear or swish)");
}

std::string to_string(EmbeddingLayer layer) { return layer == EmbeddingLayer::kFc1 ? "fc1" : "fc2"; }

std::string to_string(EmbeddingActivation activation) {
  return activation == EmbeddingActivation::kLinear ? "linear" : "swish";
}

// Instantiations -------------------------------------------------------------------

template class Backbone<float>;
template class Backbone<double>;
template class XVectorModel<float>;
template class XVectorModel<double>;
template class SpectralModel<float>;
template class SpectralModel<double>;

template Backbone<double> Backbone<float>::cast<double>() const;
template Backbone<float> Backbone<double>::cast<float>() const;
template XVectorModel<double> XVectorModel<float>::cast<double>() const;
template XVectorModel<float> XVectorModel<double>::cast<float>() const;
template SpectralModel<double> SpectralModel<float>::cast<double>() const;
template SpectralModel<float> SpectralModel<double>::cast<float>() const;

template Tensor<float> frame_level_forward(const XVectorModel<float>&, const Tensor<float>&);
template Tensor<double> frame_level_forward(const XVectorModel<double>&, const Tensor<double>&);
template Tensor<float> xvector_forward(const XVectorModel<float>&, const Tensor<float>&);
template Tensor<double> xvector_forward(const XVectorModel<double>&, const Tensor<double>&);
template Tensor<float> spectral_forward(const SpectralModel<float>&, const Tensor<float>&,
                                        std::optional<std::span<const float>>);
template Tensor<double> spectral_forward(const SpectralModel<double>&, const Tensor<double>&,
                                         std::optional<std::span<const double>>);
template void transfer_conv_weights(const SpectralModel<float>&, SpectralModel<float>&);
template void transfer_conv_weights(const SpectralModel<double>&, SpectralModel<double>&);

}  // namespace utixvec
