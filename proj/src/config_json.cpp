#include "utixvec/config_json.hpp"

#include <algorithm>
#include <string>

#include "utixvec/errors.hpp"

namespace utixvec {

using nlohmann::json;

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
  for (const auto& item : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* k) { return item.key() == k; });
    if (!known) throw ConfigError(std::string(what) + ": unknown key '" + item.key() + "'");
  }
}

namespace {

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace

void to_json(json& j, const ConvLayerSpec& c) {
  j = json{{"channels", c.channels}, {"kernel", c.kernel}, {"strides", c.strides}};
}

void from_json(const json& j, ConvLayerSpec& c) {
  check_keys(j, {"channels", "kernel", "strides"}, "conv layer");
  read_if(j, "channels", c.channels);
  read_if(j, "kernel", c.kernel);
  read_if(j, "strides", c.strides);
}

void to_json(json& j, const BackboneConfig& c) {
  j = json{{"input_frames", c.input_frames}, {"image_h", c.image_h},
           {"image_w", c.image_w},           {"convs", c.convs},
           {"pool_window", c.pool_window},   {"frame_fc_dim", c.frame_fc_dim}};
}

void from_json(const json& j, BackboneConfig& c) {
  check_keys(j, {"input_frames", "image_h", "image_w", "convs", "pool_window", "frame_fc_dim"},
             "backbone");
  read_if(j, "input_frames", c.input_frames);
  read_if(j, "image_h", c.image_h);
  read_if(j, "image_w", c.image_w);
  read_if(j, "pool_window", c.pool_window);
  read_if(j, "frame_fc_dim", c.frame_fc_dim);
  if (j.contains("convs")) {
    const auto& convs = j.at("convs");
    if (!convs.is_array() || convs.size() != c.convs.size()) {
      throw ConfigError("backbone: 'convs' must list exactly 4 layers");
    }
    for (std::size_t i = 0; i < c.convs.size(); ++i) from_json(convs[i], c.convs[i]);
  }
}

void to_json(json& j, const XVectorConfig& c) {
  j = json{{"backbone", c.backbone}, {"num_speakers", c.num_speakers}};
}

void from_json(const json& j, XVectorConfig& c) {
  check_keys(j, {"backbone", "num_speakers"}, "xvector config");
  if (j.contains("backbone")) from_json(j.at("backbone"), c.backbone);
  read_if(j, "num_speakers", c.num_speakers);
}

void to_json(json& j, const SpectralConfig& c) {
  j = json{{"backbone", c.backbone}, {"embed_dim", c.embed_dim}};
}

void from_json(const json& j, SpectralConfig& c) {
  check_keys(j, {"backbone", "embed_dim"}, "spectral config");
  if (j.contains("backbone")) from_json(j.at("backbone"), c.backbone);
  read_if(j, "embed_dim", c.embed_dim);
}

void to_json(json& j, const EmbeddingSpec& s) {
  j = json{{"layer", to_string(s.layer)}, {"activation", to_string(s.activation)}};
}

void from_json(const json& j, EmbeddingSpec& s) {
  check_keys(j, {"layer", "activation"}, "embedding spec");
  if (j.contains("layer")) s.layer = parse_embedding_layer(j.at("layer").get<std::string>());
  if (j.contains("activation")) {
    s.activation = parse_embedding_activation(j.at("activation").get<std::string>());
  }
}

}  // namespace utixvec
