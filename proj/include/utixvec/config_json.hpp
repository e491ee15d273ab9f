#pragma once

#include <nlohmann/json.hpp>

#include "utixvec/embedding.hpp"
#include "utixvec/netarch.hpp"

namespace utixvec {

// JSON forms of the model configs. Reading starts from the defaults and
// overrides the keys present; an unknown key throws ConfigError.

void to_json(nlohmann::json& j, const ConvLayerSpec& c);
void from_json(const nlohmann::json& j, ConvLayerSpec& c);
void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);
void to_json(nlohmann::json& j, const XVectorConfig& c);
void from_json(const nlohmann::json& j, XVectorConfig& c);
void to_json(nlohmann::json& j, const SpectralConfig& c);
void from_json(const nlohmann::json& j, SpectralConfig& c);
void to_json(nlohmann::json& j, const EmbeddingSpec& s);
void from_json(const nlohmann::json& j, EmbeddingSpec& s);

/// Throws ConfigError if `j` is not an object or has a key outside `allowed`.
void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                const char* what);

}  // namespace utixvec
