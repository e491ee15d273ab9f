#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace utixvec {

enum class EmbeddingLayer { kFc1, kFc2 };
enum class EmbeddingActivation { kLinear, kSwish };

/// Which segment layer provides the speaker vector, and whether it is taken
/// before (linear) or after the swish nonlinearity.
struct EmbeddingSpec {
  EmbeddingLayer layer = EmbeddingLayer::kFc2;
  EmbeddingActivation activation = EmbeddingActivation::kLinear;

  bool operator==(const EmbeddingSpec&) const = default;
};

// "fc1"/"fc2" and "linear"/"swish"; anything else throws ConfigError.
EmbeddingLayer parse_embedding_layer(std::string_view name);
EmbeddingActivation parse_embedding_activation(std::string_view name);
std::string to_string(EmbeddingLayer layer);
std::string to_string(EmbeddingActivation activation);

struct Embedding {
  std::vector<float> vector;
  std::uint32_t speaker_id = 0;
  std::uint32_t session_id = 0;
  std::uint32_t chunk_id = 0;
};

}  // namespace utixvec
