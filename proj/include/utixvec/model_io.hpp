#pragma once

#include <cstdint>
#include <string>

#include "utixvec/netarch.hpp"

namespace utixvec {

inline constexpr std::uint32_t kModelFormatVersion = 1;

enum class ModelKind { kXVector, kSpectral };

// "UXVM" files: magic, u32 version, u32 length + JSON config, then one record
// per parameter (u16 name length, name, u8 rank, u32 dims, f32 payload) in
// the model's parameter order.

void save_model(const XVectorModel<float>& model, const std::string& path);
void save_model(const SpectralModel<float>& model, const std::string& path);

/// Bad magic or version throws FormatError; truncation, trailing bytes, or
/// records that disagree with the embedded config throw CorruptionError.
XVectorModel<float> load_xvector(const std::string& path);
SpectralModel<float> load_spectral(const std::string& path);

ModelKind peek_model_kind(const std::string& path);

}  // namespace utixvec
