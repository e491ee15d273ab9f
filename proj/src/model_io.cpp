#include "utixvec/model_io.hpp"

#include <nlohmann/json.hpp>

#include "utixvec/binary_io.hpp"
#include "utixvec/config_json.hpp"
#include "utixvec/errors.hpp"

namespace utixvec {

using nlohmann::json;

namespace {

constexpr std::string_view kMagic = "UXVM";

void write_model(const json& config, const std::vector<NamedParameter<float>>& params,
                 const std::string& path) {
  BinaryWriter out(path);
  out.magic(kMagic);
  out.u32(kModelFormatVersion);
  const std::string blob = config.dump();
  out.u32(static_cast<std::uint32_t>(blob.size()));
  out.bytes(blob.data(), blob.size());
  for (const auto& p : params) {
    out.u16(static_cast<std::uint16_t>(p.name.size()));
    out.bytes(p.name.data(), p.name.size());
    out.u8(static_cast<std::uint8_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) out.u32(static_cast<std::uint32_t>(d));
    out.f32s(p.tensor.data());
  }
  out.close();
}

json read_header(BinaryReader& in) {
  in.expect_magic(kMagic);
  const auto version = in.u32();
  if (version != kModelFormatVersion) {
    throw FormatError(in.path() + ": model format version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(kModelFormatVersion) + ")");
  }
  const auto length = in.u32();
  const auto blob = in.string(length);
  json config = json::parse(blob, nullptr, false);
  if (config.is_discarded() || !config.is_object() || !config.contains("kind")) {
    throw CorruptionError(in.path() + ": embedded model config is not valid JSON");
  }
  return config;
}

// Fills every parameter of a freshly built model from the records that follow
// the header; names, ranks and dims must agree exactly.
void read_parameters(BinaryReader& in, std::vector<NamedParameter<float>> params) {
  for (auto& p : params) {
    const auto at = in.offset();
    const auto name = in.string(in.u16());
    if (name != p.name) {
      throw CorruptionError(in.path() + ": record at offset " + std::to_string(at) + " is '" +
                            name + "', expected '" + p.name + "'");
    }
    const std::size_t rank = in.u8();
    Shape shape(rank);
    for (auto& d : shape) d = in.u32();
    if (shape != p.tensor.shape()) {
      throw CorruptionError(in.path() + ": parameter '" + name + "' has shape " +
                            shape_string(shape) + " but the config implies " +
                            shape_string(p.tensor.shape()));
    }
    in.f32s(p.tensor.mutable_data());
  }
  if (in.offset() != in.size()) {
    throw CorruptionError(in.path() + ": " + std::to_string(in.size() - in.offset()) +
                          " unexpected trailing bytes at offset " + std::to_string(in.offset()));
  }
}

template <typename Config>
Config parse_config(const json& j, const std::string& path) {
  try {
    Config c = j.at("config").get<Config>();
    c.validate();
    return c;
  } catch (const ConfigError& e) {
    throw CorruptionError(path + ": embedded config rejected: " + e.what());
  } catch (const json::exception& e) {
    throw CorruptionError(path + ": embedded config unreadable: " + e.what());
  }
}

std::string kind_of(const json& j) {
  return j.at("kind").is_string() ? j.at("kind").get<std::string>() : std::string{};
}

}  // namespace

void save_model(const XVectorModel<float>& model, const std::string& path) {
  write_model(json{{"kind", "xvector"}, {"config", model.config()}}, model.parameters(), path);
}

void save_model(const SpectralModel<float>& model, const std::string& path) {
  write_model(json{{"kind", "spectral"}, {"config", model.config()}}, model.parameters(), path);
}

XVectorModel<float> load_xvector(const std::string& path) {
  BinaryReader in(path);
  const auto header = read_header(in);
  if (kind_of(header) != "xvector") {
    throw FormatError(path + ": holds a '" + kind_of(header) + "' model, expected 'xvector'");
  }
  XVectorModel<float> model(parse_config<XVectorConfig>(header, path), 0);
  read_parameters(in, model.parameters());
  return model;
}

SpectralModel<float> load_spectral(const std::string& path) {
  BinaryReader in(path);
  const auto header = read_header(in);
  if (kind_of(header) != "spectral") {
    throw FormatError(path + ": holds a '" + kind_of(header) + "' model, expected 'spectral'");
  }
  SpectralModel<float> model(parse_config<SpectralConfig>(header, path), 0);
  read_parameters(in, model.parameters());
  return model;
}

ModelKind peek_model_kind(const std::string& path) {
  BinaryReader in(path);
  const auto kind = kind_of(read_header(in));
  if (kind == "xvector") return ModelKind::kXVector;
  if (kind == "spectral") return ModelKind::kSpectral;
  throw FormatError(path + ": unknown model kind '" + kind + "'");
}

}  // namespace utixvec
