#include "utixvec/synth_corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>

#include "utixvec/errors.hpp"
#include "utixvec/rng.hpp"

namespace utixvec {

using nlohmann::json;

namespace {

constexpr std::size_t kMinFrames = 21;
constexpr std::string_view kMagic = "UTSC";
constexpr std::uint64_t kRecordHeaderBytes = 14;  // speaker, session, chunk id, length

// Reference frame the session offsets are expressed in.
constexpr double kRefH = 64.0;
constexpr double kRefW = 128.0;

// Static speckle texture resolution.
constexpr std::size_t kSpeckleRows = 24;
constexpr std::size_t kSpeckleCols = 48;

// Vertical control-point displacement per unit of latent state.
constexpr double kDeformGain = 0.06;
constexpr double kDeformWidth = 0.12;
// Per-pixel multiplicative noise amplitude (peak to peak).
constexpr double kFrameNoise = 0.2;
constexpr double kSharedMapScale = 0.25;
constexpr double kSpeakerMapScale = 0.25;

double control_x(std::size_t i) { return static_cast<double>(i) / (kControlPoints - 1); }

// Gaussian bump of latent k centred along the contour.
double deformation_basis(std::size_t point, std::size_t latent) {
  const double mu = static_cast<double>(latent) / (kLatentDim - 1);
  const double d = control_x(point) - mu;
  return std::exp(-d * d / (2.0 * kDeformWidth * kDeformWidth));
}

std::vector<double> speckle_texture(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> g(kSpeckleRows * kSpeckleCols);
  for (auto& v : g) v = rng.uniform();
  return g;
}

double bilinear(const std::vector<double>& g, double u, double v) {
  const double x = std::clamp(u, 0.0, 1.0) * (kSpeckleCols - 1);
  const double y = std::clamp(v, 0.0, 1.0) * (kSpeckleRows - 1);
  const auto x0 = std::min<std::size_t>(static_cast<std::size_t>(x), kSpeckleCols - 2);
  const auto y0 = std::min<std::size_t>(static_cast<std::size_t>(y), kSpeckleRows - 2);
  const double fx = x - x0, fy = y - y0;
  const double a = g[y0 * kSpeckleCols + x0], b = g[y0 * kSpeckleCols + x0 + 1];
  const double c = g[(y0 + 1) * kSpeckleCols + x0], d = g[(y0 + 1) * kSpeckleCols + x0 + 1];
  return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d);
}

}  // namespace

// Profiles --------------------------------------------------------------------------

SpeakerProfile sample_speaker(std::uint64_t corpus_seed, std::uint32_t speaker_index) {
  Rng rng(derive_seed(corpus_seed, 0x5350454b, speaker_index));
  SpeakerProfile p;
  p.speaker_id = speaker_index;

  const double offset = rng.uniform(-0.08, 0.08);
  const double dome = rng.uniform(0.6, 1.4);
  const double c2 = rng.uniform(-0.05, 0.05);
  const double c3 = rng.uniform(-0.05, 0.05);
  for (std::size_t i = 0; i < kControlPoints; ++i) {
    const double x = control_x(i);
    p.rest_contour[i] = 0.55 + offset - 0.25 * dome * std::sin(std::numbers::pi * x) +
                        c2 * std::sin(2 * std::numbers::pi * x) +
                        c3 * std::sin(3 * std::numbers::pi * x);
  }
  p.contour_left = rng.uniform(0.08, 0.2);
  p.contour_right = rng.uniform(0.8, 0.92);
  p.thickness = rng.uniform(0.025, 0.06);
  p.gain = rng.uniform(0.55, 0.95);
  p.background = rng.uniform(0.1, 0.35);
  p.deformation_scale = rng.uniform(0.8, 1.2);
  p.speckle_seed = rng.bits();
  for (std::size_t k = 0; k < kLatentDim; ++k) {
    p.dyn_center[k] = rng.uniform(-0.3, 0.3);
    p.dyn_range[k] = rng.uniform(0.5, 1.0);
    p.dyn_rate[k] = rng.uniform(0.85, 0.97);
  }

  // Shared mixing for the whole corpus plus a speaker-specific deviation.
  Rng shared(derive_seed(corpus_seed, 0x4d4150));
  p.spectral_map.resize(kSpectrumDim * kLiftDim);
  for (auto& m : p.spectral_map) m = kSharedMapScale * shared.normal();
  for (auto& m : p.spectral_map) m += kSpeakerMapScale * rng.normal();
  return p;
}

SessionTransform sample_session(std::uint64_t corpus_seed, std::uint32_t speaker_index,
                                std::uint32_t session_id) {
  Rng rng(derive_seed(corpus_seed, 0x53455353, speaker_index, session_id));
  SessionTransform t;
  t.session_id = session_id;
  t.dx = rng.uniform(-6.0, 6.0);
  t.dy = rng.uniform(-4.0, 4.0);
  t.angle_deg = rng.uniform(-5.0, 5.0);
  t.gain = rng.uniform(0.8, 1.2);
  return t;
}

std::array<double, kLiftDim> feature_lift(const std::array<double, kLatentDim>& a) {
  std::array<double, kLiftDim> phi{};
  std::size_t n = 0;
  phi[n++] = 1.0;
  for (double v : a) phi[n++] = v;
  for (std::size_t i = 0; i < kLatentDim; ++i) {
    for (std::size_t j = i; j < kLatentDim; ++j) phi[n++] = a[i] * a[j];
  }
  return phi;
}

// Utterances ------------------------------------------------------------------------

Utterance synth_utterance(const SpeakerProfile& profile, const SessionTransform& transform,
                          std::size_t duration_frames, std::uint64_t utterance_seed,
                          std::size_t height, std::size_t width) {
  if (duration_frames < kMinFrames) {
    throw InputTooShortError("utterance of " + std::to_string(duration_frames) +
                             " frames is shorter than the minimum of 21");
  }
  if (height < 1 || width < 1) throw ConfigError("synth_utterance: empty image size");
  if (profile.spectral_map.size() != kSpectrumDim * kLiftDim) {
    throw ConfigError("synth_utterance: spectral map must be 80 x 45");
  }

  Utterance u;
  u.speaker_id = profile.speaker_id;
  u.session_id = transform.session_id;
  u.height = height;
  u.width = width;
  u.length = duration_frames;
  u.frames.resize(duration_frames * height * width);
  u.spectra.resize(duration_frames * kSpectrumDim);

  // Articulation: AR(1) latent per dimension squashed into the speaker range.
  Rng traj(derive_seed(utterance_seed, 1));
  Rng noise(derive_seed(utterance_seed, 2));
  std::array<double, kLatentDim> z{};
  for (auto& v : z) v = traj.normal();

  const auto speckle = speckle_texture(profile.speckle_seed);
  const double rad = transform.angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double span = profile.contour_right - profile.contour_left;
  const double inv_two_thk2 = 1.0 / (2.0 * profile.thickness * profile.thickness);

  // Source coordinates do not change between frames.
  std::vector<double> src_u(height * width), src_v(height * width), base(height * width);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const double x = (c + 0.5) * (kRefW / width) - kRefW / 2 - transform.dx;
      const double y = (r + 0.5) * (kRefH / height) - kRefH / 2 - transform.dy;
      const double xs = cs * x + sn * y;
      const double ys = -sn * x + cs * y;
      const std::size_t i = r * width + c;
      src_u[i] = xs / kRefW + 0.5;
      src_v[i] = ys / kRefH + 0.5;
      base[i] = profile.background * bilinear(speckle, src_u[i], src_v[i]);
    }
  }

  std::array<double, kLatentDim> a{};
  std::array<double, kControlPoints> contour{};
  for (std::size_t t = 0; t < duration_frames; ++t) {
    if (t > 0) {
      for (std::size_t k = 0; k < kLatentDim; ++k) {
        const double rho = profile.dyn_rate[k];
        z[k] = rho * z[k] + std::sqrt(1.0 - rho * rho) * traj.normal();
      }
    }
    for (std::size_t k = 0; k < kLatentDim; ++k) {
      a[k] = profile.dyn_center[k] + profile.dyn_range[k] * std::tanh(z[k]);
    }

    for (std::size_t i = 0; i < kControlPoints; ++i) {
      double disp = 0.0;
      for (std::size_t k = 0; k < kLatentDim; ++k) disp += deformation_basis(i, k) * a[k];
      contour[i] = profile.rest_contour[i] + kDeformGain * profile.deformation_scale * disp;
    }

    float* frame = u.frames.data() + t * height * width;
    for (std::size_t i = 0; i < height * width; ++i) {
      double value = base[i];
      const double s = (src_u[i] - profile.contour_left) / span;
      if (s >= 0.0 && s <= 1.0) {
        const double pos = s * (kControlPoints - 1);
        const auto j = std::min<std::size_t>(static_cast<std::size_t>(pos), kControlPoints - 2);
        const double f = pos - j;
        const double cy = (1 - f) * contour[j] + f * contour[j + 1];
        const double d = src_v[i] - cy;
        value += profile.gain * std::exp(-d * d * inv_two_thk2);
      }
      value *= 1.0 + kFrameNoise * (noise.uniform() - 0.5);
      frame[i] = static_cast<float>(std::clamp(value * transform.gain, 0.0, 1.0));
    }

    const auto phi = feature_lift(a);
    float* spec = u.spectra.data() + t * kSpectrumDim;
    for (std::size_t b = 0; b < kSpectrumDim; ++b) {
      const double* row = profile.spectral_map.data() + b * kLiftDim;
      double acc = 0.0;
      for (std::size_t m = 0; m < kLiftDim; ++m) acc += row[m] * phi[m];
      spec[b] = static_cast<float>(std::tanh(acc));
    }
  }
  return u;
}

std::vector<ChunkSpan> chunk_utterance(std::size_t utterance_length, std::size_t chunk_len) {
  if (chunk_len < kMinFrames) {
    throw ConfigError("chunk length " + std::to_string(chunk_len) + " is below the minimum of 21");
  }
  std::vector<ChunkSpan> spans;
  for (std::size_t s = 0; s + chunk_len <= utterance_length; s += chunk_len) {
    spans.push_back({s, chunk_len});
  }
  return spans;
}

// Config and manifest -------------------------------------------------------------

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kDev:
      return "dev";
    case Split::kTest:
      return "test";
  }
  return "train";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "dev") return Split::kDev;
  if (name == "test") return Split::kTest;
  throw ConfigError("unknown split '" + name + "' (expected train, dev or test)");
}

void CorpusConfig::validate() const {
  const double total = train_ratio + dev_ratio + test_ratio;
  if (std::abs(total - 1.0) > 1e-9 || train_ratio < 0 || dev_ratio < 0 || test_ratio < 0) {
    throw ConfigError("split ratios must be non-negative and sum to 1, got " +
                      std::to_string(train_ratio) + " + " + std::to_string(dev_ratio) + " + " +
                      std::to_string(test_ratio));
  }
  if (xvector_speakers + heldout_speakers == 0) throw ConfigError("corpus needs at least one speaker");
  if (sessions == 0 || utterances_per_session == 0) {
    throw ConfigError("sessions and utterances_per_session must be positive");
  }
  if (min_frames < kMinFrames || max_frames < min_frames) {
    throw ConfigError("utterance duration range must satisfy 21 <= min_frames <= max_frames");
  }
  if (chunk_len < kMinFrames || chunk_len > 65535) {
    throw ConfigError("chunk_len must lie in [21, 65535]");
  }
  if (image_h < 1 || image_w < 1 || image_h > 65535 || image_w > 65535) {
    throw ConfigError("image size out of range");
  }
}

void to_json(json& j, const CorpusConfig& c) {
  j = json{{"seed", c.seed},
           {"xvector_speakers", c.xvector_speakers},
           {"heldout_speakers", c.heldout_speakers},
           {"sessions", c.sessions},
           {"utterances_per_session", c.utterances_per_session},
           {"min_frames", c.min_frames},
           {"max_frames", c.max_frames},
           {"chunk_len", c.chunk_len},
           {"image_h", c.image_h},
           {"image_w", c.image_w},
           {"train_ratio", c.train_ratio},
           {"dev_ratio", c.dev_ratio},
           {"test_ratio", c.test_ratio}};
}

void from_json(const json& j, CorpusConfig& c) {
  if (!j.is_object()) throw ConfigError("corpus config must be a JSON object");
  auto get = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::remove_reference_t<decltype(out)>>();
  };
  get("seed", c.seed);
  get("xvector_speakers", c.xvector_speakers);
  get("heldout_speakers", c.heldout_speakers);
  get("sessions", c.sessions);
  get("utterances_per_session", c.utterances_per_session);
  get("min_frames", c.min_frames);
  get("max_frames", c.max_frames);
  get("chunk_len", c.chunk_len);
  get("image_h", c.image_h);
  get("image_w", c.image_w);
  get("train_ratio", c.train_ratio);
  get("dev_ratio", c.dev_ratio);
  get("test_ratio", c.test_ratio);
}

std::array<std::size_t, 3> split_counts(std::size_t n, double dev_ratio, double test_ratio) {
  const auto dev = static_cast<std::size_t>(std::floor(dev_ratio * n + 1e-9));
  const auto test = static_cast<std::size_t>(std::floor(test_ratio * n + 1e-9));
  return {n - dev - test, dev, test};
}

json manifest_to_json(const CorpusManifest& m) {
  json speakers = json::array();
  for (const auto& s : m.speakers) {
    speakers.push_back({{"speaker_id", s.speaker_id},
                        {"role", s.role == SpeakerRole::kXVector ? "xvector" : "heldout"},
                        {"sessions", s.sessions},
                        {"utterances", s.utterances},
                        {"chunks", s.chunks}});
  }
  json chunks = json::array();
  for (const auto& c : m.chunks) {
    chunks.push_back({{"chunk_id", c.chunk_id},
                      {"speaker_id", c.speaker_id},
                      {"session_id", c.session_id},
                      {"utterance_id", c.utterance_id},
                      {"start_frame", c.start_frame},
                      {"length", c.length},
                      {"split", to_string(c.split)},
                      {"offset", c.offset}});
  }
  return json{{"format", "UTSC"},
              {"version", kCorpusFormatVersion},
              {"seed", m.config.seed},
              {"config", m.config},
              {"data_file", m.data_file},
              {"speakers", speakers},
              {"chunks", chunks}};
}

CorpusManifest manifest_from_json(const json& j) {
  try {
    CorpusManifest m;
    if (j.at("format") != "UTSC") throw FormatError("manifest does not describe a UTSC corpus");
    if (j.at("version").get<std::uint32_t>() != kCorpusFormatVersion) {
      throw FormatError("unsupported corpus manifest version");
    }
    m.config = j.at("config").get<CorpusConfig>();
    m.data_file = j.at("data_file").get<std::string>();
    for (const auto& s : j.at("speakers")) {
      SpeakerEntry e;
      e.speaker_id = s.at("speaker_id");
      e.role = s.at("role") == "heldout" ? SpeakerRole::kHeldOut : SpeakerRole::kXVector;
      e.sessions = s.at("sessions");
      e.utterances = s.at("utterances");
      e.chunks = s.at("chunks");
      m.speakers.push_back(e);
    }
    for (const auto& c : j.at("chunks")) {
      ChunkInfo info;
      info.chunk_id = c.at("chunk_id");
      info.speaker_id = c.at("speaker_id");
      info.session_id = c.at("session_id");
      info.utterance_id = c.at("utterance_id");
      info.start_frame = c.at("start_frame");
      info.length = c.at("length");
      info.split = parse_split(c.at("split").get<std::string>());
      info.offset = c.at("offset");
      m.chunks.push_back(info);
    }
    return m;
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("corpus manifest is malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw CorruptionError(std::string("corpus manifest is malformed: ") + e.what());
  }
}

// Data file -------------------------------------------------------------------------

CorpusWriter::CorpusWriter(const std::string& path, std::size_t height, std::size_t width)
    : out_(path), height_(height), width_(width) {
  out_.magic(kMagic);
  out_.u32(kCorpusFormatVersion);
  out_.u16(static_cast<std::uint16_t>(height));
  out_.u16(static_cast<std::uint16_t>(width));
  out_.u16(static_cast<std::uint16_t>(kSpectrumDim));
}

std::uint64_t CorpusWriter::append(const ChunkInfo& info, const float* frames,
                                   const float* spectra) {
  const auto offset = out_.offset();
  out_.u32(info.speaker_id);
  out_.u32(info.session_id);
  out_.u32(info.chunk_id);
  out_.u16(static_cast<std::uint16_t>(info.length));
  out_.f32s({frames, info.length * height_ * width_});
  out_.f32s({spectra, info.length * kSpectrumDim});
  return offset;
}

Utterance corpus_utterance(const CorpusConfig& config, std::uint32_t speaker,
                           std::uint32_t session, std::uint32_t utterance) {
  const auto seed = derive_seed(config.seed, 0x55545400 + speaker, session, utterance);
  Rng dur(derive_seed(seed, 3));
  const std::size_t length =
      config.min_frames + dur.below(config.max_frames - config.min_frames + 1);
  auto u = synth_utterance(sample_speaker(config.seed, speaker),
                           sample_session(config.seed, speaker, session), length, seed,
                           config.image_h, config.image_w);
  u.utterance_id = session * static_cast<std::uint32_t>(config.utterances_per_session) + utterance;
  return u;
}

CorpusManifest build_corpus(const CorpusConfig& config, const std::string& out_dir) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

  CorpusManifest manifest;
  manifest.config = config;
  CorpusWriter writer((std::filesystem::path(out_dir) / manifest.data_file).string(),
                      config.image_h, config.image_w);

  const std::size_t total = config.xvector_speakers + config.heldout_speakers;
  for (std::uint32_t spk = 0; spk < total; ++spk) {
    SpeakerEntry entry;
    entry.speaker_id = spk;
    entry.role = spk < config.xvector_speakers ? SpeakerRole::kXVector : SpeakerRole::kHeldOut;
    entry.sessions = config.sessions;
    entry.utterances = config.sessions * config.utterances_per_session;

    const std::size_t first = manifest.chunks.size();
    for (std::uint32_t ses = 0; ses < config.sessions; ++ses) {
      for (std::uint32_t utt = 0; utt < config.utterances_per_session; ++utt) {
        const auto u = corpus_utterance(config, spk, ses, utt);
        for (const auto& span : chunk_utterance(u.length, config.chunk_len)) {
          ChunkInfo info;
          info.chunk_id = static_cast<std::uint32_t>(manifest.chunks.size());
          info.speaker_id = spk;
          info.session_id = ses;
          info.utterance_id = u.utterance_id;
          info.start_frame = span.start;
          info.length = span.length;
          info.offset = writer.append(info, u.frames.data() + span.start * u.height * u.width,
                                      u.spectra.data() + span.start * kSpectrumDim);
          manifest.chunks.push_back(info);
        }
      }
    }

    // Chunk-level split inside each speaker.
    const std::size_t n = manifest.chunks.size() - first;
    entry.chunks = n;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), first);
    Rng split_rng(derive_seed(config.seed, 0x53504c54, spk));
    split_rng.shuffle(std::span<std::size_t>(order));
    const auto counts = split_counts(n, config.dev_ratio, config.test_ratio);
    for (std::size_t i = 0; i < n; ++i) {
      manifest.chunks[order[i]].split =
          i < counts[1] ? Split::kDev : (i < counts[1] + counts[2] ? Split::kTest : Split::kTrain);
    }
    manifest.speakers.push_back(entry);
  }
  writer.close();

  const auto path = (std::filesystem::path(out_dir) / "manifest.json").string();
  std::ofstream out(path, std::ios::trunc);
  out << manifest_to_json(manifest).dump(1) << '\n';
  if (!out) throw IoError("cannot write " + path);
  return manifest;
}

CorpusReader::CorpusReader(const std::string& dir) {
  const auto manifest_path = (std::filesystem::path(dir) / "manifest.json").string();
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open " + manifest_path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw CorruptionError(manifest_path + " is not valid JSON");
  manifest_ = manifest_from_json(j);

  data_ = std::make_unique<BinaryReader>((std::filesystem::path(dir) / manifest_.data_file).string());
  data_->expect_magic(kMagic);
  const auto version = data_->u32();
  if (version != kCorpusFormatVersion) {
    throw FormatError(data_->path() + ": corpus format version " + std::to_string(version) +
                      " is not supported");
  }
  height_ = data_->u16();
  width_ = data_->u16();
  const auto spec_dim = data_->u16();
  if (spec_dim != kSpectrumDim) {
    throw CorruptionError(data_->path() + ": spectral width " + std::to_string(spec_dim) +
                          " in header, expected 80");
  }
  if (height_ != manifest_.config.image_h || width_ != manifest_.config.image_w) {
    throw CorruptionError(data_->path() + ": image size in header disagrees with manifest");
  }
}

const ChunkInfo& CorpusReader::check_record(std::size_t index) {
  if (index >= manifest_.chunks.size()) {
    throw IndexError("chunk index " + std::to_string(index) + " out of range");
  }
  const auto& info = manifest_.chunks[index];
  const auto at = info.offset;
  data_->seek(at);
  const auto speaker = data_->u32();
  const auto session = data_->u32();
  const auto chunk = data_->u32();
  const auto length = data_->u16();
  if (speaker != info.speaker_id || session != info.session_id || chunk != info.chunk_id ||
      length != info.length) {
    throw CorruptionError(data_->path() + ": record at offset " + std::to_string(at) +
                          " does not match manifest entry for chunk " +
                          std::to_string(info.chunk_id));
  }
  return info;
}

void CorpusReader::read_frames(std::size_t index, std::size_t start, std::size_t count,
                               std::span<float> out) {
  const auto& info = check_record(index);
  const std::size_t frame = height_ * width_;
  if (start + count > info.length || out.size() != count * frame) {
    throw IndexError("frames [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") of chunk " + std::to_string(info.chunk_id) + " out of range");
  }
  data_->seek(info.offset + kRecordHeaderBytes + start * frame * sizeof(float));
  data_->f32s(out);
}

void CorpusReader::read_spectra(std::size_t index, std::size_t start, std::size_t count,
                                std::span<float> out) {
  const auto& info = check_record(index);
  if (start + count > info.length || out.size() != count * kSpectrumDim) {
    throw IndexError("spectra [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") of chunk " + std::to_string(info.chunk_id) + " out of range");
  }
  data_->seek(info.offset + kRecordHeaderBytes +
              (info.length * height_ * width_ + start * kSpectrumDim) * sizeof(float));
  data_->f32s(out);
}

Chunk CorpusReader::read(std::size_t index) {
  Chunk c;
  c.info = check_record(index);
  c.height = height_;
  c.width = width_;
  c.frames.resize(c.info.length * height_ * width_);
  c.spectra.resize(c.info.length * kSpectrumDim);
  data_->f32s(c.frames);
  data_->f32s(c.spectra);
  return c;
}

CorpusReader read_corpus(const std::string& dir) { return CorpusReader(dir); }

}  // namespace utixvec
