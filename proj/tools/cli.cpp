#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "utixvec/config_json.hpp"
#include "utixvec/errors.hpp"
#include "utixvec/model_io.hpp"
#include "utixvec/rng.hpp"
#include "utixvec/speaker_eval.hpp"
#include "utixvec/trainer.hpp"

namespace utixvec::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Stream key for the multi-speaker subsample.
constexpr std::uint64_t kSubsampleStream = 77;
constexpr std::size_t kExtractBatch = 8;

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << content;
  if (!f) throw IoError("write failed: " + path.string());
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path + " is not valid JSON");
  return j;
}

fs::path make_out_dir(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out + ": " + ec.message());
  return fs::path(out);
}

// Everything a subcommand can be told, with defaults.
struct Settings {
  std::string config_file;
  std::string out;
  std::uint64_t seed = 1;

  // gen-corpus
  std::size_t speakers = 30;
  std::size_t heldout = 10;
  CorpusConfig corpus_config;

  std::string corpus;

  // model shape
  std::string backbone_file;
  std::vector<std::size_t> channels;
  std::size_t frame_fc = 0;

  // training
  std::size_t epochs = 30;
  std::size_t batch_size = 0;
  double lr = AdamConfig{}.learning_rate;
  std::size_t patience = 0;
  double target = -1.0;
  double clip_norm = 0.0;

  // x-vector
  std::size_t segment_len = 164;
  std::vector<std::size_t> segment_lens{21, 41, 82, 164};
  std::string model;
  std::vector<std::string> models;
  std::string split = "dev";

  // embeddings
  std::string subset = "heldout";
  std::vector<std::string> splits{"train", "dev", "test"};
  std::string layer = "fc2";
  std::string activation = "linear";
  std::string embeddings;
  std::size_t pairs = 10000;
  std::size_t bins = 50;

  // ssi
  std::string mode = "single";
  std::vector<std::string> modes;
  std::int64_t speaker = -1;
  bool match_frames = false;
  std::string transfer_from;
};

// A subcommand plus the getters that produce its config echo.
struct Command {
  CLI::App* app = nullptr;
  std::vector<std::pair<std::string, std::function<json()>>> echo;

  template <typename T>
  CLI::Option* opt(const std::string& name, T& var, const std::string& help,
                   const std::string& short_name = "") {
    echo.emplace_back(name, [&var] { return json(var); });
    const std::string names = short_name.empty() ? "--" + name : short_name + ",--" + name;
    return app->add_option(names, var, help);
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& help) {
    echo.emplace_back(name, [&var] { return json(var); });
    return app->add_flag("--" + name, var, help);
  }

  json config_echo() const {
    json j = json::object();
    j["command"] = app->get_name();
    for (const auto& [name, get] : echo) j[name] = get();
    return j;
  }
};

// Timestamps and timings go here and nowhere else.
class RunLog {
 public:
  void line(const std::string& text) { lines_.push_back(timestamp() + " " + text); }

  void write(const fs::path& dir) const {
    std::string text;
    for (const auto& l : lines_) text += l + "\n";
    write_file(dir / "run.log", text);
  }

 private:
  std::vector<std::string> lines_;
};

struct Context {
  Settings& s;
  std::ostream& out;
  RunLog& log;
};

void finish_outputs(const Command& cmd, const fs::path& dir, RunLog& log) {
  write_file(dir / "config.json", cmd.config_echo().dump(2) + "\n");
  log.line("finished");
  log.write(dir);
}

// Config file -> extra argument tokens, skipping keys already given on the
// command line so that flags win.
std::vector<std::string> config_tokens(const CLI::App& command,
                                       const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return {};
  const json j = read_json_file(path);
  if (!j.is_object()) throw ConfigError(path + ": expected a JSON object");

  auto given = [&](const CLI::Option& option) {
    return std::any_of(args.begin() + 1, args.end(), [&](const std::string& a) {
      for (const auto& l : option.get_lnames()) {
        if (a == "--" + l || a.rfind("--" + l + "=", 0) == 0) return true;
      }
      for (const auto& s : option.get_snames()) {
        if (a.rfind("-" + s, 0) == 0) return true;
      }
      return false;
    });
  };
  auto scalar = [&](const std::string& key, const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number()) return v.dump();
    throw ConfigError(path + ": key '" + key + "' must be a string, number or boolean");
  };

  if (j.contains("command") && j["command"] != command.get_name()) {
    throw ConfigError(path + " is a config for " + j["command"].dump() + ", not '" +
                      command.get_name() + "'");
  }
  std::vector<std::string> tokens;
  for (const auto& [key, value] : j.items()) {
    if (key == "command") continue;
    if (key == "config") throw ConfigError(path + ": nested config files are not supported");
    const CLI::Option* option = command.get_option_no_throw("--" + key);
    if (option == nullptr) throw ConfigError(path + ": unknown option '" + key + "'");
    // Empty strings and lists mean "unset", as in the echo.
    if (given(*option) || value.is_null() || (value.is_string() && value.get<std::string>().empty()) ||
        (value.is_array() && value.empty())) {
      continue;
    }
    if (value.is_boolean()) {
      if (value.get<bool>()) tokens.push_back("--" + key);
    } else if (value.is_array()) {
      for (const auto& v : value) tokens.push_back("--" + key + "=" + scalar(key, v));
    } else {
      tokens.push_back("--" + key + "=" + scalar(key, value));
    }
  }
  return tokens;
}

std::size_t thread_count() {
  const char* env = std::getenv("UTIXVEC_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) {
    throw ConfigError(std::string("UTIXVEC_THREADS must be a positive integer, got '") + env + "'");
  }
  return static_cast<std::size_t>(n);
}

// Shared pieces ----------------------------------------------------------------

std::set<std::uint32_t> speakers_with_role(const CorpusManifest& manifest, SpeakerRole role) {
  std::set<std::uint32_t> ids;
  for (const auto& s : manifest.speakers) {
    if (s.role == role) ids.insert(s.speaker_id);
  }
  return ids;
}

BackboneConfig backbone_for(const Settings& s, const CorpusReader& reader) {
  BackboneConfig b = BackboneConfig::for_image(reader.height(), reader.width());
  if (!s.backbone_file.empty()) b = read_json_file(s.backbone_file).get<BackboneConfig>();
  if (!s.channels.empty()) {
    if (s.channels.size() != b.convs.size()) {
      throw ConfigError("--channels needs " + std::to_string(b.convs.size()) + " values");
    }
    for (std::size_t i = 0; i < b.convs.size(); ++i) b.convs[i].channels = s.channels[i];
  }
  if (s.frame_fc != 0) b.frame_fc_dim = s.frame_fc;
  if (b.image_h != reader.height() || b.image_w != reader.width()) {
    throw ConfigError("backbone expects " + std::to_string(b.image_h) + "x" +
                      std::to_string(b.image_w) + " images but the corpus has " +
                      std::to_string(reader.height()) + "x" + std::to_string(reader.width()));
  }
  b.validate();
  return b;
}

void check_image(const BackboneConfig& b, const CorpusReader& reader, const std::string& what) {
  if (b.image_h != reader.height() || b.image_w != reader.width()) {
    throw ConfigError(what + " was built for " + std::to_string(b.image_h) + "x" +
                      std::to_string(b.image_w) + " images but the corpus has " +
                      std::to_string(reader.height()) + "x" + std::to_string(reader.width()));
  }
}

TrainConfig train_config(const Settings& s, Task task) {
  TrainConfig tc;
  tc.task = task;
  tc.batch_size = s.batch_size;
  tc.epochs = s.epochs;
  tc.seed = s.seed;
  tc.patience = s.patience;
  tc.target_metric = s.target;
  tc.clip_norm = s.clip_norm;
  tc.validate();
  return tc;
}

AdamConfig adam_config(const Settings& s) {
  AdamConfig a;
  a.learning_rate = s.lr;
  a.validate();
  return a;
}

EpochCallback progress(Context& ctx, std::size_t epochs, const char* metric) {
  return [&ctx, epochs, metric](const EpochRecord& e) {
    ctx.out << "epoch " << e.epoch << "/" << epochs << " train_loss " << e.train_loss << " "
            << metric << " " << e.dev_metric << "\n";
    ctx.out.flush();
    std::ostringstream l;
    l << "epoch " << e.epoch << " took " << std::fixed << std::setprecision(2) << e.seconds << " s";
    ctx.log.line(l.str());
    return true;
  };
}

// Manifest indices (in manifest order) of chunks whose split is listed and
// whose speaker belongs to `subset`.
std::vector<std::size_t> embedding_chunks(const CorpusManifest& manifest, const std::string& subset,
                                          const std::vector<std::string>& splits) {
  std::set<Split> wanted;
  for (const auto& name : splits) wanted.insert(parse_split(name));
  std::function<bool(std::uint32_t)> keep;
  if (subset == "all") {
    keep = [](std::uint32_t) { return true; };
  } else if (subset == "heldout" || subset == "xvector") {
    const auto ids = speakers_with_role(
        manifest, subset == "heldout" ? SpeakerRole::kHeldOut : SpeakerRole::kXVector);
    keep = [ids](std::uint32_t id) { return ids.count(id) > 0; };
  } else {
    throw ConfigError("unknown subset '" + subset + "' (expected heldout, xvector or all)");
  }
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < manifest.chunks.size(); ++i) {
    const auto& c = manifest.chunks[i];
    if (wanted.count(c.split) && keep(c.speaker_id)) idx.push_back(i);
  }
  if (idx.empty()) throw DataError("no chunks match subset '" + subset + "' and the given splits");
  return idx;
}

std::vector<Embedding> extract_set(const XVectorModel<float>& model, CorpusReader& reader,
                                   const std::vector<std::size_t>& indices,
                                   const EmbeddingSpec& spec) {
  CorpusChunks source(reader, indices);
  SegmentSet segments(source, reader.manifest().config.chunk_len);
  std::vector<Embedding> set;
  set.reserve(segments.size());
  std::vector<std::size_t> batch;
  for (std::size_t start = 0; start < segments.size(); start += kExtractBatch) {
    batch.clear();
    for (std::size_t i = start; i < std::min(segments.size(), start + kExtractBatch); ++i) {
      batch.push_back(i);
    }
    auto vectors = extract_embeddings(model, segments.batch(batch), spec);
    for (std::size_t k = 0; k < batch.size(); ++k) {
      const auto& info = segments.chunk_info(batch[k]);
      Embedding e;
      e.vector = std::move(vectors[k]);
      e.speaker_id = info.speaker_id;
      e.session_id = info.session_id;
      e.chunk_id = info.chunk_id;
      set.push_back(std::move(e));
    }
  }
  return set;
}

// Commands ---------------------------------------------------------------------

void gen_corpus(Context& ctx, const fs::path& dir) {
  const auto& s = ctx.s;
  if (s.heldout >= s.speakers) {
    throw ConfigError("--heldout must be smaller than --speakers");
  }
  CorpusConfig c = s.corpus_config;
  c.seed = s.seed;
  c.xvector_speakers = s.speakers - s.heldout;
  c.heldout_speakers = s.heldout;
  c.validate();
  const auto manifest = build_corpus(c, dir.string());
  ctx.out << "wrote " << manifest.chunks.size() << " chunks for " << manifest.speakers.size()
          << " speakers to " << dir.string() << "\n";
}

void train_xvec(Context& ctx, const fs::path& dir) {
  const auto& s = ctx.s;
  CorpusReader reader(s.corpus);
  const auto& man = reader.manifest();
  if (s.segment_len > man.config.chunk_len) {
    throw ConfigError("--segment-len " + std::to_string(s.segment_len) +
                      " exceeds the corpus chunk length " + std::to_string(man.config.chunk_len));
  }
  const auto ids = speakers_with_role(man, SpeakerRole::kXVector);
  if (ids.empty()) throw DataError("corpus has no x-vector training speakers");
  if (*ids.rbegin() + 1 != ids.size()) {
    throw DataError("x-vector speaker ids must be 0.." + std::to_string(ids.size() - 1));
  }
  auto keep = [&ids](const ChunkInfo& c) { return ids.count(c.speaker_id) > 0; };
  CorpusChunks train(reader, select_chunks(man, Split::kTrain, keep));
  CorpusChunks dev(reader, select_chunks(man, Split::kDev, keep));
  SegmentSet train_set(train, s.segment_len);
  SegmentSet dev_set(dev, s.segment_len);

  XVectorConfig xc;
  xc.backbone = backbone_for(s, reader);
  xc.num_speakers = ids.size();
  XVectorModel<float> model(xc, s.seed);
  ctx.out << "training on " << train_set.size() << " segments of " << s.segment_len
          << " frames, " << dev_set.size() << " dev segments\n";
  const auto report = train_xvector(model, train_set, dev_set, train_config(s, Task::kXVector),
                                    adam_config(s), progress(ctx, s.epochs, "dev_error"));
  save_model(model, (dir / "model.uxvm").string());
  write_file(dir / "train.jsonl", report.to_json_lines(false));
  ctx.out << "best dev error " << report.best_dev_metric << " at epoch "
          << report.best_epoch << "\n";
}

void eval_xvec(Context& ctx, const fs::path& dir) {
  const auto& s = ctx.s;
  if (s.models.empty()) throw ConfigError("--model is required");
  if (s.segment_lens.empty()) throw ConfigError("--segment-len needs at least one value");
  if (s.models.size() != 1 && s.models.size() != s.segment_lens.size()) {
    throw ConfigError("give one --model, or one per --segment-len");
  }
  CorpusReader reader(s.corpus);
  const auto& man = reader.manifest();
  const Split split = parse_split(s.split);
  const auto ids = speakers_with_role(man, SpeakerRole::kXVector);
  CorpusChunks chunks(reader, select_chunks(man, split, [&ids](const ChunkInfo& c) {
                        return ids.count(c.speaker_id) > 0;
                      }));

  std::map<std::string, XVectorModel<float>> loaded;
  std::string csv = "segment_length,aggregated_frames," + s.split + "_error\n";
  for (std::size_t i = 0; i < s.segment_lens.size(); ++i) {
    const std::size_t len = s.segment_lens[i];
    const std::string& path = s.models.size() == 1 ? s.models[0] : s.models[i];
    if (!loaded.count(path)) {
      loaded.emplace(path, load_xvector(path));
      check_image(loaded.at(path).config().backbone, reader, path);
    }
    const auto& model = loaded.at(path);
    if (len > man.config.chunk_len) {
      throw ConfigError("segment length " + std::to_string(len) + " exceeds the chunk length " +
                        std::to_string(man.config.chunk_len));
    }
    SegmentSet set(chunks, len);
    const auto result = eval_classification(model, set);
    const std::size_t frames = len - model.config().backbone.receptive_field() + 1;
    csv += std::to_string(len) + "," + std::to_string(frames) + "," +
           format_number(result.error_rate) + "\n";
    ctx.out << "length " << len << ": " << s.split << " error "
            << result.error_rate << " over " << set.size() << " segments\n";
  }
  write_file(dir / "sweep.csv", csv);
}

void extract_emb(Context& ctx, const fs::path& dir) {
  const auto& s = ctx.s;
  const EmbeddingSpec spec{parse_embedding_layer(s.layer),
                           parse_embedding_activation(s.activation)};
  CorpusReader reader(s.corpus);
  const auto indices = embedding_chunks(reader.manifest(), s.subset, s.splits);
  const auto model = load_xvector(s.model);
  check_image(model.config().backbone, reader, s.model);
  const auto set = extract_set(model, reader, indices, spec);
  write_embeddings((dir / "embeddings.uxve").string(), set);
  ctx.out << "wrote " << set.size() << " embeddings of width "
          << embedding_width(model.config(), spec) << "\n";
}

void knn_eval(Context& ctx, const fs::path& dir) {
  const auto set = read_embeddings(ctx.s.embeddings);
  const auto result = knn_loo(set);
  write_file(dir / "knn.csv", knn_table_csv(set, result));
  write_file(dir / "knn.json", knn_summary(set, result).dump(2) + "\n");
  ctx.out << "1-NN error " << result.error_rate << " over " << set.size()
          << " embeddings\n";
}

void knn_grid(Context& ctx, const fs::path& dir) {
  const auto& s = ctx.s;
  CorpusReader reader(s.corpus);
  const auto indices = embedding_chunks(reader.manifest(), s.subset, s.splits);
  const auto model = load_xvector(s.model);
  check_image(model.config().backbone, reader, s.model);
  const EmbeddingActivation acts[] = {EmbeddingActivation::kSwish, EmbeddingActivation::kLinear};
  std::string csv = "layer";
  for (auto a : acts) csv += "," + to_string(a);
  csv += "\n";
  for (auto layer : {EmbeddingLayer::kFc1, EmbeddingLayer::kFc2}) {
    csv += to_string(layer);
    for (auto act : acts) {
      const auto result = knn_loo(extract_set(model, reader, indices, {layer, act}));
      csv += "," + format_number(result.error_rate);
      ctx.out << to_string(layer) << " " << to_string(act) << ": 1-NN error "
              << result.error_rate << "\n";
    }
    csv += "\n";
  }
  write_file(dir / "grid.csv", csv);
}

void pair_hist(Context& ctx, const fs::path& dir) {
  const auto& s = ctx.s;
  const auto set = read_embeddings(s.embeddings);
  const auto h = pair_histogram(set, s.pairs, s.bins, s.seed);
  write_file(dir / "histogram.csv", histogram_csv(h));
  write_file(dir / "histogram.json", histogram_summary(h).dump(2) + "\n");
  ctx.out << "same-speaker mean " << h.same_mean << ", different-speaker mean "
          << h.diff_mean << "\n";
}

std::uint32_t ssi_speaker(const Settings& s, const CorpusManifest& manifest) {
  if (s.speaker < 0) return first_heldout_speaker(manifest);
  return static_cast<std::uint32_t>(s.speaker);
}

// Conditioning table for multi+xvec, or nothing for the other modes.
std::optional<SessionEmbeddings> ssi_table(const Settings& s, SsiMode mode) {
  if (mode != SsiMode::kMultiXVec) {
    if (!s.embeddings.empty()) throw ConfigError("--embeddings only applies to multi+xvec");
    return std::nullopt;
  }
  if (s.embeddings.empty()) throw ConfigError("multi+xvec needs --embeddings");
  return conditioning_table(read_embeddings(s.embeddings));
}

void train_ssi(Context& ctx, const fs::path& dir) {
  const auto& s = ctx.s;
  const SsiMode mode = parse_ssi_mode(s.mode);
  const auto table = ssi_table(s, mode);
  CorpusReader reader(s.corpus);
  const auto& man = reader.manifest();
  const auto sel = select_ssi(man, mode, ssi_speaker(s, man), s.match_frames, s.seed);
  if (sel.train.empty() || sel.dev.empty()) throw DataError("no train or dev chunks selected");

  SpectralConfig sc;
  sc.backbone = backbone_for(s, reader);
  sc.embed_dim = table ? table->begin()->second.size() : 0;
  SpectralModel<float> model(sc, s.seed);

  CorpusChunks train(reader, sel.train);
  CorpusChunks dev(reader, sel.dev);
  WindowSet train_set(train);
  WindowSet dev_set(dev);
  TrainConfig tc = train_config(s, Task::kSpectral);
  tc.transfer_source = s.transfer_from;
  ctx.out << to_string(mode) << ": " << sel.train.size() << " training chunks, "
          << train_set.size() << " frames\n";
  const auto report = train_spectral(model, train_set, dev_set, tc, adam_config(s),
                                     table ? &*table : nullptr, progress(ctx, s.epochs, "dev_mse"));
  save_model(model, (dir / "model.uxvm").string());
  write_file(dir / "train.jsonl", report.to_json_lines(false));
  ctx.out << "best dev MSE " << report.best_dev_metric << " at epoch "
          << report.best_epoch << "\n";
}

void eval_ssi(Context& ctx, const fs::path& dir) {
  const auto& s = ctx.s;
  if (s.models.empty()) throw ConfigError("--model is required");
  if (s.models.size() != s.modes.size()) throw ConfigError("give one --mode per --model");
  CorpusReader reader(s.corpus);
  const auto& man = reader.manifest();
  const std::uint32_t speaker = ssi_speaker(s, man);

  std::string csv = "configuration,training_frames,dev_mse,test_mse\n";
  for (std::size_t i = 0; i < s.models.size(); ++i) {
    const SsiMode mode = parse_ssi_mode(s.modes[i]);
    const auto model = load_spectral(s.models[i]);
    check_image(model.config().backbone, reader, s.models[i]);
    if ((model.config().embed_dim > 0) != (mode == SsiMode::kMultiXVec)) {
      throw ConfigError(s.models[i] + " does not fit mode " + to_string(mode));
    }
    std::optional<SessionEmbeddings> table;
    if (mode == SsiMode::kMultiXVec) {
      if (s.embeddings.empty()) throw ConfigError("multi+xvec needs --embeddings");
      table = conditioning_table(read_embeddings(s.embeddings));
    }
    const auto sel = select_ssi(man, mode, speaker, s.match_frames, s.seed);
    CorpusChunks train(reader, sel.train);
    const std::size_t frames = WindowSet(train).size();

    auto mse_of = [&](const std::vector<std::size_t>& idx) -> std::string {
      if (idx.empty()) return "";
      CorpusChunks chunks(reader, idx);
      return format_number(eval_mse(model, WindowSet(chunks), table ? &*table : nullptr));
    };
    const std::string dev = mse_of(sel.dev);
    const std::string test = mse_of(sel.test);
    csv += to_string(mode) + "," + std::to_string(frames) + "," + dev + "," + test + "\n";
    ctx.out << to_string(mode) << ": dev MSE " << dev << ", test MSE " << test << "\n";
  }
  write_file(dir / "ssi.csv", csv);
}

// Option wiring ------------------------------------------------------------------

void common(Command& c, Settings& s, bool with_seed = true) {
  c.app->add_option("--config", s.config_file, "JSON file of option values; flags override it");
  c.opt("out", s.out, "output directory", "-o")->required();
  if (with_seed) c.opt("seed", s.seed, "random seed");
}

void model_shape(Command& c, Settings& s) {
  c.opt("backbone", s.backbone_file, "JSON backbone config (default: sized to the corpus)");
  c.opt("channels", s.channels, "output channels of the four conv layers");
  c.opt("frame-fc", s.frame_fc, "frame-level dense width (0 keeps the backbone's)");
}

void training(Command& c, Settings& s) {
  c.opt("epochs", s.epochs, "maximum epochs");
  c.opt("batch-size", s.batch_size, "minibatch size (0 picks the task default)");
  c.opt("lr", s.lr, "Adam learning rate");
  c.opt("patience", s.patience, "stop after this many epochs without improvement (0: off)");
  c.opt("target", s.target, "stop once the dev metric reaches this value (negative: off)");
  c.opt("clip-norm", s.clip_norm, "global gradient norm clip (0: off)");
}

}  // namespace

SsiMode parse_ssi_mode(const std::string& name) {
  if (name == "single") return SsiMode::kSingle;
  if (name == "multi") return SsiMode::kMulti;
  if (name == "multi+xvec") return SsiMode::kMultiXVec;
  throw ConfigError("unknown mode '" + name + "' (expected single, multi or multi+xvec)");
}

std::string to_string(SsiMode mode) {
  switch (mode) {
    case SsiMode::kSingle:
      return "single";
    case SsiMode::kMulti:
      return "multi";
    case SsiMode::kMultiXVec:
      return "multi+xvec";
  }
  return "?";
}

std::uint32_t first_heldout_speaker(const CorpusManifest& manifest) {
  const auto ids = speakers_with_role(manifest, SpeakerRole::kHeldOut);
  if (ids.empty()) throw DataError("corpus has no held-out speakers");
  return *ids.begin();
}

SsiSelection select_ssi(const CorpusManifest& manifest, SsiMode mode, std::uint32_t speaker,
                        bool match_frames, std::uint64_t seed) {
  auto of_speaker = [speaker](const ChunkInfo& c) { return c.speaker_id == speaker; };
  SsiSelection sel;
  if (mode == SsiMode::kSingle) {
    sel.train = select_chunks(manifest, Split::kTrain, of_speaker);
    sel.dev = select_chunks(manifest, Split::kDev, of_speaker);
    sel.test = select_chunks(manifest, Split::kTest, of_speaker);
    if (sel.train.empty()) {
      throw DataError("speaker " + std::to_string(speaker) + " has no training chunks");
    }
    return sel;
  }
  const auto held = speakers_with_role(manifest, SpeakerRole::kHeldOut);
  auto heldout = [&held](const ChunkInfo& c) { return held.count(c.speaker_id) > 0; };
  sel.train = select_chunks(manifest, Split::kTrain, heldout);
  sel.dev = select_chunks(manifest, Split::kDev, heldout);
  sel.test = select_chunks(manifest, Split::kTest, heldout);
  if (match_frames) {
    const std::size_t budget = select_chunks(manifest, Split::kTrain, of_speaker).size();
    if (budget == 0) {
      throw DataError("speaker " + std::to_string(speaker) + " has no training chunks to match");
    }
    Rng rng(derive_seed(seed, kSubsampleStream));
    rng.shuffle(std::span<std::size_t>(sel.train));
    sel.train.resize(std::min(budget, sel.train.size()));
    std::sort(sel.train.begin(), sel.train.end());
  }
  return sel;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Settings s;
  CLI::App app{"Ultrasound tongue image x-vectors on a synthetic corpus", "utixvec"};
  app.require_subcommand(1);

  std::map<std::string, std::pair<Command, std::function<void(Context&, const fs::path&)>>> commands;
  auto add = [&](const std::string& name, const std::string& help,
                 std::function<void(Context&, const fs::path&)> run) -> Command& {
    auto& entry = commands[name];
    entry.first.app = app.add_subcommand(name, help);
    entry.second = std::move(run);
    return entry.first;
  };

  {
    auto& c = add("gen-corpus", "generate a synthetic corpus", gen_corpus);
    common(c, s);
    auto& cc = s.corpus_config;
    c.opt("speakers", s.speakers, "total number of speakers");
    c.opt("heldout", s.heldout, "speakers kept out of x-vector training");
    c.opt("sessions", cc.sessions, "sessions per speaker");
    c.opt("utterances", cc.utterances_per_session, "utterances per session");
    c.opt("min-frames", cc.min_frames, "shortest utterance");
    c.opt("max-frames", cc.max_frames, "longest utterance");
    c.opt("chunk-len", cc.chunk_len, "frames per chunk");
    c.opt("height", cc.image_h, "image height");
    c.opt("width", cc.image_w, "image width");
    c.opt("train-ratio", cc.train_ratio, "share of each speaker's chunks for training");
    c.opt("dev-ratio", cc.dev_ratio, "share for development");
    c.opt("test-ratio", cc.test_ratio, "share for test");
  }
  {
    auto& c = add("train-xvec", "train an x-vector speaker classifier", train_xvec);
    common(c, s);
    c.opt("corpus", s.corpus, "corpus directory")->required();
    c.opt("segment-len", s.segment_len, "training segment length in frames");
    model_shape(c, s);
    training(c, s);
  }
  {
    auto& c = add("eval-xvec", "speaker error rate as a function of segment length", eval_xvec);
    common(c, s, false);
    c.opt("corpus", s.corpus, "corpus directory")->required();
    c.opt("model", s.models, "x-vector model (one, or one per segment length)");
    c.opt("segment-len", s.segment_lens, "segment lengths to evaluate");
    c.opt("split", s.split, "split to evaluate on");
  }
  {
    auto& c = add("extract-emb", "write one embedding per chunk", extract_emb);
    common(c, s, false);
    c.opt("corpus", s.corpus, "corpus directory")->required();
    c.opt("model", s.model, "x-vector model")->required();
    c.opt("subset", s.subset, "heldout, xvector or all speakers");
    c.opt("split", s.splits, "splits to include");
    c.opt("layer", s.layer, "fc1 or fc2");
    c.opt("activation", s.activation, "linear or swish");
  }
  {
    auto& c = add("knn-eval", "leave-one-out cosine 1-NN speaker error", knn_eval);
    common(c, s, false);
    c.opt("embeddings", s.embeddings, "UXVE embedding file")->required();
  }
  {
    auto& c = add("knn-grid", "1-NN error for every layer and activation", knn_grid);
    common(c, s, false);
    c.opt("corpus", s.corpus, "corpus directory")->required();
    c.opt("model", s.model, "x-vector model")->required();
    c.opt("subset", s.subset, "heldout, xvector or all speakers");
    c.opt("split", s.splits, "splits to include");
  }
  {
    auto& c = add("pair-hist", "same- and different-speaker distance histograms", pair_hist);
    common(c, s);
    c.opt("embeddings", s.embeddings, "UXVE embedding file")->required();
    c.opt("pairs", s.pairs, "pairs sampled per population");
    c.opt("bins", s.bins, "histogram bins over [0, 2]");
  }
  {
    auto& c = add("train-ssi", "train a spectral regression model", train_ssi);
    common(c, s);
    c.opt("corpus", s.corpus, "corpus directory")->required();
    c.opt("mode", s.mode, "single, multi or multi+xvec");
    c.opt("speaker", s.speaker, "speaker for single mode (default: first held-out)");
    c.flag("match-frames", s.match_frames, "subsample multi-speaker training to the single budget");
    c.opt("embeddings", s.embeddings, "UXVE file of speaker embeddings (multi+xvec)");
    c.opt("transfer-from", s.transfer_from, "spectral model to initialize from");
    model_shape(c, s);
    training(c, s);
  }
  {
    auto& c = add("eval-ssi", "dev and test MSE of spectral models", eval_ssi);
    common(c, s);
    c.opt("corpus", s.corpus, "corpus directory")->required();
    c.opt("model", s.models, "spectral model files");
    c.opt("mode", s.modes, "mode of each model");
    c.opt("speaker", s.speaker, "speaker for single mode (default: first held-out)");
    c.flag("match-frames", s.match_frames, "training budget was matched to single");
    c.opt("embeddings", s.embeddings, "UXVE file of speaker embeddings (multi+xvec)");
  }

  try {
    std::vector<std::string> argv = args;
    if (!argv.empty() && commands.count(argv[0])) {
      const auto extra = config_tokens(*commands.at(argv[0]).first.app, argv);
      argv.insert(argv.begin() + 1, extra.begin(), extra.end());
    }
    std::reverse(argv.begin(), argv.end());
    try {
      app.parse(argv);
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out, err);
      return code == 0 ? kExitOk : kExitUsage;
    }

    const std::size_t threads = thread_count();
    Eigen::setNbThreads(static_cast<int>(threads));

    for (auto& [name, entry] : commands) {
      if (!entry.first.app->parsed()) continue;
      RunLog log;
      log.line("started " + name + " with UTIXVEC_THREADS=" + std::to_string(threads));
      const auto dir = make_out_dir(s.out);
      Context ctx{s, out, log};
      entry.second(ctx, dir);
      finish_outputs(entry.first, dir, log);
    }
    return kExitOk;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DomainError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace utixvec::cli
