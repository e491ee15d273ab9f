#include "utixvec/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "utixvec/config_json.hpp"
#include "utixvec/errors.hpp"
#include "utixvec/model_io.hpp"
#include "utixvec/ops.hpp"
#include "utixvec/rng.hpp"
#include "utixvec/speaker_eval.hpp"

namespace utixvec {

using nlohmann::json;

namespace {

constexpr std::size_t kWindow = 21;
constexpr std::size_t kCentre = kWindow / 2;
// Fixed so that a reloaded model reproduces a reported dev metric exactly.
constexpr std::size_t kEvalBatch = 8;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<Tensor<float>> tensors_of(const std::vector<NamedParameter<float>>& params) {
  std::vector<Tensor<float>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

std::vector<std::vector<float>> snapshot(const std::vector<Tensor<float>>& params) {
  std::vector<std::vector<float>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

void restore(const std::vector<Tensor<float>>& params,
             const std::vector<std::vector<float>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].node()->data.begin();
    std::copy(values[i].begin(), values[i].end(), dst);
  }
}

void zero_grads(const std::vector<Tensor<float>>& params) {
  for (auto p : params) p.zero_grad();
}

void clip_gradients(const std::vector<Tensor<float>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const auto scale = static_cast<float>(max_norm / norm);
  for (auto p : params) {
    if (!p.has_grad()) continue;
    for (auto& g : p.mutable_grad()) g *= scale;
  }
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x73687566, epoch));
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

// Shared epoch loop: `step` trains on one batch and returns its mean loss,
// `evaluate` returns (dev loss, dev metric).
template <typename Step, typename Evaluate>
TrainReport run_epochs(Task task, std::size_t items, std::size_t batch_size,
                       const std::vector<Tensor<float>>& params, const TrainConfig& config,
                       const Step& step, const Evaluate& evaluate, const EpochCallback& on_epoch) {
  const auto start = Clock::now();
  TrainReport report;
  report.task = task;
  report.train_items = items;
  report.initial_dev_metric = evaluate().second;

  std::vector<std::vector<float>> best;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    const auto order = epoch_order(items, config.seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < items; b += batch_size) {
      const std::size_t n = std::min(batch_size, items - b);
      const double loss = step(std::span<const std::size_t>(order.data() + b, n));
      if (!std::isfinite(loss)) {
        throw NumericalError(to_string(task) + " training diverged: loss " + std::to_string(loss) +
                             " in epoch " + std::to_string(epoch));
      }
      loss_sum += loss * static_cast<double>(n);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(items);
    std::tie(rec.dev_loss, rec.dev_metric) = evaluate();
    rec.seconds = seconds_since(epoch_start);
    report.epochs.push_back(rec);

    if (report.best_epoch == 0 || rec.dev_metric < report.best_dev_metric) {
      report.best_epoch = epoch;
      report.best_dev_metric = rec.dev_metric;
      best = snapshot(params);
      since_best = 0;
    } else {
      ++since_best;
    }

    bool keep_going = !on_epoch || on_epoch(rec);
    if (config.patience > 0 && since_best >= config.patience) keep_going = false;
    if (config.target_metric >= 0.0 && rec.dev_metric <= config.target_metric) keep_going = false;
    if (!keep_going) break;
  }
  if (!best.empty()) restore(params, best);
  report.seconds = seconds_since(start);
  return report;
}

void check_labels(const SegmentSet& set, std::size_t num_speakers, const char* what) {
  if (set.size() == 0) throw DataError(std::string(what) + " set is empty");
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.label(i) >= num_speakers) {
      throw DataError(std::string(what) + " segment " + std::to_string(i) + " has speaker " +
                      std::to_string(set.label(i)) + " but the model has " +
                      std::to_string(num_speakers) + " outputs");
    }
  }
}

std::string key_string(const SessionKey& k) {
  return "(speaker " + std::to_string(k.speaker) + ", session " + std::to_string(k.session) + ")";
}

const std::vector<float>& lookup(const SessionEmbeddings& table, const ChunkInfo& info) {
  const SessionKey key{info.speaker_id, info.session_id};
  const auto it = table.find(key);
  if (it == table.end()) throw DataError("no speaker embedding for " + key_string(key));
  return it->second;
}

}  // namespace

// Optimizer --------------------------------------------------------------------------

void AdamConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("adam: learning rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("adam: beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam: beta2 must be in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("adam: epsilon must be positive");
}

template <typename T>
void adam_step(const std::vector<Tensor<T>>& params, const std::vector<std::span<const T>>& grads,
               AdamState<T>& state, const AdamConfig& config) {
  if (grads.size() != params.size()) {
    throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].numel()) {
      throw DimensionError("adam_step: gradient " + std::to_string(i) + " has " +
                           std::to_string(grads[i].size()) + " values for a parameter of shape " +
                           shape_string(params[i].shape()));
    }
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  } else if (state.m.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }

  ++state.t;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].node()->data.data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != params[i].numel()) {
      throw DimensionError("adam_step: optimizer state does not match parameter " +
                           std::to_string(i));
    }
    const auto g = grads[i];
    for (std::size_t k = 0; k < m.size(); ++k) {
      const double gk = g[k];
      const double mk = b1 * m[k] + (1.0 - b1) * gk;
      const double vk = b2 * v[k] + (1.0 - b2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double m_hat = mk / c1;
      const double v_hat = vk / c2;
      theta[k] = static_cast<T>(theta[k] - config.learning_rate * m_hat /
                                               (std::sqrt(v_hat) + config.epsilon));
    }
  }
}

template <typename T>
void adam_step(const std::vector<Tensor<T>>& params, AdamState<T>& state,
               const AdamConfig& config) {
  std::vector<std::vector<T>> zeros(params.size());
  std::vector<std::span<const T>> grads;
  grads.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].has_grad()) {
      grads.push_back(params[i].grad());
    } else {
      zeros[i].assign(params[i].numel(), T(0));
      grads.push_back(zeros[i]);
    }
  }
  adam_step(params, grads, state, config);
}

template void adam_step(const std::vector<Tensor<float>>&,
                        const std::vector<std::span<const float>>&, AdamState<float>&,
                        const AdamConfig&);
template void adam_step(const std::vector<Tensor<double>>&,
                        const std::vector<std::span<const double>>&, AdamState<double>&,
                        const AdamConfig&);
template void adam_step(const std::vector<Tensor<float>>&, AdamState<float>&, const AdamConfig&);
template void adam_step(const std::vector<Tensor<double>>&, AdamState<double>&, const AdamConfig&);

// Data -------------------------------------------------------------------------------

MemoryChunks::MemoryChunks(std::vector<Chunk> chunks) : chunks_(std::move(chunks)) {
  if (chunks_.empty()) return;
  height_ = chunks_.front().height;
  width_ = chunks_.front().width;
  for (const auto& c : chunks_) {
    if (c.height != height_ || c.width != width_) {
      throw DataError("chunks of different image sizes cannot share a source");
    }
    if (c.frames.size() != c.info.length * height_ * width_ ||
        c.spectra.size() != c.info.length * kSpectrumDim) {
      throw DataError("chunk " + std::to_string(c.info.chunk_id) +
                      " payload does not match its length");
    }
  }
}

void MemoryChunks::frames(std::size_t i, std::size_t start, std::size_t count,
                          std::span<float> out) {
  const auto& c = chunks_.at(i);
  const std::size_t frame = height_ * width_;
  if (start + count > c.info.length || out.size() != count * frame) {
    throw IndexError("frame range out of bounds for chunk " + std::to_string(c.info.chunk_id));
  }
  std::copy_n(c.frames.begin() + static_cast<std::ptrdiff_t>(start * frame), count * frame,
              out.begin());
}

void MemoryChunks::spectra(std::size_t i, std::size_t start, std::size_t count,
                           std::span<float> out) {
  const auto& c = chunks_.at(i);
  if (start + count > c.info.length || out.size() != count * kSpectrumDim) {
    throw IndexError("spectra range out of bounds for chunk " + std::to_string(c.info.chunk_id));
  }
  std::copy_n(c.spectra.begin() + static_cast<std::ptrdiff_t>(start * kSpectrumDim),
              count * kSpectrumDim, out.begin());
}

CorpusChunks::CorpusChunks(CorpusReader& reader, std::vector<std::size_t> indices)
    : reader_(&reader), indices_(std::move(indices)) {
  for (auto i : indices_) {
    if (i >= reader.size()) throw IndexError("chunk index " + std::to_string(i) + " out of range");
  }
}

const ChunkInfo& CorpusChunks::info(std::size_t i) const {
  return reader_->manifest().chunks[indices_.at(i)];
}

void CorpusChunks::frames(std::size_t i, std::size_t start, std::size_t count,
                          std::span<float> out) {
  reader_->read_frames(indices_.at(i), start, count, out);
}

void CorpusChunks::spectra(std::size_t i, std::size_t start, std::size_t count,
                           std::span<float> out) {
  reader_->read_spectra(indices_.at(i), start, count, out);
}

std::vector<std::size_t> select_chunks(const CorpusManifest& manifest, Split split,
                                       const std::function<bool(const ChunkInfo&)>& keep) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest.chunks.size(); ++i) {
    const auto& c = manifest.chunks[i];
    if (c.split == split && (!keep || keep(c))) out.push_back(i);
  }
  return out;
}

SegmentSet::SegmentSet(ChunkSource& source, std::size_t length)
    : source_(&source), length_(length) {
  if (length < kWindow) {
    throw InputTooShortError("segments need at least 21 frames, got " + std::to_string(length));
  }
  for (std::size_t c = 0; c < source.size(); ++c) {
    const std::size_t n = source.info(c).length / length;
    for (std::size_t k = 0; k < n; ++k) refs_.push_back({c, k * length});
  }
}

std::uint32_t SegmentSet::label(std::size_t i) const { return chunk_info(i).speaker_id; }

const ChunkInfo& SegmentSet::chunk_info(std::size_t i) const {
  return source_->info(refs_.at(i).chunk);
}

Tensor<float> SegmentSet::batch(std::span<const std::size_t> indices) const {
  const std::size_t h = source_->height(), w = source_->width();
  const std::size_t each = length_ * h * w;
  std::vector<float> data(indices.size() * each);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& r = refs_.at(indices[b]);
    source_->frames(r.chunk, r.start, length_, std::span<float>(data.data() + b * each, each));
  }
  return Tensor<float>({indices.size(), length_, h, w}, std::move(data));
}

SessionEmbeddings average_by_session(const std::vector<Embedding>& set) {
  std::map<SessionKey, std::pair<std::vector<double>, std::size_t>> sums;
  for (const auto& e : set) {
    auto& [sum, count] = sums[{e.speaker_id, e.session_id}];
    if (count == 0) {
      sum.assign(e.vector.size(), 0.0);
    } else if (sum.size() != e.vector.size()) {
      throw DataError("embeddings of different widths for one session");
    }
    for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += e.vector[k];
    ++count;
  }
  SessionEmbeddings out;
  for (const auto& [key, entry] : sums) {
    const auto& [sum, count] = entry;
    std::vector<float> mean(sum.size());
    for (std::size_t k = 0; k < sum.size(); ++k) {
      mean[k] = static_cast<float>(sum[k] / static_cast<double>(count));
    }
    out.emplace(key, std::move(mean));
  }
  return out;
}

SessionEmbeddings conditioning_table(const std::vector<Embedding>& set) {
  auto table = average_by_session(set);
  for (auto& [key, vec] : table) {
    double sq = 0.0;
    for (float x : vec) sq += static_cast<double>(x) * x;
    if (sq == 0.0) throw DomainError("mean embedding of " + key_string(key) + " is zero");
    const double scale = 1.0 / std::sqrt(sq);
    for (auto& x : vec) x = static_cast<float>(x * scale);
  }
  return table;
}

WindowSet::WindowSet(ChunkSource& source) : source_(&source) {
  for (std::size_t c = 0; c < source.size(); ++c) {
    const std::size_t length = source.info(c).length;
    if (length < kWindow) continue;
    for (std::size_t p = 0; p + kWindow <= length; ++p) refs_.push_back({c, p});
  }
}

const ChunkInfo& WindowSet::chunk_info(std::size_t i) const {
  return source_->info(refs_.at(i).chunk);
}

Tensor<float> WindowSet::windows(std::span<const std::size_t> indices) const {
  const std::size_t h = source_->height(), w = source_->width();
  const std::size_t each = kWindow * h * w;
  std::vector<float> data(indices.size() * each);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& r = refs_.at(indices[b]);
    source_->frames(r.chunk, r.start, kWindow, std::span<float>(data.data() + b * each, each));
  }
  return Tensor<float>({indices.size(), kWindow, h, w}, std::move(data));
}

Tensor<float> WindowSet::targets(std::span<const std::size_t> indices) const {
  std::vector<float> data(indices.size() * kSpectrumDim);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& r = refs_.at(indices[b]);
    source_->spectra(r.chunk, r.start + kCentre, 1,
                     std::span<float>(data.data() + b * kSpectrumDim, kSpectrumDim));
  }
  return Tensor<float>({indices.size(), kSpectrumDim}, std::move(data));
}

Tensor<float> embedding_rows(const WindowSet& set, std::span<const std::size_t> indices,
                             const SessionEmbeddings& table) {
  std::vector<float> data;
  std::size_t width = 0;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& e = lookup(table, set.chunk_info(indices[b]));
    if (b == 0) {
      width = e.size();
      data.reserve(indices.size() * width);
    } else if (e.size() != width) {
      throw DataError("speaker embeddings of different widths");
    }
    data.insert(data.end(), e.begin(), e.end());
  }
  return Tensor<float>({indices.size(), width}, std::move(data));
}

// Training ---------------------------------------------------------------------------

std::string to_string(Task task) { return task == Task::kXVector ? "xvector" : "spectral"; }

std::size_t xvector_batch_size(std::size_t segment_len) {
  if (segment_len <= 41) return 16;
  if (segment_len <= 82) return 8;
  return 4;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
  if (!(clip_norm >= 0.0)) throw ConfigError("train: clip_norm must be non-negative");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"task", to_string(c.task)},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"seed", c.seed},
           {"patience", c.patience},
           {"target_metric", c.target_metric},
           {"clip_norm", c.clip_norm},
           {"transfer_source", c.transfer_source},
           {"embedding_source", c.embedding_source}};
}

void from_json(const json& j, TrainConfig& c) {
  check_keys(j,
             {"task", "batch_size", "epochs", "seed", "patience", "target_metric", "clip_norm",
              "transfer_source", "embedding_source"},
             "train config");
  if (j.contains("task")) {
    const auto task = j.at("task").get<std::string>();
    if (task == "xvector") {
      c.task = Task::kXVector;
    } else if (task == "spectral") {
      c.task = Task::kSpectral;
    } else {
      throw ConfigError("train config: unknown task '" + task + "'");
    }
  }
  auto get = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::remove_reference_t<decltype(out)>>();
  };
  get("batch_size", c.batch_size);
  get("epochs", c.epochs);
  get("seed", c.seed);
  get("patience", c.patience);
  get("target_metric", c.target_metric);
  get("clip_norm", c.clip_norm);
  get("transfer_source", c.transfer_source);
  get("embedding_source", c.embedding_source);
}

void to_json(json& j, const AdamConfig& c) {
  j = json{{"learning_rate", c.learning_rate},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"epsilon", c.epsilon}};
}

void from_json(const json& j, AdamConfig& c) {
  check_keys(j, {"learning_rate", "beta1", "beta2", "epsilon"}, "adam config");
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("beta1")) c.beta1 = j.at("beta1").get<double>();
  if (j.contains("beta2")) c.beta2 = j.at("beta2").get<double>();
  if (j.contains("epsilon")) c.epsilon = j.at("epsilon").get<double>();
}

std::string TrainReport::to_json_lines(bool with_timing) const {
  const std::string metric = task == Task::kXVector ? "dev_error" : "dev_mse";
  std::string out;
  for (const auto& e : epochs) {
    json j{{"epoch", e.epoch},
           {"train_loss", e.train_loss},
           {"dev_loss", e.dev_loss},
           {metric, e.dev_metric}};
    if (with_timing) j["seconds"] = e.seconds;
    out += j.dump() + "\n";
  }
  json s{{"summary", true},
         {"task", to_string(task)},
         {"train_items", train_items},
         {"epochs_run", epochs.size()},
         {"initial_" + metric, initial_dev_metric},
         {"best_epoch", best_epoch},
         {"best_" + metric, best_dev_metric}};
  if (with_timing) s["seconds"] = seconds;
  out += s.dump() + "\n";
  return out;
}

TrainReport train_xvector(XVectorModel<float>& model, const SegmentSet& train,
                          const SegmentSet& dev, const TrainConfig& config,
                          const AdamConfig& adam, const EpochCallback& on_epoch) {
  config.validate();
  adam.validate();
  check_labels(train, model.config().num_speakers, "training");
  check_labels(dev, model.config().num_speakers, "dev");
  const std::size_t batch = config.batch_size > 0 ? config.batch_size
                                                  : xvector_batch_size(train.length());
  const auto params = tensors_of(model.parameters());
  AdamState<float> state;

  auto step = [&](std::span<const std::size_t> idx) {
    zero_grads(params);
    std::vector<std::size_t> labels(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) labels[b] = train.label(idx[b]);
    const auto out = model.forward(train.batch(idx));
    const auto xent = softmax_xent(out.logits, labels);
    const double loss = xent.loss.item();
    if (!std::isfinite(loss)) return loss;
    backward(xent.loss);
    if (config.clip_norm > 0.0) clip_gradients(params, config.clip_norm);
    adam_step(params, state, adam);
    return loss;
  };
  auto evaluate = [&] {
    const auto r = eval_classification(model, dev);
    return std::pair{r.mean_loss, r.error_rate};
  };
  return run_epochs(Task::kXVector, train.size(), batch, params, config, step, evaluate, on_epoch);
}

void initialize_from(const SpectralModel<float>& source, SpectralModel<float>& target) {
  transfer_conv_weights(source, target);
  const auto backbone_count = target.backbone().parameters().size();
  const auto src = source.parameters();
  const auto dst = target.parameters();
  for (std::size_t i = backbone_count; i < dst.size(); ++i) {
    if (src[i].tensor.shape() != dst[i].tensor.shape()) return;
  }
  for (std::size_t i = backbone_count; i < dst.size(); ++i) {
    auto from = src[i].tensor.data();
    std::copy(from.begin(), from.end(), dst[i].tensor.node()->data.begin());
  }
}

TrainReport train_spectral(SpectralModel<float>& model, const WindowSet& train,
                           const WindowSet& dev, const TrainConfig& config,
                           const AdamConfig& adam, const SessionEmbeddings* embeddings,
                           const EpochCallback& on_epoch) {
  config.validate();
  adam.validate();
  if (train.size() == 0) throw DataError("training set has no 21-frame windows");
  if (dev.size() == 0) throw DataError("dev set has no 21-frame windows");
  if (!config.transfer_source.empty()) {
    initialize_from(load_spectral(config.transfer_source), model);
  }

  SessionEmbeddings loaded;
  const std::size_t embed_dim = model.config().embed_dim;
  if (embed_dim > 0 && embeddings == nullptr) {
    if (config.embedding_source.empty()) {
      throw ConfigError("spectral model takes a speaker embedding but no embedding table was given");
    }
    loaded = conditioning_table(read_embeddings(config.embedding_source));
    embeddings = &loaded;
  }
  if (embed_dim > 0) {
    for (const auto& [key, vec] : *embeddings) {
      if (vec.size() != embed_dim) {
        throw DataError("embedding for " + key_string(key) + " has width " +
                        std::to_string(vec.size()) + ", model expects " +
                        std::to_string(embed_dim));
      }
    }
    // Fail before training rather than in the middle of an epoch.
    for (const auto* set : {&train, &dev}) {
      for (std::size_t c = 0; c < set->source().size(); ++c) lookup(*embeddings, set->source().info(c));
    }
  } else {
    embeddings = nullptr;
  }

  const std::size_t batch = config.batch_size > 0 ? config.batch_size : kSpectralBatchSize;
  const auto params = tensors_of(model.parameters());
  AdamState<float> state;

  auto step = [&](std::span<const std::size_t> idx) {
    zero_grads(params);
    Tensor<float> emb;
    if (embeddings != nullptr) emb = embedding_rows(train, idx, *embeddings);
    const auto loss_t = mse(model.forward(train.windows(idx), emb), train.targets(idx));
    const double loss = loss_t.item();
    if (!std::isfinite(loss)) return loss;
    backward(loss_t);
    if (config.clip_norm > 0.0) clip_gradients(params, config.clip_norm);
    adam_step(params, state, adam);
    return loss;
  };
  auto evaluate = [&] {
    const double m = eval_mse(model, dev, embeddings);
    return std::pair{m, m};
  };
  return run_epochs(Task::kSpectral, train.size(), batch, params, config, step, evaluate,
                    on_epoch);
}

// Metrics ----------------------------------------------------------------------------

double classification_error(const Tensor<float>& scores, std::span<const std::uint32_t> labels) {
  if (scores.rank() != 2) {
    throw DimensionError("classification_error: expected [N, K] scores, got " +
                         shape_string(scores.shape()));
  }
  const std::size_t n = scores.dim(0), k = scores.dim(1);
  if (n == 0) throw DataError("classification_error: empty set");
  if (labels.size() != n) {
    throw DimensionError("classification_error: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
  }
  const auto v = scores.data();
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = v.subspan(i * k, k);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) -
                                               row.begin());
    if (best != labels[i]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(n);
}

ClassificationResult eval_classification(const XVectorModel<float>& model, const SegmentSet& set) {
  if (set.size() == 0) throw DataError("eval_classification: empty set");
  NoGradGuard no_grad;
  double wrong = 0.0, loss = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < set.size(); b += kEvalBatch) {
    const std::size_t n = std::min(kEvalBatch, set.size() - b);
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), b);
    std::vector<std::uint32_t> labels(n);
    std::vector<std::size_t> wide(n);
    for (std::size_t i = 0; i < n; ++i) wide[i] = labels[i] = set.label(idx[i]);
    const auto logits = model.forward(set.batch(idx)).logits;
    wrong += classification_error(logits, labels) * static_cast<double>(n);
    loss += static_cast<double>(softmax_xent(logits, wide).loss.item()) * static_cast<double>(n);
  }
  const auto total = static_cast<double>(set.size());
  return {wrong / total, loss / total};
}

double mean_squared_error(std::span<const float> pred, std::span<const float> target) {
  if (pred.size() != target.size()) {
    throw DimensionError("mean_squared_error: " + std::to_string(pred.size()) + " predictions for " +
                         std::to_string(target.size()) + " targets");
  }
  if (pred.empty()) throw DataError("mean_squared_error: empty set");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    sum += d * d;
  }
  return sum / static_cast<double>(pred.size());
}

double eval_mse(const SpectralModel<float>& model, const WindowSet& set,
                const SessionEmbeddings* embeddings) {
  if (set.size() == 0) throw DataError("eval_mse: empty set");
  const bool conditioned = model.config().embed_dim > 0;
  if (conditioned && embeddings == nullptr) {
    throw ConfigError("eval_mse: spectral model takes a speaker embedding but none were given");
  }
  NoGradGuard no_grad;
  auto& source = set.source();
  const std::size_t frame = source.height() * source.width();
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < source.size(); ++c) {
    const auto& info = source.info(c);
    if (info.length < kWindow) continue;
    std::vector<float> frames(info.length * frame);
    source.frames(c, 0, info.length, frames);
    const std::size_t positions = info.length - kWindow + 1;
    std::vector<float> target(positions * kSpectrumDim);
    source.spectra(c, kCentre, positions, target);
    std::span<const float> emb;
    if (conditioned) emb = lookup(*embeddings, info);
    const auto pred = model.forward_dense(
        Tensor<float>({info.length, source.height(), source.width()}, std::move(frames)), emb);
    const auto p = pred.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = static_cast<double>(p[i]) - target[i];
      sum += d * d;
    }
    count += p.size();
  }
  return sum / static_cast<double>(count);
}

}  // namespace utixvec
