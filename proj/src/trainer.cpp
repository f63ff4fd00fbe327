#include "mstg/trainer.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "mstg/errors.hpp"

namespace mstg {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in native little-endian");

RngStreams RngStreams::from_seed(std::uint64_t seed) {
  auto stream = [seed](std::uint32_t id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), id};
    return std::mt19937_64(seq);
  };
  return {stream(1), stream(2), stream(3)};
}

void write_log_header(std::ostream& os) { os << "epoch,step,total,cls,reg,within,cross\n"; }

void write_log_row(std::ostream& os, const LogRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%lld,%.17g,%.17g,%.17g,%.17g,%.17g\n", static_cast<long long>(row.epoch),
                static_cast<long long>(row.step), row.loss.total, row.loss.cls, row.loss.reg, row.loss.within,
                row.loss.cross);
  os << buf;
}

template <typename Scalar>
BatchLoss<Scalar> grounding_objective(Tape<Scalar>& tape, GroundingModel<Scalar>& model, const Var<Scalar>& video,
                                      const std::vector<GroundingAnnotation>& annotations,
                                      const std::vector<std::size_t>& queries, const std::vector<Var<Scalar>>& words,
                                      const LossWeights& weights, std::mt19937_64& sampling) {
  if (queries.empty()) throw ValidationError("batch", "no queries in this batch");
  if (words.size() != queries.size()) throw ValidationError("batch", "need one word matrix per query");
  const ModelConfig& cfg = model.config;
  auto pyramid = encode_video_pyramid(video, model.params, cfg);
  const double T = static_cast<double>(video.rows());

  std::vector<TargetAssignment> targets;
  for (const auto& a : annotations) {
    targets.push_back(assign_targets(a, pyramid.lengths, cfg.alpha_center, T, cfg.downsample_ratio));
  }

  std::optional<Var<Scalar>> cls_sum, reg_sum;
  auto accumulate = [](std::optional<Var<Scalar>>& acc, const Var<Scalar>& v) { acc = acc ? add(*acc, v) : v; };
  for (std::size_t i = 0; i < queries.size(); ++i) {
    auto text = encode_text(words[i], {}, model.params, cfg);
    auto heads = ground_query(pyramid, text, model.params, cfg);
    const TargetAssignment& tg = targets.at(queries[i]);
    const auto npos = static_cast<double>(tg.decoder_positive_count());
    for (Index l = 1; l <= cfg.levels; ++l) {
      const LevelTargets& lt = tg.level(l);
      const auto& scores = heads.scores[static_cast<std::size_t>(l - 1)];
      Matrix<Scalar> labels = Matrix<Scalar>::Zero(scores.rows(), 1);
      for (Index u : lt.positives) labels(u, 0) = Scalar(1);
      accumulate(cls_sum, focal_loss(scores, labels, weights.focal_gamma, weights.focal_alpha, npos));
      if (lt.positives.empty()) continue;
      Matrix<Scalar> want(static_cast<Index>(lt.positives.size()), 2);
      for (std::size_t i = 0; i < lt.positives.size(); ++i) {
        want(static_cast<Index>(i), 0) = static_cast<Scalar>(lt.offsets[i][0]);
        want(static_cast<Index>(i), 1) = static_cast<Scalar>(lt.offsets[i][1]);
      }
      auto pred = gather_rows(heads.offsets[static_cast<std::size_t>(l - 1)], lt.positives);
      // Per-level mean reweighted to a mean over all of the query's positives.
      accumulate(reg_sum, scale(diou_loss(pred, want), static_cast<Scalar>(lt.positives.size() / npos)));
    }
  }
  const auto inv_q = static_cast<Scalar>(1.0 / static_cast<double>(queries.size()));
  Var<Scalar> cls = scale(*cls_sum, inv_q);
  Var<Scalar> reg = scale(*reg_sum, inv_q);

  auto sample = sample_query_centric(targets, sampling);
  auto sets = build_cross_scale_sets(*sample.targets, sampling);
  Var<Scalar> within = within_scale_loss(tape, pyramid.levels, sets.levels, weights.temperature,
                                         weights.normalize_embeddings);
  Var<Scalar> cross = cross_scale_loss(tape, pyramid.levels, sets, weights.temperature, weights.normalize_embeddings);

  Var<Scalar> total = add(cls, scale(reg, static_cast<Scalar>(weights.rho_reg)));
  if (weights.rho_within > 0) total = add(total, scale(within, static_cast<Scalar>(weights.rho_within)));
  if (weights.rho_cross > 0) total = add(total, scale(cross, static_cast<Scalar>(weights.rho_cross)));
  LossReport report = total_loss(static_cast<double>(cls.item()), static_cast<double>(reg.item()),
                                 static_cast<double>(within.item()), static_cast<double>(cross.item()), weights);
  return {total, report};
}

template <typename Scalar>
BatchLoss<Scalar> video_batch_loss(Tape<Scalar>& tape, GroundingModel<Scalar>& model, const VideoRecord& video,
                                   const std::vector<std::size_t>& queries, const TokenEmbedding& embedding,
                                   const LossWeights& weights, std::mt19937_64& sampling) {
  std::vector<Var<Scalar>> words;
  for (std::size_t q : queries) words.push_back(tape.constant(embedding.embed<Scalar>(video.tokens.at(q))));
  return grounding_objective(tape, model, tape.constant(video.features.template cast<Scalar>()), video.annotations,
                             queries, words, weights, sampling);
}

template <typename Scalar>
Trainer<Scalar>::Trainer(RunConfig cfg, std::vector<VideoRecord> train, TokenEmbedding embedding)
    : cfg_(std::move(cfg)),
      train_(std::move(train)),
      embedding_(std::move(embedding)),
      rng_(RngStreams::from_seed(cfg_.seed.value())),
      model_(GroundingModel<Scalar>::create(cfg_.model, rng_.init)),
      optimizer_(parameter_list(), {cfg_.optim.beta1, cfg_.optim.beta2, cfg_.optim.eps, cfg_.optim.weight_decay}) {
  cfg_.validate();
  if (train_.empty()) throw ValidationError("data", "training split is empty");
  if (embedding_.dim() != cfg_.model.text_dim) {
    throw ValidationError("model.text_dim", "does not match the token embedding width " +
                                                std::to_string(embedding_.dim()));
  }
  for (const auto& v : train_) {
    if (v.features.cols() != cfg_.model.video_dim) {
      throw ValidationError("model.video_dim", "video " + v.video_id + " has " + std::to_string(v.features.cols()) +
                                                   " feature dims");
    }
  }
}

template <typename Scalar>
std::vector<Tensor<Scalar>*> Trainer<Scalar>::parameter_list() {
  std::vector<Tensor<Scalar>*> out;
  for_each_parameter(model_.params, [&](const std::string&, Tensor<Scalar>& t) { out.push_back(&t); });
  return out;
}

template <typename Scalar>
Index Trainer<Scalar>::steps_per_epoch() const {
  const auto n = static_cast<Index>(train_.size());
  return (n + cfg_.optim.batch_videos - 1) / cfg_.optim.batch_videos;
}

template <typename Scalar>
std::vector<LogRow> Trainer<Scalar>::run_epoch() {
  const auto params = parameter_list();
  const auto batches =
      batch_video_centric(train_, rng_.data, static_cast<std::size_t>(cfg_.optim.max_queries_per_step));
  const auto group = static_cast<std::size_t>(cfg_.optim.batch_videos);
  const Index total = total_steps();
  const auto warmup = static_cast<Index>(cfg_.optim.warmup_fraction * static_cast<double>(total));
  std::vector<LogRow> rows;
  for (std::size_t begin = 0; begin < batches.size(); begin += group) {
    const std::size_t end = std::min(batches.size(), begin + group);
    const double weight = 1.0 / static_cast<double>(end - begin);
    double cls = 0, reg = 0, within = 0, cross = 0;
    for (std::size_t i = begin; i < end; ++i) {
      Tape<Scalar> tape;
      auto loss = video_batch_loss(tape, model_, train_[batches[i].video], batches[i].queries, embedding_, cfg_.loss,
                                   rng_.sampling);
      tape.backward(scale(loss.total, static_cast<Scalar>(weight)));
      cls += weight * loss.report.cls;
      reg += weight * loss.report.reg;
      within += weight * loss.report.within;
      cross += weight * loss.report.cross;
    }
    clip_grad_norm(params, cfg_.optim.grad_clip);
    optimizer_.step(warmup_cosine_lr(cfg_.optim.lr, optimizer_.steps(), warmup, total));
    optimizer_.zero_grad();
    rows.push_back({epoch_ + 1, optimizer_.steps(), total_loss(cls, reg, within, cross, cfg_.loss)});
  }
  ++epoch_;
  return rows;
}

// ---------------------------------------------------------------------------
// Checkpoints: "MGCK", u64 header length, JSON header, then raw scalars for
// every parameter, every first moment and every second moment.

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'G', 'C', 'K'};

template <typename Scalar>
constexpr Precision precision_of() {
  return sizeof(Scalar) == 8 ? Precision::Float64 : Precision::Float32;
}

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_restore(std::mt19937_64& rng, const std::string& text) {
  std::istringstream is(text);
  is >> rng;
  if (!is) throw std::runtime_error("bad rng state");
}

struct RawCheckpoint {
  json header;
  std::string payload;
};

RawCheckpoint read_raw(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string(), "cannot open checkpoint");
  std::string buf{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (buf.size() < 12 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError(path.string(), "not a checkpoint (bad magic)");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, buf.data() + 4, 8);
  if (len > buf.size() - 12) throw FormatError(path.string(), "truncated checkpoint header");
  RawCheckpoint raw;
  try {
    raw.header = json::parse(buf.substr(12, len));
  } catch (const json::exception& e) {
    throw FormatError(path.string(), std::string("corrupt checkpoint header: ") + e.what());
  }
  raw.payload = buf.substr(12 + len);
  return raw;
}

CheckpointInfo info_from(const json& h, const fs::path& path) {
  try {
    CheckpointInfo info;
    info.config_text = h.at("config").get<std::string>();
    info.config_hash = std::stoull(h.at("config_hash").get<std::string>(), nullptr, 16);
    info.precision = h.at("precision").get<std::string>() == "float64" ? Precision::Float64 : Precision::Float32;
    info.epoch = h.at("epoch").get<Index>();
    info.step = h.at("step").get<Index>();
    return info;
  } catch (const std::exception& e) {
    throw FormatError(path.string(), std::string("corrupt checkpoint header: ") + e.what());
  }
}

// Parses the stored config and checks it against the stored hash.
RunConfig checked_config(const CheckpointInfo& info, const fs::path& path) {
  RunConfig cfg = parse_config(info.config_text);
  if (config_hash(cfg) != info.config_hash) {
    throw FormatError(path.string(), "config hash mismatch: header says " + hash_hex(info.config_hash) +
                                         ", stored config hashes to " + hash_hex(config_hash(cfg)));
  }
  return cfg;
}

template <typename Scalar>
class PayloadReader {
 public:
  PayloadReader(const std::string& payload, const fs::path& path) : payload_(payload), path_(path) {}

  void read_into(Matrix<Scalar>& m) {
    const std::size_t bytes = sizeof(Scalar) * static_cast<std::size_t>(m.size());
    if (offset_ + bytes > payload_.size()) throw FormatError(path_.string(), "truncated checkpoint payload");
    std::memcpy(m.data(), payload_.data() + offset_, bytes);
    offset_ += bytes;
  }

  void finish() const {
    if (offset_ != payload_.size()) throw FormatError(path_.string(), "trailing bytes in checkpoint payload");
  }

 private:
  const std::string& payload_;
  const fs::path& path_;
  std::size_t offset_ = 0;
};

template <typename Scalar>
void check_layout(const json& h, GroundingParams<Scalar>& params, const fs::path& path) {
  const auto& list = h.at("params");
  std::size_t i = 0;
  for_each_parameter(params, [&](const std::string& name, Tensor<Scalar>& t) {
    if (i >= list.size() || list[i].at("name").get<std::string>() != name ||
        list[i].at("shape").get<Shape>() != t.shape()) {
      throw FormatError(path.string(), "parameter layout differs at " + name);
    }
    ++i;
  });
  if (i != list.size()) throw FormatError(path.string(), "checkpoint has extra parameters");
}

}  // namespace

template <typename Scalar>
void Trainer<Scalar>::save_checkpoint(const fs::path& path) const {
  auto& self = const_cast<Trainer&>(*this);
  json h;
  h["version"] = 1;
  h["precision"] = precision_name(precision_of<Scalar>());
  h["config"] = serialize_config(cfg_);
  h["config_hash"] = hash_hex(config_hash(cfg_));
  h["epoch"] = epoch_;
  h["step"] = optimizer_.steps();
  h["rng"] = {{"init", rng_text(rng_.init)}, {"sampling", rng_text(rng_.sampling)}, {"data", rng_text(rng_.data)}};
  json list = json::array();
  std::string payload;
  auto append = [&](const Matrix<Scalar>& m) {
    payload.append(reinterpret_cast<const char*>(m.data()), sizeof(Scalar) * static_cast<std::size_t>(m.size()));
  };
  for_each_parameter(self.model_.params, [&](const std::string& name, Tensor<Scalar>& t) {
    list.push_back({{"name", name}, {"shape", t.shape()}});
    append(t.data());
  });
  h["params"] = list;
  for (const auto& m : self.optimizer_.first_moments()) append(m);
  for (const auto& v : self.optimizer_.second_moments()) append(v);

  const std::string header = h.dump();
  const std::uint64_t len = header.size();
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(tmp.string(), "cannot open for writing");
    out.write(kCheckpointMagic, 4);
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw FormatError(tmp.string(), "write failed");
  }
  fs::rename(tmp, path);
}

template <typename Scalar>
void Trainer<Scalar>::load_checkpoint(const fs::path& path) {
  RawCheckpoint raw = read_raw(path);
  CheckpointInfo info = info_from(raw.header, path);
  checked_config(info, path);
  if (info.precision != precision_of<Scalar>()) {
    throw ValidationError("precision", "checkpoint was written in " + std::string(precision_name(info.precision)));
  }
  if (info.config_hash != config_hash(cfg_)) {
    throw ValidationError("config", "checkpoint config hash " + hash_hex(info.config_hash) +
                                        " differs from this run's " + hash_hex(config_hash(cfg_)));
  }
  check_layout(raw.header, model_.params, path);
  PayloadReader<Scalar> reader(raw.payload, path);
  for_each_parameter(model_.params, [&](const std::string&, Tensor<Scalar>& t) { reader.read_into(t.data()); });
  for (auto& m : optimizer_.first_moments()) reader.read_into(m);
  for (auto& v : optimizer_.second_moments()) reader.read_into(v);
  reader.finish();
  try {
    rng_restore(rng_.init, raw.header.at("rng").at("init").get<std::string>());
    rng_restore(rng_.sampling, raw.header.at("rng").at("sampling").get<std::string>());
    rng_restore(rng_.data, raw.header.at("rng").at("data").get<std::string>());
  } catch (const std::exception& e) {
    throw FormatError(path.string(), std::string("corrupt rng state: ") + e.what());
  }
  optimizer_.set_steps(info.step);
  epoch_ = info.epoch;
}

CheckpointInfo read_checkpoint_info(const fs::path& path) { return info_from(read_raw(path).header, path); }

template <typename Scalar>
GroundingModel<Scalar> load_model(const fs::path& path, RunConfig* cfg_out) {
  RawCheckpoint raw = read_raw(path);
  CheckpointInfo info = info_from(raw.header, path);
  RunConfig cfg = checked_config(info, path);
  if (info.precision != precision_of<Scalar>()) {
    throw ValidationError("precision", "checkpoint was written in " + std::string(precision_name(info.precision)));
  }
  std::mt19937_64 unused(0);
  auto model = GroundingModel<Scalar>::create(cfg.model, unused);
  check_layout(raw.header, model.params, path);
  std::size_t param_bytes = 0;
  for_each_parameter(model.params, [&](const std::string&, Tensor<Scalar>& t) {
    param_bytes += sizeof(Scalar) * static_cast<std::size_t>(t.numel());
  });
  // Parameters followed by two moment buffers of the same size.
  if (raw.payload.size() != 3 * param_bytes) {
    throw FormatError(path.string(), "checkpoint payload has " + std::to_string(raw.payload.size()) +
                                         " bytes, expected " + std::to_string(3 * param_bytes));
  }
  PayloadReader<Scalar> reader(raw.payload, path);
  for_each_parameter(model.params, [&](const std::string&, Tensor<Scalar>& t) { reader.read_into(t.data()); });
  if (cfg_out) *cfg_out = std::move(cfg);
  return model;
}

template class Trainer<float>;
template class Trainer<double>;
template BatchLoss<float> video_batch_loss(Tape<float>&, GroundingModel<float>&, const VideoRecord&,
                                           const std::vector<std::size_t>&, const TokenEmbedding&,
                                           const LossWeights&, std::mt19937_64&);
template BatchLoss<double> video_batch_loss(Tape<double>&, GroundingModel<double>&, const VideoRecord&,
                                            const std::vector<std::size_t>&, const TokenEmbedding&,
                                            const LossWeights&, std::mt19937_64&);
template BatchLoss<float> grounding_objective(Tape<float>&, GroundingModel<float>&, const Var<float>&,
                                              const std::vector<GroundingAnnotation>&, const std::vector<std::size_t>&,
                                              const std::vector<Var<float>>&, const LossWeights&, std::mt19937_64&);
template BatchLoss<double> grounding_objective(Tape<double>&, GroundingModel<double>&, const Var<double>&,
                                               const std::vector<GroundingAnnotation>&,
                                               const std::vector<std::size_t>&, const std::vector<Var<double>>&,
                                               const LossWeights&, std::mt19937_64&);
template GroundingModel<float> load_model<float>(const fs::path&, RunConfig*);
template GroundingModel<double> load_model<double>(const fs::path&, RunConfig*);

}  // namespace mstg
