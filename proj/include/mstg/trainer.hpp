#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mstg/config.hpp"
#include "mstg/data.hpp"
#include "mstg/losses.hpp"
#include "mstg/model.hpp"
#include "mstg/optim.hpp"

namespace mstg {

/// Independent generators split from one root seed, so changing how one
/// consumer draws leaves the others untouched.
struct RngStreams {
  std::mt19937_64 init;
  std::mt19937_64 sampling;
  std::mt19937_64 data;

  static RngStreams from_seed(std::uint64_t seed);
};

struct LogRow {
  Index epoch = 0;
  Index step = 0;
  LossReport loss;
};

void write_log_header(std::ostream& os);
void write_log_row(std::ostream& os, const LogRow& row);

/// Loss of one video-centric batch, recorded on `tape`.
template <typename Scalar>
struct BatchLoss {
  Var<Scalar> total;
  LossReport report;
};

/// Training objective for one video given as a tape variable. `words[i]` is
/// the embedded token matrix of `annotations[queries[i]]`. Grounding losses
/// are averaged over `queries`; both contrastive losses use one query drawn
/// uniformly from all annotations and share one draw of negatives.
template <typename Scalar>
BatchLoss<Scalar> grounding_objective(Tape<Scalar>& tape, GroundingModel<Scalar>& model, const Var<Scalar>& video,
                                      const std::vector<GroundingAnnotation>& annotations,
                                      const std::vector<std::size_t>& queries, const std::vector<Var<Scalar>>& words,
                                      const LossWeights& weights, std::mt19937_64& sampling);

/// Grounding losses averaged over the batch queries plus both contrastive
/// losses for one query drawn uniformly from all of the video's queries.
/// Within- and cross-scale terms share one draw of negatives.
template <typename Scalar>
BatchLoss<Scalar> video_batch_loss(Tape<Scalar>& tape, GroundingModel<Scalar>& model, const VideoRecord& video,
                                   const std::vector<std::size_t>& queries, const TokenEmbedding& embedding,
                                   const LossWeights& weights, std::mt19937_64& sampling);

/// Training loop state: model, optimizer, schedule position and RNG streams.
template <typename Scalar>
class Trainer {
 public:
  Trainer(RunConfig cfg, std::vector<VideoRecord> train, TokenEmbedding embedding);
  // The optimizer holds pointers into the model.
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const RunConfig& config() const { return cfg_; }
  GroundingModel<Scalar>& model() { return model_; }
  const TokenEmbedding& embedding() const { return embedding_; }
  Index epoch() const { return epoch_; }
  Index step() const { return optimizer_.steps(); }
  Index steps_per_epoch() const;
  Index total_steps() const { return steps_per_epoch() * cfg_.optim.epochs; }

  /// Trains one epoch; returns one row per optimizer step.
  std::vector<LogRow> run_epoch();

  /// Full resumable state: parameters, moments, step and epoch counters and
  /// RNG streams, tagged with the config hash.
  void save_checkpoint(const std::filesystem::path& path) const;
  /// Restores state written by save_checkpoint for the same config.
  void load_checkpoint(const std::filesystem::path& path);

 private:
  std::vector<Tensor<Scalar>*> parameter_list();

  RunConfig cfg_;
  std::vector<VideoRecord> train_;
  TokenEmbedding embedding_;
  RngStreams rng_;
  GroundingModel<Scalar> model_;
  AdamW<Scalar> optimizer_;
  Index epoch_ = 0;
};

/// Checkpoint header, readable without knowing the scalar type.
struct CheckpointInfo {
  std::string config_text;
  std::uint64_t config_hash = 0;
  Precision precision = Precision::Float32;
  Index epoch = 0;
  Index step = 0;
};

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// Model parameters only, for evaluation and prediction.
template <typename Scalar>
GroundingModel<Scalar> load_model(const std::filesystem::path& path, RunConfig* cfg_out = nullptr);

extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace mstg
