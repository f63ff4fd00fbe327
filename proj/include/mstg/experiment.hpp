#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "mstg/config.hpp"
#include "mstg/data.hpp"
#include "mstg/decode.hpp"
#include "mstg/inference.hpp"
#include "mstg/trainer.hpp"

namespace mstg {

/// Splits named by `cfg.data_dir`, or generated from `cfg.synth` when it is empty.
Dataset load_dataset(const RunConfig& cfg);

/// Token table matching the dataset the config points at.
TokenEmbedding make_embedding(const RunConfig& cfg);

/// Dataset metadata for `cfg`, checked against the model input widths.
DatasetInfo dataset_info(const RunConfig& cfg);

/// Recall at the default K and tIoU grid plus quartile-stratified IoU.
template <typename Scalar>
EvalReport evaluate_model(GroundingModel<Scalar>& model, const std::vector<VideoRecord>& videos,
                          const TokenEmbedding& embedding, const EvalConfig& eval) {
  return evaluate(predict_split(model, videos, embedding, eval), default_recall_ks(), default_recall_thetas());
}

struct TrainResult {
  std::vector<LogRow> log;
  EvalReport test;
  double train_seconds = 0.0;
};

using EpochCallback = std::function<void(Index epoch, const std::vector<LogRow>& rows)>;

/// Trains from scratch for `cfg.optim.epochs` epochs in the configured
/// precision, then evaluates the final model on the test split.
TrainResult train_and_evaluate(const RunConfig& cfg, const Dataset& data, const TokenEmbedding& embedding,
                               const EpochCallback& on_epoch = {});

/// One training run of the contrastive ablation.
struct AblationRow {
  std::uint64_t seed = 0;
  std::string variant;  // "full" or "baseline"
  double r1_iou05 = 0.0;
  double long_bucket_iou = 0.0;
  double train_seconds = 0.0;
};

/// Full objective against rho_within = rho_cross = 0, one pair of runs per
/// seed on the same data. Only the run seed changes between pairs.
std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                                      const std::function<void(const AblationRow&)>& on_row = {});

/// Per-run rows followed by per-variant means and the full minus baseline margin.
void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows);

/// Mean long-bucket IoU of full minus baseline.
double ablation_margin(const std::vector<AblationRow>& rows);

}  // namespace mstg
