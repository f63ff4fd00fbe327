#include "mstg/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <ostream>

#include "mstg/errors.hpp"

namespace mstg {

namespace fs = std::filesystem;

DatasetInfo dataset_info(const RunConfig& cfg) {
  DatasetInfo info;
  if (cfg.data_dir.empty()) {
    info = {cfg.synth.video_dim, cfg.synth.text_dim, cfg.synth.vocab_size(), embedding_seed(cfg.synth.seed)};
  } else {
    info = read_dataset_info(cfg.data_dir);
  }
  if (info.video_dim != cfg.model.video_dim) {
    throw ValidationError("model.video_dim", "dataset has " + std::to_string(info.video_dim) + " feature dims");
  }
  if (info.text_dim != cfg.model.text_dim) {
    throw ValidationError("model.text_dim", "dataset has " + std::to_string(info.text_dim) + " embedding dims");
  }
  return info;
}

Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.data_dir.empty()) return generate_dataset(cfg.synth);
  const fs::path root = cfg.data_dir;
  return {load_split(root / "train"), load_split(root / "val"), load_split(root / "test")};
}

TokenEmbedding make_embedding(const RunConfig& cfg) {
  const DatasetInfo info = dataset_info(cfg);
  return TokenEmbedding(info.vocab_size, info.text_dim, info.embedding_seed);
}

namespace {

template <typename Scalar>
TrainResult train_typed(const RunConfig& cfg, const Dataset& data, const TokenEmbedding& embedding,
                        const EpochCallback& on_epoch) {
  TrainResult out;
  Trainer<Scalar> trainer(cfg, data.train, embedding);
  const auto t0 = std::chrono::steady_clock::now();
  for (Index e = 0; e < cfg.optim.epochs; ++e) {
    auto rows = trainer.run_epoch();
    if (on_epoch) on_epoch(trainer.epoch(), rows);
    out.log.insert(out.log.end(), rows.begin(), rows.end());
  }
  out.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.test = evaluate_model(trainer.model(), data.test, embedding, cfg.eval);
  return out;
}

}  // namespace

TrainResult train_and_evaluate(const RunConfig& cfg, const Dataset& data, const TokenEmbedding& embedding,
                               const EpochCallback& on_epoch) {
  if (cfg.precision == Precision::Float64) return train_typed<double>(cfg, data, embedding, on_epoch);
  return train_typed<float>(cfg, data, embedding, on_epoch);
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                                      const std::function<void(const AblationRow&)>& on_row) {
  const Dataset data = load_dataset(base);
  const TokenEmbedding embedding = make_embedding(base);
  std::vector<AblationRow> rows;
  for (std::uint64_t seed : seeds) {
    for (const char* variant : {"full", "baseline"}) {
      RunConfig cfg = base;
      cfg.seed = seed;
      if (std::string(variant) == "baseline") {
        cfg.loss.rho_within = 0.0;
        cfg.loss.rho_cross = 0.0;
      }
      TrainResult r = train_and_evaluate(cfg, data, embedding);
      AblationRow row{seed, variant, r.test.recall(1, 0.5), r.test.buckets.empty() ? 0.0 : r.test.buckets.back().mean_iou,
                      r.train_seconds};
      if (on_row) on_row(row);
      rows.push_back(row);
    }
  }
  return rows;
}

double ablation_margin(const std::vector<AblationRow>& rows) {
  double full = 0, base = 0;
  Index nf = 0, nb = 0;
  for (const auto& r : rows) {
    if (r.variant == "full") {
      full += r.long_bucket_iou;
      ++nf;
    } else {
      base += r.long_bucket_iou;
      ++nb;
    }
  }
  if (nf == 0 || nb == 0) return 0.0;
  return full / static_cast<double>(nf) - base / static_cast<double>(nb);
}

void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  char buf[256];
  os << "seed,variant,r1_iou05,long_bucket_iou,train_seconds\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%llu,%s,%.6f,%.6f,%.2f\n", static_cast<unsigned long long>(r.seed),
                  r.variant.c_str(), r.r1_iou05, r.long_bucket_iou, r.train_seconds);
    os << buf;
  }
  for (const char* variant : {"full", "baseline"}) {
    double r1 = 0, iou = 0, secs = 0;
    Index n = 0;
    for (const auto& r : rows) {
      if (r.variant != variant) continue;
      r1 += r.r1_iou05;
      iou += r.long_bucket_iou;
      secs += r.train_seconds;
      ++n;
    }
    if (n == 0) continue;
    const auto dn = static_cast<double>(n);
    std::snprintf(buf, sizeof buf, "mean,%s,%.6f,%.6f,%.2f\n", variant, r1 / dn, iou / dn, secs / dn);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "margin,full-baseline,,%.6f,\n", ablation_margin(rows));
  os << buf;
}

}  // namespace mstg
