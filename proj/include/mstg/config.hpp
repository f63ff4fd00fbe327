#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "mstg/data.hpp"
#include "mstg/losses.hpp"
#include "mstg/model.hpp"

namespace mstg {

struct OptimConfig {
  double lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Index epochs = 10;
  double warmup_fraction = 0.05;
  double grad_clip = 1.0;
  Index batch_videos = 4;           // videos per optimizer step (gradient accumulation)
  Index max_queries_per_step = 0;   // 0 = all queries of the video
};

struct EvalConfig {
  Index pre_nms_top_n = 100;
  double score_threshold = 1e-3;
  double nms_sigma = 0.5;
  double nms_floor = 1e-3;
  Index top_n = 5;
};

enum class Precision { Float32, Float64 };

struct RunConfig {
  ModelConfig model;
  LossWeights loss;
  OptimConfig optim;
  EvalConfig eval;
  SyntheticSpec synth;
  std::string data_dir;  // empty = generate from `synth`
  std::optional<std::uint64_t> seed;
  std::string output_dir = "runs/default";
  Precision precision = Precision::Float32;
  Index checkpoint_every = 1;

  /// Throws ValidationError with the offending key path.
  void validate() const;
};

/// Flat `key = value` text; `#` starts a comment. Unknown and repeated keys
/// are errors. The result is validated.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Same format restricted to the `data.*` generator keys.
SyntheticSpec parse_synthetic_spec(const std::string& text);
SyntheticSpec load_synthetic_spec(const std::filesystem::path& path);

/// Canonical text of every key, in a fixed order; parse_config round-trips it.
std::string serialize_config(const RunConfig& cfg);

/// 64-bit FNV-1a of the canonical text without `output_dir`.
std::uint64_t config_hash(const RunConfig& cfg);
std::string hash_hex(std::uint64_t h);

const char* precision_name(Precision p);

}  // namespace mstg
