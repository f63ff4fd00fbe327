#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mstg/config.hpp"
#include "mstg/errors.hpp"
#include "mstg/experiment.hpp"
#include "mstg/inference.hpp"
#include "mstg/trainer.hpp"

using namespace mstg;
namespace fs = std::filesystem;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitValidation = 2;

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string epoch_name(Index epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03lld.ckpt", static_cast<long long>(epoch));
  return buf;
}

// Keeps the header and the rows logged at or before `step`.
void truncate_log(const fs::path& path, Index step) {
  std::ifstream in(path);
  if (!in) return;
  std::string line, kept;
  std::getline(in, line);
  kept = line + "\n";
  while (std::getline(in, line)) {
    const auto a = line.find(',');
    if (a == std::string::npos) continue;
    const Index row_step = std::stoll(line.substr(a + 1));
    if (row_step <= step) kept += line + "\n";
  }
  in.close();
  write_file(path, kept);
}

struct TrainArgs {
  std::string config;
  std::string resume;
  std::string output_dir;
  Index stop_after_epoch = 0;
};

template <typename Scalar>
void train(const RunConfig& cfg, const TrainArgs& args) {
  const Dataset data = load_dataset(cfg);
  Trainer<Scalar> trainer(cfg, data.train, make_embedding(cfg));
  const fs::path out = cfg.output_dir;
  fs::create_directories(out / "checkpoints");
  write_file(out / "config.txt", serialize_config(cfg));

  const fs::path log_path = out / "train_log.csv";
  if (!args.resume.empty()) {
    trainer.load_checkpoint(args.resume);
    truncate_log(log_path, trainer.step());
    std::cerr << "resumed at epoch " << trainer.epoch() << ", step " << trainer.step() << "\n";
  }
  std::ofstream log;
  if (!args.resume.empty() && fs::exists(log_path)) {
    log.open(log_path, std::ios::app);
  } else {
    log.open(log_path, std::ios::trunc);
    write_log_header(log);
  }

  while (trainer.epoch() < cfg.optim.epochs) {
    const auto rows = trainer.run_epoch();
    double mean = 0;
    for (const auto& r : rows) {
      write_log_row(log, r);
      mean += r.loss.total;
    }
    log.flush();
    mean /= static_cast<double>(rows.size());
    std::cerr << "epoch " << trainer.epoch() << "/" << cfg.optim.epochs << "  mean loss " << mean << "\n";
    const bool last = trainer.epoch() == cfg.optim.epochs;
    if (last || trainer.epoch() % cfg.checkpoint_every == 0) {
      trainer.save_checkpoint(out / "checkpoints" / epoch_name(trainer.epoch()));
      trainer.save_checkpoint(out / "checkpoints" / "last.ckpt");
    }
    if (args.stop_after_epoch > 0 && trainer.epoch() >= args.stop_after_epoch) {
      std::cerr << "stopping after epoch " << trainer.epoch() << "\n";
      break;
    }
  }
}

int cmd_train(const TrainArgs& args) {
  RunConfig cfg = load_config(args.config);
  if (!args.output_dir.empty()) cfg.output_dir = args.output_dir;
  if (cfg.precision == Precision::Float64) {
    train<double>(cfg, args);
  } else {
    train<float>(cfg, args);
  }
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string config;
  std::string data;
  std::string split = "test";
  std::string out;
};

std::vector<VideoRecord> eval_videos(const RunConfig& cfg, const std::string& split) {
  if (split != "train" && split != "val" && split != "test") {
    throw ValidationError("split", "expected train, val or test, got '" + split + "'");
  }
  if (!cfg.data_dir.empty()) return load_split(fs::path(cfg.data_dir) / split);
  Dataset data = generate_dataset(cfg.synth);
  return split == "train" ? data.train : (split == "val" ? data.val : data.test);
}

template <typename Scalar>
EvalReport eval_checkpoint(const EvalArgs& args) {
  RunConfig cfg;
  auto model = load_model<Scalar>(args.checkpoint, &cfg);
  if (!args.config.empty()) {
    const RunConfig given = load_config(args.config);
    if (config_hash(given) != config_hash(cfg)) {
      throw ValidationError("config", "hash " + hash_hex(config_hash(given)) + " does not match checkpoint " +
                                          hash_hex(config_hash(cfg)));
    }
  }
  if (!args.data.empty()) cfg.data_dir = args.data;
  const TokenEmbedding embedding = make_embedding(cfg);
  return evaluate_model(model, eval_videos(cfg, args.split), embedding, cfg.eval);
}

int cmd_eval(const EvalArgs& args) {
  const CheckpointInfo info = read_checkpoint_info(args.checkpoint);
  const EvalReport report = info.precision == Precision::Float64 ? eval_checkpoint<double>(args)
                                                                  : eval_checkpoint<float>(args);
  fs::create_directories(args.out);
  std::ostringstream recall, buckets;
  write_recall_csv(recall, report.recalls);
  write_bucket_csv(buckets, report.buckets);
  write_file(fs::path(args.out) / "recall.csv", recall.str());
  write_file(fs::path(args.out) / "buckets.csv", buckets.str());
  std::cout << "queries " << report.num_queries << "\n";
  for (const auto& r : report.recalls) std::cout << "R@" << r.k << " tIoU=" << r.theta << "  " << r.value << "\n";
  return 0;
}

struct PredictArgs {
  std::string checkpoint;
  std::string features;
  std::string tokens;
  std::string data;
  std::string out;
  Index top_n = 5;
};

std::vector<int> parse_tokens(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError("tokens", "expected comma-separated integers, got '" + text + "'");
    }
  }
  if (out.empty()) throw ValidationError("tokens", "at least one token id is required");
  return out;
}

template <typename Scalar>
std::vector<MomentPrediction> predict(const PredictArgs& args) {
  RunConfig cfg;
  auto model = load_model<Scalar>(args.checkpoint, &cfg);
  if (!args.data.empty()) cfg.data_dir = args.data;
  const TokenEmbedding embedding = make_embedding(cfg);
  const Matrix<float> features = read_features(args.features);
  if (features.cols() != cfg.model.video_dim) {
    throw ValidationError("features", args.features + " has " + std::to_string(features.cols()) +
                                          " dims, model expects " + std::to_string(cfg.model.video_dim));
  }
  EvalConfig eval = cfg.eval;
  eval.top_n = args.top_n;
  Tape<Scalar> tape(false);
  auto pyramid = encode_video_pyramid(tape.constant(features.template cast<Scalar>()), model.params, model.config);
  return predict_query(pyramid, embedding.embed<Scalar>(parse_tokens(args.tokens)), model, eval,
                       static_cast<double>(features.rows()));
}

int cmd_predict(const PredictArgs& args) {
  if (args.top_n < 1) throw ValidationError("top-n", "must be >= 1");
  const CheckpointInfo info = read_checkpoint_info(args.checkpoint);
  const auto preds = info.precision == Precision::Float64 ? predict<double>(args) : predict<float>(args);
  nlohmann::json list = nlohmann::json::array();
  for (const auto& p : preds) list.push_back({{"start", p.start}, {"end", p.end}, {"score", p.score}});
  const std::string text = list.dump(2) + "\n";
  if (args.out.empty()) {
    std::cout << text;
  } else {
    write_file(args.out, text);
  }
  return 0;
}

int cmd_gen_data(const std::string& spec_path, const std::string& out) {
  const SyntheticSpec spec = spec_path.empty() ? SyntheticSpec{} : load_synthetic_spec(spec_path);
  const Dataset data = generate_dataset(spec);
  write_dataset(out, data, {spec.video_dim, spec.text_dim, spec.vocab_size(), embedding_seed(spec.seed)});
  std::cout << "wrote " << data.train.size() << "/" << data.val.size() << "/" << data.test.size()
            << " train/val/test videos to " << out << "\n";
  return 0;
}

int cmd_compare(const std::string& config_path, Index n_seeds, const std::string& out) {
  if (n_seeds < 1) throw ValidationError("seeds", "must be >= 1");
  const RunConfig cfg = load_config(config_path);
  std::vector<std::uint64_t> seeds;
  for (Index i = 0; i < n_seeds; ++i) seeds.push_back(*cfg.seed + static_cast<std::uint64_t>(i));
  const auto rows = run_ablation(cfg, seeds, [](const AblationRow& r) {
    std::cerr << "seed " << r.seed << " " << r.variant << "  R@1@0.5 " << r.r1_iou05 << "  long-bucket IoU "
              << r.long_bucket_iou << "\n";
  });
  std::ostringstream csv;
  write_ablation_csv(csv, rows);
  if (!out.empty()) {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    write_file(out, csv.str());
  }
  std::cout << csv.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale temporal grounding: train, evaluate and query models"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train from a config file");
  train_cmd->add_option("--config", train_args.config, "Config file")->required();
  train_cmd->add_option("--resume", train_args.resume, "Checkpoint to resume from");
  train_cmd->add_option("--output-dir", train_args.output_dir, "Override output_dir");
  train_cmd->add_option("--stop-after-epoch", train_args.stop_after_epoch, "Stop early after this epoch");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_args.data, "Dataset directory (default: the checkpoint's data)");
  eval_cmd->add_option("--split", eval_args.split, "train, val or test");
  eval_cmd->add_option("--config", eval_args.config, "Config that must match the checkpoint");
  eval_cmd->add_option("--out", eval_args.out, "Output directory for recall.csv and buckets.csv")->required();

  PredictArgs predict_args;
  auto* predict_cmd = app.add_subcommand("predict", "Rank moments for one query");
  predict_cmd->add_option("--checkpoint", predict_args.checkpoint, "Checkpoint file")->required();
  predict_cmd->add_option("--features", predict_args.features, "MGF1 feature file")->required();
  predict_cmd->add_option("--tokens", predict_args.tokens, "Comma-separated token ids")->required();
  predict_cmd->add_option("--top-n", predict_args.top_n, "Number of moments to return");
  predict_cmd->add_option("--data", predict_args.data, "Dataset directory (default: the checkpoint's data)");
  predict_cmd->add_option("--out", predict_args.out, "Write JSON here instead of stdout");

  std::string spec_path, gen_out;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic dataset");
  gen_cmd->add_option("--spec", spec_path, "Generator spec (data.* keys)");
  gen_cmd->add_option("--out", gen_out, "Output directory")->required();

  std::string compare_config, compare_out;
  Index compare_seeds = 5;
  auto* compare_cmd = app.add_subcommand("compare", "Full objective against the no-contrastive baseline");
  compare_cmd->add_option("--config", compare_config, "Config file")->required();
  compare_cmd->add_option("--seeds", compare_seeds, "Number of consecutive seeds");
  compare_cmd->add_option("--out", compare_out, "CSV report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*train_cmd) return cmd_train(train_args);
    if (*eval_cmd) return cmd_eval(eval_args);
    if (*predict_cmd) return cmd_predict(predict_args);
    if (*gen_cmd) return cmd_gen_data(spec_path, gen_out);
    if (*compare_cmd) return cmd_compare(compare_config, compare_seeds, compare_out);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
