// Acceptance gate: one PASS/FAIL line per criterion; exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mstg/config.hpp"
#include "mstg/data.hpp"
#include "mstg/decode.hpp"
#include "mstg/errors.hpp"
#include "mstg/experiment.hpp"
#include "mstg/grad_check.hpp"
#include "mstg/losses.hpp"
#include "mstg/model.hpp"
#include "mstg/ops.hpp"
#include "mstg/targets.hpp"
#include "mstg/trainer.hpp"
#include "test_util.hpp"

using namespace mstg;
using testing::random_matrix;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* pattern, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, pattern, a);
  return buf;
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Tracks the worst value seen and the name it came from.
struct Worst {
  double value = 0.0;
  std::string where;
  void update(double v, const std::string& name) {
    if (!(v <= value)) {
      value = v;
      where = name;
    }
  }
};

RunConfig preset(const std::string& name) { return load_config(fs::path(MSTG_CONFIG_DIR) / (name + ".cfg")); }

// ---------------------------------------------------------------------------
// AC1: gradients

using Fn = std::function<Var<double>(Tape<double>&, Var<double>)>;

// Projects an op's output onto a fixed random direction so every output
// entry contributes to the checked scalar.
double check_projected(const Fn& op, const Shape& shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  const Tensor<double> x = testing::random_tensor(shape, rng, lo, hi);
  Matrix<double> dir;
  std::mt19937_64 dir_rng(rng());
  return grad_check(
      [&](Tape<double>& t, Var<double> v) {
        Var<double> y = op(t, v);
        if (dir.size() == 0) dir = random_matrix(y.value().rows(), y.value().cols(), dir_rng);
        return sum(mul(y, t.constant(dir, y.shape())));
      },
      x);
}

Outcome ac1_gradients() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  Worst worst;
  Index checks = 0;
  auto run = [&](const std::string& name, const Fn& op, const Shape& shape, double lo = -1, double hi = 1) {
    worst.update(check_projected(op, shape, rng, lo, hi), name);
    ++checks;
  };

  const Matrix<double> other = random_matrix(3, 4, rng);
  const Matrix<double> right = random_matrix(4, 5, rng);
  const Matrix<double> row4 = random_matrix(1, 4, rng, 0.5, 1.5);
  const Matrix<double> signal = random_matrix(7, 4, rng);
  const Matrix<double> kernel = random_matrix(3 * 4, 5, rng);
  const Matrix<double> dw_kernel = random_matrix(3, 4, rng);
  run("add", [&](Tape<double>& t, Var<double> v) { return add(v, t.constant(other)); }, {3, 4});
  run("sub", [&](Tape<double>& t, Var<double> v) { return sub(t.constant(other), v); }, {3, 4});
  run("mul", [&](Tape<double>& t, Var<double> v) { return mul(v, t.constant(other)); }, {3, 4});
  run("scale", [&](Tape<double>&, Var<double> v) { return scale(v, -1.7); }, {3, 4});
  run("add_row", [&](Tape<double>& t, Var<double> v) { return add_row(t.constant(other), v); }, {4});
  run("mul_row", [&](Tape<double>& t, Var<double> v) { return mul_row(t.constant(other), v); }, {4});
  run("mul_row/x", [&](Tape<double>& t, Var<double> v) { return mul_row(v, t.constant(row4)); }, {3, 4});
  run("matmul/a", [&](Tape<double>& t, Var<double> v) { return matmul(v, t.constant(right)); }, {3, 4});
  run("matmul/b", [&](Tape<double>& t, Var<double> v) { return matmul(t.constant(other), v); }, {4, 5});
  run("matmul_nt", [&](Tape<double>& t, Var<double> v) { return matmul_nt(v, t.constant(other)); }, {2, 4});
  run("transpose", [&](Tape<double>&, Var<double> v) { return transpose(v); }, {3, 4});
  run("relu", [&](Tape<double>&, Var<double> v) { return relu(v); }, {3, 4});
  run("gelu", [&](Tape<double>&, Var<double> v) { return gelu(v); }, {3, 4}, -3, 3);
  run("sigmoid", [&](Tape<double>&, Var<double> v) { return sigmoid(v); }, {3, 4}, -4, 4);
  run("softmax", [&](Tape<double>&, Var<double> v) { return softmax(v, -1); }, {3, 4}, -3, 3);
  run("layer_norm/x",
      [&](Tape<double>& t, Var<double> v) { return layer_norm(v, t.constant(row4), t.constant(row4), 1e-5); },
      {3, 4}, -2, 2);
  run("layer_norm/gain",
      [&](Tape<double>& t, Var<double> v) { return layer_norm(t.constant(other), v, t.constant(row4), 1e-5); }, {4});
  run("l2_normalize_rows", [&](Tape<double>&, Var<double> v) { return l2_normalize_rows(v); }, {3, 4});
  run("sum", [&](Tape<double>&, Var<double> v) { return sum(v); }, {3, 4});
  run("mean", [&](Tape<double>&, Var<double> v) { return mean(v); }, {3, 4});
  run("gather_rows", [&](Tape<double>&, Var<double> v) { return gather_rows(v, {2, 0, 2}); }, {3, 4});
  run("conv1d/x", [&](Tape<double>& t, Var<double> v) { return conv1d(v, t.constant(kernel, {3, 4, 5}), 2, 1); },
      {7, 4});
  run("conv1d/kernel", [&](Tape<double>& t, Var<double> v) { return conv1d(t.constant(signal), v, 1, 1); },
      {3, 4, 5});
  run("conv1d/depthwise",
      [&](Tape<double>& t, Var<double> v) { return conv1d(v, t.constant(dw_kernel, {3, 1, 4}), 2, 1, true); }, {7, 4});
  const Matrix<double> kv = random_matrix(6, 8, rng);
  for (Index window : {0, 3}) {
    run("attention/q",
        [&](Tape<double>& t, Var<double> v) { return multi_head_attention(v, t.constant(kv), t.constant(kv), 4, window); },
        {6, 8});
    run("attention/k",
        [&](Tape<double>& t, Var<double> v) { return multi_head_attention(t.constant(kv), v, t.constant(kv), 4, window); },
        {6, 8});
    run("attention/v",
        [&](Tape<double>& t, Var<double> v) { return multi_head_attention(t.constant(kv), t.constant(kv), v, 4, window); },
        {6, 8});
  }

  // Losses.
  const Matrix<double> labels = testing::mat({{1}, {0}, {0}, {1}, {0}});
  run("focal_loss",
      [&](Tape<double>&, Var<double> v) { return focal_loss(sigmoid(v), labels, 2.0, 0.25, 2.0); }, {5, 1}, -2, 2);
  const Matrix<double> target = random_matrix(4, 2, rng, 0.5, 3.0);
  run("diou_loss", [&](Tape<double>&, Var<double> v) { return diou_loss(v, target); }, {4, 2}, 0.2, 3.0);

  // Both contrastive losses on a three-level pyramid cut from one matrix.
  auto split = [](Var<double> v) {
    return std::vector<Var<double>>{gather_rows(v, {0, 1, 2, 3}), gather_rows(v, {4, 5, 6, 7}),
                                    gather_rows(v, {8, 9})};
  };
  const std::vector<ContrastiveSets> sets{{{1, 2}, {0, 3}}, {{0, 1}, {}}};
  for (double tau : {1.0, 0.07}) {
    run("within_scale_loss",
        [&](Tape<double>& t, Var<double> v) { return within_scale_loss(t, split(v), sets, tau, true); }, {10, 3});
    run("cross_scale_loss",
        [&](Tape<double>& t, Var<double> v) {
          return cross_scale_loss(t, split(v), CrossScaleSets{{1, 2}, sets}, tau, true);
        },
        {10, 3});
  }

  // End-to-end: the training objective of a T=8, D=8, L=2 model with K=3 words.
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.video_dim = 8;
  cfg.text_dim = 8;
  cfg.levels = 2;
  cfg.window = 3;
  cfg.heads = 4;
  cfg.text_layers = 1;
  cfg.scale_init = 0.7;
  std::mt19937_64 init(7);
  auto model = GroundingModel<double>::create(cfg, init);
  std::vector<GroundingAnnotation> anns(2);
  anns[0].start = 1;
  anns[0].end = 4;
  anns[1].start = 3;
  anns[1].end = 8;
  const Tensor<double> video = testing::random_tensor({8, 8}, rng);
  const Tensor<double> words0 = testing::random_tensor({3, 8}, rng);
  const Matrix<double> words1 = random_matrix(3, 8, rng);
  auto objective = [&](Tape<double>& t, const Var<double>& v, const Var<double>& w0) {
    std::mt19937_64 sampling(3);
    return grounding_objective(t, model, v, anns, {0, 1}, {w0, t.constant(words1)}, LossWeights{}, sampling).total;
  };
  worst.update(grad_check([&](Tape<double>& t, Var<double> v) { return objective(t, v, t.constant(words0.data())); },
                          video),
               "end-to-end/video");
  worst.update(grad_check([&](Tape<double>& t, Var<double> w) { return objective(t, t.constant(video.data()), w); },
                          words0),
               "end-to-end/words");
  checks += 2;

  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst.value < 1e-4 && secs < 60.0;
  o.detail = std::to_string(checks) + " checks, worst rel err " + fmt("%.2e", worst.value) + " (" + worst.where +
             "), " + fmt("%.1f s", secs);
  return o;
}

// ---------------------------------------------------------------------------
// AC2: oracle equivalence

Matrix<double> dense_attention(const Matrix<double>& q, const Matrix<double>& k, const Matrix<double>& v,
                               Index heads) {
  const Index dh = q.cols() / heads;
  Matrix<double> out = Matrix<double>::Zero(q.rows(), q.cols());
  for (Index h = 0; h < heads; ++h) {
    for (Index i = 0; i < q.rows(); ++i) {
      std::vector<double> w(static_cast<std::size_t>(k.rows()));
      double z = 0.0;
      for (Index j = 0; j < k.rows(); ++j) {
        double dot = 0.0;
        for (Index c = 0; c < dh; ++c) dot += q(i, h * dh + c) * k(j, h * dh + c);
        w[static_cast<std::size_t>(j)] = std::exp(dot / std::sqrt(static_cast<double>(dh)));
        z += w[static_cast<std::size_t>(j)];
      }
      for (Index j = 0; j < k.rows(); ++j) {
        for (Index c = 0; c < dh; ++c) out(i, h * dh + c) += w[static_cast<std::size_t>(j)] / z * v(j, h * dh + c);
      }
    }
  }
  return out;
}

// Integer endpoints: intersection and union are exact integers.
double cell_iou(double s1, double e1, double s2, double e2) {
  long inter = 0, uni = 0;
  for (long c = static_cast<long>(std::min(s1, s2)); c < static_cast<long>(std::max(e1, e2)); ++c) {
    const bool a = c >= s1 && c + 1 <= e1, b = c >= s2 && c + 1 <= e2;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<MomentPrediction> random_predictions(std::mt19937_64& rng, int n) {
  std::uniform_int_distribution<int> pos(0, 30), len(1, 10);
  std::uniform_real_distribution<double> score(0.0, 1.0);
  std::vector<MomentPrediction> out;
  for (int i = 0; i < n; ++i) {
    MomentPrediction p;
    p.start = pos(rng);
    p.end = p.start + len(rng);
    p.score = score(rng);
    p.t = i;
    p.level = 1;
    out.push_back(p);
  }
  return out;
}

std::vector<MomentPrediction> soft_nms_oracle(std::vector<MomentPrediction> pool, double sigma, double floor) {
  std::vector<MomentPrediction> kept;
  std::vector<bool> alive(pool.size(), true);
  for (;;) {
    int best = -1;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (alive[i] && (best < 0 || pool[i].score > pool[static_cast<std::size_t>(best)].score)) {
        best = static_cast<int>(i);
      }
    }
    if (best < 0) break;
    const MomentPrediction top = pool[static_cast<std::size_t>(best)];
    alive[static_cast<std::size_t>(best)] = false;
    kept.push_back(top);
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (!alive[i]) continue;
      const double iou = cell_iou(pool[i].start, pool[i].end, top.start, top.end);
      pool[i].score *= std::exp(-iou * iou / sigma);
      if (pool[i].score < floor) alive[i] = false;
    }
  }
  return kept;
}

Outcome ac2_oracles() {
  std::mt19937_64 rng(202);
  Tape<double> tape(false);
  double attn_err = 0.0;
  int attn_cases = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const Index t = 1 + trial % 15;
    const Matrix<double> q = random_matrix(t, 8, rng, -2, 2), k = random_matrix(t, 8, rng, -2, 2),
                         v = random_matrix(t, 8, rng);
    const Index window = 2 * t - 1 + 2 * (trial % 3);
    auto out = multi_head_attention(tape.constant(q), tape.constant(k), tape.constant(v), 4, window).value();
    attn_err = std::max(attn_err, (out - dense_attention(q, k, v, 4)).cwiseAbs().maxCoeff());
    ++attn_cases;
  }

  int nms_cases = 0, nms_mismatch = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto preds = random_predictions(rng, 1 + trial % 15);
    auto got = soft_nms(preds, SoftNmsOptions{0.5, 1e-3});
    auto want = soft_nms_oracle(preds, 0.5, 1e-3);
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < got.size(); ++i) {
      same = got[i].start == want[i].start && got[i].end == want[i].end && got[i].score == want[i].score &&
             got[i].t == want[i].t;
    }
    nms_mismatch += !same;
    ++nms_cases;
  }

  int recall_cases = 0, recall_mismatch = 0;
  const std::vector<Index> ks{1, 3, 5};
  const std::vector<double> thetas{0.3, 0.5, 0.7};
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<QueryEval> queries;
    const int nq = 1 + trial % 9;
    for (int i = 0; i < nq; ++i) {
      auto ranked = random_predictions(rng, 1 + (trial + i) % 7);
      auto truth = random_predictions(rng, 1).front();
      queries.push_back({ranked, Interval{truth.start, truth.end}});
    }
    auto got = recall_at_k(queries, ks, thetas);
    std::size_t idx = 0;
    for (Index k : ks) {
      for (double theta : thetas) {
        int hits = 0;
        for (const auto& q : queries) {
          bool hit = false;
          for (std::size_t r = 0; r < q.ranked.size() && static_cast<Index>(r) < k; ++r) {
            hit = hit || cell_iou(q.ranked[r].start, q.ranked[r].end, q.truth.start, q.truth.end) >= theta;
          }
          hits += hit;
        }
        const double want = static_cast<double>(hits) / static_cast<double>(queries.size());
        recall_mismatch += got[idx].value != want || got[idx].k != k || got[idx].theta != theta;
        ++idx;
      }
    }
    ++recall_cases;
  }

  Outcome o;
  o.pass = attn_err < 1e-5 && nms_mismatch == 0 && recall_mismatch == 0 && attn_cases >= 50 && nms_cases >= 50 &&
           recall_cases >= 50;
  o.detail = "attention " + std::to_string(attn_cases) + " cases max diff " + fmt("%.1e", attn_err) + "; Soft-NMS " +
             std::to_string(nms_cases) + " cases, " + std::to_string(nms_mismatch) + " mismatches; R@K " +
             std::to_string(recall_cases) + " cases, " + std::to_string(recall_mismatch) + " mismatches";
  return o;
}

// ---------------------------------------------------------------------------
// AC3: decode round trip

Outcome ac3_round_trip() {
  SyntheticSpec spec;
  spec.n_videos = 100;
  spec.seed = 303;
  const Dataset data = generate_dataset(spec);
  const ModelConfig cfg;
  Index checked = 0, failures = 0;
  double worst_level1 = 0.0, worst_ratio = 0.0;
  for (const auto* split : {&data.train, &data.val, &data.test}) {
    for (const auto& v : *split) {
      const double T = static_cast<double>(v.length());
      const auto lengths = pyramid_lengths(v.length(), cfg.levels, cfg.downsample_ratio);
      for (const auto& a : v.annotations) {
        const auto targets = assign_targets(a, lengths, cfg.alpha_center, T, cfg.downsample_ratio);
        for (Index l = 1; l <= cfg.levels; ++l) {
          const LevelTargets& lt = targets.level(l);
          if (lt.positives.empty()) continue;
          std::vector<Matrix<double>> scores, offsets;
          for (Index m = 1; m <= cfg.levels; ++m) {
            scores.push_back(Matrix<double>::Zero(lengths[static_cast<std::size_t>(m)], 1));
            offsets.push_back(Matrix<double>::Zero(lengths[static_cast<std::size_t>(m)], 2));
          }
          auto& s = scores[static_cast<std::size_t>(l - 1)];
          auto& d = offsets[static_cast<std::size_t>(l - 1)];
          for (std::size_t i = 0; i < lt.positives.size(); ++i) {
            s(lt.positives[i], 0) = 1.0;
            d(lt.positives[i], 0) = lt.offsets[i][0];
            d(lt.positives[i], 1) = lt.offsets[i][1];
          }
          for (const auto& p : decode_moments(scores, offsets, T, 0, 0.5)) {
            const double err = std::max(std::abs(p.start - a.start), std::abs(p.end - a.end));
            ++checked;
            if (l == 1) {
              worst_level1 = std::max(worst_level1, err);
              failures += err != 0.0;
            } else {
              const double half = 0.5 * static_cast<double>(lt.stride);
              worst_ratio = std::max(worst_ratio, err / half);
              failures += err > half;
            }
          }
        }
      }
    }
  }
  Outcome o;
  o.pass = failures == 0 && checked > 0;
  o.detail = std::to_string(checked) + " decoded positives over " + std::to_string(spec.n_videos) +
             " videos; level-1 max error " + fmt("%.1e", worst_level1) + ", higher levels max error " +
             fmt("%.3f", worst_ratio) + " half-strides; " + std::to_string(failures) + " failures";
  return o;
}

// ---------------------------------------------------------------------------
// AC4: hand values

Outcome ac4_hand_values() {
  Tape<double> t(false);
  const double focal = focal_loss(t.constant(testing::mat({{0.5}})), testing::mat({{1}}), 2.0, 0.25).item();
  // Offsets from anchor 1: prediction [0,1], target [1,2].
  const double diou = diou_loss(t.constant(testing::mat({{1, 0}})), testing::mat({{0, 1}})).item();
  const double expected = std::log(1.0 + std::exp(-1.0));
  const double kernel = info_nce_sum(t.constant(testing::mat({{1}})), std::optional(t.constant(testing::mat({{0}}))),
                                     false)
                            .item();
  // Same pair through the within-scale loss: sims 1 (positive) and 0 (negative), tau 1, unnormalized.
  const Matrix<double> feats = testing::mat({{1, 0}, {1, 0}, {0, 1}});
  std::vector<Var<double>> levels{t.constant(testing::mat({{1, 0}})), t.constant(feats)};
  const double within = within_scale_loss(t, levels, {{{0, 1}, {2}}}, 1.0, false).item();

  const double e_focal = std::abs(focal - 0.04332), e_diou = std::abs(diou - 1.25);
  const double e_kernel = std::abs(kernel - expected), e_within = std::abs(within - expected);
  Outcome o;
  o.pass = e_focal < 1e-5 && e_diou < 1e-9 && e_kernel < 1e-9 && e_within < 1e-9;
  o.detail = "focal " + fmt("%.6f", focal) + ", DIoU " + fmt("%.10f", diou) + ", contrastive " + fmt("%.10f", kernel) +
             " / " + fmt("%.10f", within) + " vs log(1+e^-1) " + fmt("%.10f", expected);
  return o;
}

// ---------------------------------------------------------------------------
// AC5: end-to-end learning

Outcome ac5_learning() {
  const RunConfig cfg = preset("synthetic");
  const SyntheticSpec defaults;
  const bool default_data = cfg.data_dir.empty() && cfg.synth.n_videos == defaults.n_videos &&
                            cfg.synth.min_length == 32 && cfg.synth.max_length == 64 && cfg.synth.n_concepts == 4 &&
                            cfg.loss.rho_reg == 1.0 && cfg.loss.rho_within == 1.0 && cfg.loss.rho_cross == 1.0;
  const Dataset data = load_dataset(cfg);
  const TrainResult r = train_and_evaluate(cfg, data, make_embedding(cfg));
  const double r1 = r.test.recall(1, 0.5);
  Outcome o;
  o.pass = default_data && data.train.size() == 200 && cfg.optim.epochs <= 15 && r1 >= 0.90 &&
           r.train_seconds < 600.0;
  o.detail = "R@1 tIoU=0.5 " + fmt("%.4f", r1) + " on " + std::to_string(r.test.num_queries) + " test queries after " +
             std::to_string(cfg.optim.epochs) + " epochs, " + std::to_string(data.train.size()) + " train videos, " +
             fmt("%.1f s", r.train_seconds) + " single-threaded";
  return o;
}

// ---------------------------------------------------------------------------
// AC6: contrastive contribution (reported, not gated)

Outcome ac6_contrastive(const fs::path& csv_path) {
  const RunConfig cfg = preset("synthetic");
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t i = 0; i < 5; ++i) seeds.push_back(*cfg.seed + i);
  const auto rows = run_ablation(cfg, seeds);
  {
    std::ofstream out(csv_path);
    write_ablation_csv(out, rows);
  }
  std::ifstream check(csv_path);
  std::string header;
  std::getline(check, header);
  const double margin = ablation_margin(rows);
  Outcome o;
  o.pass = rows.size() == 10 && header == "seed,variant,r1_iou05,long_bucket_iou,train_seconds";
  o.detail = "5 seeds, long-bucket IoU margin full-baseline " + fmt("%+.4f", margin) + " (" +
             (margin >= 0 ? "full >= baseline" : "full < baseline") + ", reported not gated); CSV " +
             csv_path.string();
  return o;
}

// ---------------------------------------------------------------------------
// AC7: determinism

std::string prediction_json(GroundingModel<double>& model, const std::vector<VideoRecord>& videos,
                            const TokenEmbedding& emb, const EvalConfig& eval) {
  nlohmann::json all = nlohmann::json::array();
  for (const auto& q : predict_split(model, videos, emb, eval)) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& p : q.ranked) list.push_back({{"start", p.start}, {"end", p.end}, {"score", p.score}});
    all.push_back(list);
  }
  return all.dump();
}

std::vector<Matrix<double>> parameters(GroundingModel<double>& m) {
  std::vector<Matrix<double>> out;
  for_each_parameter(m.params, [&](const std::string&, Tensor<double>& t) { out.push_back(t.data()); });
  return out;
}

Outcome ac7_determinism(const fs::path& scratch) {
  RunConfig cfg = preset("synthetic");
  cfg.precision = Precision::Float64;
  cfg.optim.epochs = 5;
  const Dataset data = load_dataset(cfg);
  const TokenEmbedding emb = make_embedding(cfg);

  auto train_epochs = [&](Trainer<double>& t, int n, std::ostringstream& log) {
    for (int e = 0; e < n; ++e) {
      for (const auto& row : t.run_epoch()) write_log_row(log, row);
    }
  };
  Trainer<double> a(cfg, data.train, emb), b(cfg, data.train, emb);
  std::ostringstream log_a, log_b;
  train_epochs(a, 5, log_a);
  train_epochs(b, 5, log_b);
  const bool logs_equal = log_a.str() == log_b.str();
  const bool preds_equal =
      prediction_json(a.model(), data.test, emb, cfg.eval) == prediction_json(b.model(), data.test, emb, cfg.eval);

  Trainer<double> first(cfg, data.train, emb);
  std::ostringstream log_c;
  train_epochs(first, 2, log_c);
  const fs::path ckpt = scratch / "resume.ckpt";
  first.save_checkpoint(ckpt);
  Trainer<double> second(cfg, data.train, emb);
  second.load_checkpoint(ckpt);
  train_epochs(second, 3, log_c);
  const bool resume_equal = parameters(second.model()) == parameters(a.model()) && log_c.str() == log_a.str();

  Outcome o;
  o.pass = logs_equal && preds_equal && resume_equal;
  o.detail = std::string("float64 logs ") + (logs_equal ? "identical" : "DIFFER") + ", prediction JSON " +
             (preds_equal ? "identical" : "DIFFERS") + ", resume 2+3 vs 5 epochs " +
             (resume_equal ? "bitwise equal" : "DIFFERS");
  return o;
}

// ---------------------------------------------------------------------------
// AC8: format robustness

template <typename E, typename F>
bool throws(F&& f) {
  try {
    f();
  } catch (const E&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

std::string validation_key(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ValidationError& e) {
    return e.key();
  } catch (...) {
    return "<other>";
  }
  return "<none>";
}

Outcome ac8_formats(const fs::path& scratch) {
  std::mt19937_64 rng(808);
  int round_trips = 0, round_trip_fail = 0;
  for (Index t : {1, 2, 7, 16, 33}) {
    for (Index d : {1, 3, 32}) {
      Matrix<float> m(t, d);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = std::normal_distribution<float>(0.0f, 10.0f)(rng);
      m(0, 0) = -0.0f;
      const fs::path p = scratch / "rt.mgf";
      write_features(p, m);
      const Matrix<float> back = read_features(p);
      round_trip_fail += back.rows() != t || back.cols() != d ||
                         std::memcmp(back.data(), m.data(), sizeof(float) * static_cast<std::size_t>(m.size())) != 0;
      ++round_trips;
    }
  }

  const fs::path good = scratch / "good.mgf";
  write_features(good, Matrix<float>::Ones(4, 3));
  std::string bytes;
  {
    std::ifstream in(good, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  auto write = [&](const std::string& name, const std::string& content) {
    const fs::path p = scratch / name;
    std::ofstream(p, std::ios::binary) << content;
    return p;
  };
  std::string wrong_dims = bytes;
  wrong_dims[4] = 5;  // T = 5 with a 4-row payload
  int rejected = 0, corrupt_cases = 0;
  for (const fs::path& p : {write("magic.mgf", "MGF2" + bytes.substr(4)), write("short.mgf", bytes.substr(0, 10)),
                            write("dims.mgf", wrong_dims), write("trail.mgf", bytes + "x")}) {
    rejected += throws<FormatError>([&] { read_features(p); });
    ++corrupt_cases;
  }
  const std::string line_ok = R"({"video_id":"v","query_id":"q1","start":1,"end":3,"tokens":[1,2]})";
  for (const std::string& bad :
       {std::string(R"({"video_id":"v","query_id":"q2","start":4,"end":4,"tokens":[1]})"),
        std::string(R"({"video_id":"v","query_id":"q2","start":4,"tokens":[1]})"), std::string("{not json"),
        std::string(R"({"video_id":"v","query_id":"q2","start":"a","end":5,"tokens":[1]})")}) {
    const fs::path p = write("ann.jsonl", line_ok + "\n" + bad + "\n");
    rejected += throws<FormatError>([&] {
      try {
        load_annotations(p);
      } catch (const FormatError& e) {
        if (std::string(e.what()).find("line 2") == std::string::npos) throw std::runtime_error("no line number");
        throw;
      }
    });
    ++corrupt_cases;
  }

  const std::string base = "seed = 1\ndata.dir = d\n";
  int config_ok = 0, config_cases = 0;
  const std::pair<std::string, std::string> bad_configs[] = {{"model.window = 4\n", "model.window"},
                                                              {"model.levels = 0\n", "model.levels"},
                                                              {"loss.temperature = 0\n", "loss.temperature"},
                                                              {"loss.temperature = -0.5\n", "loss.temperature"},
                                                              {"model.bogus = 1\n", "model.bogus"}};
  for (const auto& [line, key] : bad_configs) {
    config_ok += validation_key(base + line) == key;
    ++config_cases;
  }
  int presets_ok = 0, presets = 0;
  for (const auto& entry : fs::directory_iterator(MSTG_CONFIG_DIR)) {
    if (entry.path().extension() != ".cfg") continue;
    ++presets;
    presets_ok += !throws<std::exception>([&] { load_config(entry.path()); });
  }

  Outcome o;
  o.pass = round_trip_fail == 0 && rejected == corrupt_cases && config_ok == config_cases && presets_ok == presets;
  o.detail = std::to_string(round_trips - round_trip_fail) + "/" + std::to_string(round_trips) +
             " feature round trips bitwise; " + std::to_string(rejected) + "/" + std::to_string(corrupt_cases) +
             " corrupt files rejected with typed errors; " + std::to_string(config_ok) + "/" +
             std::to_string(config_cases) + " invalid configs rejected by key; " + std::to_string(presets_ok) + "/" +
             std::to_string(presets) + " presets load";
  return o;
}

}  // namespace

int main() {
  const fs::path scratch = fs::temp_directory_path() / ("mstg_acceptance_" + std::to_string(std::random_device{}()));
  fs::create_directories(scratch);
  const fs::path ablation_csv = fs::current_path() / "acceptance_ablation.csv";

  struct Criterion {
    const char* id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {"AC1", "gradient suite", ac1_gradients},
      {"AC2", "oracle equivalence", ac2_oracles},
      {"AC3", "decode round trip", ac3_round_trip},
      {"AC4", "hand values", ac4_hand_values},
      {"AC5", "end-to-end learning", ac5_learning},
      {"AC6", "contrastive contribution", [&] { return ac6_contrastive(ablation_csv); }},
      {"AC7", "determinism", [&] { return ac7_determinism(scratch); }},
      {"AC8", "format robustness", [&] { return ac8_formats(scratch); }},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << c.id << ' ' << (o.pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail << std::endl;
  }
  fs::remove_all(scratch);
  return failed == 0 ? 0 : 1;
}
