#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "mstg/config.hpp"
#include "mstg/errors.hpp"
#include "mstg/optim.hpp"
#include "mstg/trainer.hpp"
#include "test_util.hpp"

using namespace mstg;
using testing::TempDir;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig =
    "seed = 11\n"
    "precision = float64\n"
    "model.d_model = 16\n"
    "model.window = 3\n"
    "model.levels = 3\n"
    "model.heads = 2\n"
    "model.text_layers = 1\n"
    "model.video_dim = 8\n"
    "model.text_dim = 4\n"
    "data.n_videos = 8\n"
    "data.min_length = 16\n"
    "data.max_length = 20\n"
    "data.short_max = 5\n"
    "data.video_dim = 8\n"
    "data.text_dim = 4\n"
    "optim.batch_videos = 2\n";

RunConfig tiny_config(const std::string& extra = "") { return parse_config(kTinyConfig + extra); }

template <typename Scalar>
std::unique_ptr<Trainer<Scalar>> make_trainer(const RunConfig& cfg) {
  Dataset data = generate_dataset(cfg.synth);
  TokenEmbedding emb(cfg.synth.vocab_size(), cfg.synth.text_dim, embedding_seed(cfg.synth.seed));
  return std::make_unique<Trainer<Scalar>>(cfg, std::move(data.train), std::move(emb));
}

template <typename Scalar>
std::vector<Matrix<Scalar>> snapshot(GroundingModel<Scalar>& m) {
  std::vector<Matrix<Scalar>> out;
  for_each_parameter(m.params, [&](const std::string&, Tensor<Scalar>& t) { out.push_back(t.data()); });
  return out;
}

bool same_rows(const std::vector<LogRow>& a, const std::vector<LogRow>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].epoch != b[i].epoch || a[i].step != b[i].step || a[i].loss.total != b[i].loss.total ||
        a[i].loss.cls != b[i].loss.cls || a[i].loss.within != b[i].loss.within) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("warmup then cosine schedule") {
  const double peak = 2.0;
  CHECK(warmup_cosine_lr(peak, 0, 4, 20) == doctest::Approx(0.5));
  CHECK(warmup_cosine_lr(peak, 3, 4, 20) == doctest::Approx(2.0));
  CHECK(warmup_cosine_lr(peak, 4, 4, 20) == doctest::Approx(2.0));
  CHECK(warmup_cosine_lr(peak, 12, 4, 20) == doctest::Approx(1.0));
  CHECK(warmup_cosine_lr(peak, 20, 4, 20) == doctest::Approx(0.0));
  CHECK(warmup_cosine_lr(peak, 0, 0, 10) == doctest::Approx(2.0));
  double prev = peak;
  for (Index s = 4; s <= 20; ++s) {
    const double lr = warmup_cosine_lr(peak, s, 4, 20);
    CHECK(lr <= prev + 1e-15);
    CHECK(lr >= 0.0);
    prev = lr;
  }
}

TEST_CASE("global norm clipping") {
  Tensor<double> a({2}, true), b({1, 1}, true);
  a.accumulate_grad(testing::mat({{3.0, 0.0}}));
  b.accumulate_grad(testing::mat({{4.0}}));
  std::vector<Tensor<double>*> ps{&a, &b};
  CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()(0, 0) == doctest::Approx(0.6));
  CHECK(b.grad()(0, 0) == doctest::Approx(0.8));
  CHECK(clip_grad_norm(ps, 10.0) == doctest::Approx(1.0));
  CHECK(a.grad()(0, 0) == doctest::Approx(0.6));
}

TEST_CASE("AdamW matches a scalar reference and skips decay on vectors") {
  const double lr = 0.1, wd = 0.5, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Tensor<double> w({1, 2}, testing::mat({{1.0, -2.0}}), true);
  Tensor<double> bias({2}, testing::mat({{0.5, -0.5}}), true);
  AdamW<double> opt({&w, &bias}, {b1, b2, eps, wd});

  const double grads[3] = {0.3, -1.2, 0.7};
  double ref_w = 1.0, ref_b = 0.5, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    w.accumulate_grad(testing::mat({{g, 0.0}}));
    bias.accumulate_grad(testing::mat({{g, 0.0}}));
    opt.step(lr);
    opt.zero_grad();
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t)), vhat = v / (1 - std::pow(b2, t));
    ref_w = ref_w * (1 - lr * wd) - lr * mhat / (std::sqrt(vhat) + eps);
    ref_b = ref_b - lr * mhat / (std::sqrt(vhat) + eps);
  }
  CHECK(w.data()(0, 0) == doctest::Approx(ref_w).epsilon(1e-7));
  CHECK(bias.data()(0, 0) == doctest::Approx(ref_b).epsilon(1e-7));
  // Zero gradient: matrix still decays, vector entry stays put.
  CHECK(w.data()(0, 1) == doctest::Approx(-2.0 * std::pow(1 - lr * wd, 3)));
  CHECK(bias.data()(0, 1) == -0.5);
  CHECK(opt.steps() == 3);
}

TEST_CASE("named RNG streams are distinct and reproducible") {
  auto a = RngStreams::from_seed(5), b = RngStreams::from_seed(5), c = RngStreams::from_seed(6);
  CHECK(a.init() == b.init());
  CHECK(a.sampling() == b.sampling());
  CHECK(a.data() == b.data());
  auto d = RngStreams::from_seed(5);
  CHECK(d.init() != d.sampling());
  CHECK(c.init() != RngStreams::from_seed(5).init());
}

TEST_CASE("batch loss is finite, reports its parts and reaches every parameter") {
  RunConfig cfg = tiny_config();
  Dataset data = generate_dataset(cfg.synth);
  TokenEmbedding emb(cfg.synth.vocab_size(), cfg.synth.text_dim, embedding_seed(cfg.synth.seed));
  std::mt19937_64 init(1), sampling(2);
  auto model = GroundingModel<double>::create(cfg.model, init);
  const VideoRecord& v = data.train.front();
  std::vector<std::size_t> queries(v.annotations.size());
  for (std::size_t i = 0; i < queries.size(); ++i) queries[i] = i;

  Tape<double> tape;
  auto loss = video_batch_loss(tape, model, v, queries, emb, cfg.loss, sampling);
  CHECK(std::isfinite(loss.report.total));
  CHECK(loss.total.item() == doctest::Approx(loss.report.total).epsilon(1e-12));
  CHECK(loss.report.cls > 0);
  CHECK(loss.report.reg >= 0);
  CHECK(loss.report.within > 0);
  CHECK(loss.report.cross > 0);
  tape.backward(loss.total);
  Index with_grad = 0, total = 0;
  for_each_parameter(model.params, [&](const std::string&, Tensor<double>& t) {
    ++total;
    if (t.has_grad() && t.grad().allFinite()) ++with_grad;
  });
  CHECK(with_grad == total);
}

TEST_CASE("zero contrastive weights drop those terms from the objective") {
  RunConfig cfg = tiny_config("loss.rho_within = 0\nloss.rho_cross = 0\n");
  Dataset data = generate_dataset(cfg.synth);
  TokenEmbedding emb(cfg.synth.vocab_size(), cfg.synth.text_dim, embedding_seed(cfg.synth.seed));
  std::mt19937_64 init(1), sampling(2);
  auto model = GroundingModel<double>::create(cfg.model, init);
  Tape<double> tape;
  auto loss = video_batch_loss(tape, model, data.train.front(), {0}, emb, cfg.loss, sampling);
  CHECK(loss.report.within > 0);
  CHECK(loss.report.total == doctest::Approx(loss.report.cls + loss.report.reg).epsilon(1e-12));
  CHECK(loss.total.item() == doctest::Approx(loss.report.total).epsilon(1e-12));
}

TEST_CASE("log rows satisfy the weighted-sum identity and the CSV layout") {
  RunConfig cfg = tiny_config("loss.rho_reg = 2\nloss.rho_cross = 0.5\n");
  auto trainer = make_trainer<double>(cfg);
  CHECK(trainer->steps_per_epoch() == 3);
  auto rows = trainer->run_epoch();
  REQUIRE(rows.size() == 3);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i].loss;
    CHECK(rows[i].epoch == 1);
    CHECK(rows[i].step == static_cast<Index>(i) + 1);
    CHECK(r.total == doctest::Approx(r.cls + 2.0 * r.reg + r.within + 0.5 * r.cross).epsilon(1e-12));
  }
  std::ostringstream os;
  write_log_header(os);
  write_log_row(os, rows[0]);
  std::istringstream is(os.str());
  std::string header, line;
  std::getline(is, header);
  std::getline(is, line);
  CHECK(header == "epoch,step,total,cls,reg,within,cross");
  CHECK(std::count(line.begin(), line.end(), ',') == 6);
  CHECK(line.rfind("1,1,", 0) == 0);
}

TEST_CASE("training is deterministic in float64") {
  RunConfig cfg = tiny_config();
  auto a = make_trainer<double>(cfg);
  auto b = make_trainer<double>(cfg);
  auto ra = a->run_epoch();
  auto rb = b->run_epoch();
  CHECK(same_rows(ra, rb));
  CHECK(snapshot(a->model()) == snapshot(b->model()));

  auto c = make_trainer<double>(tiny_config("optim.lr = 0.002\n"));
  c->run_epoch();
  CHECK(snapshot(a->model()) != snapshot(c->model()));
}

TEST_CASE("training reduces the loss on the tiny set") {
  RunConfig cfg = tiny_config("optim.epochs = 8\noptim.lr = 0.003\n");
  auto t = make_trainer<double>(cfg);
  double first = 0, last = 0;
  for (Index e = 0; e < cfg.optim.epochs; ++e) {
    auto rows = t->run_epoch();
    double sum = 0;
    for (const auto& r : rows) sum += r.loss.total;
    if (e == 0) first = sum;
    last = sum;
  }
  CHECK(last < first);
}

TEST_CASE("resuming from a checkpoint reproduces uninterrupted training bitwise") {
  TempDir dir("resume");
  RunConfig cfg = tiny_config();

  auto straight = make_trainer<double>(cfg);
  std::vector<LogRow> straight_rows;
  for (int e = 0; e < 3; ++e) {
    auto r = straight->run_epoch();
    straight_rows.insert(straight_rows.end(), r.begin(), r.end());
  }

  auto first = make_trainer<double>(cfg);
  std::vector<LogRow> resumed_rows;
  for (int e = 0; e < 2; ++e) {
    auto r = first->run_epoch();
    resumed_rows.insert(resumed_rows.end(), r.begin(), r.end());
  }
  const fs::path ckpt = dir.path / "epoch2.ckpt";
  first->save_checkpoint(ckpt);

  auto second = make_trainer<double>(cfg);
  second->load_checkpoint(ckpt);
  CHECK(second->epoch() == 2);
  CHECK(second->step() == first->step());
  auto r = second->run_epoch();
  resumed_rows.insert(resumed_rows.end(), r.begin(), r.end());

  CHECK(same_rows(straight_rows, resumed_rows));
  CHECK(snapshot(straight->model()) == snapshot(second->model()));
}

TEST_CASE("checkpoint header, model loading and config mismatch") {
  TempDir dir("ckpt");
  RunConfig cfg = tiny_config();
  auto t = make_trainer<double>(cfg);
  t->run_epoch();
  const fs::path ckpt = dir.path / "a.ckpt";
  t->save_checkpoint(ckpt);

  CheckpointInfo info = read_checkpoint_info(ckpt);
  CHECK(info.config_hash == config_hash(cfg));
  CHECK(info.precision == Precision::Float64);
  CHECK(info.epoch == 1);
  CHECK(info.step == 3);
  CHECK(parse_config(info.config_text).model.window == 3);

  RunConfig loaded_cfg;
  auto model = load_model<double>(ckpt, &loaded_cfg);
  CHECK(snapshot(model) == snapshot(t->model()));
  CHECK(config_hash(loaded_cfg) == config_hash(cfg));
  CHECK_THROWS_AS(load_model<float>(ckpt), ValidationError);

  auto other = make_trainer<double>(tiny_config("optim.lr = 0.002\n"));
  CHECK_THROWS_AS(other->load_checkpoint(ckpt), ValidationError);
  // Output directory is not part of the identity.
  auto moved = make_trainer<double>(tiny_config("output_dir = elsewhere\n"));
  CHECK_NOTHROW(moved->load_checkpoint(ckpt));
}

TEST_CASE("corrupt checkpoints raise format errors") {
  TempDir dir("corrupt");
  RunConfig cfg = tiny_config();
  auto t = make_trainer<double>(cfg);
  const fs::path ckpt = dir.path / "a.ckpt";
  t->save_checkpoint(ckpt);
  std::string bytes;
  {
    std::ifstream in(ckpt, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  auto write = [&](const std::string& name, const std::string& content) {
    const fs::path p = dir.path / name;
    std::ofstream(p, std::ios::binary) << content;
    return p;
  };
  CHECK_THROWS_AS(read_checkpoint_info(write("magic", "XXXX" + bytes.substr(4))), FormatError);
  CHECK_THROWS_AS(load_model<double>(write("short", bytes.substr(0, bytes.size() - 8))), FormatError);
  CHECK_THROWS_AS(load_model<double>(write("long", bytes + "abcdefgh")), FormatError);
  CHECK_THROWS_AS(read_checkpoint_info(dir.path / "missing"), FormatError);

  // Editing the stored config without updating its hash is detected.
  std::string tampered = bytes;
  const auto pos = tampered.find("model.window = 3");
  REQUIRE(pos != std::string::npos);
  tampered[pos + 15] = '5';
  CHECK_THROWS_AS(load_model<double>(write("tampered", tampered)), FormatError);
}

TEST_CASE("trainer rejects mismatched inputs") {
  RunConfig cfg = tiny_config();
  Dataset data = generate_dataset(cfg.synth);
  CHECK_THROWS_AS(Trainer<double>(cfg, data.train, TokenEmbedding(cfg.synth.vocab_size(), 5, 1)), ValidationError);
  CHECK_THROWS_AS(Trainer<double>(cfg, {}, TokenEmbedding(cfg.synth.vocab_size(), 4, 1)), ValidationError);
}
