#include "mstg/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

#include "mstg/errors.hpp"

namespace mstg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ValidationError(key, "expected an integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double out = std::stod(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw ValidationError(key, "expected a number, got '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ValidationError(key, "expected true or false, got '" + v + "'");
}

std::string fmt_real(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define MSTG_INT(name, member)                                                                           \
  Field {                                                                                                \
    name, [](RunConfig& c, const std::string& v) { c.member = parse_integer<Index>(name, v); },          \
        [](const RunConfig& c) { return std::to_string(c.member); }                                      \
  }
#define MSTG_REAL(name, member)                                                                          \
  Field {                                                                                                \
    name, [](RunConfig& c, const std::string& v) { c.member = parse_real(name, v); },                   \
        [](const RunConfig& c) { return fmt_real(c.member); }                                            \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_integer<std::uint64_t>("seed", v); },
            [](const RunConfig& c) { return c.seed ? std::to_string(*c.seed) : std::string(); }},
      Field{"output_dir", [](RunConfig& c, const std::string& v) { c.output_dir = v; },
            [](const RunConfig& c) { return c.output_dir; }},
      Field{"precision",
            [](RunConfig& c, const std::string& v) {
              if (v == "float32") {
                c.precision = Precision::Float32;
              } else if (v == "float64") {
                c.precision = Precision::Float64;
              } else {
                throw ValidationError("precision", "expected float32 or float64, got '" + v + "'");
              }
            },
            [](const RunConfig& c) { return std::string(precision_name(c.precision)); }},
      MSTG_INT("checkpoint_every", checkpoint_every),

      MSTG_INT("model.d_model", model.d_model),
      MSTG_INT("model.window", model.window),
      MSTG_INT("model.levels", model.levels),
      MSTG_INT("model.heads", model.heads),
      MSTG_INT("model.text_layers", model.text_layers),
      MSTG_INT("model.downsample_ratio", model.downsample_ratio),
      MSTG_INT("model.head_kernel", model.head_kernel),
      MSTG_REAL("model.alpha_center", model.alpha_center),
      MSTG_INT("model.video_dim", model.video_dim),
      MSTG_INT("model.text_dim", model.text_dim),
      MSTG_INT("model.mlp_ratio", model.mlp_ratio),
      MSTG_REAL("model.scale_init", model.scale_init),
      MSTG_REAL("model.ln_eps", model.ln_eps),

      MSTG_REAL("loss.rho_reg", loss.rho_reg),
      MSTG_REAL("loss.rho_within", loss.rho_within),
      MSTG_REAL("loss.rho_cross", loss.rho_cross),
      MSTG_REAL("loss.focal_gamma", loss.focal_gamma),
      MSTG_REAL("loss.focal_alpha", loss.focal_alpha),
      MSTG_REAL("loss.temperature", loss.temperature),
      Field{"loss.normalize_embeddings",
            [](RunConfig& c, const std::string& v) {
              c.loss.normalize_embeddings = parse_bool("loss.normalize_embeddings", v);
            },
            [](const RunConfig& c) { return std::string(c.loss.normalize_embeddings ? "true" : "false"); }},

      MSTG_REAL("optim.lr", optim.lr),
      MSTG_REAL("optim.weight_decay", optim.weight_decay),
      MSTG_REAL("optim.beta1", optim.beta1),
      MSTG_REAL("optim.beta2", optim.beta2),
      MSTG_REAL("optim.eps", optim.eps),
      MSTG_INT("optim.epochs", optim.epochs),
      MSTG_REAL("optim.warmup_fraction", optim.warmup_fraction),
      MSTG_REAL("optim.grad_clip", optim.grad_clip),
      MSTG_INT("optim.batch_videos", optim.batch_videos),
      MSTG_INT("optim.max_queries_per_step", optim.max_queries_per_step),

      MSTG_INT("eval.pre_nms_top_n", eval.pre_nms_top_n),
      MSTG_REAL("eval.score_threshold", eval.score_threshold),
      MSTG_REAL("eval.nms_sigma", eval.nms_sigma),
      MSTG_REAL("eval.nms_floor", eval.nms_floor),
      MSTG_INT("eval.top_n", eval.top_n),

      Field{"data.dir", [](RunConfig& c, const std::string& v) { c.data_dir = v; },
            [](const RunConfig& c) { return c.data_dir; }},
      MSTG_INT("data.n_videos", synth.n_videos),
      MSTG_INT("data.min_length", synth.min_length),
      MSTG_INT("data.max_length", synth.max_length),
      MSTG_INT("data.n_concepts", synth.n_concepts),
      MSTG_INT("data.video_dim", synth.video_dim),
      MSTG_INT("data.text_dim", synth.text_dim),
      MSTG_INT("data.min_queries", synth.min_queries),
      MSTG_INT("data.max_queries", synth.max_queries),
      MSTG_INT("data.short_min", synth.short_min),
      MSTG_INT("data.short_max", synth.short_max),
      MSTG_REAL("data.long_fraction", synth.long_fraction),
      MSTG_INT("data.filler_tokens", synth.filler_tokens),
      MSTG_INT("data.min_query_tokens", synth.min_query_tokens),
      MSTG_INT("data.max_query_tokens", synth.max_query_tokens),
      MSTG_REAL("data.noise", synth.noise),
      Field{"data.seed",
            [](RunConfig& c, const std::string& v) { c.synth.seed = parse_integer<std::uint64_t>("data.seed", v); },
            [](const RunConfig& c) { return std::to_string(c.synth.seed); }},
  };
  return table;
}

#undef MSTG_INT
#undef MSTG_REAL

}  // namespace

const char* precision_name(Precision p) { return p == Precision::Float64 ? "float64" : "float32"; }

void RunConfig::validate() const {
  if (!seed) throw ValidationError("seed", "required; runs never draw seeds from entropy");
  model.validate();
  loss.validate();
  if (optim.epochs < 1) throw ValidationError("optim.epochs", "must be >= 1");
  if (!(optim.lr > 0)) throw ValidationError("optim.lr", "must be > 0");
  if (!(optim.weight_decay >= 0)) throw ValidationError("optim.weight_decay", "must be >= 0");
  if (!(optim.beta1 >= 0 && optim.beta1 < 1)) throw ValidationError("optim.beta1", "must lie in [0, 1)");
  if (!(optim.beta2 >= 0 && optim.beta2 < 1)) throw ValidationError("optim.beta2", "must lie in [0, 1)");
  if (!(optim.eps > 0)) throw ValidationError("optim.eps", "must be > 0");
  if (!(optim.warmup_fraction >= 0 && optim.warmup_fraction < 1)) {
    throw ValidationError("optim.warmup_fraction", "must lie in [0, 1)");
  }
  if (!(optim.grad_clip > 0)) throw ValidationError("optim.grad_clip", "must be > 0");
  if (optim.batch_videos < 1) throw ValidationError("optim.batch_videos", "must be >= 1");
  if (optim.max_queries_per_step < 0) throw ValidationError("optim.max_queries_per_step", "must be >= 0");
  if (eval.pre_nms_top_n < 1) throw ValidationError("eval.pre_nms_top_n", "must be >= 1");
  if (eval.top_n < 1) throw ValidationError("eval.top_n", "must be >= 1");
  if (!(eval.nms_sigma > 0)) throw ValidationError("eval.nms_sigma", "must be > 0");
  if (!(eval.nms_floor >= 0)) throw ValidationError("eval.nms_floor", "must be >= 0");
  if (checkpoint_every < 1) throw ValidationError("checkpoint_every", "must be >= 1");
  if (data_dir.empty()) {
    synth.validate();
    if (synth.video_dim != model.video_dim) throw ValidationError("model.video_dim", "must equal data.video_dim");
    if (synth.text_dim != model.text_dim) throw ValidationError("model.text_dim", "must equal data.text_dim");
  }
}

namespace {

// Applies every line of `text` to `cfg`; `allowed` filters keys.
void apply_lines(RunConfig& cfg, const std::string& text, const std::function<bool(const std::string&)>& allowed) {
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  for (int line_no = 1; std::getline(in, raw); ++line_no) {
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("", "line " + std::to_string(line_no) + ": expected key = value, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return key == f.key; });
    if (it == table.end() || !allowed(key)) throw ValidationError(key, "unknown key");
    if (!seen.insert(key).second) throw ValidationError(key, "repeated key");
    it->set(cfg, value);
  }
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config", "cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  apply_lines(cfg, text, [](const std::string&) { return true; });
  cfg.validate();
  return cfg;
}

SyntheticSpec parse_synthetic_spec(const std::string& text) {
  RunConfig cfg;
  apply_lines(cfg, text, [](const std::string& key) { return key.rfind("data.", 0) == 0 && key != "data.dir"; });
  cfg.synth.validate();
  return cfg.synth;
}

SyntheticSpec load_synthetic_spec(const std::filesystem::path& path) { return parse_synthetic_spec(read_text(path)); }

RunConfig load_config(const std::filesystem::path& path) { return parse_config(read_text(path)); }

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) {
    const std::string v = f.get(cfg);
    if (v.empty()) continue;
    out += std::string(f.key) + " = " + v + "\n";
  }
  return out;
}

std::uint64_t config_hash(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.output_dir.clear();
  const std::string text = serialize_config(c);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mstg
