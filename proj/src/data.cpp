#include "mstg/data.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mstg/errors.hpp"

namespace mstg {

namespace fs = std::filesystem;
using nlohmann::json;

void SyntheticSpec::validate() const {
  auto require = [](bool ok, const char* key, const char* msg) {
    if (!ok) throw ValidationError(std::string("data.") + key, msg);
  };
  require(n_videos >= 1, "n_videos", "must be >= 1");
  require(min_length >= 1 && max_length >= min_length, "max_length", "length range must be nonempty");
  require(n_concepts >= 1, "n_concepts", "must be >= 1");
  require(video_dim >= 1, "video_dim", "must be >= 1");
  require(text_dim >= 1, "text_dim", "must be >= 1");
  require(min_queries >= 1 && max_queries >= min_queries, "max_queries", "query range must be nonempty");
  require(max_queries <= n_concepts, "max_queries", "must not exceed n_concepts (queries use distinct concepts)");
  require(short_min >= 1 && short_max >= short_min, "short_max", "short length range must be nonempty");
  require(short_max <= min_length, "short_max", "short moments must fit the shortest video");
  require(long_fraction >= 0 && long_fraction <= 1, "long_fraction", "must lie in [0, 1]");
  require(min_length >= 8 || long_fraction == 0, "min_length", "long moments need videos of at least 8 clips");
  require(filler_tokens >= 0, "filler_tokens", "must be >= 0");
  require(min_query_tokens >= 1 && max_query_tokens >= min_query_tokens, "max_query_tokens",
          "token range must be nonempty");
  require(noise >= 0, "noise", "must be >= 0");
}

std::uint64_t embedding_seed(std::uint64_t dataset_seed) { return dataset_seed ^ 0x9e3779b97f4a7c15ULL; }

TokenEmbedding::TokenEmbedding(Index vocab_size, Index dim, std::uint64_t seed) : table_(vocab_size, dim) {
  if (vocab_size < 1 || dim < 1) throw ValidationError("data.vocab_size", "embedding table must be nonempty");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index i = 0; i < table_.size(); ++i) table_.data()[i] = normal(rng);
}

Eigen::Matrix<double, 1, Eigen::Dynamic> TokenEmbedding::row(int token) const {
  if (token < 0 || token >= table_.rows()) {
    throw ValidationError("tokens", "token id " + std::to_string(token) + " outside vocabulary of " +
                                        std::to_string(table_.rows()));
  }
  return table_.row(token);
}

namespace {

Index uniform(std::mt19937_64& rng, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); }

bool overlaps(const std::vector<GroundingAnnotation>& placed, double s, double e) {
  return std::any_of(placed.begin(), placed.end(), [&](const auto& a) { return s < a.end && a.start < e; });
}

VideoRecord generate_video(const SyntheticSpec& spec, const Matrix<double>& prototypes, Index index,
                           std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution pick_long(spec.long_fraction);
  char id[32];
  std::snprintf(id, sizeof id, "vid%04lld", static_cast<long long>(index));

  VideoRecord v;
  v.video_id = id;
  const Index T = uniform(rng, spec.min_length, spec.max_length);
  Matrix<double> feats(T, spec.video_dim);
  for (Index i = 0; i < feats.size(); ++i) feats.data()[i] = spec.noise * noise(rng);

  std::vector<Index> concepts(static_cast<std::size_t>(spec.n_concepts));
  std::iota(concepts.begin(), concepts.end(), Index{0});
  std::shuffle(concepts.begin(), concepts.end(), rng);
  const Index nq = uniform(rng, spec.min_queries, spec.max_queries);

  for (Index q = 0; q < nq; ++q) {
    const Index concept_id = concepts[static_cast<std::size_t>(q)];
    bool placed = false;
    for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
      const bool is_long = attempt < 32 && pick_long(rng) && T / 2 > T / 4;
      const Index len = is_long ? uniform(rng, T / 4 + 1, T / 2) : uniform(rng, spec.short_min, spec.short_max);
      const Index s = uniform(rng, 0, T - len);
      if (overlaps(v.annotations, static_cast<double>(s), static_cast<double>(s + len))) continue;
      placed = true;
      feats.middleRows(s, len).rowwise() += prototypes.row(concept_id);
      v.annotations.push_back({v.video_id, v.video_id + "_q" + std::to_string(q), static_cast<double>(s),
                               static_cast<double>(s + len)});
      const Index n_tokens = uniform(rng, spec.min_query_tokens, spec.max_query_tokens);
      std::vector<int> tokens;
      for (Index k = 0; k + 1 < n_tokens && spec.filler_tokens > 0; ++k) {
        tokens.push_back(static_cast<int>(spec.n_concepts + uniform(rng, 0, spec.filler_tokens - 1)));
      }
      tokens.insert(tokens.begin() + uniform(rng, 0, static_cast<Index>(tokens.size())), static_cast<int>(concept_id));
      v.tokens.push_back(std::move(tokens));
    }
  }
  v.features = feats.cast<float>();
  return v;
}

}  // namespace

Dataset generate_dataset(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<double> prototypes(spec.n_concepts, spec.video_dim);
  for (Index i = 0; i < prototypes.size(); ++i) prototypes.data()[i] = normal(rng);

  std::vector<VideoRecord> videos;
  for (Index i = 0; i < spec.n_videos; ++i) videos.push_back(generate_video(spec, prototypes, i, rng));

  std::vector<std::size_t> order(videos.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<std::size_t>(spec.n_videos);
  const std::size_t n_train = n * 70 / 100, n_val = n * 15 / 100;
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? d.train : (i < n_train + n_val ? d.val : d.test);
    dst.push_back(std::move(videos[order[i]]));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Feature files

namespace {

constexpr char kMagic[4] = {'M', 'G', 'F', '1'};
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string(), "cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void write_features(const fs::path& path, const Matrix<float>& features) {
  if (features.rows() < 1 || features.cols() < 1) throw FormatError(path.string(), "feature matrix is empty");
  std::string buf(kMagic, 4);
  put_u32(buf, static_cast<std::uint32_t>(features.rows()));
  put_u32(buf, static_cast<std::uint32_t>(features.cols()));
  buf.reserve(buf.size() + 4 * static_cast<std::size_t>(features.size()));
  for (Index i = 0; i < features.size(); ++i) put_u32(buf, std::bit_cast<std::uint32_t>(features.data()[i]));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path.string(), "cannot open file for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError(path.string(), "write failed");
}

Matrix<float> read_features(const fs::path& path) {
  const std::string buf = read_file(path);
  if (buf.size() < 12) throw FormatError(path.string(), "truncated header");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) throw FormatError(path.string(), "bad magic, expected MGF1");
  const std::uint64_t T = get_u32(buf, 4), D = get_u32(buf, 8);
  if (T == 0 || D == 0) throw FormatError(path.string(), "header has a zero dimension");
  if (T * D > kMaxElements) throw FormatError(path.string(), "header dimensions overflow");
  const std::uint64_t expected = 12 + 4 * T * D;
  if (buf.size() < expected) {
    throw FormatError(path.string(), "truncated payload: header says " + std::to_string(T) + "x" + std::to_string(D) +
                                         " but file has " + std::to_string(buf.size()) + " bytes");
  }
  if (buf.size() > expected) throw FormatError(path.string(), "trailing bytes after payload");
  Matrix<float> out(static_cast<Index>(T), static_cast<Index>(D));
  for (Index i = 0; i < out.size(); ++i) {
    out.data()[i] = std::bit_cast<float>(get_u32(buf, 12 + 4 * static_cast<std::size_t>(i)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Annotations

std::vector<AnnotationRecord> load_annotations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path.string(), "cannot open file");
  std::vector<AnnotationRecord> out;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& msg) {
      throw FormatError(path.string(), "line " + std::to_string(line_no) + ": " + msg);
    };
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(std::string("invalid JSON (") + e.what() + ")");
    }
    if (!j.is_object()) fail("expected a JSON object");
    for (const char* key : {"video_id", "query_id"}) {
      if (!j.contains(key) || !j[key].is_string()) fail(std::string("field '") + key + "' must be a string");
    }
    for (const char* key : {"start", "end"}) {
      if (!j.contains(key) || !j[key].is_number()) fail(std::string("field '") + key + "' must be a number");
    }
    if (!j.contains("tokens") || !j["tokens"].is_array() || j["tokens"].empty()) {
      fail("field 'tokens' must be a nonempty array");
    }
    AnnotationRecord r;
    r.annotation.video_id = j["video_id"].get<std::string>();
    r.annotation.query_id = j["query_id"].get<std::string>();
    r.annotation.start = j["start"].get<double>();
    r.annotation.end = j["end"].get<double>();
    if (!(r.annotation.end > r.annotation.start)) fail("end must be greater than start");
    if (r.annotation.start < 0) fail("start must be >= 0");
    for (const auto& t : j["tokens"]) {
      if (!t.is_number_integer() || t.get<long long>() < 0) fail("tokens must be non-negative integers");
      r.tokens.push_back(t.get<int>());
    }
    out.push_back(std::move(r));
  }
  return out;
}

void write_annotations(const fs::path& path, const std::vector<VideoRecord>& videos) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(path.string(), "cannot open file for writing");
  for (const auto& v : videos) {
    for (std::size_t q = 0; q < v.annotations.size(); ++q) {
      const auto& a = v.annotations[q];
      json j = {{"video_id", a.video_id}, {"query_id", a.query_id}, {"start", a.start}, {"end", a.end},
                {"tokens", v.tokens[q]}};
      out << j.dump() << '\n';
    }
  }
}

void write_dataset(const fs::path& dir, const Dataset& data, const DatasetInfo& info) {
  fs::create_directories(dir);
  json meta = {{"video_dim", info.video_dim},
               {"text_dim", info.text_dim},
               {"vocab_size", info.vocab_size},
               {"embedding_seed", info.embedding_seed},
               {"splits", {{"train", data.train.size()}, {"val", data.val.size()}, {"test", data.test.size()}}}};
  std::ofstream(dir / "dataset.json") << meta.dump(2) << '\n';
  const std::pair<const char*, const std::vector<VideoRecord>*> splits[] = {
      {"train", &data.train}, {"val", &data.val}, {"test", &data.test}};
  for (const auto& [name, videos] : splits) {
    fs::create_directories(dir / name / "features");
    write_annotations(dir / name / "annotations.jsonl", *videos);
    for (const auto& v : *videos) write_features(dir / name / "features" / (v.video_id + ".mgf"), v.features);
  }
}

DatasetInfo read_dataset_info(const fs::path& dir) {
  const fs::path path = dir / "dataset.json";
  json j;
  try {
    j = json::parse(read_file(path));
    DatasetInfo info;
    info.video_dim = j.at("video_dim").get<Index>();
    info.text_dim = j.at("text_dim").get<Index>();
    info.vocab_size = j.at("vocab_size").get<Index>();
    info.embedding_seed = j.at("embedding_seed").get<std::uint64_t>();
    return info;
  } catch (const json::exception& e) {
    throw FormatError(path.string(), e.what());
  }
}

std::vector<VideoRecord> load_split(const fs::path& split_dir) {
  const fs::path ann_path = split_dir / "annotations.jsonl";
  std::vector<VideoRecord> videos;
  std::map<std::string, std::size_t> index;
  for (auto& r : load_annotations(ann_path)) {
    auto [it, fresh] = index.emplace(r.annotation.video_id, videos.size());
    if (fresh) {
      VideoRecord v;
      v.video_id = r.annotation.video_id;
      videos.push_back(std::move(v));
    }
    VideoRecord& v = videos[it->second];
    for (const auto& a : v.annotations) {
      if (a.query_id == r.annotation.query_id) {
        throw FormatError(ann_path.string(), "duplicate query_id " + a.query_id + " in video " + v.video_id);
      }
    }
    v.annotations.push_back(std::move(r.annotation));
    v.tokens.push_back(std::move(r.tokens));
  }
  for (auto& v : videos) {
    v.features = read_features(split_dir / "features" / (v.video_id + ".mgf"));
    for (const auto& a : v.annotations) {
      if (a.end > static_cast<double>(v.length())) {
        throw FormatError(ann_path.string(), "query " + a.query_id + " ends at " + std::to_string(a.end) +
                                                 " beyond video length " + std::to_string(v.length()));
      }
    }
  }
  return videos;
}

std::vector<Batch> batch_video_centric(const std::vector<VideoRecord>& videos, std::mt19937_64& rng,
                                       std::size_t max_queries) {
  std::vector<std::size_t> order(videos.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> out;
  out.reserve(order.size());
  for (std::size_t v : order) {
    Batch b;
    b.video = v;
    std::vector<std::size_t> all(videos[v].annotations.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    if (max_queries > 0 && all.size() > max_queries) {
      std::sample(all.begin(), all.end(), std::back_inserter(b.queries), max_queries, rng);
    } else {
      b.queries = std::move(all);
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace mstg
