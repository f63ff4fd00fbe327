#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mstg/targets.hpp"
#include "mstg/tensor.hpp"

namespace mstg {

/// Parameters of the planted-moment generator.
struct SyntheticSpec {
  Index n_videos = 286;  // 200 / 42 / 44 after the 70/15/15 split
  Index min_length = 32;
  Index max_length = 64;
  Index n_concepts = 4;
  Index video_dim = 32;
  Index text_dim = 16;
  Index min_queries = 1;
  Index max_queries = 3;
  Index short_max = 7;          // short moments span [short_min, short_max] clips
  Index short_min = 3;
  double long_fraction = 0.5;   // probability of a long moment (> T/4 clips)
  Index filler_tokens = 12;
  Index min_query_tokens = 3;
  Index max_query_tokens = 6;
  double noise = 0.5;
  std::uint64_t seed = 7;

  Index vocab_size() const { return n_concepts + filler_tokens; }
  void validate() const;
};

struct VideoRecord {
  std::string video_id;
  Matrix<float> features;  // [T x D_v]
  std::vector<GroundingAnnotation> annotations;
  std::vector<std::vector<int>> tokens;  // one token sequence per annotation

  Index length() const { return features.rows(); }
};

struct Dataset {
  std::vector<VideoRecord> train;
  std::vector<VideoRecord> val;
  std::vector<VideoRecord> test;
};

/// Pure function of `spec`. Each video is Gaussian background noise with
/// concept prototypes added over the annotated spans; each query carries its
/// concept's token among random fillers.
Dataset generate_dataset(const SyntheticSpec& spec);

/// Fixed random lookup table for integer token ids.
class TokenEmbedding {
 public:
  TokenEmbedding(Index vocab_size, Index dim, std::uint64_t seed);

  Index vocab_size() const { return table_.rows(); }
  Index dim() const { return table_.cols(); }

  template <typename Scalar>
  Matrix<Scalar> embed(const std::vector<int>& tokens) const {
    Matrix<Scalar> out(static_cast<Index>(tokens.size()), dim());
    for (std::size_t i = 0; i < tokens.size(); ++i) out.row(static_cast<Index>(i)) = row(tokens[i]).template cast<Scalar>();
    return out;
  }

 private:
  Eigen::Matrix<double, 1, Eigen::Dynamic> row(int token) const;
  Matrix<double> table_;
};

/// Embedding seed derived from the dataset seed, shared by generator and loaders.
std::uint64_t embedding_seed(std::uint64_t dataset_seed);

// MGF1 feature files: "MGF1", u32 T, u32 D, T*D little-endian float32.
void write_features(const std::filesystem::path& path, const Matrix<float>& features);
Matrix<float> read_features(const std::filesystem::path& path);

struct AnnotationRecord {
  GroundingAnnotation annotation;
  std::vector<int> tokens;
};

/// JSON lines with {video_id, query_id, start, end, tokens}. Blank lines are
/// skipped; schema errors name the line.
std::vector<AnnotationRecord> load_annotations(const std::filesystem::path& path);
void write_annotations(const std::filesystem::path& path, const std::vector<VideoRecord>& videos);

/// Dataset metadata stored next to the splits.
struct DatasetInfo {
  Index video_dim = 0;
  Index text_dim = 0;
  Index vocab_size = 0;
  std::uint64_t embedding_seed = 0;
};

/// Writes <dir>/dataset.json and <dir>/<split>/{annotations.jsonl,features/*.mgf}.
void write_dataset(const std::filesystem::path& dir, const Dataset& data, const DatasetInfo& info);
DatasetInfo read_dataset_info(const std::filesystem::path& dir);
/// Loads one split directory; annotations are checked against each video's length.
std::vector<VideoRecord> load_split(const std::filesystem::path& split_dir);

struct Batch {
  std::size_t video = 0;
  std::vector<std::size_t> queries;
};

/// One epoch of video-centric batches: every video once in shuffled order,
/// each with up to `max_queries` of its queries (all when 0).
std::vector<Batch> batch_video_centric(const std::vector<VideoRecord>& videos, std::mt19937_64& rng,
                                       std::size_t max_queries = 0);

}  // namespace mstg
