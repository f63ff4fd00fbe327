#pragma once

#include <cstddef>
#include <iosfwd>
#include <vector>

#include "mstg/tensor.hpp"

namespace mstg {

struct Interval {
  double start = 0.0;
  double end = 0.0;
};

struct MomentPrediction {
  double start = 0.0;
  double end = 0.0;
  double score = 0.0;
  Index level = 1;
  Index t = 0;
};

/// Temporal IoU. Disjoint intervals give 0 and identical intervals give 1,
/// including zero-length ones.
double tiou(const Interval& a, const Interval& b);
inline double tiou(const MomentPrediction& p, const Interval& b) { return tiou(Interval{p.start, p.end}, b); }

/// Converts head outputs into spans. `scores[l-1]` ([T^l x 1]) and
/// `offsets[l-1]` ([T^l x 2]) belong to pyramid level l. Spans are clamped to
/// [0, video_length]; output is sorted by score, then level, then t, and
/// truncated to `top_n` (no limit when top_n <= 0).
std::vector<MomentPrediction> decode_moments(const std::vector<Matrix<double>>& scores,
                                             const std::vector<Matrix<double>>& offsets, double video_length,
                                             Index top_n, double score_threshold);

struct SoftNmsOptions {
  double sigma = 0.5;
  double score_floor = 1e-3;
};

/// Gaussian Soft-NMS: repeatedly keeps the best remaining prediction and
/// decays the rest by exp(-tiou^2 / sigma). Predictions that fall below the
/// floor are dropped. Equal scores keep their input order.
std::vector<MomentPrediction> soft_nms(std::vector<MomentPrediction> preds, const SoftNmsOptions& opts = {});

struct QueryEval {
  std::vector<MomentPrediction> ranked;
  Interval truth;
};

struct RecallEntry {
  Index k = 1;
  double theta = 0.5;
  double value = 0.0;
};

struct BucketEntry {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double mean_iou = 0.0;
};

struct EvalReport {
  std::size_t num_queries = 0;
  std::vector<RecallEntry> recalls;
  std::vector<BucketEntry> buckets;

  /// Recall for (k, theta); throws std::out_of_range if not computed.
  double recall(Index k, double theta) const;
};

/// Fraction of queries whose top-k predictions contain a span with
/// tIoU >= theta, for every (k, theta) pair.
std::vector<RecallEntry> recall_at_k(const std::vector<QueryEval>& queries, const std::vector<Index>& ks,
                                     const std::vector<double>& thetas);

/// Quartile edges [min, q1, q2, q3, max] of ground-truth lengths, with
/// duplicates removed.
std::vector<double> quartile_edges(const std::vector<QueryEval>& queries);

/// Mean top-1 IoU per length bucket [edges[i], edges[i+1]); the last bucket
/// includes its upper edge. Queries without predictions score 0.
std::vector<BucketEntry> stratified_iou_report(const std::vector<QueryEval>& queries, const std::vector<double>& edges);

EvalReport evaluate(const std::vector<QueryEval>& queries, const std::vector<Index>& ks,
                    const std::vector<double>& thetas);

void write_recall_csv(std::ostream& os, const std::vector<RecallEntry>& recalls);
void write_bucket_csv(std::ostream& os, const std::vector<BucketEntry>& buckets);

}  // namespace mstg
