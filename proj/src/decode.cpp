#include "mstg/decode.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "mstg/errors.hpp"
#include "mstg/geometry.hpp"

namespace mstg {

double tiou(const Interval& a, const Interval& b) {
  if (a.start == b.start && a.end == b.end) return 1.0;
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = (a.end - a.start) + (b.end - b.start) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

namespace {

bool ranks_before(const MomentPrediction& a, const MomentPrediction& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.level != b.level) return a.level < b.level;
  return a.t < b.t;
}

}  // namespace

std::vector<MomentPrediction> decode_moments(const std::vector<Matrix<double>>& scores,
                                             const std::vector<Matrix<double>>& offsets, double video_length,
                                             Index top_n, double score_threshold) {
  if (scores.size() != offsets.size()) throw ShapeError("decode_moments: scores and offsets differ in level count");
  std::vector<MomentPrediction> out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const Index level = static_cast<Index>(i) + 1;
    const auto& s = scores[i];
    const auto& d = offsets[i];
    if (s.cols() != 1 || d.cols() != 2 || d.rows() != s.rows()) {
      throw ShapeError("decode_moments: level " + std::to_string(level) + " expects [T x 1] scores and [T x 2] offsets");
    }
    const double stride = static_cast<double>(level_stride(level));
    for (Index t = 0; t < s.rows(); ++t) {
      if (s(t, 0) < score_threshold) continue;
      MomentPrediction p;
      p.level = level;
      p.t = t;
      p.score = s(t, 0);
      p.start = std::clamp(stride * (static_cast<double>(t) - d(t, 0)), 0.0, video_length);
      p.end = std::clamp(stride * (static_cast<double>(t) + d(t, 1)), 0.0, video_length);
      p.end = std::max(p.end, p.start);
      out.push_back(p);
    }
  }
  std::sort(out.begin(), out.end(), ranks_before);
  if (top_n > 0 && static_cast<Index>(out.size()) > top_n) out.resize(static_cast<std::size_t>(top_n));
  return out;
}

std::vector<MomentPrediction> soft_nms(std::vector<MomentPrediction> preds, const SoftNmsOptions& opts) {
  std::vector<MomentPrediction> kept;
  kept.reserve(preds.size());
  while (!preds.empty()) {
    auto best = std::max_element(preds.begin(), preds.end(), [](const MomentPrediction& a, const MomentPrediction& b) {
      return a.score < b.score;
    });
    // max_element returns the first maximum, so ties keep input order.
    MomentPrediction top = *best;
    preds.erase(best);
    kept.push_back(top);
    for (auto& p : preds) {
      const double iou = tiou(p, Interval{top.start, top.end});
      p.score *= std::exp(-iou * iou / opts.sigma);
    }
    std::erase_if(preds, [&](const MomentPrediction& p) { return p.score < opts.score_floor; });
  }
  return kept;
}

double EvalReport::recall(Index k, double theta) const {
  for (const auto& r : recalls) {
    if (r.k == k && r.theta == theta) return r.value;
  }
  throw std::out_of_range("recall R@" + std::to_string(k) + " at " + std::to_string(theta) + " not computed");
}

std::vector<RecallEntry> recall_at_k(const std::vector<QueryEval>& queries, const std::vector<Index>& ks,
                                     const std::vector<double>& thetas) {
  std::vector<RecallEntry> out;
  for (Index k : ks) {
    if (k < 1) throw ValidationError("eval.k", "recall K must be >= 1");
    for (double theta : thetas) {
      std::size_t hits = 0;
      for (const auto& q : queries) {
        const std::size_t n = std::min(q.ranked.size(), static_cast<std::size_t>(k));
        for (std::size_t r = 0; r < n; ++r) {
          if (tiou(q.ranked[r], q.truth) >= theta) {
            ++hits;
            break;
          }
        }
      }
      const double value = queries.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(queries.size());
      out.push_back({k, theta, value});
    }
  }
  return out;
}

std::vector<double> quartile_edges(const std::vector<QueryEval>& queries) {
  if (queries.empty()) return {};
  std::vector<double> lengths;
  lengths.reserve(queries.size());
  for (const auto& q : queries) lengths.push_back(q.truth.end - q.truth.start);
  std::sort(lengths.begin(), lengths.end());
  auto quantile = [&](double f) {
    const double pos = f * static_cast<double>(lengths.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, lengths.size() - 1);
    return lengths[lo] + (pos - static_cast<double>(lo)) * (lengths[hi] - lengths[lo]);
  };
  std::vector<double> edges{lengths.front(), quantile(0.25), quantile(0.5), quantile(0.75), lengths.back()};
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  if (edges.size() == 1) edges.push_back(edges.front());
  return edges;
}

std::vector<BucketEntry> stratified_iou_report(const std::vector<QueryEval>& queries,
                                               const std::vector<double>& edges) {
  if (edges.size() < 2) throw ValidationError("eval.bucket_edges", "need at least two edges");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (edges[i] < edges[i - 1]) throw ValidationError("eval.bucket_edges", "edges must be sorted ascending");
  }
  std::vector<BucketEntry> out;
  std::vector<double> sums(edges.size() - 1, 0.0);
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) out.push_back({edges[i], edges[i + 1], 0, 0.0});
  for (const auto& q : queries) {
    const double len = q.truth.end - q.truth.start;
    if (len < edges.front() || len > edges.back()) {
      throw ValidationError("eval.bucket_edges", "moment length " + std::to_string(len) + " outside bucket range");
    }
    std::size_t b = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), len) - edges.begin());
    b = std::clamp<std::size_t>(b, 1, out.size()) - 1;
    out[b].count += 1;
    sums[b] += q.ranked.empty() ? 0.0 : tiou(q.ranked.front(), q.truth);
  }
  for (std::size_t b = 0; b < out.size(); ++b) {
    if (out[b].count) out[b].mean_iou = sums[b] / static_cast<double>(out[b].count);
  }
  return out;
}

EvalReport evaluate(const std::vector<QueryEval>& queries, const std::vector<Index>& ks,
                    const std::vector<double>& thetas) {
  EvalReport r;
  r.num_queries = queries.size();
  r.recalls = recall_at_k(queries, ks, thetas);
  if (!queries.empty()) r.buckets = stratified_iou_report(queries, quartile_edges(queries));
  return r;
}

void write_recall_csv(std::ostream& os, const std::vector<RecallEntry>& recalls) {
  os << "metric,k,theta,value\n";
  for (const auto& r : recalls) os << "recall," << r.k << ',' << r.theta << ',' << r.value << '\n';
}

void write_bucket_csv(std::ostream& os, const std::vector<BucketEntry>& buckets) {
  os << "bucket_lo,bucket_hi,count,mean_iou\n";
  for (const auto& b : buckets) os << b.lo << ',' << b.hi << ',' << b.count << ',' << b.mean_iou << '\n';
}

}  // namespace mstg
