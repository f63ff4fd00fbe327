#include "mstg/targets.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <sstream>

#include "mstg/errors.hpp"

namespace mstg {

void GroundingAnnotation::validate(double video_length) const {
  auto fail = [&](const std::string& what) {
    std::ostringstream os;
    os << "moment [" << start << ", " << end << "] of " << video_id << "/" << query_id << " " << what;
    throw ValidationError("annotation", os.str());
  };
  if (!std::isfinite(start) || !std::isfinite(end)) fail("is not finite");
  if (!(end > start)) fail("must have end > start");
  if (start < 0.0 || end > video_length) fail("lies outside the video (length " + std::to_string(video_length) + ")");
}

std::size_t TargetAssignment::decoder_positive_count() const {
  std::size_t n = 0;
  for (std::size_t l = 1; l < levels.size(); ++l) n += levels[l].positives.size();
  return n;
}

namespace {

void add_positive(LevelTargets& lt, Index u, double start, double end) {
  double s = static_cast<double>(lt.stride);
  double x = static_cast<double>(u) * s;
  lt.positives.push_back(u);
  lt.offsets.push_back({std::max(0.0, (x - start) / s), std::max(0.0, (end - x) / s)});
}

}  // namespace

TargetAssignment assign_targets(const GroundingAnnotation& ann, const std::vector<Index>& lengths,
                                double alpha_center, double video_length, Index ratio) {
  ann.validate(video_length);
  if (lengths.size() < 2) throw ShapeError("assign_targets: need lengths for levels 0..L with L >= 1");
  if (!(alpha_center >= 0.0)) throw ValidationError("model.alpha_center", "must be >= 0");

  TargetAssignment out;
  out.start = ann.start;
  out.end = ann.end;
  const double c = ann.center();
  for (std::size_t l = 0; l < lengths.size(); ++l) {
    LevelTargets lt;
    lt.level = static_cast<Index>(l);
    lt.stride = level_stride(lt.level, ratio);
    lt.length = lengths[l];
    const double s = static_cast<double>(lt.stride);
    const double radius = alpha_center * s;
    for (Index u = 0; u < lt.length; ++u) {
      double x = static_cast<double>(u) * s;
      bool inside = x >= ann.start && x <= ann.end;
      if (inside && std::abs(x - c) <= radius) {
        add_positive(lt, u, ann.start, ann.end);
      } else if (!inside) {
        lt.negative_pool.push_back(u);
      }
    }
    out.levels.push_back(std::move(lt));
  }

  if (out.decoder_positive_count() == 0) {
    // Levels 0 and 1 share clip resolution, so the fallback step is valid on both.
    Index u = std::clamp<Index>(static_cast<Index>(std::lround(c)), 0, lengths[1] - 1);
    for (std::size_t l : {std::size_t{0}, std::size_t{1}}) {
      LevelTargets& lt = out.levels[l];
      lt.positives.clear();
      lt.offsets.clear();
      add_positive(lt, u, ann.start, ann.end);
      std::erase(lt.negative_pool, u);
    }
  }
  return out;
}

QueryCentricSample sample_query_centric(std::span<const TargetAssignment> queries, std::mt19937_64& rng) {
  if (queries.empty()) throw ValidationError("sampling", "video has no queries");
  std::uniform_int_distribution<std::size_t> pick(0, queries.size() - 1);
  std::size_t j = pick(rng);
  return {j, &queries[j]};
}

ContrastiveSets build_within_scale_sets(const TargetAssignment& targets, Index level, std::mt19937_64& rng) {
  const LevelTargets& lt = targets.level(level);
  ContrastiveSets sets;
  sets.positives = lt.positives;
  std::size_t n = std::min(lt.positives.size(), lt.negative_pool.size());
  sets.negatives.reserve(n);
  std::sample(lt.negative_pool.begin(), lt.negative_pool.end(), std::back_inserter(sets.negatives), n, rng);
  return sets;
}

CrossScaleSets build_cross_scale_sets(const TargetAssignment& targets, std::mt19937_64& rng) {
  CrossScaleSets sets;
  sets.anchors = targets.level(0).positives;
  for (Index l = 1; l <= targets.num_levels(); ++l) sets.levels.push_back(build_within_scale_sets(targets, l, rng));
  return sets;
}

}  // namespace mstg
