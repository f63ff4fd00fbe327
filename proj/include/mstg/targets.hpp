#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mstg/geometry.hpp"

namespace mstg {

/// Target moment of one query, in clip coordinates.
struct GroundingAnnotation {
  std::string video_id;
  std::string query_id;
  double start = 0.0;
  double end = 0.0;

  double length() const { return end - start; }
  double center() const { return 0.5 * (start + end); }

  /// Requires 0 <= start < end <= video_length.
  void validate(double video_length) const;
};

/// Center-sampled targets of one pyramid level.
struct LevelTargets {
  Index level = 0;
  Index stride = 1;
  Index length = 0;
  std::vector<Index> positives;                // level time steps
  std::vector<std::array<double, 2>> offsets;  // (d_start, d_end) per positive, stride units
  std::vector<Index> negative_pool;            // steps whose coordinate lies outside the moment
};

/// Per-level targets of one annotation; `levels[l]` covers pyramid level l.
struct TargetAssignment {
  double start = 0.0;
  double end = 0.0;
  std::vector<LevelTargets> levels;

  Index num_levels() const { return static_cast<Index>(levels.size()) - 1; }
  const LevelTargets& level(Index l) const { return levels.at(static_cast<std::size_t>(l)); }
  /// Positives summed over levels 1..L.
  std::size_t decoder_positive_count() const;
};

/// Center sampling. Level-l step u sits at clip coordinate u * stride_l and is
/// a positive when it lies inside [start, end] and within
/// alpha_center * stride_l of the moment center. Its regression targets are
/// (coord - start) / stride_l and (end - coord) / stride_l. When no level >= 1
/// has a positive, the level-1 step nearest the center is used (and mirrored
/// on level 0) so every annotation is trainable.
TargetAssignment assign_targets(const GroundingAnnotation& ann, const std::vector<Index>& lengths,
                                double alpha_center, double video_length, Index ratio = 2);

/// Query drawn uniformly from one video's queries, with its targets.
struct QueryCentricSample {
  std::size_t query = 0;
  const TargetAssignment* targets = nullptr;
};

QueryCentricSample sample_query_centric(std::span<const TargetAssignment> queries, std::mt19937_64& rng);

struct ContrastiveSets {
  std::vector<Index> positives;
  std::vector<Index> negatives;
};

/// Positives of `level` plus min(|positives|, |pool|) negatives drawn
/// uniformly without replacement from the level's negative pool.
ContrastiveSets build_within_scale_sets(const TargetAssignment& targets, Index level, std::mt19937_64& rng);

struct CrossScaleSets {
  std::vector<Index> anchors;          // level-0 positives
  std::vector<ContrastiveSets> levels;  // levels 1..L at index l-1
};

/// Level-0 anchors and, for l = 1..L in order, the within-scale sets of that
/// level (one rng draw sequence, so both objectives can share the sets).
CrossScaleSets build_cross_scale_sets(const TargetAssignment& targets, std::mt19937_64& rng);

}  // namespace mstg
