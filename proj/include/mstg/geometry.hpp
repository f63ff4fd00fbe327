#pragma once

#include <vector>

#include "mstg/errors.hpp"
#include "mstg/tensor.hpp"

namespace mstg {

/// Input-clip stride of pyramid level `level`. Level 0 (the projection
/// output) and level 1 run at clip resolution; every later level is one
/// downsampling step coarser, so level l >= 1 has stride ratio^(l-1).
inline Index level_stride(Index level, Index ratio = 2) {
  Index s = 1;
  for (Index l = 2; l <= level; ++l) s *= ratio;
  return s;
}

/// Sequence lengths T^0..T^levels for an input of `length` clips.
inline std::vector<Index> pyramid_lengths(Index length, Index levels, Index ratio = 2) {
  if (length < 1) throw ShapeError("pyramid_lengths: video must have at least one clip");
  if (levels < 1) throw ShapeError("pyramid_lengths: need at least one level");
  if (ratio < 2) throw ShapeError("pyramid_lengths: downsampling ratio must be >= 2");
  std::vector<Index> out{length, length};
  for (Index l = 2; l <= levels; ++l) out.push_back((out.back() + ratio - 1) / ratio);
  return out;
}

/// Downsampling stride applied after block `level` (1 keeps level 1 at clip
/// resolution).
inline Index block_stride(Index level, Index ratio = 2) { return level <= 1 ? 1 : ratio; }

}  // namespace mstg
