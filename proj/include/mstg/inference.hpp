#pragma once

#include <vector>

#include "mstg/config.hpp"
#include "mstg/data.hpp"
#include "mstg/decode.hpp"
#include "mstg/model.hpp"

namespace mstg {

/// Ranked moments for one query against an encoded video: thresholded top-n
/// decoding, then Soft-NMS, truncated to `eval.top_n`.
template <typename Scalar>
std::vector<MomentPrediction> predict_query(const FeaturePyramid<Scalar>& pyramid, const Matrix<Scalar>& words,
                                            GroundingModel<Scalar>& model, const EvalConfig& eval,
                                            double video_length) {
  Tape<Scalar>& tape = pyramid.levels.front().tape();
  auto text = encode_text(tape.constant(words), {}, model.params, model.config);
  auto heads = ground_query(pyramid, text, model.params, model.config);
  std::vector<Matrix<double>> scores, offsets;
  for (std::size_t l = 0; l < heads.scores.size(); ++l) {
    scores.push_back(heads.scores[l].value().template cast<double>());
    offsets.push_back(heads.offsets[l].value().template cast<double>());
  }
  auto ranked = decode_moments(scores, offsets, video_length, eval.pre_nms_top_n, eval.score_threshold);
  ranked = soft_nms(std::move(ranked), SoftNmsOptions{eval.nms_sigma, eval.nms_floor});
  if (static_cast<Index>(ranked.size()) > eval.top_n) ranked.resize(static_cast<std::size_t>(eval.top_n));
  return ranked;
}

/// Predictions for every query of every video, in dataset order.
template <typename Scalar>
std::vector<QueryEval> predict_split(GroundingModel<Scalar>& model, const std::vector<VideoRecord>& videos,
                                     const TokenEmbedding& embedding, const EvalConfig& eval) {
  std::vector<QueryEval> out;
  for (const auto& v : videos) {
    Tape<Scalar> tape(false);
    auto pyramid = encode_video_pyramid(tape.constant(v.features.template cast<Scalar>()), model.params, model.config);
    for (std::size_t q = 0; q < v.annotations.size(); ++q) {
      const auto& a = v.annotations[q];
      out.push_back({predict_query(pyramid, embedding.embed<Scalar>(v.tokens[q]), model, eval,
                                   static_cast<double>(v.length())),
                     Interval{a.start, a.end}});
    }
  }
  return out;
}

inline const std::vector<Index>& default_recall_ks() {
  static const std::vector<Index> ks{1, 5};
  return ks;
}

inline const std::vector<double>& default_recall_thetas() {
  static const std::vector<double> thetas{0.3, 0.5, 0.7};
  return thetas;
}

}  // namespace mstg
