#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "mstg/errors.hpp"
#include "mstg/ops.hpp"
#include "mstg/targets.hpp"

namespace mstg {

struct LossWeights {
  double rho_reg = 1.0;
  double rho_within = 1.0;
  double rho_cross = 1.0;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double temperature = 0.07;
  bool normalize_embeddings = true;

  void validate() const {
    if (!(rho_reg >= 0)) throw ValidationError("loss.rho_reg", "must be >= 0");
    if (!(rho_within >= 0)) throw ValidationError("loss.rho_within", "must be >= 0");
    if (!(rho_cross >= 0)) throw ValidationError("loss.rho_cross", "must be >= 0");
    if (!(focal_gamma >= 0)) throw ValidationError("loss.focal_gamma", "must be >= 0");
    if (!(focal_alpha >= 0 && focal_alpha <= 1)) throw ValidationError("loss.focal_alpha", "must lie in [0, 1]");
    if (!(temperature > 0)) throw ValidationError("loss.temperature", "must be > 0");
  }
};

struct LossReport {
  double total = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  double within = 0.0;
  double cross = 0.0;
  std::vector<double> cls_per_level;
  std::vector<double> reg_per_level;
};

/// Weighted sum of the four objectives.
inline LossReport total_loss(double cls, double reg, double within, double cross, const LossWeights& w) {
  LossReport r;
  r.cls = cls;
  r.reg = reg;
  r.within = within;
  r.cross = cross;
  r.total = cls + w.rho_reg * reg + w.rho_within * within + w.rho_cross * cross;
  return r;
}

inline constexpr double kProbClamp = 1e-7;

/// Alpha-balanced focal loss over probabilities `p` with 0/1 `labels` of the
/// same shape, summed and divided by `normalizer` (the element count when
/// `normalizer <= 0`). Clamped probabilities get zero gradient.
template <typename Scalar>
Var<Scalar> focal_loss(const Var<Scalar>& p, const Matrix<Scalar>& labels, double gamma, double alpha,
                       double normalizer = 0.0) {
  if (labels.rows() != p.rows() || labels.cols() != p.cols()) {
    throw ShapeError("focal_loss: labels do not match scores " + shape_str(p.shape()));
  }
  const double norm = normalizer > 0 ? normalizer : static_cast<double>(p.value().size());
  const Index n = p.value().size();
  Matrix<Scalar> dp(p.rows(), p.cols());
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double raw = static_cast<double>(p.value().data()[i]);
    const double q = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
    const bool clamped = q != raw;
    double loss, grad;
    if (labels.data()[i] > Scalar(0.5)) {
      const double w = std::pow(1.0 - q, gamma);
      loss = -alpha * w * std::log(q);
      const double dw = gamma == 0.0 ? 0.0 : -gamma * std::pow(1.0 - q, gamma - 1.0);
      grad = -alpha * (dw * std::log(q) + w / q);
    } else {
      const double w = std::pow(q, gamma);
      loss = -(1.0 - alpha) * w * std::log(1.0 - q);
      const double dw = gamma == 0.0 ? 0.0 : gamma * std::pow(q, gamma - 1.0);
      grad = -(1.0 - alpha) * (dw * std::log(1.0 - q) - w / (1.0 - q));
    }
    total += loss;
    dp.data()[i] = clamped ? Scalar(0) : static_cast<Scalar>(grad / norm);
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(total / norm);
  return p.tape().record("focal_loss", std::move(out), {p},
                         [p, dp](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                           t.accumulate(p, (g(0, 0) * dp).eval());
                         });
}

inline constexpr double kDiouEps = 1e-9;

/// Mean 1-D Distance-IoU loss between predicted and target (d_start, d_end)
/// offsets, rows aligned. Both intervals are anchored at the same time step.
template <typename Scalar>
Var<Scalar> diou_loss(const Var<Scalar>& pred, const Matrix<Scalar>& target) {
  if (pred.cols() != 2 || target.cols() != 2 || target.rows() != pred.rows()) {
    throw ShapeError("diou_loss: expected matching [P x 2] offsets, got " + shape_str(pred.shape()));
  }
  const Index rows = pred.rows();
  Matrix<Scalar> dpred(rows, 2);
  double total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    const double a = pred.value()(r, 0), b = pred.value()(r, 1);
    const double ts = target(r, 0), te = target(r, 1);
    const double inter_raw = std::min(b, te) + std::min(a, ts);
    const double inter = std::max(0.0, inter_raw);
    const double di_da = inter_raw > 0 && a <= ts ? 1.0 : 0.0;
    const double di_db = inter_raw > 0 && b <= te ? 1.0 : 0.0;
    const double uni_raw = a + b + ts + te - inter;
    const double uni = std::max(uni_raw, kDiouEps);
    const double du_da = uni_raw > kDiouEps ? 1.0 - di_da : 0.0;
    const double du_db = uni_raw > kDiouEps ? 1.0 - di_db : 0.0;
    const double iou = inter / uni;
    const double enc = std::max(b, te) + std::max(a, ts);
    const double enc2 = std::max(enc * enc, kDiouEps);
    const double de2_da = enc * enc > kDiouEps && a > ts ? 2.0 * enc : 0.0;
    const double de2_db = enc * enc > kDiouEps && b > te ? 2.0 * enc : 0.0;
    const double gap = 0.5 * (b - a) - 0.5 * (te - ts);
    const double pen = gap * gap / enc2;
    total += 1.0 - iou + pen;

    const double diou_da = (di_da * uni - inter * du_da) / (uni * uni);
    const double diou_db = (di_db * uni - inter * du_db) / (uni * uni);
    const double dpen_da = (-gap * enc2 - gap * gap * de2_da) / (enc2 * enc2);
    const double dpen_db = (gap * enc2 - gap * gap * de2_db) / (enc2 * enc2);
    dpred(r, 0) = static_cast<Scalar>((-diou_da + dpen_da) / static_cast<double>(rows));
    dpred(r, 1) = static_cast<Scalar>((-diou_db + dpen_db) / static_cast<double>(rows));
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(total / static_cast<double>(rows));
  return pred.tape().record("diou_loss", std::move(out), {pred},
                            [pred, dpred](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                              t.accumulate(pred, (g(0, 0) * dpred).eval());
                            });
}

/// Sum of InfoNCE terms -log(e^{s_ij} / (e^{s_ij} + sum_n e^{n_in})) over
/// anchors i (rows) and positives j (columns) of `pos`; `neg` holds the
/// anchor-negative logits. `skip_diagonal` drops i == j (anchors are the
/// positives themselves).
template <typename Scalar>
Var<Scalar> info_nce_sum(const Var<Scalar>& pos, const std::optional<Var<Scalar>>& neg, bool skip_diagonal) {
  const Index A = pos.rows(), P = pos.cols();
  if (neg && neg->rows() != A) throw ShapeError("info_nce_sum: negative logits need one row per anchor");
  if (skip_diagonal && A != P) throw ShapeError("info_nce_sum: skip_diagonal needs a square logit matrix");
  const Index N = neg ? neg->cols() : 0;
  Matrix<Scalar> dpos = Matrix<Scalar>::Zero(A, P);
  Matrix<Scalar> dneg = Matrix<Scalar>::Zero(A, std::max<Index>(N, 1));
  double total = 0.0;
  for (Index i = 0; i < A; ++i) {
    for (Index j = 0; j < P; ++j) {
      if (skip_diagonal && i == j) continue;
      const double s = pos.value()(i, j);
      double m = s;
      for (Index n = 0; n < N; ++n) m = std::max(m, static_cast<double>(neg->value()(i, n)));
      double z = std::exp(s - m);
      for (Index n = 0; n < N; ++n) z += std::exp(static_cast<double>(neg->value()(i, n)) - m);
      const double lse = m + std::log(z);
      total += lse - s;
      dpos(i, j) += static_cast<Scalar>(std::exp(s - lse) - 1.0);
      for (Index n = 0; n < N; ++n) {
        dneg(i, n) += static_cast<Scalar>(std::exp(static_cast<double>(neg->value()(i, n)) - lse));
      }
    }
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(total);
  auto fn = [pos, neg, dpos, dneg](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
    t.accumulate(pos, (g(0, 0) * dpos).eval());
    if (neg) t.accumulate(*neg, (g(0, 0) * dneg).eval());
  };
  if (neg) return pos.tape().record("info_nce_sum", std::move(out), {pos, *neg}, fn);
  return pos.tape().record("info_nce_sum", std::move(out), {pos}, fn);
}

namespace detail {

template <typename Scalar>
Var<Scalar> embed_rows(const Var<Scalar>& z, const std::vector<Index>& rows, bool normalize) {
  Var<Scalar> e = gather_rows(z, rows);
  return normalize ? l2_normalize_rows(e) : e;
}

template <typename Scalar>
Var<Scalar> zero_scalar(Tape<Scalar>& tape) {
  return tape.constant(Matrix<Scalar>::Zero(1, 1));
}

}  // namespace detail

/// Within-scale contrastive loss. `levels[l]` is Z^l (index 0 is unused);
/// `sets[l-1]` holds level l's positives and negatives. Mean over ordered
/// positive pairs; levels with fewer than two positives contribute nothing.
template <typename Scalar>
Var<Scalar> within_scale_loss(Tape<Scalar>& tape, const std::vector<Var<Scalar>>& levels,
                              const std::vector<ContrastiveSets>& sets, double temperature, bool normalize) {
  if (!(temperature > 0)) throw ValidationError("loss.temperature", "must be > 0");
  if (sets.size() + 1 > levels.size()) throw ShapeError("within_scale_loss: more set levels than pyramid levels");
  const Scalar inv_tau = static_cast<Scalar>(1.0 / temperature);
  std::optional<Var<Scalar>> total;
  double count = 0.0;
  for (std::size_t l = 0; l < sets.size(); ++l) {
    const ContrastiveSets& s = sets[l];
    const auto P = static_cast<double>(s.positives.size());
    if (P < 2) continue;
    const Var<Scalar>& z = levels[l + 1];
    Var<Scalar> zp = detail::embed_rows(z, s.positives, normalize);
    Var<Scalar> pos = scale(matmul_nt(zp, zp), inv_tau);
    std::optional<Var<Scalar>> neg;
    if (!s.negatives.empty()) neg = scale(matmul_nt(zp, detail::embed_rows(z, s.negatives, normalize)), inv_tau);
    Var<Scalar> term = info_nce_sum(pos, neg, true);
    total = total ? add(*total, term) : term;
    count += P * (P - 1);
  }
  if (!total) return detail::zero_scalar(tape);
  return scale(*total, static_cast<Scalar>(1.0 / count));
}

/// Cross-scale contrastive loss: level-0 rows at `anchors` against each
/// level's positives and negatives. Mean over (anchor, level, positive) terms.
template <typename Scalar>
Var<Scalar> cross_scale_loss(Tape<Scalar>& tape, const std::vector<Var<Scalar>>& levels, const CrossScaleSets& sets,
                             double temperature, bool normalize) {
  if (!(temperature > 0)) throw ValidationError("loss.temperature", "must be > 0");
  if (sets.levels.size() + 1 > levels.size()) throw ShapeError("cross_scale_loss: more set levels than pyramid levels");
  if (sets.anchors.empty()) return detail::zero_scalar(tape);
  const Scalar inv_tau = static_cast<Scalar>(1.0 / temperature);
  Var<Scalar> za = detail::embed_rows(levels[0], sets.anchors, normalize);
  const auto A = static_cast<double>(sets.anchors.size());
  std::optional<Var<Scalar>> total;
  double count = 0.0;
  for (std::size_t l = 0; l < sets.levels.size(); ++l) {
    const ContrastiveSets& s = sets.levels[l];
    if (s.positives.empty()) continue;
    const Var<Scalar>& z = levels[l + 1];
    Var<Scalar> pos = scale(matmul_nt(za, detail::embed_rows(z, s.positives, normalize)), inv_tau);
    std::optional<Var<Scalar>> neg;
    if (!s.negatives.empty()) neg = scale(matmul_nt(za, detail::embed_rows(z, s.negatives, normalize)), inv_tau);
    Var<Scalar> term = info_nce_sum(pos, neg, false);
    total = total ? add(*total, term) : term;
    count += A * static_cast<double>(s.positives.size());
  }
  if (!total) return detail::zero_scalar(tape);
  return scale(*total, static_cast<Scalar>(1.0 / count));
}

}  // namespace mstg
