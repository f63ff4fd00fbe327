#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "mstg/tensor.hpp"

namespace mstg {

namespace detail {

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename Scalar>
void require_row(const Var<Scalar>& row, Index cols, const char* op) {
  if (row.value().size() != cols) {
    throw ShapeError(std::string(op) + ": expected a per-channel vector of length " + std::to_string(cols) +
                     ", got " + shape_str(row.shape()));
  }
}

// Flat view of a per-channel parameter as a row vector.
template <typename Scalar>
Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> as_row(const Matrix<Scalar>& m) {
  return Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(m.data(), m.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  return a.tape().record("add", a.value() + b.value(), a.shape(), {a, b},
                         [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                           t.accumulate(a, g);
                           t.accumulate(b, g);
                         });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  return a.tape().record("sub", a.value() - b.value(), a.shape(), {a, b},
                         [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                           t.accumulate(a, g);
                           t.accumulate(b, -g);
                         });
}

/// Hadamard product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "mul");
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return a.tape().record("mul", std::move(out), a.shape(), {a, b},
                         [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                           if (t.needs_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
                           if (t.needs_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
                         });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  return a.tape().record("scale", a.value() * s, a.shape(), {a},
                         [a, s](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                           t.accumulate(a, g * s);
                         });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  return sub(a, b);
}
template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& a) {
  return scale(a, s);
}

/// x + row, with `row` broadcast over the rows of x (bias add).
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& x, const Var<Scalar>& row) {
  detail::require_row(row, x.cols(), "add_row");
  Matrix<Scalar> out = x.value();
  out.rowwise() += detail::as_row(row.value());
  return x.tape().record("add_row", std::move(out), x.shape(), {x, row},
                         [x, row](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                           t.accumulate(x, g);
                           if (t.needs_grad(row)) {
                             t.accumulate(row, g.colwise().sum().reshaped(row.rows(), row.cols()));
                           }
                         });
}

/// x * row per channel, with `row` broadcast over the rows of x.
template <typename Scalar>
Var<Scalar> mul_row(const Var<Scalar>& x, const Var<Scalar>& row) {
  detail::require_row(row, x.cols(), "mul_row");
  const auto r = detail::as_row(row.value());
  Matrix<Scalar> out = x.value().array().rowwise() * r.array();
  return x.tape().record(
      "mul_row", std::move(out), x.shape(), {x, row},
      [x, row](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        const auto rv = detail::as_row(row.value());
        if (t.needs_grad(x)) {
          Matrix<Scalar> gx = g.array().rowwise() * rv.array();
          t.accumulate(x, gx);
        }
        if (t.needs_grad(row)) {
          Matrix<Scalar> gr = g.cwiseProduct(x.value()).colwise().sum();
          t.accumulate(row, gr.reshaped(row.rows(), row.cols()));
        }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Matrix<Scalar> out = a.value() * b.value();
  return a.tape().record("matmul", std::move(out), {a, b},
                         [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                           if (t.needs_grad(a)) t.accumulate(a, g * b.value().transpose());
                           if (t.needs_grad(b)) t.accumulate(b, a.value().transpose() * g);
                         });
}

/// a * b^T.
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dims differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                     "^T");
  }
  Matrix<Scalar> out = a.value() * b.value().transpose();
  return a.tape().record("matmul_nt", std::move(out), {a, b},
                         [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                           if (t.needs_grad(a)) t.accumulate(a, g * b.value());
                           if (t.needs_grad(b)) t.accumulate(b, g.transpose() * a.value());
                         });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  Matrix<Scalar> out = a.value().transpose();
  return a.tape().record("transpose", std::move(out), {a},
                         [a](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                           t.accumulate(a, g.transpose());
                         });
}

/// x W + b for a 2-D weight [in x out] and bias of length out.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  return add_row(matmul(x, weight), bias);
}

// ---------------------------------------------------------------------------
// Activations

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Matrix<Scalar> out = x.value().cwiseMax(Scalar(0));
  return x.tape().record("relu", std::move(out), x.shape(), {x},
                         [x](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>& y) {
                           Matrix<Scalar> dx = (y.array() > Scalar(0)).select(g.array(), Scalar(0)).matrix();
                           t.accumulate(x, dx);
                         });
}

/// Exact (erf-based) GELU.
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  Matrix<Scalar> out =
      x.value().unaryExpr([inv_sqrt2](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2)); });
  return x.tape().record(
      "gelu", std::move(out), x.shape(), {x},
      [x, inv_sqrt2](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        const Scalar inv_sqrt_2pi = Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
        Matrix<Scalar> d = x.value().unaryExpr([&](Scalar v) {
          const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2));
          return cdf + v * inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
        });
        t.accumulate(x, g.cwiseProduct(d));
      });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  Matrix<Scalar> out = x.value().unaryExpr([](Scalar v) {
    // Split by sign so exp never overflows.
    if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
    const Scalar e = std::exp(v);
    return e / (Scalar(1) + e);
  });
  return x.tape().record("sigmoid", std::move(out), x.shape(), {x},
                         [x](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>& y) {
                           t.accumulate(x, g.cwiseProduct(y.cwiseProduct((Scalar(1) - y.array()).matrix())));
                         });
}

// ---------------------------------------------------------------------------
// Normalization

/// Numerically stabilized softmax. `axis` is 0 (down columns) or 1 / -1
/// (along rows, the last axis).
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x, int axis = -1) {
  if (axis != 0 && axis != 1 && axis != -1) throw ShapeError("softmax: axis must be 0, 1 or -1");
  const bool rows = axis != 0;
  Matrix<Scalar> out(x.rows(), x.cols());
  if (rows) {
    for (Index r = 0; r < x.rows(); ++r) {
      auto e = (x.value().row(r).array() - x.value().row(r).maxCoeff()).exp();
      out.row(r) = e / e.sum();
    }
  } else {
    for (Index c = 0; c < x.cols(); ++c) {
      auto e = (x.value().col(c).array() - x.value().col(c).maxCoeff()).exp();
      out.col(c) = e / e.sum();
    }
  }
  return x.tape().record("softmax", std::move(out), x.shape(), {x},
                         [x, rows](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>& y) {
                           Matrix<Scalar> gy = g.cwiseProduct(y);
                           Matrix<Scalar> dx(y.rows(), y.cols());
                           if (rows) {
                             Eigen::Matrix<Scalar, Eigen::Dynamic, 1> s = gy.rowwise().sum();
                             dx = gy - (y.array().colwise() * s.array()).matrix();
                           } else {
                             Eigen::Matrix<Scalar, 1, Eigen::Dynamic> s = gy.colwise().sum();
                             dx = gy - (y.array().rowwise() * s.array()).matrix();
                           }
                           t.accumulate(x, dx);
                         });
}

/// Layer normalization over the last axis with population variance.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias, Scalar eps) {
  const Index d = x.cols();
  detail::require_row(gain, d, "layer_norm");
  detail::require_row(bias, d, "layer_norm");
  Matrix<Scalar> xhat(x.rows(), d);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.value().row(r).mean();
    const auto centered = x.value().row(r).array() - mean;
    const Scalar var = centered.square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std(r);
  }
  const auto gr = detail::as_row(gain.value());
  const auto br = detail::as_row(bias.value());
  Matrix<Scalar> out = (xhat.array().rowwise() * gr.array()).rowwise() + br.array();
  return x.tape().record(
      "layer_norm", std::move(out), x.shape(), {x, gain, bias},
      [x, gain, bias, xhat, inv_std, d](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        if (t.needs_grad(gain)) {
          Matrix<Scalar> gg = g.cwiseProduct(xhat).colwise().sum();
          t.accumulate(gain, gg.reshaped(gain.rows(), gain.cols()));
        }
        if (t.needs_grad(bias)) {
          Matrix<Scalar> gb = g.colwise().sum();
          t.accumulate(bias, gb.reshaped(bias.rows(), bias.cols()));
        }
        if (t.needs_grad(x)) {
          const auto gr = detail::as_row(gain.value());
          Matrix<Scalar> dxhat = g.array().rowwise() * gr.array();
          Matrix<Scalar> dx(g.rows(), d);
          for (Index r = 0; r < g.rows(); ++r) {
            const Scalar m1 = dxhat.row(r).mean();
            const Scalar m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
            dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
          }
          t.accumulate(x, dx);
        }
      });
}

/// Scales each row to unit L2 norm (rows with norm below `eps` are divided by eps).
template <typename Scalar>
Var<Scalar> l2_normalize_rows(const Var<Scalar>& x, Scalar eps = Scalar(1e-12)) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> norms = x.value().rowwise().norm().cwiseMax(eps);
  Matrix<Scalar> out = x.value().array().colwise() / norms.array();
  return x.tape().record("l2_normalize_rows", std::move(out), x.shape(), {x},
                         [x, norms, eps](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>& y) {
                           Matrix<Scalar> dx(g.rows(), g.cols());
                           for (Index r = 0; r < g.rows(); ++r) {
                             if (x.value().row(r).norm() > eps) {
                               const Scalar proj = y.row(r).dot(g.row(r));
                               dx.row(r) = (g.row(r) - proj * y.row(r)) / norms(r);
                             } else {
                               dx.row(r) = g.row(r) / eps;
                             }
                           }
                           t.accumulate(x, dx);
                         });
}

// ---------------------------------------------------------------------------
// Reductions and indexing

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  return x.tape().record("sum", std::move(out), {x},
                         [x](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                           t.accumulate(x, Matrix<Scalar>::Constant(x.rows(), x.cols(), g(0, 0)));
                         });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.value().size()));
}

/// Rows of x at `indices` (repeats allowed); gradient scatters back.
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& x, const std::vector<Index>& indices) {
  if (indices.empty()) throw ShapeError("gather_rows: empty index list");
  Matrix<Scalar> out(static_cast<Index>(indices.size()), x.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= x.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) + " out of range for " +
                       std::to_string(x.rows()) + " rows");
    }
    out.row(static_cast<Index>(i)) = x.value().row(indices[i]);
  }
  return x.tape().record("gather_rows", std::move(out), {x},
                         [x, indices](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                           Matrix<Scalar> dx = Matrix<Scalar>::Zero(x.rows(), x.cols());
                           for (std::size_t i = 0; i < indices.size(); ++i) {
                             dx.row(indices[i]) += g.row(static_cast<Index>(i));
                           }
                           t.accumulate(x, dx);
                         });
}

// ---------------------------------------------------------------------------
// Convolution

inline Index conv1d_output_length(Index length, Index kernel, Index stride, Index padding) {
  return (length + 2 * padding - kernel) / stride + 1;
}

/// 1-D convolution over the time axis of x [T x C_in].
///
/// Dense mode: kernel shape [k, C_in, C_out]. Depthwise mode: kernel shape
/// [k, 1, C] applies one k-tap filter per channel and needs C_in == C.
/// Output length is floor((T + 2*padding - k) / stride) + 1; out-of-range
/// input rows read as zero.
template <typename Scalar>
Var<Scalar> conv1d(const Var<Scalar>& x, const Var<Scalar>& kernel, Index stride, Index padding,
                   bool depthwise = false) {
  const Shape& ks = kernel.shape();
  if (ks.size() != 3) throw ShapeError("conv1d: kernel must be [k, C_in, C_out], got " + shape_str(ks));
  if (stride < 1) throw ShapeError("conv1d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv1d: padding must be >= 0");
  const Index k = ks[0];
  const Index length = x.rows();
  const Index c_in = x.cols();
  const Index c_out = ks[2];
  if (depthwise) {
    if (ks[1] != 1 || c_in != c_out) {
      throw ShapeError("conv1d: depthwise mode needs kernel [k, 1, C] with C == C_in; got " + shape_str(ks) +
                       " for C_in " + std::to_string(c_in));
    }
  } else if (ks[1] != c_in) {
    throw ShapeError("conv1d: kernel expects C_in " + std::to_string(ks[1]) + ", input has " +
                     std::to_string(c_in));
  }
  const Index out_len = conv1d_output_length(length, k, stride, padding);
  if (out_len < 1) throw ShapeError("conv1d: kernel larger than padded input");

  const Matrix<Scalar>& kv = kernel.value();  // [(k*C_in) x C_out] or [k x C]
  Matrix<Scalar> out = Matrix<Scalar>::Zero(out_len, c_out);
  if (depthwise) {
    for (Index o = 0; o < out_len; ++o) {
      for (Index j = 0; j < k; ++j) {
        const Index src = o * stride - padding + j;
        if (src < 0 || src >= length) continue;
        out.row(o) += x.value().row(src).cwiseProduct(kv.row(j));
      }
    }
  } else {
    // im2col: row o holds the k input rows feeding output o, concatenated.
    Matrix<Scalar> cols = Matrix<Scalar>::Zero(out_len, k * c_in);
    for (Index o = 0; o < out_len; ++o) {
      for (Index j = 0; j < k; ++j) {
        const Index src = o * stride - padding + j;
        if (src < 0 || src >= length) continue;
        cols.block(o, j * c_in, 1, c_in) = x.value().row(src);
      }
    }
    out.noalias() = cols * kv;
  }
  return x.tape().record(
      "conv1d", std::move(out), {x, kernel},
      [x, kernel, stride, padding, depthwise, k, length, c_in, out_len](Tape<Scalar>& t, const Matrix<Scalar>& g,
                                                                        const Matrix<Scalar>&) {
        const Matrix<Scalar>& kv = kernel.value();
        const bool need_x = t.needs_grad(x);
        const bool need_k = t.needs_grad(kernel);
        if (depthwise) {
          Matrix<Scalar> dx = Matrix<Scalar>::Zero(length, c_in);
          Matrix<Scalar> dk = Matrix<Scalar>::Zero(k, c_in);
          for (Index o = 0; o < out_len; ++o) {
            for (Index j = 0; j < k; ++j) {
              const Index src = o * stride - padding + j;
              if (src < 0 || src >= length) continue;
              if (need_x) dx.row(src) += g.row(o).cwiseProduct(kv.row(j));
              if (need_k) dk.row(j) += g.row(o).cwiseProduct(x.value().row(src));
            }
          }
          if (need_x) t.accumulate(x, dx);
          if (need_k) t.accumulate(kernel, dk);
          return;
        }
        Matrix<Scalar> cols = Matrix<Scalar>::Zero(out_len, k * c_in);
        if (need_k) {
          for (Index o = 0; o < out_len; ++o) {
            for (Index j = 0; j < k; ++j) {
              const Index src = o * stride - padding + j;
              if (src < 0 || src >= length) continue;
              cols.block(o, j * c_in, 1, c_in) = x.value().row(src);
            }
          }
          t.accumulate(kernel, cols.transpose() * g);
        }
        if (need_x) {
          Matrix<Scalar> dcols = g * kv.transpose();
          Matrix<Scalar> dx = Matrix<Scalar>::Zero(length, c_in);
          for (Index o = 0; o < out_len; ++o) {
            for (Index j = 0; j < k; ++j) {
              const Index src = o * stride - padding + j;
              if (src < 0 || src >= length) continue;
              dx.row(src) += dcols.block(o, j * c_in, 1, c_in);
            }
          }
          t.accumulate(x, dx);
        }
      });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention on pre-projected q [Tq x D],
/// k [Tk x D], v [Tk x D]; each head uses a D/heads slice of the channels.
///
/// `window` > 0 restricts query i to keys j with |i - j| <= (window - 1) / 2
/// (truncated at the ends; needs Tq == Tk). `window` == 0 attends everywhere.
/// `key_mask`, when given, marks real keys with true; masked keys get zero
/// weight. A query row with no admissible key is an error.
template <typename Scalar>
Var<Scalar> multi_head_attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, Index heads,
                                 Index window = 0, const std::vector<bool>& key_mask = {}) {
  const Index tq = q.rows();
  const Index tk = k.rows();
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != tk) {
    throw ShapeError("attention: q/k/v shapes disagree: " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                     ", " + shape_str(v.shape()));
  }
  if (heads < 1 || d % heads != 0) throw ShapeError("attention: heads must divide the channel count");
  if (window < 0 || (window > 0 && window % 2 == 0)) throw ShapeError("attention: window must be odd");
  if (window > 0 && tq != tk) throw ShapeError("attention: local window needs Tq == Tk");
  if (!key_mask.empty() && static_cast<Index>(key_mask.size()) != tk) {
    throw ShapeError("attention: key mask length differs from key count");
  }
  const Index dh = d / heads;
  const Index half = window > 0 ? (window - 1) / 2 : tk;
  const Index span = window > 0 ? std::min(window, tk) : tk;
  const Scalar scale_factor = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  // Key range of query i is [lo(i), lo(i) + count(i)); probabilities of head h
  // live in probs[h] at column (j - lo(i)).
  std::vector<Index> lo(tq), count(tq);
  for (Index i = 0; i < tq; ++i) {
    const Index a = window > 0 ? std::max<Index>(0, i - half) : 0;
    const Index b = window > 0 ? std::min<Index>(tk - 1, i + half) : tk - 1;
    lo[i] = a;
    count[i] = b - a + 1;
  }
  std::vector<Matrix<Scalar>> probs(heads, Matrix<Scalar>::Zero(tq, span));
  Matrix<Scalar> out = Matrix<Scalar>::Zero(tq, d);
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> scores(span);
  for (Index h = 0; h < heads; ++h) {
    const Index c0 = h * dh;
    for (Index i = 0; i < tq; ++i) {
      Scalar best = -std::numeric_limits<Scalar>::infinity();
      bool any = false;
      for (Index c = 0; c < count[i]; ++c) {
        const Index j = lo[i] + c;
        if (!key_mask.empty() && !key_mask[j]) continue;
        scores(c) = qv.row(i).segment(c0, dh).dot(kv.row(j).segment(c0, dh)) * scale_factor;
        best = std::max(best, scores(c));
        any = true;
      }
      if (!any) throw ShapeError("attention: query " + std::to_string(i) + " has no unmasked key");
      Scalar total = 0;
      for (Index c = 0; c < count[i]; ++c) {
        const Index j = lo[i] + c;
        if (!key_mask.empty() && !key_mask[j]) continue;
        const Scalar e = std::exp(scores(c) - best);
        probs[h](i, c) = e;
        total += e;
      }
      probs[h].row(i).head(count[i]) /= total;
      for (Index c = 0; c < count[i]; ++c) {
        const Scalar p = probs[h](i, c);
        if (p != Scalar(0)) out.row(i).segment(c0, dh) += p * vv.row(lo[i] + c).segment(c0, dh);
      }
    }
  }
  return q.tape().record(
      "attention", std::move(out), {q, k, v},
      [q, k, v, heads, dh, lo, count, probs, scale_factor](Tape<Scalar>& t, const Matrix<Scalar>& g,
                                                           const Matrix<Scalar>&) {
        const auto& qv = q.value();
        const auto& kv = k.value();
        const auto& vv = v.value();
        Matrix<Scalar> dq = Matrix<Scalar>::Zero(qv.rows(), qv.cols());
        Matrix<Scalar> dk = Matrix<Scalar>::Zero(kv.rows(), kv.cols());
        Matrix<Scalar> dv = Matrix<Scalar>::Zero(vv.rows(), vv.cols());
        Eigen::Matrix<Scalar, 1, Eigen::Dynamic> dp(probs[0].cols());
        for (Index h = 0; h < heads; ++h) {
          const Index c0 = h * dh;
          for (Index i = 0; i < qv.rows(); ++i) {
            const auto gi = g.row(i).segment(c0, dh);
            Scalar weighted = 0;
            for (Index c = 0; c < count[i]; ++c) {
              const Index j = lo[i] + c;
              const Scalar p = probs[h](i, c);
              dp(c) = gi.dot(vv.row(j).segment(c0, dh));
              weighted += p * dp(c);
              dv.row(j).segment(c0, dh) += p * gi;
            }
            for (Index c = 0; c < count[i]; ++c) {
              const Index j = lo[i] + c;
              const Scalar ds = probs[h](i, c) * (dp(c) - weighted) * scale_factor;
              if (ds == Scalar(0)) continue;
              dq.row(i).segment(c0, dh) += ds * kv.row(j).segment(c0, dh);
              dk.row(j).segment(c0, dh) += ds * qv.row(i).segment(c0, dh);
            }
          }
        }
        t.accumulate(q, dq);
        t.accumulate(k, dk);
        t.accumulate(v, dv);
      });
}

}  // namespace mstg
