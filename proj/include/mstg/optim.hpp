#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "mstg/tensor.hpp"

namespace mstg {

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
inline double warmup_cosine_lr(double peak, Index step, Index warmup, Index total) {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const Index span = std::max<Index>(1, total - warmup);
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename Scalar>
double clip_grad_norm(const std::vector<Tensor<Scalar>*>& params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params) {
    if (p->has_grad()) sq += p->grad().template cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto s = static_cast<Scalar>(max_norm / norm);
    for (auto* p : params) {
      if (p->has_grad()) p->grad() *= s;
    }
  }
  return norm;
}

/// Adam with decoupled weight decay. Decay applies to tensors of rank >= 2
/// (projection weights and conv kernels), never to biases, norms or scales.
template <typename Scalar>
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW(std::vector<Tensor<Scalar>*> params, Options opts) : params_(std::move(params)), opts_(opts) {
    for (auto* p : params_) {
      m_.push_back(Matrix<Scalar>::Zero(p->data().rows(), p->data().cols()));
      v_.push_back(Matrix<Scalar>::Zero(p->data().rows(), p->data().cols()));
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<Scalar>(opts_.beta1), b2 = static_cast<Scalar>(opts_.beta2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<Scalar>& p = *params_[i];
      if (!p.has_grad()) continue;
      const Matrix<Scalar>& g = p.grad();
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseProduct(g);
      if (p.rank() >= 2 && opts_.weight_decay > 0) {
        p.data() *= static_cast<Scalar>(1.0 - lr * opts_.weight_decay);
      }
      const auto step_size = static_cast<Scalar>(lr / c1);
      const auto root_c2 = static_cast<Scalar>(std::sqrt(c2));
      p.data().array() -=
          step_size * m_[i].array() / (v_[i].array().sqrt() / root_c2 + static_cast<Scalar>(opts_.eps));
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->clear_grad();
  }

  Index steps() const { return t_; }
  void set_steps(Index t) { t_ = t; }
  std::vector<Matrix<Scalar>>& first_moments() { return m_; }
  std::vector<Matrix<Scalar>>& second_moments() { return v_; }

 private:
  std::vector<Tensor<Scalar>*> params_;
  Options opts_;
  std::vector<Matrix<Scalar>> m_, v_;
  Index t_ = 0;
};

}  // namespace mstg
