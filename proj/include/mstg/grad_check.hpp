#pragma once

#include <algorithm>
#include <cmath>

#include "mstg/tensor.hpp"

namespace mstg {

/// Compares the tape gradient of a scalar function against central differences.
///
/// `f(tape, x)` must return a scalar Var. Returns the max over entries of
/// |analytic - numeric| / max(1, |analytic|). Double precision only.
template <typename F>
double grad_check(F&& f, const Tensor<double>& x, double h = 1e-5) {
  Tensor<double> probe = x;
  probe.set_requires_grad(true);
  probe.clear_grad();
  {
    Tape<double> tape;
    Var<double> loss = f(tape, tape.leaf(probe));
    tape.backward(loss);
  }
  const Matrix<double> analytic =
      probe.has_grad() ? probe.grad() : Matrix<double>::Zero(x.data().rows(), x.data().cols());

  auto evaluate = [&](const Tensor<double>& at) {
    Tensor<double> copy = at;
    copy.set_requires_grad(false);
    Tape<double> tape(false);
    return f(tape, tape.leaf(copy)).item();
  };

  double worst = 0.0;
  Tensor<double> shifted = x;
  for (Index i = 0; i < x.numel(); ++i) {
    const double orig = x.data().data()[i];
    shifted.data().data()[i] = orig + h;
    const double up = evaluate(shifted);
    shifted.data().data()[i] = orig - h;
    const double down = evaluate(shifted);
    shifted.data().data()[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic.data()[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace mstg
