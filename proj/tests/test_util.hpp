#pragma once

#include "hmr/rng.hpp"
#include "hmr/tensor.hpp"

#include <cmath>

namespace hmr::test {

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

inline hmr::Tensor random_tensor(hmr::Shape shape, hmr::Rng& rng, double lo = -1.0, double hi = 1.0,
                                 bool requires_grad = false) {
  hmr::Tensor t(shape, requires_grad);
  for (std::int64_t i = 0; i < t.size(); ++i) t.mut(i) = rng.uniform(lo, hi);
  return t;
}

/// Random vector on the probability simplex.
inline hmr::Tensor random_simplex(int n, hmr::Rng& rng) {
  hmr::Tensor t({n});
  double s = 0;
  for (int i = 0; i < n; ++i) {
    t.mut(i) = -std::log(1.0 - rng.uniform() + 1e-12);
    s += t.at(i);
  }
  for (int i = 0; i < n; ++i) t.mut(i) /= s;
  return t;
}

/// Max relative error between analytic grad of f at x and central differences.
inline double max_grad_rel_err(const std::function<hmr::Tensor(hmr::Tape&, const hmr::Tensor&)>& f,
                               const hmr::Tensor& x_in, double h = 1e-5) {
  hmr::Tensor x(x_in.shape(), x_in.data(), true);
  hmr::Tape tape;
  hmr::Tensor loss = f(tape, x);
  tape.backward(loss);
  hmr::Tensor fd = hmr::finite_difference_oracle(
      [&](const hmr::Tensor& xv) {
        hmr::Tape t2(false);
        return f(t2, xv).value();
      },
      x, h);
  double worst = 0;
  for (std::int64_t i = 0; i < x.size(); ++i) worst = std::max(worst, rel_err(x.grad()[i], fd.at(i)));
  return worst;
}

}  // namespace hmr::test
