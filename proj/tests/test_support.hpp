#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "lrnet/tensor.hpp"

namespace lrnet::test {

template <typename Real>
Tensor<Real> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<Real> t(s);
  for (auto& v : t.data()) v = static_cast<Real>(d(rng));
  return t;
}

/// Central differences of a scalar function of `x`, one coordinate at a time.
inline Tensor<double> numeric_gradient(const std::function<double()>& f, Tensor<double>& x,
                                       double step = 1e-5) {
  Tensor<double> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = f();
    x[i] = saved - step;
    const double down = f();
    x[i] = saved;
    g[i] = (up - down) / (2 * step);
  }
  return g;
}

/// Largest |a-b| / max(|a|,|b|) over entries whose difference exceeds `floor`.
inline double max_rel_error(const Tensor<double>& a, const Tensor<double>& b,
                            double floor = 1e-9) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    if (d <= floor) continue;
    m = std::max(m, d / std::max(std::abs(a[i]), std::abs(b[i])));
  }
  return m;
}

/// sum(x * w): projects a tensor to a scalar so any layer output can be
/// differentiated with a known upstream gradient `w`.
inline double dot(const Tensor<double>& x, const Tensor<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w[i];
  return s;
}

}  // namespace lrnet::test
