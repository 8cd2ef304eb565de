#pragma once

// Central finite differences, used as the independent oracle for gradient tests.

#include "cem/diff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace cem::testing {

using diff::Index;
using diff::Tensor;

inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& at,
                               double h = 1e-5) {
  Tensor g(at.rows(), at.cols());
  Tensor x = at;
  for (Index i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||, floor)
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-12) {
  const double diff = (a.mat() - b.mat()).norm();
  const double scale = std::max({a.mat().norm(), b.mat().norm(), floor});
  return diff / scale;
}

inline Tensor random_tensor(Index rows, Index cols, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(rows, cols);
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

}  // namespace cem::testing
