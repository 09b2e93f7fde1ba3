// Shared helpers for the enmpc test suites: finite-difference oracles and a
// deterministic RNG wrapper.

#ifndef ENMPC_TESTS_TEST_UTIL_HPP_
#define ENMPC_TESTS_TEST_UTIL_HPP_

#include <random>

#include "enmpc/expr.hpp"

namespace enmpc_test {

using enmpc::Mat;
using enmpc::Vec;

/// Central-difference Jacobian, O(h^2); the independent oracle for all
/// derivative checks.
template <typename F>
Mat fd_jacobian(F&& f, const Vec& x, double h = 1e-6) {
  Vec f0 = f(x);
  Mat J(f0.size(), x.size());
  for (int j = 0; j < x.size(); ++j) {
    Vec xp = x, xm = x;
    const double hj = h * std::max(1.0, std::abs(x[j]));
    xp[j] += hj;
    xm[j] -= hj;
    J.col(j) = (f(xp) - f(xm)) / (2.0 * hj);
  }
  return J;
}

/// Central differences of the weighted gradient: oracle for weighted
/// Hessians.
inline Mat fd_weighted_hessian(const enmpc::Function& f, const Vec& x, const Vec& w,
                               double h = 1e-6) {
  auto grad = [&](const Vec& p) -> Vec {
    Mat J = f.jacobian(p);
    return J.transpose() * w;
  };
  return fd_jacobian(grad, x, h);
}

inline double rel_err(const Mat& got, const Mat& want) {
  double scale = std::max(1.0, want.cwiseAbs().maxCoeff());
  return (got - want).cwiseAbs().maxCoeff() / scale;
}

struct Rng {
  explicit Rng(unsigned seed) : gen(seed) {}
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen);
  }
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen); }
  Vec vec(int n, double lo, double hi) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v[i] = uniform(lo, hi);
    return v;
  }
  Mat mat(int r, int c, double lo, double hi) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) m(i, j) = uniform(lo, hi);
    return m;
  }
  std::mt19937 gen;
};

}  // namespace enmpc_test

#endif  // ENMPC_TESTS_TEST_UTIL_HPP_
