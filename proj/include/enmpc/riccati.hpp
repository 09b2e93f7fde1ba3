// This file is part of enmpc, a C++ library for economic nonlinear model
// predictive control with SQP/RTI solvers and offline Hessian convexification.
//
// Licensed under the MIT License <http://opensource.org/licenses/MIT>.

#ifndef ENMPC_RICCATI_HPP_
#define ENMPC_RICCATI_HPP_

#include <Eigen/Dense>

#include <stdexcept>

#include "enmpc/expr.hpp"

namespace enmpc {

struct LqrSolution {
  Mat P;  // cost-to-go
  Mat K;  // u = -K x
  double residual{0.0};
  int iterations{0};
};

/// Discrete-time LQR cost-to-go with cross term:
///   P = Q + A'PA - (S + A'PB)(R + B'PB)^{-1}(S + A'PB)'
/// solved by the Riccati recursion to a fixed point. Requires R > 0 and a
/// stabilizable pair; divergence is reported as an error.
inline LqrSolution lqr_terminal(const Mat& A, const Mat& B, const Mat& Q, const Mat& R,
                                const Mat& S_cross = Mat(), double tol = 1e-13,
                                int max_iter = 200000) {
  const int nx = static_cast<int>(A.rows());
  const int nu = static_cast<int>(B.cols());
  Mat S = S_cross.size() ? S_cross : Mat::Zero(nx, nu);

  LqrSolution sol;
  sol.P = Q;
  Mat K(nu, nx);
  for (int it = 0; it < max_iter; ++it) {
    Mat BtPB = R + B.transpose() * sol.P * B;
    Eigen::LLT<Mat> llt(BtPB);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("lqr_terminal: R + B'PB not positive definite");
    Mat G = (S + A.transpose() * sol.P * B).transpose();  // nu x nx
    K = llt.solve(G);
    Mat Pn = Q + A.transpose() * sol.P * A - G.transpose() * K;
    Pn = 0.5 * (Pn + Pn.transpose()).eval();
    double delta = (Pn - sol.P).cwiseAbs().maxCoeff();
    sol.P = Pn;
    sol.iterations = it + 1;
    if (sol.P.cwiseAbs().maxCoeff() > 1e14)
      throw std::runtime_error("lqr_terminal: Riccati recursion diverged (pair not stabilizable)");
    if (delta <= tol * (1.0 + sol.P.cwiseAbs().maxCoeff())) break;
    if (it + 1 == max_iter)
      throw std::runtime_error("lqr_terminal: Riccati recursion did not settle");
  }
  sol.K = K;
  {
    Mat BtPB = R + B.transpose() * sol.P * B;
    Mat G = (S + A.transpose() * sol.P * B).transpose();
    Mat res = Q + A.transpose() * sol.P * A - G.transpose() * BtPB.ldlt().solve(G) - sol.P;
    sol.residual = res.cwiseAbs().maxCoeff();
  }
  if (sol.residual > 1e-10 * (1.0 + sol.P.cwiseAbs().maxCoeff()))
    throw std::runtime_error("lqr_terminal: DARE residual above tolerance");
  return sol;
}

}  // namespace enmpc

#endif  // ENMPC_RICCATI_HPP_
