// This file is part of enmpc, a C++ library for economic nonlinear model
// predictive control with SQP/RTI solvers and offline Hessian convexification.
//
// Licensed under the MIT License <http://opensource.org/licenses/MIT>.

#ifndef ENMPC_INTEGRATOR_HPP_
#define ENMPC_INTEGRATOR_HPP_

#include "enmpc/expr.hpp"

namespace enmpc {

/// State-transition map x+ = f(x,u) obtained from a continuous-time model.
/// The map is itself an expression DAG (the integrator is unrolled
/// symbolically), so first and second derivatives of the discrete dynamics
/// are exact.
struct DiscreteDynamics {
  Function map;  // (x,u) -> x_next
  int nx{0};
  int nu{0};
  double dt{0.0};
  int substeps{1};

  Vec step(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& u) const {
    Vec xu(nx + nu);
    xu << x, u;
    return map.eval(xu);
  }

  /// One discrete step together with A = d x_next/d x, B = d x_next/d u.
  void step_with_sensitivities(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& u,
                               Vec& x_next, Mat& A, Mat& B, EvalWorkspace& ws) const {
    Vec xu(nx + nu);
    xu << x, u;
    Mat J;
    x_next.resize(nx);
    map.eval_with_jacobian(xu, x_next, J, ws);
    A = J.leftCols(nx);
    B = J.rightCols(nu);
  }

  void step_with_sensitivities(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& u,
                               Vec& x_next, Mat& A, Mat& B) const {
    EvalWorkspace ws;
    step_with_sensitivities(x, u, x_next, A, B, ws);
  }
};

/// Discretizes x_dot = f_c(x,u) with `substeps` classical RK4 steps spanning
/// exactly dt. f_c must take input groups (x, u) and return n_x outputs.
inline DiscreteDynamics discretize_rk4(const Function& fc, double dt, int substeps) {
  if (dt <= 0.0) throw std::invalid_argument("discretize_rk4: dt must be positive");
  if (substeps < 1) throw std::invalid_argument("discretize_rk4: substeps must be >= 1");
  const auto& groups = fc.input_groups();
  if (groups.size() != 2) throw std::invalid_argument("discretize_rk4: f_c must take (x,u)");
  const int nx = groups[0].second;
  const int nu = groups[1].second;
  if (fc.n_out() != nx) throw std::invalid_argument("discretize_rk4: f_c must map to n_x outputs");

  GraphBuilder gb;
  std::vector<Sym> x = gb.inputs("x", nx);
  std::vector<Sym> u = gb.inputs("u", nu);
  const double h = dt / substeps;

  auto rhs = [&](const std::vector<Sym>& state) {
    std::vector<Sym> args = state;
    args.insert(args.end(), u.begin(), u.end());
    return fc.inline_into(gb, args);
  };
  auto axpy = [&](const std::vector<Sym>& base, double a, const std::vector<Sym>& k) {
    std::vector<Sym> out(nx);
    for (int i = 0; i < nx; ++i) out[i] = base[i] + a * k[i];
    return out;
  };

  std::vector<Sym> state = x;
  for (int s = 0; s < substeps; ++s) {
    std::vector<Sym> k1 = rhs(state);
    std::vector<Sym> k2 = rhs(axpy(state, 0.5 * h, k1));
    std::vector<Sym> k3 = rhs(axpy(state, 0.5 * h, k2));
    std::vector<Sym> k4 = rhs(axpy(state, h, k3));
    for (int i = 0; i < nx; ++i) {
      state[i] = state[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
  }

  DiscreteDynamics dyn;
  dyn.map = Function(gb, state);
  dyn.nx = nx;
  dyn.nu = nu;
  dyn.dt = dt;
  dyn.substeps = substeps;
  return dyn;
}

}  // namespace enmpc

#endif  // ENMPC_INTEGRATOR_HPP_
