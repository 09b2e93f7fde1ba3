// This file is part of enmpc, a C++ library for economic nonlinear model
// predictive control with SQP/RTI solvers and offline Hessian convexification.
//
// Licensed under the MIT License <http://opensource.org/licenses/MIT>.

#ifndef ENMPC_SOP_HPP_
#define ENMPC_SOP_HPP_

#include "enmpc/integrator.hpp"
#include "enmpc/sqp.hpp"

namespace enmpc {

/// Steady-state optimization problem
///   min l(x,u)  s.t.  x - f(x,u) = 0,  h(x,u) >= 0,
/// posed on the discrete map. Cyclic states (translation-invariant
/// coordinates like a position along the road) are excluded from the
/// stationarity rows and pinned at their guess value; their multipliers
/// are identically zero.
struct SopProblem {
  DiscreteDynamics dynamics;
  Function stage_cost;  // (x,u[,p]) -> 1
  Function path_h;      // (x,u[,p]) -> mh
  int np{0};
  Vec p_steady;                 // parameter values defining the steady problem
  std::vector<int> cyclic;      // state indices with no stationarity row
  std::vector<char> h_enabled;  // per-row participation (empty = all)
};

struct SteadyState {
  Vec x, u;
  Vec lambda;          // nx, zero on cyclic rows
  Vec mu;              // mh, zero on disabled rows
  double cost_offset;  // l(x_s, u_s), the shift that zeroes the steady cost
  double kkt{0.0};
  int iterations{0};
};

inline SteadyState solve_sop(const SopProblem& sop, const Vec& x_guess, const Vec& u_guess,
                             double tol = 1e-11, int max_iter = 200) {
  const int nx = sop.dynamics.nx;
  const int nu = sop.dynamics.nu;
  const int mh = sop.path_h.n_out();
  std::vector<char> enabled = sop.h_enabled;
  if (enabled.empty()) enabled.assign(mh, 1);

  auto is_cyclic = [&](int i) {
    return std::find(sop.cyclic.begin(), sop.cyclic.end(), i) != sop.cyclic.end();
  };

  DenseNlp nlp;
  std::vector<int> eq_state_row;  // state index per equality row (-1 = pin row)
  {
    GraphBuilder gb;
    std::vector<Sym> v = gb.inputs("v", nx + nu);
    std::vector<Sym> xu(v.begin(), v.end());
    std::vector<Sym> in = xu;
    for (int i = 0; i < sop.np; ++i) in.push_back(gb.constant(sop.p_steady[i]));

    Sym cost = sop.stage_cost.inline_into(gb, in)[0];
    nlp.cost = Function(gb, {cost});

    std::vector<Sym> fx = sop.dynamics.map.inline_into(gb, xu);
    std::vector<Sym> eq;
    for (int i = 0; i < nx; ++i) {
      if (is_cyclic(i)) continue;
      eq.push_back(v[i] - fx[i]);
      eq_state_row.push_back(i);
    }
    for (int i : sop.cyclic) {
      eq.push_back(v[i] - gb.constant(x_guess[i]));
      eq_state_row.push_back(-1);
    }
    nlp.eq = Function(gb, eq);

    std::vector<Sym> hv = sop.path_h.inline_into(gb, in);
    std::vector<Sym> ineq;
    for (int i = 0; i < mh; ++i) {
      if (enabled[i]) ineq.push_back(hv[i]);
    }
    nlp.ineq = Function(gb, ineq);
  }

  Vec v0(nx + nu);
  v0 << x_guess, u_guess;
  DenseNlpResult r = solve_dense_nlp(nlp, v0, tol, max_iter);
  if (!r.converged) {
    throw std::runtime_error("solve_sop: no convergence within iteration cap, last KKT residual " +
                             std::to_string(r.kkt));
  }

  SteadyState ss;
  ss.x = r.v.head(nx);
  ss.u = r.v.tail(nu);
  ss.lambda = Vec::Zero(nx);
  for (std::size_t j = 0; j < eq_state_row.size(); ++j) {
    if (eq_state_row[j] >= 0) ss.lambda[eq_state_row[j]] = r.lam[static_cast<int>(j)];
  }
  ss.mu = Vec::Zero(mh);
  int at = 0;
  for (int i = 0; i < mh; ++i) {
    if (enabled[i]) ss.mu[i] = r.mu[at++];
  }
  {
    Vec in(nx + nu + sop.np);
    in << ss.x, ss.u, sop.p_steady;
    ss.cost_offset = sop.stage_cost.eval(in)[0];
  }
  ss.kkt = r.kkt;
  ss.iterations = r.iterations;

  // steady-state residual on the non-cyclic rows
  Vec fx = sop.dynamics.step(ss.x, ss.u);
  for (int i = 0; i < nx; ++i) {
    if (is_cyclic(i)) continue;
    if (std::abs(ss.x[i] - fx[i]) > 1e-10)
      throw std::runtime_error("solve_sop: steady residual above tolerance on state row " +
                               std::to_string(i));
  }
  return ss;
}

/// SOP-Lagrangian Hessian H = hess l + <hess f, lambda_s> - <hess h, mu_s>
/// and terminal-cost Hessian H_f, both at the optimal steady state. These
/// equal the stage blocks of the exact OCP Hessian at the steady-state
/// primal-dual embedding.
inline std::pair<Mat, Mat> steady_hessians(const SopProblem& sop, const Function& terminal_cost,
                                           const SteadyState& ss) {
  const int nx = sop.dynamics.nx;
  const int nu = sop.dynamics.nu;
  const int nxu = nx + nu;
  Vec in(nxu + sop.np);
  in << ss.x, ss.u, sop.p_steady;
  Vec xu = in.head(nxu);

  Mat H = sop.stage_cost.weighted_hessian(in, Vec::Ones(1)).topLeftCorner(nxu, nxu);
  H += sop.dynamics.map.weighted_hessian(xu, ss.lambda);
  if (sop.path_h.n_out() > 0 && ss.mu.size() && ss.mu.cwiseAbs().maxCoeff() > 0.0)
    H -= sop.path_h.weighted_hessian(in, ss.mu).topLeftCorner(nxu, nxu);

  Mat Hf = terminal_cost.weighted_hessian(ss.x, Vec::Ones(1));
  return {H, Hf};
}

}  // namespace enmpc

#endif  // ENMPC_SOP_HPP_
