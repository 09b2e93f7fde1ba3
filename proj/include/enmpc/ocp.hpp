// This file is part of enmpc, a C++ library for economic nonlinear model
// predictive control with SQP/RTI solvers and offline Hessian convexification.
//
// Licensed under the MIT License <http://opensource.org/licenses/MIT>.

#ifndef ENMPC_OCP_HPP_
#define ENMPC_OCP_HPP_

#include "enmpc/integrator.hpp"

#include <optional>

namespace enmpc {

enum class RowKind { Equality, Inequality };

/// Horizon-N optimal control problem over the discrete dynamics:
///
///   min  sum_k l(x_k,u_k,p_k) + V_f(x_N)
///   s.t. x_0 = x0_hat,  x_{k+1} = f(x_k,u_k),
///        h(x_k,u_k,p_k) >= 0,  g_f(x_N) (= or >=) 0.
///
/// Stage cost and path constraints may take a per-stage parameter group p
/// (references, time-varying rows); dynamics are parameter-free.
struct OcpSpec {
  int N{0};
  DiscreteDynamics dynamics;
  Function stage_cost;     // (x,u[,p]) -> 1
  Function path_h;         // (x,u[,p]) -> mh, convention h >= 0
  Function terminal_cost;  // (x) -> 1
  Function terminal_g;     // (x) -> mt
  std::vector<RowKind> terminal_kinds;
  int np{0};
  std::vector<char> default_row_mask;  // empty: all path rows enabled

  int nx() const { return dynamics.nx; }
  int nu() const { return dynamics.nu; }
  int mh() const { return path_h.n_out(); }
  int mt() const { return terminal_g.n_out(); }
  int n_w() const { return N * (nx() + nu()) + nx(); }
};

namespace detail {

inline Function make_zero_function(const std::vector<std::pair<std::string, int>>& groups,
                                   int n_out) {
  GraphBuilder gb;
  for (const auto& [name, dim] : groups) gb.inputs(name, dim);
  std::vector<Sym> outs(n_out, gb.constant(0.0));
  return Function(gb, outs);
}

}  // namespace detail

/// Storage function for cost rotation, shifted so that lambda(x_ref) = 0.
struct StorageFunction {
  Function lambda;  // (x) -> 1
  Vec x_ref;

  static StorageFunction make(const Function& raw, const Vec& x_ref) {
    if (raw.n_out() != 1) throw std::invalid_argument("StorageFunction: scalar output required");
    const int nx = raw.n_in();
    const double offset = raw.eval(x_ref)[0];
    GraphBuilder gb;
    std::vector<Sym> x = gb.inputs("x", nx);
    Sym v = raw.inline_into(gb, x)[0] - gb.constant(offset);
    StorageFunction s;
    s.lambda = Function(gb, {v});
    s.x_ref = x_ref;
    const double at_ref = s.lambda.eval(x_ref)[0];
    if (std::abs(at_ref) > 1e-12)
      throw std::logic_error("StorageFunction: shift failed, lambda(x_ref) = " +
                             std::to_string(at_ref));
    return s;
  }

  static StorageFunction zero(int nx) {
    GraphBuilder gb;
    gb.inputs("x", nx);
    StorageFunction s;
    s.lambda = Function(gb, {gb.constant(0.0)});
    s.x_ref = Vec::Zero(nx);
    return s;
  }
};

/// Rotated problem: stage cost l + lambda(x) - lambda(f(x,u)), terminal
/// V_f + lambda; dynamics and constraints unchanged.
inline OcpSpec rotate(const OcpSpec& ocp, const StorageFunction& storage) {
  OcpSpec out = ocp;

  {
    GraphBuilder gb;
    std::vector<Sym> x = gb.inputs("x", ocp.nx());
    std::vector<Sym> u = gb.inputs("u", ocp.nu());
    std::vector<Sym> p;
    if (ocp.np > 0) p = gb.inputs("p", ocp.np);
    std::vector<Sym> xup = x;
    xup.insert(xup.end(), u.begin(), u.end());
    xup.insert(xup.end(), p.begin(), p.end());
    Sym cost = ocp.stage_cost.inline_into(gb, xup)[0];
    std::vector<Sym> xu = x;
    xu.insert(xu.end(), u.begin(), u.end());
    std::vector<Sym> fx = ocp.dynamics.map.inline_into(gb, xu);
    Sym lam_x = storage.lambda.inline_into(gb, x)[0];
    Sym lam_fx = storage.lambda.inline_into(gb, fx)[0];
    out.stage_cost = Function(gb, {cost + lam_x - lam_fx});
  }
  {
    GraphBuilder gb;
    std::vector<Sym> x = gb.inputs("x", ocp.nx());
    Sym vf = ocp.terminal_cost.inline_into(gb, x)[0];
    Sym lam = storage.lambda.inline_into(gb, x)[0];
    out.terminal_cost = Function(gb, {vf + lam});
  }
  return out;
}

/// Negated storage (used to un-rotate a tracking formulation into an
/// artificial economic one).
inline StorageFunction negate(const StorageFunction& s) {
  GraphBuilder gb;
  std::vector<Sym> x = gb.inputs("x", s.lambda.n_in());
  Sym v = -s.lambda.inline_into(gb, x)[0];
  StorageFunction out;
  out.lambda = Function(gb, {v});
  out.x_ref = s.x_ref;
  return out;
}

}  // namespace enmpc

#endif  // ENMPC_OCP_HPP_
