// This file is part of enmpc, a C++ library for economic nonlinear model
// predictive control with SQP/RTI solvers and offline Hessian convexification.
//
// Licensed under the MIT License <http://opensource.org/licenses/MIT>.

#ifndef ENMPC_PLANTS_EVAPORATION_HPP_
#define ENMPC_PLANTS_EVAPORATION_HPP_

#include "enmpc/plants/bundle.hpp"

namespace enmpc::plants {

/// Forced-circulation evaporator (Newell/Lee benchmark). States: product
/// composition X2 [%] and operating pressure P2 [kPa]; controls: steam
/// pressure P100 [kPa] and cooling-water flow F200 [kg/min]. Parameter set
/// from the standard benchmark description; the published optimal steady
/// state (25, 49.743, 191.713, 215.888) gates the transcription.
struct EvaporationParams {
  double a = 0.5616, b = 0.3126, c = 48.43;  // T2 = a P2 + b X2 + c
  double d = 0.507, e = 55.0;                // T3 = d P2 + e
  double f = 0.1538, g = 90.0;               // T100 = f P100 + g
  double h = 0.16;                           // UA1 = h (F1 + F3)
  double M = 20.0;                           // liquid holdup [kg]
  double C = 4.0;                            // vapor capacitance [kg/kPa]
  double UA2 = 6.84;                         // condenser heat transfer [kW/K]
  double Cp = 0.07;                          // heat capacity [kW/(kg/min)/K]
  double lam = 38.5;                         // latent heat [kW/(kg/min)]
  double lam_s = 36.6;                       // steam latent heat [kW/(kg/min)]
  double F1 = 10.0;                          // feed flow [kg/min]
  double X1 = 5.0;                           // feed composition [%]
  double F3 = 50.0;                          // circulating flow [kg/min]
  double T1 = 40.0;                          // feed temperature [C]
  double T200 = 25.0;                        // cooling water inlet [C]

  double t_s = 1.0;  // sampling time [min]
  int substeps = 5;
  int N = 200;
};

namespace detail {

struct EvapAlgebra {
  Sym F2, F4, F5, F100, Q100, Q200, T2, T3;
};

inline EvapAlgebra evap_algebra(const EvaporationParams& p, Sym X2, Sym P2, Sym P100, Sym F200) {
  EvapAlgebra v;
  v.T2 = p.a * P2 + p.b * X2 + p.c;
  v.T3 = p.d * P2 + p.e;
  Sym T100 = p.f * P100 + p.g;
  Sym UA1 = X2.builder()->constant(p.h * (p.F1 + p.F3));
  v.Q100 = UA1 * (T100 - v.T2);
  v.F4 = (v.Q100 - p.F1 * p.Cp * (v.T2 - p.T1)) / p.lam;
  v.F100 = v.Q100 / p.lam_s;
  v.Q200 = (p.UA2 * (v.T3 - p.T200)) / (1.0 + p.UA2 / (2.0 * p.Cp * F200));
  v.F5 = v.Q200 / p.lam;
  v.F2 = p.F1 - v.F4;
  return v;
}

}  // namespace detail

inline PlantBundle evaporation_plant(const EvaporationParams& p = {},
                                     const BundleOptions& opts = {}) {
  PlantBundle plant;
  plant.name = "evaporation";
  const int nx = 2, nu = 2;

  Function fc;
  {
    GraphBuilder gb;
    auto x = gb.inputs("x", nx);
    auto u = gb.inputs("u", nu);
    auto alg = detail::evap_algebra(p, x[0], x[1], u[0], u[1]);
    Sym dX2 = (p.F1 * p.X1 - alg.F2 * x[0]) / p.M;
    Sym dP2 = (alg.F4 - alg.F5) / p.C;
    fc = Function(gb, {dX2, dP2});
  }
  DiscreteDynamics dyn = discretize_rk4(fc, p.t_s, p.substeps);

  Function cost;  // economic flow cost, unshifted
  {
    GraphBuilder gb;
    auto x = gb.inputs("x", nx);
    auto u = gb.inputs("u", nu);
    auto alg = detail::evap_algebra(p, x[0], x[1], u[0], u[1]);
    Sym l = 10.09 * (alg.F2 + p.F3) + 600.0 * alg.F100 + 0.6 * u[1];
    cost = Function(gb, {l});
  }

  Function path;  // h >= 0 convention
  {
    GraphBuilder gb;
    auto x = gb.inputs("x", nx);
    auto u = gb.inputs("u", nu);
    std::vector<Sym> rows{x[0] - 25.0, x[1] - 40.0, 80.0 - x[1], 400.0 - u[0], 400.0 - u[1]};
    path = Function(gb, rows);
  }

  plant.sop.dynamics = dyn;
  plant.sop.stage_cost = cost;
  plant.sop.path_h = path;
  plant.sop.np = 0;
  plant.sop.p_steady.resize(0);

  Vec xg(2), ug(2);
  xg << 25.0, 50.0;
  ug << 200.0, 200.0;
  plant.ss = solve_sop(plant.sop, xg, ug);

  {
    // published steady state validates the embedded parameter set
    Vec want(4);
    want << 25.0, 49.743, 191.713, 215.888;
    Vec got(4);
    got << plant.ss.x, plant.ss.u;
    if ((got - want).cwiseAbs().maxCoeff() > 1e-3)
      throw std::runtime_error(
          "evaporation_plant: steady state mismatch, parameter set is wrong");
  }

  plant.raw_stage_cost = cost;
  plant.ocp.N = p.N;
  plant.ocp.dynamics = dyn;
  plant.ocp.np = 0;
  plant.ocp.path_h = path;
  {
    // shifted stage cost: zero at the optimal steady state
    GraphBuilder gb;
    auto x = gb.inputs("x", nx);
    auto u = gb.inputs("u", nu);
    std::vector<Sym> xu(x);
    xu.insert(xu.end(), u.begin(), u.end());
    Sym l = cost.inline_into(gb, xu)[0] - gb.constant(plant.ss.cost_offset);
    plant.ocp.stage_cost = Function(gb, {l});
  }
  {
    GraphBuilder gb;
    auto x = gb.inputs("x", nx);
    plant.ocp.terminal_cost = Function(gb, {gb.constant(0.0)});
    std::vector<Sym> rows{x[0] - gb.constant(plant.ss.x[0]), x[1] - gb.constant(plant.ss.x[1])};
    plant.ocp.terminal_g = Function(gb, rows);
    plant.ocp.terminal_kinds = {RowKind::Equality, RowKind::Equality};
  }

  plant.lin = steady_linearization(plant.sop, plant.ocp.terminal_g, plant.ocp.terminal_kinds,
                                   plant.ss);
  std::tie(plant.H, plant.Hf) = steady_hessians(plant.sop, plant.ocp.terminal_cost, plant.ss);

  ConvexifyOptions copts;
  copts.rho1 = opts.rho1;
  copts.rho2 = opts.rho2;
  plant.convex = solve_convexification(plant.H, plant.Hf, plant.lin, copts);

  plant.x0_default = plant.ss.x;
  plant.n_sim_default = 60;
  plant.t_s = p.t_s;

  if (opts.validate) validate_bundle(plant);
  return plant;
}

}  // namespace enmpc::plants

#endif  // ENMPC_PLANTS_EVAPORATION_HPP_
