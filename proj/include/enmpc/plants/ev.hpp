// This file is part of enmpc, a C++ library for economic nonlinear model
// predictive control with SQP/RTI solvers and offline Hessian convexification.
//
// Licensed under the MIT License <http://opensource.org/licenses/MIT>.

#ifndef ENMPC_PLANTS_EV_HPP_
#define ENMPC_PLANTS_EV_HPP_

#include "enmpc/plants/bundle.hpp"

namespace enmpc::plants {

/// Energy-optimal driving benchmark. States: position (p_x, p_y),
/// longitudinal velocity v, heading theta, steering angle delta; controls:
/// motor torque T, brake force F_b, steering rate u_delta. The stage cost
/// combines normalized electrical power with a velocity-enforcement term
/// and lateral-tracking penalties; p_y reference is a stage parameter.
struct EvParams {
  double L = 4.8;        // wheelbase [m]
  double m = 1700.0;     // mass [kg]
  double r = 0.35;       // wheel radius [m]
  double grav = 9.81;    // gravity [m/s^2]
  double Gr = 7.94;      // gear ratio
  double Cd = 0.45;      // aerodynamic drag [N s^2/m^2]
  double Cr = 0.015;     // rolling resistance
  double T_max = 280.0;  // motor torque bound [Nm]
  double P_max = 80e3;   // motor power bound [W]
  double w_max = 10000.0 * M_PI / 30.0;  // motor speed bound [rad/s]
  double Fb_max = 10e3;  // brake force bound [N]
  double k_wt = 0.0323, k_ww = 0.0183, k_tt = 0.0043;  // loss map coefficients
  double b0 = 1.0, b1 = 1.0, b2 = 1.0, b3 = 1.0;       // tracking weights
  double alpha = 0.5;  // velocity-enforcement weight (see notes)
  double v_ref = 50.0 / 3.6;  // [m/s]

  double t_s = 0.1;  // [s]
  int substeps = 5;
  int N = 100;
  double obstacle_pos = 80.0;    // p_x bound [m]
  double obstacle_until = 6.0;   // [s]
  double ref_step_time = 8.0;    // [s]
};

inline constexpr int kEvObstacleRow = 7;

inline PlantBundle ev_plant(const EvParams& p = {}, const BundleOptions& opts = {}) {
  PlantBundle plant;
  plant.name = "ev";
  const int nx = 5, nu = 3;
  const double ws = p.Gr / p.r;  // motor speed per unit velocity

  Function fc;
  {
    GraphBuilder gb;
    auto x = gb.inputs("x", nx);
    auto u = gb.inputs("u", nu);
    Sym v = x[2], th = x[3], de = x[4];
    Sym T = u[0], Fb = u[1], ud = u[2];
    Sym Fd = p.Cd * sq(v) + p.m * p.grav * p.Cr;
    std::vector<Sym> rhs{
        v * cos(th),
        v * sin(th),
        ((p.Gr / p.r) * T - Fb - Fd) / p.m,
        v * tan(de) / p.L,
        ud,
    };
    fc = Function(gb, rhs);
  }
  DiscreteDynamics dyn = discretize_rk4(fc, p.t_s, p.substeps);

  auto electrical_power = [&](GraphBuilder& gb, Sym v, Sym T) {
    Sym w = ws * v;
    Sym mech = w * T;
    Sym loss = p.k_wt * mech + p.k_ww * sq(w) + p.k_tt * sq(T);
    return mech + loss;
  };

  Function cost;  // physical meter: normalized power + tracking terms
  {
    GraphBuilder gb;
    auto x = gb.inputs("x", nx);
    auto u = gb.inputs("u", nu);
    auto pr = gb.inputs("p", 1);  // p_y reference
    Sym P = electrical_power(gb, x[2], u[0]);
    Sym l = P / p.P_max + p.alpha * sq(x[2] - p.v_ref) + p.b0 * sq(x[1] - pr[0]) +
            p.b1 * sq(x[3]) + p.b2 * sq(x[4]) + p.b3 * sq(u[2]);
    cost = Function(gb, {l});
  }

  Function path;
  {
    GraphBuilder gb;
    auto x = gb.inputs("x", nx);
    auto u = gb.inputs("u", nu);
    auto pr = gb.inputs("p", 1);
    (void)pr;
    Sym v = x[2], T = u[0], Fb = u[1];
    std::vector<Sym> rows{
        T,                                    // T >= 0
        p.T_max - T,                          // T <= T_max
        (p.P_max - (ws * v) * T) / p.P_max,   // w T <= P_max, normalized
        v,                                    // w >= 0
        p.w_max / ws - v,                     // w <= w_max
        Fb,                                   // Fb >= 0
        p.Fb_max - Fb,                        // Fb <= Fb_max
        p.obstacle_pos - x[0],                // obstacle, enabled per sample
    };
    path = Function(gb, rows);
  }

  plant.sop.dynamics = dyn;
  plant.sop.stage_cost = cost;
  plant.sop.path_h = path;
  plant.sop.np = 1;
  plant.sop.p_steady = Vec::Zero(1);
  plant.sop.cyclic = {0};  // p_x: translation-invariant position
  plant.sop.h_enabled.assign(path.n_out(), 1);
  plant.sop.h_enabled[kEvObstacleRow] = 0;

  Vec xg(nx), ug(nu);
  const double drag_ref = p.Cd * p.v_ref * p.v_ref + p.m * p.grav * p.Cr;
  xg << 0.0, 0.0, p.v_ref, 0.0, 0.0;
  ug << drag_ref * p.r / p.Gr, 0.0, 0.0;
  plant.ss = solve_sop(plant.sop, xg, ug);

  if (std::abs(plant.ss.x[2] - p.v_ref) > 0.01 * p.v_ref)
    throw std::runtime_error("ev_plant: steady cruise speed off the reference by more than 1%");
  if (plant.ss.mu[5] <= 1e-8)
    throw std::runtime_error("ev_plant: brake bound not strictly active at cruise");

  plant.raw_stage_cost = cost;
  plant.ocp.N = p.N;
  plant.ocp.dynamics = dyn;
  plant.ocp.np = 1;
  plant.ocp.path_h = path;
  plant.ocp.default_row_mask.assign(path.n_out(), 1);
  plant.ocp.default_row_mask[kEvObstacleRow] = 0;
  {
    GraphBuilder gb;
    auto x = gb.inputs("x", nx);
    auto u = gb.inputs("u", nu);
    auto pr = gb.inputs("p", 1);
    std::vector<Sym> in(x);
    in.insert(in.end(), u.begin(), u.end());
    in.push_back(pr[0]);
    Sym l = cost.inline_into(gb, in)[0] - gb.constant(plant.ss.cost_offset);
    plant.ocp.stage_cost = Function(gb, {l});
  }

  // terminal synthesis: stage-only convexification provides a valid
  // rotation, the Riccati recursion on its blocks gives the rotated
  // cost-to-go, and un-rotating yields the economic LQ cost-to-go. The
  // linear term lambda_s'(x - x_s) makes the cruise embedding an exact
  // KKT point (the steady value-function gradient is the steady dual).
  SteadyLinearization lin0 =
      steady_linearization(plant.sop, enmpc::detail::make_zero_function({{"x", nx}}, 0), {},
                           plant.ss);
  Mat Hsteady, Hf_unused;
  {
    GraphBuilder gb;
    gb.inputs("x", nx);
    Function zero_vf(gb, {gb.constant(0.0)});
    std::tie(Hsteady, Hf_unused) = steady_hessians(plant.sop, zero_vf, plant.ss);
  }
  Mat Hf_econ;
  SdpCertificate presolve_cert;
  {
    ConvexifyOptions pre;
    pre.rho1 = opts.rho1;
    pre.rho2 = opts.rho2;
    pre.include_terminal_pair = false;
    ConvexHessian stage_only =
        solve_convexification(Hsteady, Mat::Zero(nx, nx), lin0, pre, plant.sop.cyclic);
    presolve_cert = stage_only.cert;
    Mat Q = stage_only.M.topLeftCorner(nx, nx);
    Mat S = stage_only.M.topRightCorner(nx, nu);
    Mat R = stage_only.M.bottomRightCorner(nu, nu);
    LqrSolution lqr = lqr_terminal(lin0.A, lin0.B, Q, R, S);
    Mat dP_pre = Mat::Zero(nx, nx);
    const auto& keep = stage_only.cert.reduced_states;
    for (std::size_t i = 0; i < keep.size(); ++i)
      for (std::size_t j = 0; j < keep.size(); ++j)
        dP_pre(keep[i], keep[j]) =
            stage_only.cert.dP(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    Hf_econ = lqr.P + dP_pre / stage_only.cert.alpha;
    Hf_econ = 0.5 * (Hf_econ + Hf_econ.transpose()).eval();
  }
  {
    GraphBuilder gb;
    auto x = gb.inputs("x", nx);
    Sym vf = gb.constant(0.0);
    for (int i = 0; i < nx; ++i) {
      Sym dxi = x[i] - gb.constant(plant.ss.x[i]);
      vf = vf + plant.ss.lambda[i] * dxi;
      for (int j = 0; j < nx; ++j) {
        if (Hf_econ(i, j) != 0.0)
          vf = vf + 0.5 * Hf_econ(i, j) * dxi * (x[j] - gb.constant(plant.ss.x[j]));
      }
    }
    plant.ocp.terminal_cost = Function(gb, {vf});
    plant.ocp.terminal_g = enmpc::detail::make_zero_function({{"x", nx}}, 0);
    plant.ocp.terminal_kinds = {};
  }

  plant.lin = steady_linearization(plant.sop, plant.ocp.terminal_g, plant.ocp.terminal_kinds,
                                   plant.ss);
  std::tie(plant.H, plant.Hf) = steady_hessians(plant.sop, plant.ocp.terminal_cost, plant.ss);

  ConvexifyOptions copts;
  copts.rho1 = opts.rho1;
  copts.rho2 = opts.rho2;
  copts.warm_start = &presolve_cert;
  plant.convex = solve_convexification(plant.H, plant.Hf, plant.lin, copts, plant.sop.cyclic);

  plant.x0_default = plant.ss.x;
  plant.n_sim_default = 160;
  plant.t_s = p.t_s;

  if (opts.validate) validate_bundle(plant);
  return plant;
}

/// Motor speed at a given longitudinal velocity (convenience for tests).
inline double ev_motor_speed(const EvParams& p, double v) { return p.Gr * v / p.r; }

}  // namespace enmpc::plants

#endif  // ENMPC_PLANTS_EV_HPP_
