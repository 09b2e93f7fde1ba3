// This file is part of enmpc, a C++ library for economic nonlinear model
// predictive control with SQP/RTI solvers and offline Hessian convexification.
//
// Licensed under the MIT License <http://opensource.org/licenses/MIT>.

#ifndef ENMPC_PLANTS_BUNDLE_HPP_
#define ENMPC_PLANTS_BUNDLE_HPP_

#include "enmpc/convexify.hpp"
#include "enmpc/nlp.hpp"
#include "enmpc/riccati.hpp"
#include "enmpc/sop.hpp"

namespace enmpc::plants {

struct BundleOptions {
  double rho1{1e-2};
  double rho2{1e-2};
  bool validate{true};
};

/// A benchmark plant ready for the solver stack: the OCP (stage cost
/// shifted to zero at the steady state), the steady state itself, its
/// linearization, exact steady Hessians, and the convexified blocks with
/// their certificate.
struct PlantBundle {
  std::string name;
  OcpSpec ocp;
  Function raw_stage_cost;  // physical cost, the closed-loop meter
  SopProblem sop;
  SteadyState ss;
  SteadyLinearization lin;
  Mat H, Hf;
  ConvexHessian convex;
  Vec x0_default;
  int n_sim_default{60};
  double t_s{1.0};

  Vec w_steady() const {
    Vec w(ocp.nx() + ocp.nu());
    w << ss.x, ss.u;
    return w;
  }

  /// Steady-state primal-dual embedding over a horizon. Plants with cyclic
  /// coordinates embed the cruise trajectory (positions advance under
  /// the steady input); otherwise the constant trajectory is exact.
  NlpIterate steady_iterate(const OcpSpec& spec) const {
    NlpIterate z = NlpIterate::zero(spec);
    const int nxu = spec.nx() + spec.nu();
    if (sop.cyclic.empty()) {
      Vec x = ss.x;
      for (int k = 0; k < spec.N; ++k) {
        z.w.segment(k * nxu, spec.nx()) = x;
        z.w.segment(k * nxu + spec.nx(), spec.nu()) = ss.u;
      }
      z.w.tail(spec.nx()) = x;
    } else {
      Vec x = ss.x;
      for (int k = 0; k < spec.N; ++k) {
        z.w.segment(k * nxu, spec.nx()) = x;
        z.w.segment(k * nxu + spec.nx(), spec.nu()) = ss.u;
        x = spec.dynamics.step(x, ss.u);
      }
      z.w.tail(spec.nx()) = x;
    }
    for (int k = 0; k <= spec.N; ++k) z.lambda.col(k) = ss.lambda;
    for (int k = 0; k < spec.N; ++k) z.mu.col(k) = ss.mu;
    if (spec.mt() > 0) {
      // terminal stationarity: grad V_f - lambda_N - D' nu = 0 at x_s
      Vec gvf = spec.terminal_cost.jacobian(ss.x).row(0).transpose();
      Mat D = spec.terminal_g.jacobian(ss.x);
      z.nu = D.transpose().colPivHouseholderQr().solve(gvf - ss.lambda);
    }
    return z;
  }

  NlpIterate steady_iterate() const { return steady_iterate(ocp); }

  OcpSpec with_horizon(int N) const {
    OcpSpec s = ocp;
    s.N = N;
    return s;
  }

  /// Strictly active path rows replicated over the horizon: the natural
  /// working-set hint for steady-state-initialized solves (it selects the
  /// KKT branch the iterate-identity results are stated for when the
  /// Hessian is indefinite).
  ActiveSetHint steady_active_hint(const OcpSpec& spec) const {
    ActiveSetHint h;
    for (int k = 0; k < spec.N; ++k)
      for (int i : lin.active_path) h.rows.emplace_back(k, i);
    return h;
  }
  ActiveSetHint steady_active_hint() const { return steady_active_hint(ocp); }

  double unshifted_cost(const Vec& x, const Vec& u, const Vec& p = Vec()) const {
    Vec in(ocp.nx() + ocp.nu() + ocp.np);
    if (ocp.np > 0) in << x, u, p;
    else in << x, u;
    return raw_stage_cost.eval(in)[0];
  }
};

/// Construction-time self checks: certificate margins, the Theorem-2
/// reduced-Hessian equality on a short horizon, and (for plants without
/// cyclic coordinates) the steady state as an NLP fixed point. Throws on
/// violation; a bundle must not construct broken.
inline void validate_bundle(const PlantBundle& plant, double kkt_tol = 1e-8,
                            double thm2_tol = 1e-8) {
  CertificateMargins m = verify_certificate(plant.convex.cert);
  if (!m.ok())
    throw std::runtime_error(plant.name + ": convexification certificate failed re-verification");

  auto check =
      reduced_hessian_check(plant.lin, plant.convex.M, plant.convex.Mf, plant.H, plant.Hf, 20);
  if (check.rel_discrepancy > thm2_tol)
    throw std::runtime_error(plant.name + ": reduced-Hessian equality violated: " +
                             std::to_string(check.rel_discrepancy));

  OcpSpec short_ocp = plant.with_horizon(std::min(plant.ocp.N, 20));
  TranscribedNlp nlp(short_ocp, plant.ss.x);
  NlpIterate z = plant.steady_iterate(short_ocp);
  double kkt = nlp.kkt_residual(z).inf_norm;
  if (kkt > kkt_tol)
    throw std::runtime_error(plant.name + ": steady state is not an NLP fixed point: " +
                             std::to_string(kkt));
}

}  // namespace enmpc::plants

#endif  // ENMPC_PLANTS_BUNDLE_HPP_
