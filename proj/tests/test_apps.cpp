#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "enmpc/plants/ev.hpp"
#include "enmpc/plants/evaporation.hpp"
#include "test_util.hpp"

using namespace enmpc;
using namespace enmpc::plants;
using enmpc_test::fd_weighted_hessian;
using enmpc_test::rel_err;
using enmpc_test::Rng;

namespace {

const PlantBundle& evap() {
  static PlantBundle plant = evaporation_plant();
  return plant;
}

const PlantBundle& ev() {
  static PlantBundle plant = ev_plant();
  return plant;
}

}  // namespace

TEST_SUITE("plants") {
  TEST_CASE("evaporation steady state matches the published optimum") {
    const auto& p = evap();
    CHECK(p.ss.x[0] == doctest::Approx(25.0).epsilon(1e-4));
    CHECK(p.ss.x[1] == doctest::Approx(49.743).epsilon(1e-4));
    CHECK(p.ss.u[0] == doctest::Approx(191.713).epsilon(1e-4));
    CHECK(p.ss.u[1] == doctest::Approx(215.888).epsilon(1e-4));
    CHECK(p.ss.kkt <= 1e-10);
  }

  TEST_CASE("evaporation: composition bound strictly active, physical cost positive") {
    const auto& p = evap();
    CHECK(p.ss.mu[0] > 1e-8);             // X2 >= 25 carries a multiplier
    CHECK(p.convex.cert.eta == 1);        // so the active-set path is exercised
    CHECK(p.ss.cost_offset > 0.0);        // flow cost is a positive meter
    CHECK(std::find(p.lin.active_path.begin(), p.lin.active_path.end(), 0) !=
          p.lin.active_path.end());
  }

  TEST_CASE("evaporation NLP dimensions") {
    const auto& p = evap();
    CHECK(p.ocp.n_w() == 200 * 4 + 2);
    TranscribedNlp nlp(p.ocp, p.ss.x);
    CHECK(nlp.n_w() == 802);
  }

  TEST_CASE("evaporation steady Hessian vs finite differences of the SOP gradient") {
    const auto& p = evap();
    // oracle: central differences of grad l - (I - J_f)' lam - J_h' mu
    const int nxu = 4;
    auto lag_grad = [&](const Vec& v) -> Vec {
      Vec x = v.head(2), u = v.tail(2);
      Vec xu(4);
      xu << x, u;
      Mat Jl = p.sop.stage_cost.jacobian(xu);
      Mat Jf = p.sop.dynamics.map.jacobian(xu);
      Mat Jh = p.sop.path_h.jacobian(xu);
      Mat Je(2, 4);
      Je << Mat::Identity(2, 2) - Jf.leftCols(2), -Jf.rightCols(2);
      return Jl.row(0).transpose() - Je.transpose() * p.ss.lambda - Jh.transpose() * p.ss.mu;
    };
    Vec v0(nxu);
    v0 << p.ss.x, p.ss.u;
    Mat Hfd = enmpc_test::fd_jacobian(lag_grad, v0, 1e-5);
    CHECK(rel_err(p.H, 0.5 * (Hfd + Hfd.transpose())) < 1e-5);
  }

  TEST_CASE("evaporation exact steady Hessian is indefinite but reduced-equal to M") {
    const auto& p = evap();
    Eigen::SelfAdjointEigenSolver<Mat> es(p.H);
    CHECK(es.eigenvalues().minCoeff() < 0.0);  // the convexification is not vacuous
    Eigen::SelfAdjointEigenSolver<Mat> em(p.convex.cert.M);
    CHECK(em.eigenvalues().minCoeff() >= 1e-8);
    auto chk = reduced_hessian_check(p.lin, p.convex.M, p.convex.Mf, p.H, p.Hf, 20);
    CHECK(chk.rel_discrepancy <= 1e-8);
    CHECK(chk.range_residual <= 1e-8);
  }

  TEST_CASE("evaporation certificate re-verifies") {
    const auto& p = evap();
    CertificateMargins m = verify_certificate(p.convex.cert);
    CHECK(m.ok());
    CHECK(m.stage_min >= -1e-6);
    CHECK(m.stage_max >= -1e-6);
    CHECK(m.term_min >= -1e-6);
    CHECK(m.term_max >= -1e-6);
  }

  TEST_CASE("ev parameters and motor-speed arithmetic") {
    EvParams par;
    CHECK(par.L == 4.8);
    CHECK(par.m == 1700.0);
    CHECK(par.r == 0.35);
    CHECK(par.Gr == 7.94);
    CHECK(par.Cd == 0.45);
    CHECK(par.Cr == 0.015);
    CHECK(ev_motor_speed(par, 13.889) == doctest::Approx(7.94 * 13.889 / 0.35).epsilon(1e-12));
    CHECK(ev_motor_speed(par, 13.889) == doctest::Approx(315.06).epsilon(1e-3));
  }

  TEST_CASE("ev efficiency identity") {
    // eta(T,w) (wT + P_loss) = wT for random positive operating points
    EvParams par;
    GraphBuilder gb;
    auto in = gb.inputs("z", 2);  // (T, w)
    Sym T = in[0], w = in[1];
    Sym mech = w * T;
    Sym loss = par.k_wt * mech + par.k_ww * sq(w) + par.k_tt * sq(T);
    Sym eta = mech / (mech + loss);
    Function f(gb, {eta * (mech + loss), mech});
    Rng rng(5);
    for (int i = 0; i < 25; ++i) {
      Vec z(2);
      z << rng.uniform(1.0, 280.0), rng.uniform(1.0, 1000.0);
      Vec out = f.eval(z);
      CHECK(std::abs(out[0] - out[1]) <= 1e-12 * std::max(1.0, std::abs(out[1])));
    }
  }

  TEST_CASE("ev steady cruise") {
    const auto& p = ev();
    const double vr = 50.0 / 3.6;
    CHECK(std::abs(p.ss.x[2] - vr) <= 0.01 * vr);  // within 1% of 13.889 m/s
    CHECK(std::abs(p.ss.x[3]) < 1e-9);             // straight driving
    CHECK(std::abs(p.ss.x[4]) < 1e-9);
    CHECK(p.ss.u[1] == doctest::Approx(0.0).epsilon(1e-9));  // no braking
    // torque balances drag at the cruise speed
    EvParams par;
    double drag = par.Cd * p.ss.x[2] * p.ss.x[2] + par.m * par.grav * par.Cr;
    CHECK(p.ss.u[0] == doctest::Approx(drag * par.r / par.Gr).epsilon(1e-8));
    CHECK(p.ocp.n_w() == 100 * 8 + 5);
  }

  TEST_CASE("ev dynamics: steady cruise advances position only") {
    const auto& p = ev();
    Vec xn = p.ocp.dynamics.step(p.ss.x, p.ss.u);
    CHECK(xn[0] == doctest::Approx(p.ss.x[0] + p.ss.x[2] * 0.1).epsilon(1e-12));
    CHECK((xn.tail(4) - p.ss.x.tail(4)).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("ev dynamics sensitivities vs finite differences") {
    const auto& p = ev();
    Vec xn;
    Mat A, B;
    p.ocp.dynamics.step_with_sensitivities(p.ss.x, p.ss.u, xn, A, B);
    auto fx = [&](const Vec& v) { return p.ocp.dynamics.step(v, p.ss.u); };
    auto fu = [&](const Vec& v) { return p.ocp.dynamics.step(p.ss.x, v); };
    CHECK(rel_err(A, enmpc_test::fd_jacobian(fx, p.ss.x)) <= 1e-6);
    CHECK(rel_err(B, enmpc_test::fd_jacobian(fu, p.ss.u)) <= 1e-6);
  }

  TEST_CASE("ev torque/power constraint consistency") {
    const auto& p = ev();
    EvParams par;
    Rng rng(17);
    Vec in(5 + 3 + 1);
    for (int i = 0; i < 200; ++i) {
      double v = rng.uniform(0.0, 40.0);
      double T = rng.uniform(0.0, 280.0);
      in << 0.0, 0.0, v, 0.0, 0.0, T, 0.0, 0.0, 0.0;
      Vec h = p.ocp.path_h.eval(in);
      double w = ev_motor_speed(par, v);
      if (h[2] >= 0.0 && w > 0.0) CHECK(T * w <= par.P_max + 1e-9);
      if (w > 0.0 && T <= par.P_max / w) CHECK(h[2] >= -1e-12);
    }
  }

  TEST_CASE("ev convexification runs on the reduced coordinates") {
    const auto& p = ev();
    CHECK(p.convex.cert.reduced_states == std::vector<int>{1, 2, 3, 4});
    CHECK(verify_certificate(p.convex.cert).ok());
    // the embedded blocks carry zero rows on p_x
    CHECK(p.convex.M.row(0).cwiseAbs().maxCoeff() == 0.0);
    CHECK(p.convex.Mf.row(0).cwiseAbs().maxCoeff() == 0.0);
    auto chk = reduced_hessian_check(p.lin, p.convex.M, p.convex.Mf, p.H, p.Hf, 20);
    CHECK(chk.rel_discrepancy <= 1e-8);
  }

  TEST_CASE("ev terminal cost satisfies the closed-loop LQ identity") {
    // [I; -K]' (H(P) + M)[I; -K] = 0 at the Riccati gain of the M-weighted
    // LQ problem; checked on the reduced coordinates
    const auto& p = ev();
    const auto& c = p.convex.cert;
    const int nz = static_cast<int>(c.A.rows());
    const int nu = static_cast<int>(c.B.cols());
    Mat Q = c.M.topLeftCorner(nz, nz);
    Mat S = c.M.topRightCorner(nz, nu);
    Mat R = c.M.bottomRightCorner(nu, nu);
    LqrSolution lqr = lqr_terminal(c.A, c.B, Q, R, S);
    Mat IK(nz + nu, nz);
    IK << Mat::Identity(nz, nz), -lqr.K;
    Mat lhs = IK.transpose() * (rotation_operator(lqr.P, c.A, c.B) + c.M) * IK;
    Eigen::SelfAdjointEigenSolver<Mat> es(lhs);
    CHECK(es.eigenvalues().minCoeff() >= -1e-8 * (1.0 + lqr.P.norm()));
    CHECK(lhs.cwiseAbs().maxCoeff() <= 1e-7 * (1.0 + lqr.P.norm()));
  }

  TEST_CASE("plant jacobians vs finite differences at random points") {
    const auto& p = evap();
    Rng rng(88);
    Vec base(4);
    base << p.ss.x, p.ss.u;
    for (int trial = 0; trial < 20; ++trial) {
      Vec pt = base;
      for (int i = 0; i < 4; ++i) pt[i] *= 1.0 + rng.uniform(-0.05, 0.05);
      Mat J = p.sop.dynamics.map.jacobian(pt);
      Mat Jfd = enmpc_test::fd_jacobian(
          [&](const Vec& v) { return p.sop.dynamics.map.eval(v); }, pt);
      CHECK(rel_err(J, Jfd) <= 1e-5);
      Mat Jc = p.sop.stage_cost.jacobian(pt);
      Mat Jcfd =
          enmpc_test::fd_jacobian([&](const Vec& v) { return p.sop.stage_cost.eval(v); }, pt);
      CHECK(rel_err(Jc, Jcfd) <= 1e-5);
    }
  }

  TEST_CASE("evaporation weighted dynamics hessian vs finite differences") {
    const auto& p = evap();
    Vec ws(4);
    ws << p.ss.x, p.ss.u;
    Mat H = p.sop.dynamics.map.weighted_hessian(ws, p.ss.lambda);
    Mat Hfd = fd_weighted_hessian(p.sop.dynamics.map, ws, p.ss.lambda, 1e-5);
    CHECK(rel_err(H, 0.5 * (Hfd + Hfd.transpose())) <= 1e-5);
  }

  TEST_CASE("bundles are reproducible") {
    PlantBundle a = evaporation_plant();
    const auto& b = evap();
    CHECK((a.ss.x - b.ss.x).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.ss.u - b.ss.u).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.convex.M - b.convex.M).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.convex.cert.alpha == b.convex.cert.alpha);
  }
}
