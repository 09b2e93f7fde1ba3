#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "enmpc/nlp.hpp"
#include "enmpc/plants/evaporation.hpp"
#include "test_util.hpp"

using namespace enmpc;
using enmpc_test::Rng;

namespace {

// small linear-quadratic OCP: x+ = 0.5 x + u, cost x^2 + u^2, no inequalities
OcpSpec lq_ocp(int N) {
  OcpSpec ocp;
  {
    GraphBuilder gb;
    auto x = gb.inputs("x", 1);
    auto u = gb.inputs("u", 1);
    Function fc(gb, {std::vector<Sym>{0.5 * x[0] + u[0]}});
    // build the discrete map directly (already discrete)
    ocp.dynamics.map = fc;
    ocp.dynamics.nx = 1;
    ocp.dynamics.nu = 1;
    ocp.dynamics.dt = 1.0;
  }
  {
    GraphBuilder gb;
    auto x = gb.inputs("x", 1);
    auto u = gb.inputs("u", 1);
    ocp.stage_cost = Function(gb, {sq(x[0]) + sq(u[0])});
    ocp.path_h = Function(gb, std::vector<Sym>{});
  }
  {
    GraphBuilder gb;
    auto x = gb.inputs("x", 1);
    (void)x;
    ocp.terminal_cost = Function(gb, {gb.constant(0.0)});
    ocp.terminal_g = Function(gb, std::vector<Sym>{});
  }
  ocp.N = N;
  return ocp;
}

const plants::PlantBundle& evap() {
  static plants::PlantBundle plant = plants::evaporation_plant();
  return plant;
}

}  // namespace

TEST_SUITE("transcription") {
  TEST_CASE("single-stage structure counts") {
    OcpSpec ocp = lq_ocp(1);
    TranscribedNlp nlp(ocp, Vec::Zero(1));
    CHECK(nlp.n_w() == 3);  // (x0, u0, x1)
    NlpIterate z = NlpIterate::zero(ocp);
    KktResidual r = nlp.kkt_residual(z);
    CHECK(r.feasibility.size() == 2);  // initial + one dynamics row
  }

  TEST_CASE("analytic minimizer of an unconstrained quadratic has zero residual") {
    OcpSpec ocp = lq_ocp(3);
    TranscribedNlp nlp(ocp, Vec::Zero(1));
    NlpIterate z = NlpIterate::zero(ocp);  // origin is the global minimum
    KktResidual r = nlp.kkt_residual(z);
    CHECK(r.inf_norm == 0.0);
  }

  TEST_CASE("steady-state embedding is a fixed point of the evaporation NLP") {
    const auto& p = evap();
    OcpSpec short_ocp = p.with_horizon(20);
    TranscribedNlp nlp(short_ocp, p.ss.x);
    NlpIterate z = p.steady_iterate(short_ocp);
    CHECK(nlp.kkt_residual(z).inf_norm <= 1e-8);
  }

  TEST_CASE("rotation with zero storage evaluates bitwise equal") {
    const auto& p = evap();
    OcpSpec rot = rotate(p.ocp, StorageFunction::zero(2));
    Rng rng(3);
    for (int i = 0; i < 10; ++i) {
      Vec xu(4);
      xu << p.ss.x[0] * (1 + rng.uniform(-0.1, 0.1)), p.ss.x[1] * (1 + rng.uniform(-0.1, 0.1)),
          p.ss.u[0] * (1 + rng.uniform(-0.1, 0.1)), p.ss.u[1] * (1 + rng.uniform(-0.1, 0.1));
      CHECK(rot.stage_cost.eval(xu)[0] == p.ocp.stage_cost.eval(xu)[0]);
      CHECK(rot.terminal_cost.eval(xu.head(2))[0] == p.ocp.terminal_cost.eval(xu.head(2))[0]);
    }
  }

  TEST_CASE("rotated cost differs by the storage at the initial state") {
    // on any dynamically feasible trajectory, J_rot - J = Lambda(x_0)
    const auto& p = evap();
    GraphBuilder gb;
    auto x = gb.inputs("x", 2);
    Sym v = 3.0 * sq(x[0] - p.ss.x[0]) + 1.5 * sq(x[1] - p.ss.x[1]) +
            0.25 * (x[0] - p.ss.x[0]) * (x[1] - p.ss.x[1]);
    StorageFunction storage = StorageFunction::make(Function(gb, {v}), p.ss.x);
    OcpSpec rot = rotate(p.ocp, storage);

    OcpSpec ocp = p.with_horizon(15);
    OcpSpec rot15 = rot;
    rot15.N = 15;
    Vec x0(2);
    x0 << 27.0, 52.0;
    TranscribedNlp a(ocp, x0), b(rot15, x0);
    // roll a feasible trajectory from x0 under constant u_s
    Vec w(a.n_w());
    Vec xs = x0;
    for (int k = 0; k < 15; ++k) {
      w.segment(k * 4, 2) = xs;
      w.segment(k * 4 + 2, 2) = p.ss.u;
      xs = p.ocp.dynamics.step(xs, p.ss.u);
    }
    w.tail(2) = xs;
    const double gap = b.cost(w) - a.cost(w);
    CHECK(gap == doctest::Approx(storage.lambda.eval(x0)[0]).epsilon(1e-10));
  }

  TEST_CASE("condensed structured QP agrees with the dense reference") {
    // moderately sized instance with active bounds; the dense path plays
    // the oracle for primal, dynamics multipliers, and path multipliers
    const auto& p = evap();
    OcpSpec ocp = p.with_horizon(6);
    Vec x0(2);
    x0 << 25.5, 50.5;
    TranscribedNlp nlp(ocp, x0);
    NlpIterate z = p.steady_iterate(ocp);
    Linearization lin = nlp.linearize(z.w);
    HessianBlocks hb = fixed_blocks(ocp, p.convex.M, p.convex.Mf);
    OcpQpResult qp = nlp.solve_qp(z.w, lin, hb);
    REQUIRE(qp.status == QpStatus::optimal);

    const int nxu = 4, nw = nlp.n_w();
    const int me = 2 + 6 * 2 + 2;  // initial + dynamics + terminal equality
    DenseQp dq;
    dq.H = Mat::Zero(nw, nw);
    for (int k = 0; k < 6; ++k) dq.H.block(k * nxu, k * nxu, nxu, nxu) = hb.stage[k];
    dq.H.bottomRightCorner(2, 2) = hb.terminal;
    dq.g.resize(nw);
    for (int k = 0; k < 6; ++k) dq.g.segment(k * nxu, nxu) = lin.stage[k].grad;
    dq.g.tail(2) = lin.term.grad;
    dq.E = Mat::Zero(me, nw);
    dq.e.resize(me);
    dq.E.topLeftCorner(2, 2) = Mat::Identity(2, 2);
    dq.e.head(2) = x0 - nlp.x_at(z.w, 0);
    for (int k = 0; k < 6; ++k) {
      dq.E.block(2 + 2 * k, k * nxu, 2, 2) = -lin.stage[k].A;
      dq.E.block(2 + 2 * k, k * nxu + 2, 2, 2) = -lin.stage[k].B;
      dq.E.block(2 + 2 * k, (k + 1) * nxu, 2, 2) = Mat::Identity(2, 2);
      dq.e.segment(2 + 2 * k, 2) = lin.stage[k].f - z.w.segment((k + 1) * nxu, 2);
    }
    dq.E.block(14, 6 * nxu, 2, 2) = lin.term.D;
    dq.e.segment(14, 2) = -lin.term.g;
    const int mi = 6 * 5;
    dq.C = Mat::Zero(mi, nw);
    dq.c.resize(mi);
    for (int k = 0; k < 6; ++k) {
      dq.C.block(5 * k, k * nxu, 5, nxu) = lin.stage[k].C;
      dq.c.segment(5 * k, 5) = -lin.stage[k].h;
    }
    DenseQpSolution ref = solve_dense_qp(dq);
    REQUIRE(ref.status == QpStatus::optimal);

    CHECK((qp.dw - ref.d).cwiseAbs().maxCoeff() < 1e-8);
    // eliminated multipliers recovered by the backward sweep
    CHECK((qp.lam.col(0) - ref.lam.head(2)).cwiseAbs().maxCoeff() < 1e-7);
    for (int k = 0; k < 6; ++k)
      CHECK((qp.lam.col(k + 1) - ref.lam.segment(2 + 2 * k, 2)).cwiseAbs().maxCoeff() < 1e-7);
    CHECK((qp.nu - ref.lam.tail(2)).cwiseAbs().maxCoeff() < 1e-7);
    for (int k = 0; k < 6; ++k)
      for (int i = 0; i < 5; ++i) CHECK(qp.mu(i, k) == doctest::Approx(ref.mu[5 * k + i]).epsilon(1e-7));
  }

  TEST_CASE("row masks remove path rows from the problem") {
    const auto& p = evap();
    OcpSpec ocp = p.with_horizon(4);
    TranscribedNlp nlp(ocp, p.ss.x);
    nlp.set_row_enabled(1, 3, false);  // steam-pressure bound, inactive at x_s
    NlpIterate z = p.steady_iterate(ocp);
    KktResidual r = nlp.kkt_residual(z);
    // stage 1's disabled bound no longer contributes rows
    CHECK(r.feasibility.size() == 2 + 4 * 2 + (4 * 5 - 1) + 2);
    CHECK(r.inf_norm <= 1e-8);
  }
}
