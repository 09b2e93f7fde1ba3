#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "enmpc/experiments.hpp"
#include "test_util.hpp"

#include <fstream>
#include <sstream>

using namespace enmpc;
using namespace enmpc::experiments;

namespace {

const plants::PlantBundle& evap() { return get_plant("evaporation"); }

std::string slurp(const std::string& path) {
  std::ifstream is(path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("rti") {
  TEST_CASE("shift of a constant trajectory is the identity") {
    const auto& p = evap();
    NlpIterate z = p.steady_iterate();
    NlpIterate s = shift_guess(z, p.ocp, p.ss.u, p.ss.lambda, p.ss.mu);
    CHECK((s.w - z.w).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK((s.lambda - z.lambda).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("shift moves stage k+1 into stage k") {
    const auto& p = evap();
    OcpSpec ocp = p.with_horizon(5);
    NlpIterate z = NlpIterate::zero(ocp);
    for (int k = 0; k < 5; ++k) {
      z.w.segment(k * 4, 4) << 10.0 + k, 20.0 + k, 30.0 + k, 40.0 + k;
      z.mu.col(k).setConstant(k);
    }
    z.w.tail(2) << 99.0, 98.0;
    NlpIterate s = shift_guess(z, ocp, p.ss.u, p.ss.lambda, p.ss.mu);
    for (int k = 0; k + 1 < 5; ++k) {
      CHECK((s.w.segment(k * 4, 4) - z.w.segment((k + 1) * 4, 4)).cwiseAbs().maxCoeff() == 0.0);
      CHECK((s.mu.col(k) - z.mu.col(k + 1)).cwiseAbs().maxCoeff() == 0.0);
    }
    // freed stage: old terminal state with the steady input
    CHECK((s.w.segment(4 * 4, 2) - z.w.tail(2)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((s.w.segment(4 * 4 + 2, 2) - p.ss.u).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("closed loop at the steady state stays there") {
    const auto& p = evap();
    RtiController ctrl = make_controller("GN-RTI", p);
    Scenario sc = evaporation_scenario();
    auto meter = [&](const Vec& x, const Vec& u, const Vec& pr) {
      return p.unshifted_cost(x, u, pr);
    };
    ClosedLoopTrace tr =
        simulate_closed_loop(p.ocp.dynamics, ctrl, sc, p.ss.x, 8, p.t_s, meter);
    REQUIRE_FALSE(tr.diverged);
    for (const auto& s : tr.samples) {
      CHECK((s.u - p.ss.u).cwiseAbs().maxCoeff() <= 1e-9);
      CHECK((s.x - p.ss.x).cwiseAbs().maxCoeff() <= 1e-9);
    }
    CHECK(tr.J_cl == doctest::Approx(8 * p.ss.cost_offset).epsilon(1e-10));
  }

  TEST_CASE("ev cruise is control-invariant despite the advancing position") {
    const auto& p = get_plant("ev");
    RtiController ctrl = make_controller("GN-RTI", p);
    Scenario sc = ev_scenario(0.0);
    auto meter = [&](const Vec& x, const Vec& u, const Vec& pr) {
      return p.unshifted_cost(x, u, pr);
    };
    // start before the obstacle window ends so its rows are exercised
    ClosedLoopTrace tr =
        simulate_closed_loop(p.ocp.dynamics, ctrl, sc, p.ss.x, 10, p.t_s, meter);
    REQUIRE_FALSE(tr.diverged);
    for (const auto& s : tr.samples) {
      CHECK((s.u - p.ss.u).cwiseAbs().maxCoeff() <= 1e-7);
      CHECK((s.x.tail(4) - p.ss.x.tail(4)).cwiseAbs().maxCoeff() <= 1e-7);
    }
  }

  TEST_CASE("shifted guess beats the cold guess on the disturbance scenario") {
    const auto& p = evap();
    RtiController ctrl = make_controller("GN-RTI", p);
    Vec x = p.ss.x;
    x[1] += 10.0;
    std::vector<double> shifted_kkt;
    std::vector<Vec> states;
    for (int k = 0; k < 12; ++k) {
      states.push_back(x);
      RtiStepInfo info = ctrl.step(x);
      REQUIRE(info.qp_status == QpStatus::optimal);
      shifted_kkt.push_back(info.guess_kkt);
      x = p.ocp.dynamics.step(x, info.u0);
    }
    for (int k = 1; k < 12; ++k) {
      TranscribedNlp nlp(p.ocp, states[k]);
      double cold = nlp.kkt_residual(p.steady_iterate()).inf_norm;
      CHECK(shifted_kkt[k] <= cold * (1.0 + 1e-9) + 1e-12);
    }
    // the guess residual decays along the converging loop
    CHECK(shifted_kkt.back() < 1e-2 * shifted_kkt[1]);
  }

  TEST_CASE("GN real-time iterations reject the pressure disturbance") {
    const auto& p = evap();
    for (double dp : {2.0, 5.0}) {
      ClosedLoopTrace tr = run_closed_loop(p, "GN-RTI", dp, 60);
      REQUIRE_FALSE(tr.diverged);
      CHECK((tr.samples.back().x - p.ss.x).norm() <= 1e-3);
      // deviation decays monotonically after the transient
      double prev = (tr.samples[20].x - p.ss.x).norm();
      for (std::size_t k = 21; k < tr.samples.size(); ++k) {
        double cur = (tr.samples[k].x - p.ss.x).norm();
        CHECK(cur <= prev * (1.0 + 1e-6) + 1e-12);
        prev = cur;
      }
    }
  }

  TEST_CASE("performance loss arithmetic") {
    ClosedLoopTrace base;
    base.n_sim = 10;
    base.J_cl = 10.0 * 6.0;
    ClosedLoopTrace same = base;
    CHECK(performance_loss(same, base, 6.0) == 0.0);
    ClosedLoopTrace worse = base;
    worse.J_cl = 10.0 * 6.0 * 1.01;
    CHECK(performance_loss(worse, base, 6.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(performance_loss(worse, base, 0.0), std::invalid_argument);
    ClosedLoopTrace div = base;
    div.diverged = true;
    CHECK(std::isinf(performance_loss(div, base, 6.0)));
    ClosedLoopTrace shorter = base;
    shorter.n_sim = 9;
    CHECK_THROWS_AS(performance_loss(shorter, base, 6.0), std::invalid_argument);
  }

  TEST_CASE("sweep reruns are byte-identical") {
    ExperimentConfig cfg;
    cfg.plant = "evaporation";
    cfg.controllers = {"GN-RTI", "SD-RTI"};
    cfg.grid = {0.0, 4.0};
    cfg.n_sim = 12;
    cfg.threads = 2;
    cfg.out_dir = "/tmp/enmpc_det_a";
    SweepResult a = run_sweep(cfg);
    write_sweep_outputs(a);
    cfg.out_dir = "/tmp/enmpc_det_b";
    SweepResult b = run_sweep(cfg);
    write_sweep_outputs(b);
    CHECK(slurp("/tmp/enmpc_det_a/sweep_summary.json") ==
          slurp("/tmp/enmpc_det_b/sweep_summary.json"));
    CHECK(slurp("/tmp/enmpc_det_a/trace_GN-RTI_4.csv") ==
          slurp("/tmp/enmpc_det_b/trace_GN-RTI_4.csv"));
    CHECK(slurp("/tmp/enmpc_det_a/trace_SD-RTI_4.csv") ==
          slurp("/tmp/enmpc_det_b/trace_SD-RTI_4.csv"));
  }
}
