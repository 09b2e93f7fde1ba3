// This file is part of enmpc, a C++ library for economic nonlinear model
// predictive control with SQP/RTI solvers and offline Hessian convexification.
//
// Licensed under the MIT License <http://opensource.org/licenses/MIT>.

#ifndef ENMPC_RTI_HPP_
#define ENMPC_RTI_HPP_

#include "enmpc/sqp.hpp"

#include <functional>

namespace enmpc {

/// Shift initialization: stages 1..N move to 0..N-1, the freed terminal
/// stage is filled with the steady input and a one-step rollout of the old
/// terminal state (which equals copying the steady-state pair whenever the
/// problem pins x_N = x_s). Duals shift alongside; the new last stage takes
/// the steady multipliers.
inline NlpIterate shift_guess(const NlpIterate& z, const OcpSpec& ocp, const Vec& u_fill,
                              const Vec& lambda_fill, const Vec& mu_fill) {
  const int nx = ocp.nx(), nu = ocp.nu(), N = ocp.N;
  const int nxu = nx + nu;
  NlpIterate out = z;
  for (int k = 0; k + 1 < N; ++k) {
    out.w.segment(k * nxu, nxu) = z.w.segment((k + 1) * nxu, nxu);
    out.mu.col(k) = z.mu.col(k + 1);
  }
  Vec x_last = z.w.tail(nx);
  out.w.segment((N - 1) * nxu, nx) = x_last;
  out.w.segment((N - 1) * nxu + nx, nu) = u_fill;
  out.w.tail(nx) = ocp.dynamics.step(x_last, u_fill);
  out.mu.col(N - 1) = mu_fill;
  for (int k = 0; k < N; ++k) out.lambda.col(k) = z.lambda.col(k + 1);
  out.lambda.col(N) = lambda_fill;
  return out;
}

struct RtiStepInfo {
  Vec u0;
  QpStatus qp_status{QpStatus::optimal};
  double guess_kkt{0.0};  // KKT residual of the (shifted) guess on the new problem
  double step_norm{0.0};
  int iterations{1};
  bool degraded{false};  // QP failed; previous feasible input was reused
};

/// One controller instance: either a real-time iteration (exactly one QP
/// per sample, full step, shift initialization) or a fully converged SQP
/// solve per sample, warm-started by the same shift.
class RtiController {
 public:
  RtiController(OcpSpec ocp, HessianStrategy strategy, NlpIterate z0, Vec u_fill,
                Vec lambda_fill, Vec mu_fill, bool converged_mode = false, double tol = 1e-8,
                int max_iter = 50)
      : nlp_(make_nlp(std::move(ocp), z0)),
        strat_(std::move(strategy)),
        z_(std::move(z0)),
        u_fill_(std::move(u_fill)),
        lambda_fill_(std::move(lambda_fill)),
        mu_fill_(std::move(mu_fill)),
        converged_mode_(converged_mode),
        tol_(tol),
        max_iter_(max_iter) {
    last_u_ = z_.w.segment(nlp_.nx(), nlp_.nu());
  }

  TranscribedNlp& nlp() { return nlp_; }
  const NlpIterate& guess() const { return z_; }
  const HessianStrategy& strategy() const { return strat_; }

  /// Executes the sample: embed the measurement, solve (one QP or a full
  /// SQP), return u_0, then shift the stored guess for the next sample.
  RtiStepInfo step(const Vec& x_hat0) {
    nlp_.set_initial_state(x_hat0);
    RtiStepInfo info;
    Linearization lin = nlp_.linearize(z_.w);
    info.guess_kkt = nlp_.kkt_residual(z_, lin).inf_norm;

    if (converged_mode_) {
      SqpOptions opt;
      opt.tol = tol_;
      opt.max_iter = max_iter_;
      opt.step_rule = StepRule::MeritBacktracking;
      SqpResult res = sqp_solve(nlp_, strat_, z_, opt, hint_);
      info.iterations = res.iterations;
      if (res.trace.termination == SqpTermination::qp_failure || !res.converged) {
        info.qp_status = QpStatus::iteration_limit;
        info.degraded = true;
        info.u0 = last_u_;
      } else {
        z_ = res.z;
        if (!res.trace.rows.empty()) {
          info.step_norm = res.trace.rows.front().step_norm;
        }
        info.u0 = z_.w.segment(nlp_.nx(), nlp_.nu());
        last_u_ = info.u0;
      }
    } else {
      detail::QpStepOutcome out = detail::compute_qp_step(nlp_, strat_, z_, lin, hint_);
      info.qp_status = out.qp.status;
      if (out.qp.status == QpStatus::optimal) {
        detail::apply_step(z_, out.qp, 1.0);
        hint_ = out.qp.active;
        info.step_norm = out.qp.dw.norm();
        info.u0 = z_.w.segment(nlp_.nx(), nlp_.nu());
        last_u_ = info.u0;
      } else {
        info.degraded = true;  // keep the previous input, skip the update
        info.u0 = last_u_;
      }
    }

    z_ = shift_guess(z_, nlp_.ocp(), u_fill_, lambda_fill_, mu_fill_);
    hint_ = hint_.shifted(nlp_.N());
    return info;
  }

 private:
  static TranscribedNlp make_nlp(OcpSpec ocp, const NlpIterate& z0) {
    Vec x0 = z0.w.head(ocp.nx());
    return TranscribedNlp(std::move(ocp), std::move(x0));
  }

  TranscribedNlp nlp_;
  HessianStrategy strat_;
  NlpIterate z_;
  Vec u_fill_, lambda_fill_, mu_fill_;
  bool converged_mode_;
  double tol_;
  int max_iter_;
  ActiveSetHint hint_;
  Vec last_u_;
};

/// Hooks a closed-loop scenario into the controller's stage data: `prepare`
/// rewrites per-stage parameters and row masks with preview at each sample;
/// `meter_params` supplies the reference values the physical cost meter
/// sees at a sample.
struct Scenario {
  std::function<void(TranscribedNlp&, int sample)> prepare;
  std::function<Vec(int sample)> meter_params;

  static Scenario none() {
    Scenario s;
    s.prepare = [](TranscribedNlp&, int) {};
    s.meter_params = [](int) { return Vec(); };
    return s;
  }
};

struct ClosedLoopSample {
  int k{0};
  double t{0.0};
  Vec x, u;
  double stage_cost{0.0};  // physical (unshifted) cost
  double kkt_guess{0.0};
  QpStatus qp_status{QpStatus::optimal};
  int iterations{1};
};

struct ClosedLoopTrace {
  std::vector<ClosedLoopSample> samples;
  double J_cl{0.0};
  int n_sim{0};
  bool diverged{false};

  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path);
    const int nx = samples.empty() ? 0 : static_cast<int>(samples.front().x.size());
    const int nu = samples.empty() ? 0 : static_cast<int>(samples.front().u.size());
    os << "k,t";
    for (int i = 0; i < nx; ++i) os << ",x" << i;
    for (int i = 0; i < nu; ++i) os << ",u" << i;
    os << ",stage_cost,kkt_inf,qp_status\n";
    char buf[64];
    for (const auto& s : samples) {
      os << s.k;
      std::snprintf(buf, sizeof(buf), ",%.17g", s.t);
      os << buf;
      for (int i = 0; i < nx; ++i) {
        std::snprintf(buf, sizeof(buf), ",%.17g", s.x[i]);
        os << buf;
      }
      for (int i = 0; i < nu; ++i) {
        std::snprintf(buf, sizeof(buf), ",%.17g", s.u[i]);
        os << buf;
      }
      std::snprintf(buf, sizeof(buf), ",%.17g,%.17g,", s.stage_cost, s.kkt_guess);
      os << buf << to_string(s.qp_status) << "\n";
    }
  }
};

/// Simulates the closed loop: the plant is the same discrete map the
/// controller predicts with (no plant-model mismatch). The closed-loop
/// cost J_cl accumulates the physical stage cost, one common meter for
/// all controllers. Divergence (non-finite or exploding states) truncates
/// the trace with a flag.
template <typename MeterFn>
ClosedLoopTrace simulate_closed_loop(const DiscreteDynamics& plant, RtiController& ctrl,
                                     const Scenario& scenario, const Vec& x0, int n_sim,
                                     double t_s, MeterFn&& meter) {
  ClosedLoopTrace trace;
  trace.n_sim = n_sim;
  Vec x = x0;
  for (int k = 0; k < n_sim; ++k) {
    scenario.prepare(ctrl.nlp(), k);
    RtiStepInfo info;
    try {
      info = ctrl.step(x);
    } catch (const DomainError&) {
      trace.diverged = true;  // iterates left the model's smooth domain
      break;
    }
    ClosedLoopSample s;
    s.k = k;
    s.t = k * t_s;
    s.x = x;
    s.u = info.u0;
    s.stage_cost = meter(x, info.u0, scenario.meter_params(k));
    s.kkt_guess = info.guess_kkt;
    s.qp_status = info.qp_status;
    s.iterations = info.iterations;
    trace.samples.push_back(s);
    trace.J_cl += s.stage_cost;

    bool finite = info.u0.allFinite();
    if (finite) {
      try {
        x = plant.step(x, info.u0);
      } catch (const DomainError&) {
        finite = false;
      }
    }
    if (!finite || !x.allFinite() || x.cwiseAbs().maxCoeff() > 1e9) {
      trace.diverged = true;
      break;
    }
  }
  return trace;
}

/// Performance loss versus a baseline closed loop, in percent:
///   100 (J_cl - J_cl_base) / (l(w_s) N_sim),
/// where l(w_s) is the *unshifted* steady cost. Diverged traces map to
/// +infinity so they rank last.
inline double performance_loss(const ClosedLoopTrace& trace, const ClosedLoopTrace& baseline,
                               double steady_cost) {
  if (trace.n_sim != baseline.n_sim)
    throw std::invalid_argument("performance_loss: traces have different lengths");
  if (std::abs(steady_cost) < 1e-12)
    throw std::invalid_argument(
        "performance_loss: l(w_s) vanishes; use the physical (unshifted) stage cost");
  if (trace.diverged) return std::numeric_limits<double>::infinity();
  return 100.0 * (trace.J_cl - baseline.J_cl) / (steady_cost * trace.n_sim);
}

}  // namespace enmpc

#endif  // ENMPC_RTI_HPP_
