// This file is part of enmpc, a C++ library for economic nonlinear model
// predictive control with SQP/RTI solvers and offline Hessian convexification.
//
// Licensed under the MIT License <http://opensource.org/licenses/MIT>.

#ifndef ENMPC_SQP_HPP_
#define ENMPC_SQP_HPP_

#include "enmpc/nlp.hpp"

#include <cstdio>
#include <fstream>
#include <string>

namespace enmpc {

/// Pluggable Hessian strategies. GaussNewtonEmpc and FixedIndefinite use
/// constant blocks and never read dual variables; Exact uses the iterate's
/// Lagrangian Hessian; ExactRegularized falls back to a full-space
/// eigenvalue floor only when the QP detects nonpositive reduced curvature.
struct HessianStrategy {
  enum class Kind { Exact, ExactRegularized, GaussNewtonEmpc, Identity, FixedIndefinite };
  Kind kind{Kind::Exact};
  Mat M, Mf;             // fixed blocks (GaussNewtonEmpc / FixedIndefinite)
  double reg_floor{1e-6};

  bool dual_free() const { return kind != Kind::Exact && kind != Kind::ExactRegularized; }

  static HessianStrategy exact() { return {Kind::Exact, {}, {}, 0.0}; }
  static HessianStrategy exact_regularized(double eps = 1e-6) {
    return {Kind::ExactRegularized, {}, {}, eps};
  }
  static HessianStrategy gauss_newton(Mat M, Mat Mf) {
    return {Kind::GaussNewtonEmpc, std::move(M), std::move(Mf), 0.0};
  }
  static HessianStrategy fixed_indefinite(Mat H, Mat Hf) {
    return {Kind::FixedIndefinite, std::move(H), std::move(Hf), 0.0};
  }
  static HessianStrategy identity() { return {Kind::Identity, {}, {}, 0.0}; }

  const char* name() const {
    switch (kind) {
      case Kind::Exact: return "exact";
      case Kind::ExactRegularized: return "exact_regularized";
      case Kind::GaussNewtonEmpc: return "gauss_newton";
      case Kind::Identity: return "identity";
      case Kind::FixedIndefinite: return "fixed_indefinite";
    }
    return "?";
  }
};

enum class StepRule { FullStep, MeritBacktracking };

enum class SqpTermination { converged, max_iter, qp_failure };

struct SqpOptions {
  double tol{1e-8};
  int max_iter{100};
  StepRule step_rule{StepRule::MeritBacktracking};
  bool record_iterates{false};
};

struct SqpIterRecord {
  int iter{0};
  double kkt_inf{0.0};
  double step_norm{0.0};
  double t{0.0};
  int active_rows{0};
  QpStatus qp_status{QpStatus::optimal};
};

struct SqpTrace {
  std::vector<SqpIterRecord> rows;
  std::vector<NlpIterate> iterates;  // filled when record_iterates is set
  SqpTermination termination{SqpTermination::max_iter};

  /// CSV export, column order fixed: iteration, kkt_inf_norm, step_norm, t.
  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path);
    os << "iteration,kkt_inf_norm,step_norm,t\n";
    char buf[128];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", r.iter, r.kkt_inf, r.step_norm,
                    r.t);
      os << buf;
    }
  }
};

struct SqpResult {
  NlpIterate z;
  SqpTrace trace;
  int iterations{0};
  double kkt{0.0};
  bool converged{false};
};

namespace detail {

struct QpStepOutcome {
  OcpQpResult qp;
  bool regularized{false};
};

inline HessianBlocks strategy_blocks(const TranscribedNlp& nlp, const HessianStrategy& strat,
                                     const NlpIterate& z) {
  switch (strat.kind) {
    case HessianStrategy::Kind::Exact:
    case HessianStrategy::Kind::ExactRegularized: return nlp.exact_hessian(z);
    case HessianStrategy::Kind::GaussNewtonEmpc:
    case HessianStrategy::Kind::FixedIndefinite:
      return fixed_blocks(nlp.ocp(), strat.M, strat.Mf);
    case HessianStrategy::Kind::Identity: return identity_blocks(nlp.ocp());
  }
  throw std::logic_error("unreachable");
}

/// One QP subproblem under the given strategy. ExactRegularized retries
/// with floored blocks only after the unmodified QP reports nonpositive
/// reduced curvature, so it leaves the step untouched whenever the exact
/// reduced Hessian is already positive definite.
inline QpStepOutcome compute_qp_step(const TranscribedNlp& nlp, const HessianStrategy& strat,
                                     const NlpIterate& z, const Linearization& lin,
                                     const ActiveSetHint& hint) {
  QpStepOutcome out;
  HessianBlocks hb = strategy_blocks(nlp, strat, z);
  out.qp = nlp.solve_qp(z.w, lin, hb, hint);
  if (out.qp.status == QpStatus::nonconvex_detected &&
      strat.kind == HessianStrategy::Kind::ExactRegularized) {
    HessianBlocks floored = regularize(hb, strat.reg_floor);
    out.qp = nlp.solve_qp(z.w, lin, floored, hint);
    out.regularized = true;
  }
  return out;
}

inline void apply_step(NlpIterate& z, const OcpQpResult& qp, double t) {
  z.w += t * qp.dw;
  z.lambda += t * (qp.lam - z.lambda);
  z.mu += t * (qp.mu - z.mu);
  z.nu += t * (qp.nu - z.nu);
}

inline double max_multiplier(const OcpQpResult& qp) {
  double m = 0.0;
  if (qp.lam.size()) m = std::max(m, qp.lam.cwiseAbs().maxCoeff());
  if (qp.mu.size()) m = std::max(m, qp.mu.cwiseAbs().maxCoeff());
  if (qp.nu.size()) m = std::max(m, qp.nu.cwiseAbs().maxCoeff());
  return m;
}

}  // namespace detail

/// SQP driver. Full steps by default under FullStep (the RTI convention and
/// the setting of the iterate-identity results); MeritBacktracking guards
/// fully-converged solves with an l1 exact-penalty line search.
inline SqpResult sqp_solve(const TranscribedNlp& nlp, const HessianStrategy& strat,
                           NlpIterate z0, const SqpOptions& opt = {},
                           ActiveSetHint hint = {}) {
  SqpResult res;
  res.z = std::move(z0);
  double penalty = 1.0;

  for (int iter = 0; iter < opt.max_iter; ++iter) {
    Linearization lin = nlp.linearize(res.z.w);
    KktResidual kkt = nlp.kkt_residual(res.z, lin);
    if (opt.record_iterates) res.trace.iterates.push_back(res.z);
    if (kkt.inf_norm <= opt.tol) {
      res.trace.rows.push_back({iter, kkt.inf_norm, 0.0, 0.0, 0, QpStatus::optimal});
      res.trace.termination = SqpTermination::converged;
      res.converged = true;
      res.iterations = iter;
      res.kkt = kkt.inf_norm;
      return res;
    }

    detail::QpStepOutcome step = detail::compute_qp_step(nlp, strat, res.z, lin, hint);
    if (step.qp.status != QpStatus::optimal) {
      res.trace.rows.push_back({iter, kkt.inf_norm, 0.0, 0.0, 0, step.qp.status});
      res.trace.termination = SqpTermination::qp_failure;
      res.iterations = iter;
      res.kkt = kkt.inf_norm;
      return res;
    }
    hint = step.qp.active;

    double t = 1.0;
    if (opt.step_rule == StepRule::MeritBacktracking) {
      penalty = std::max(penalty, 10.0 * detail::max_multiplier(step.qp));
      const double m0 = nlp.cost(res.z.w) + penalty * nlp.violation_l1(res.z.w);
      for (int halvings = 0; halvings < 24; ++halvings) {
        Vec w_trial = res.z.w + t * step.qp.dw;
        double m1;
        try {
          m1 = nlp.cost(w_trial) + penalty * nlp.violation_l1(w_trial);
        } catch (const DomainError&) {
          t *= 0.5;  // trial left the model's smooth domain
          continue;
        }
        if (m1 <= m0 + 1e-12 * (1.0 + std::abs(m0))) break;
        t *= 0.5;
      }
    }

    detail::apply_step(res.z, step.qp, t);
    res.trace.rows.push_back({iter, kkt.inf_norm, t * step.qp.dw.norm(), t,
                              static_cast<int>(step.qp.active.rows.size()),
                              step.qp.status});
  }
  KktResidual kkt = nlp.kkt_residual(res.z);
  if (opt.record_iterates) res.trace.iterates.push_back(res.z);
  res.kkt = kkt.inf_norm;
  res.converged = kkt.inf_norm <= opt.tol;
  res.trace.termination =
      res.converged ? SqpTermination::converged : SqpTermination::max_iter;
  res.iterations = opt.max_iter;
  return res;
}

/// Per-iteration primal/dual gaps between synchronized full-step SQP runs
/// on two problems (typically an OCP and its rotation). Both runs use the
/// same strategy object and their own linearizations; steps are full so the
/// iterate-identity results apply verbatim.
struct IterateComparison {
  std::vector<double> primal_gap;       // ||w_a^(i) - w_b^(i)||, i = 1..n_iter
  std::vector<double> dual_gap;         // max_k ||lambda_a,k - lambda_b,k||
  std::vector<NlpIterate> iterates_a;   // post-step iterates
  std::vector<NlpIterate> iterates_b;
  bool qp_failure{false};
  int completed{0};
};

namespace detail {

/// Restores dynamic feasibility of a primal iterate by rolling the states
/// forward from x_0 under the iterate's controls.
inline void roll_states(const OcpSpec& ocp, Vec& w) {
  const int nx = ocp.nx(), nu = ocp.nu();
  const int nxu = nx + nu;
  Vec x = w.head(nx);
  for (int k = 0; k < ocp.N; ++k) {
    w.segment(k * nxu, nx) = x;
    x = ocp.dynamics.step(x, w.segment(k * nxu + nx, nu));
  }
  w.tail(nx) = x;
}

}  // namespace detail

/// `feasible_rollout` keeps the compared iterates dynamically feasible
/// (states re-simulated after every full step). The iterate-identity
/// results silently use the feasibility of the linearization points: the
/// telescoping of the rotation terms needs grad Lambda(f(w_k)) =
/// grad Lambda(x_{k+1}), which raw multiple-shooting iterates violate by
/// their nonlinear defects. With the rollout the identities are exact at
/// every iteration; without it they hold at the first step and
/// asymptotically.
inline IterateComparison compare_iterates(const TranscribedNlp& nlp_a,
                                          const TranscribedNlp& nlp_b,
                                          const HessianStrategy& strat, NlpIterate z_a,
                                          NlpIterate z_b, int n_iter,
                                          bool feasible_rollout = true) {
  IterateComparison cmp;
  ActiveSetHint hint_a, hint_b;
  for (int i = 0; i < n_iter; ++i) {
    Linearization lin_a = nlp_a.linearize(z_a.w);
    Linearization lin_b = nlp_b.linearize(z_b.w);
    auto step_a = detail::compute_qp_step(nlp_a, strat, z_a, lin_a, hint_a);
    auto step_b = detail::compute_qp_step(nlp_b, strat, z_b, lin_b, hint_b);
    if (step_a.qp.status != QpStatus::optimal || step_b.qp.status != QpStatus::optimal) {
      cmp.qp_failure = true;
      break;
    }
    hint_a = step_a.qp.active;
    hint_b = step_b.qp.active;
    detail::apply_step(z_a, step_a.qp, 1.0);
    detail::apply_step(z_b, step_b.qp, 1.0);
    if (feasible_rollout) {
      detail::roll_states(nlp_a.ocp(), z_a.w);
      detail::roll_states(nlp_b.ocp(), z_b.w);
    }
    cmp.primal_gap.push_back((z_a.w - z_b.w).norm());
    cmp.dual_gap.push_back((z_a.lambda - z_b.lambda).cwiseAbs().maxCoeff());
    cmp.iterates_a.push_back(z_a);
    cmp.iterates_b.push_back(z_b);
    ++cmp.completed;
  }
  return cmp;
}

/// Small dense NLP  min cost(v)  s.t. eq(v) = 0, ineq(v) >= 0, solved by
/// exact-Hessian SQP with the conditional eigenvalue-floor fallback. Used
/// for the steady-state problem; shares the QP solver with the OCP path.
struct DenseNlp {
  Function cost;  // (v) -> 1
  Function eq;    // (v) -> me
  Function ineq;  // (v) -> mi
};

struct DenseNlpResult {
  Vec v;
  Vec lam;  // equality multipliers
  Vec mu;   // inequality multipliers
  double kkt{0.0};
  int iterations{0};
  bool converged{false};
};

inline DenseNlpResult solve_dense_nlp(const DenseNlp& nlp, Vec v0, double tol = 1e-11,
                                      int max_iter = 200) {
  const int n = static_cast<int>(v0.size());
  const int me = nlp.eq.n_out();
  const int mi = nlp.ineq.n_out();
  DenseNlpResult res;
  res.v = std::move(v0);
  res.lam = Vec::Zero(me);
  res.mu = Vec::Zero(mi);
  EvalWorkspace ws;
  double penalty = 1.0;

  for (int iter = 0; iter <= max_iter; ++iter) {
    Vec c(1), ev(me), iv(mi);
    Mat Jc, Je, Ji;
    nlp.cost.eval_with_jacobian(res.v, c, Jc, ws);
    nlp.eq.eval_with_jacobian(res.v, ev, Je, ws);
    nlp.ineq.eval_with_jacobian(res.v, iv, Ji, ws);

    Vec grad = Jc.row(0).transpose();
    Vec stat = grad;
    if (me) stat -= Je.transpose() * res.lam;
    if (mi) stat -= Ji.transpose() * res.mu;
    double kkt = stat.size() ? stat.cwiseAbs().maxCoeff() : 0.0;
    for (int i = 0; i < me; ++i) kkt = std::max(kkt, std::abs(ev[i]));
    for (int i = 0; i < mi; ++i) {
      kkt = std::max(kkt, std::max(0.0, -iv[i]));
      kkt = std::max(kkt, std::abs(res.mu[i] * iv[i]));
    }
    res.kkt = kkt;
    res.iterations = iter;
    if (kkt <= tol) {
      res.converged = true;
      return res;
    }
    if (iter == max_iter) break;

    Mat W = nlp.cost.weighted_hessian(res.v, Vec::Ones(1));
    if (me) W -= nlp.eq.weighted_hessian(res.v, res.lam);
    if (mi && res.mu.cwiseAbs().maxCoeff() > 0) W -= nlp.ineq.weighted_hessian(res.v, res.mu);

    DenseQp qp{W, grad, Je, -ev, Ji, -iv};
    DenseQpSolution sol = solve_dense_qp(qp);
    if (sol.status == QpStatus::nonconvex_detected) {
      qp.H = eigenvalue_floor(W, 1e-6 * (1.0 + W.cwiseAbs().maxCoeff()));
      sol = solve_dense_qp(qp);
    }
    if (sol.status != QpStatus::optimal) break;

    double mult_max = 0.0;
    if (me) mult_max = std::max(mult_max, sol.lam.cwiseAbs().maxCoeff());
    if (mi) mult_max = std::max(mult_max, sol.mu.cwiseAbs().maxCoeff());
    penalty = std::max(penalty, 10.0 * mult_max);

    auto merit = [&](const Vec& v) {
      double m = nlp.cost.eval(v)[0];
      Vec e2 = nlp.eq.eval(v);
      Vec i2 = nlp.ineq.eval(v);
      for (int i = 0; i < me; ++i) m += penalty * std::abs(e2[i]);
      for (int i = 0; i < mi; ++i) m += penalty * std::max(0.0, -i2[i]);
      return m;
    };
    double t = 1.0;
    const double m0 = merit(res.v);
    for (int halvings = 0; halvings < 30; ++halvings) {
      bool ok = true;
      double m1 = 0.0;
      try {
        m1 = merit(res.v + t * sol.d);
      } catch (const DomainError&) {
        ok = false;
      }
      if (ok && m1 <= m0 + 1e-12 * (1.0 + std::abs(m0))) break;
      t *= 0.5;
    }
    res.v += t * sol.d;
    if (me) res.lam += t * (sol.lam - res.lam);
    if (mi) res.mu += t * (sol.mu - res.mu);
  }
  return res;
}

}  // namespace enmpc

#endif  // ENMPC_SQP_HPP_
