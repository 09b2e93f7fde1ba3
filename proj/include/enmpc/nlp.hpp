// This file is part of enmpc, a C++ library for economic nonlinear model
// predictive control with SQP/RTI solvers and offline Hessian convexification.
//
// Licensed under the MIT License <http://opensource.org/licenses/MIT>.

#ifndef ENMPC_NLP_HPP_
#define ENMPC_NLP_HPP_

#include "enmpc/ocp.hpp"
#include "enmpc/qp.hpp"

#include <utility>
#include <vector>

namespace enmpc {

/// Primal-dual point z = (w, lambda, mu, nu) of the transcribed NLP.
/// lambda_0 pairs with the initial-value constraint, lambda_{k+1} with the
/// dynamics defect of stage k; mu >= 0 with the path rows, nu with the
/// terminal rows.
struct NlpIterate {
  Vec w;
  Mat lambda;  // nx x (N+1)
  Mat mu;      // mh x N
  Vec nu;      // mt

  static NlpIterate zero(const OcpSpec& ocp) {
    NlpIterate z;
    z.w = Vec::Zero(ocp.n_w());
    z.lambda = Mat::Zero(ocp.nx(), ocp.N + 1);
    z.mu = Mat::Zero(ocp.mh(), ocp.N);
    z.nu = Vec::Zero(ocp.mt());
    return z;
  }
};

struct KktResidual {
  Vec stationarity;
  Vec feasibility;
  Vec complementarity;
  double inf_norm{0.0};
};

/// Stage-block-diagonal Hessian of the Lagrangian (or an approximation).
struct HessianBlocks {
  std::vector<Mat> stage;  // N blocks of size (nx+nu)^2
  Mat terminal;            // nx^2
};

struct StageLin {
  Vec f;       // f(x_k, u_k)
  Mat A, B;    // dynamics sensitivities
  double cost; // stage cost value
  Vec grad;    // stage cost gradient over (x_k, u_k)
  Vec h;       // path rows
  Mat C;       // path Jacobian, mh x (nx+nu)
};

struct TerminalLin {
  double cost;
  Vec grad;  // nx
  Vec g;     // mt
  Mat D;     // mt x nx
};

struct Linearization {
  std::vector<StageLin> stage;
  TerminalLin term;
};

/// Active inequality rows identified structurally: (stage k, path row i);
/// stage == N addresses terminal inequality rows. Survives shifting and
/// per-sample mask changes, unlike raw reduced-QP indices.
struct ActiveSetHint {
  std::vector<std::pair<int, int>> rows;

  ActiveSetHint shifted(int N) const {
    ActiveSetHint out;
    out.rows.reserve(rows.size());
    for (auto [k, i] : rows) {
      if (k == N) {
        out.rows.emplace_back(k, i);
      } else if (k > 0) {
        out.rows.emplace_back(k - 1, i);
      }
    }
    return out;
  }
};

struct OcpQpResult {
  QpStatus status{QpStatus::optimal};
  Vec dw;
  Mat lam;   // nx x (N+1)
  Mat mu;    // mh x N
  Vec nu;    // mt
  ActiveSetHint active;
  int changes{0};
};

/// Multiple-shooting transcription of an OcpSpec with stage-wise block
/// structure. Constraint ordering is fixed: initial, dynamics k = 0..N-1,
/// path k = 0..N-1, terminal. Instances are single-threaded (they own
/// evaluation scratch); share the OcpSpec, not the transcription.
class TranscribedNlp {
 public:
  TranscribedNlp(OcpSpec ocp, Vec x_hat0) : ocp_(std::move(ocp)), x_hat0_(std::move(x_hat0)) {
    if (x_hat0_.size() != ocp_.nx())
      throw std::invalid_argument("build_nlp: x_hat0 dimension mismatch");
    params_ = Mat::Zero(std::max(ocp_.np, 0), ocp_.N);
    std::vector<char> base = ocp_.default_row_mask;
    if (base.empty()) base.assign(ocp_.mh(), 1);
    row_mask_.assign(ocp_.N, base);
  }

  const OcpSpec& ocp() const { return ocp_; }
  int N() const { return ocp_.N; }
  int nx() const { return ocp_.nx(); }
  int nu() const { return ocp_.nu(); }
  int mh() const { return ocp_.mh(); }
  int mt() const { return ocp_.mt(); }
  int n_w() const { return ocp_.n_w(); }
  const Vec& x_hat0() const { return x_hat0_; }

  void set_initial_state(const Vec& x0) {
    if (x0.size() != nx()) throw std::invalid_argument("set_initial_state: dimension");
    x_hat0_ = x0;
  }
  void set_stage_params(int k, const Vec& p) {
    if (p.size() != ocp_.np) throw std::invalid_argument("set_stage_params: dimension");
    if (ocp_.np > 0) params_.col(k) = p;
  }
  void set_row_enabled(int k, int row, bool enabled) { row_mask_[k][row] = enabled ? 1 : 0; }
  bool row_enabled(int k, int row) const { return row_mask_[k][row] != 0; }

  Eigen::Ref<const Vec> x_at(const Vec& w, int k) const {
    return w.segment(k * (nx() + nu()), nx());
  }
  Eigen::Ref<const Vec> u_at(const Vec& w, int k) const {
    return w.segment(k * (nx() + nu()) + nx(), nu());
  }

  /// Embeds a constant stage pair over the horizon (steady-state guess).
  Vec constant_trajectory(const Vec& x, const Vec& u) const {
    Vec w(n_w());
    for (int k = 0; k < N(); ++k) {
      w.segment(k * (nx() + nu()), nx()) = x;
      w.segment(k * (nx() + nu()) + nx(), nu()) = u;
    }
    w.tail(nx()) = x;
    return w;
  }

  double cost(const Vec& w) const {
    double J = 0.0;
    Vec y(1);
    for (int k = 0; k < N(); ++k) {
      ocp_.stage_cost.eval(stage_input(w, k), y, ws_);
      J += y[0];
    }
    ocp_.terminal_cost.eval(w.tail(nx()), y, ws_);
    return J + y[0];
  }

  /// l1 norm of the constraint violation (merit-function infeasibility).
  double violation_l1(const Vec& w) const {
    double v = (x_at(w, 0) - x_hat0_).cwiseAbs().sum();
    Vec fx(nx()), hv(mh());
    for (int k = 0; k < N(); ++k) {
      ocp_.dynamics.map.eval(xu(w, k), fx, ws_);
      v += (w.segment((k + 1) * (nx() + nu()), nx()) - fx).cwiseAbs().sum();
      if (mh() > 0) {
        ocp_.path_h.eval(stage_input(w, k), hv, ws_);
        for (int i = 0; i < mh(); ++i) {
          if (row_mask_[k][i]) v += std::max(0.0, -hv[i]);
        }
      }
    }
    if (mt() > 0) {
      Vec gv = ocp_.terminal_g.eval(w.tail(nx()));
      for (int i = 0; i < mt(); ++i) {
        if (ocp_.terminal_kinds[i] == RowKind::Equality) v += std::abs(gv[i]);
        else v += std::max(0.0, -gv[i]);
      }
    }
    return v;
  }

  Linearization linearize(const Vec& w) const {
    Linearization lin;
    lin.stage.resize(N());
    Mat J;
    Vec val;
    for (int k = 0; k < N(); ++k) {
      StageLin& s = lin.stage[k];
      Vec xuk = xu(w, k);
      val.resize(nx());
      ocp_.dynamics.map.eval_with_jacobian(xuk, val, J, ws_);
      s.f = val;
      s.A = J.leftCols(nx());
      s.B = J.rightCols(nu());
      Vec in = stage_input(w, k);
      val.resize(1);
      ocp_.stage_cost.eval_with_jacobian(in, val, J, ws_);
      s.cost = val[0];
      s.grad = J.row(0).head(nx() + nu());
      if (mh() > 0) {
        val.resize(mh());
        ocp_.path_h.eval_with_jacobian(in, val, J, ws_);
        s.h = val;
        s.C = J.leftCols(nx() + nu());
      } else {
        s.h.resize(0);
        s.C.resize(0, nx() + nu());
      }
    }
    Vec xN = w.tail(nx());
    val.resize(1);
    ocp_.terminal_cost.eval_with_jacobian(xN, val, J, ws_);
    lin.term.cost = val[0];
    lin.term.grad = J.row(0).transpose();
    if (mt() > 0) {
      val.resize(mt());
      ocp_.terminal_g.eval_with_jacobian(xN, val, J, ws_);
      lin.term.g = val;
      lin.term.D = J;
    } else {
      lin.term.g.resize(0);
      lin.term.D.resize(0, nx());
    }
    return lin;
  }

  /// Exact Lagrangian Hessian blocks at iterate z. Stage block:
  /// hess l + <hess f, lambda_{k+1}> - <hess h, mu_k>; terminal block:
  /// hess V_f - <hess g_f, nu>.
  HessianBlocks exact_hessian(const NlpIterate& z) const {
    HessianBlocks hb;
    hb.stage.resize(N());
    const int nxu = nx() + nu();
    Mat H;
    Vec one = Vec::Ones(1);
    for (int k = 0; k < N(); ++k) {
      Vec in = stage_input(z.w, k);
      ocp_.stage_cost.weighted_hessian(in, one, H, ws_);
      Mat block = H.topLeftCorner(nxu, nxu);
      ocp_.dynamics.map.weighted_hessian(xu(z.w, k), z.lambda.col(k + 1), H, ws_);
      block += H;
      if (mh() > 0) {
        Vec muk = z.mu.col(k);
        for (int i = 0; i < mh(); ++i) {
          if (!row_mask_[k][i]) muk[i] = 0.0;
        }
        if (muk.cwiseAbs().maxCoeff() > 0.0) {
          ocp_.path_h.weighted_hessian(in, muk, H, ws_);
          block -= H.topLeftCorner(nxu, nxu);
        }
      }
      hb.stage[k] = block;
    }
    Vec xN = z.w.tail(nx());
    ocp_.terminal_cost.weighted_hessian(xN, one, H, ws_);
    hb.terminal = H;
    if (mt() > 0 && z.nu.cwiseAbs().maxCoeff() > 0.0) {
      ocp_.terminal_g.weighted_hessian(xN, z.nu, H, ws_);
      hb.terminal -= H;
    }
    return hb;
  }

  KktResidual kkt_residual(const NlpIterate& z) const {
    return kkt_residual(z, linearize(z.w));
  }

  KktResidual kkt_residual(const NlpIterate& z, const Linearization& lin) const {
    KktResidual r;
    const int nxu = nx() + nu();
    r.stationarity.resize(n_w());
    for (int k = 0; k < N(); ++k) {
      const StageLin& s = lin.stage[k];
      Vec st = s.grad;
      st.head(nx()) -= z.lambda.col(k);
      st.head(nx()) += s.A.transpose() * z.lambda.col(k + 1);
      st.tail(nu()) += s.B.transpose() * z.lambda.col(k + 1);
      for (int i = 0; i < mh(); ++i) {
        if (row_mask_[k][i]) st -= s.C.row(i).transpose() * z.mu(i, k);
      }
      r.stationarity.segment(k * nxu, nxu) = st;
    }
    {
      Vec st = lin.term.grad - z.lambda.col(N());
      if (mt() > 0) st -= lin.term.D.transpose() * z.nu;
      r.stationarity.tail(nx()) = st;
    }

    int n_feas = nx() + N() * nx();
    for (int k = 0; k < N(); ++k)
      for (int i = 0; i < mh(); ++i)
        if (row_mask_[k][i]) ++n_feas;
    n_feas += mt();
    r.feasibility.resize(n_feas);
    int at = 0;
    r.feasibility.segment(at, nx()) = x_at(z.w, 0) - x_hat0_;
    at += nx();
    for (int k = 0; k < N(); ++k) {
      r.feasibility.segment(at, nx()) =
          z.w.segment((k + 1) * nxu, nx()) - lin.stage[k].f;
      at += nx();
    }
    std::vector<double> comp;
    for (int k = 0; k < N(); ++k) {
      for (int i = 0; i < mh(); ++i) {
        if (!row_mask_[k][i]) continue;
        r.feasibility[at++] = std::min(0.0, lin.stage[k].h[i]);
        comp.push_back(z.mu(i, k) * lin.stage[k].h[i]);
      }
    }
    for (int i = 0; i < mt(); ++i) {
      if (ocp_.terminal_kinds[i] == RowKind::Equality) {
        r.feasibility[at++] = lin.term.g[i];
      } else {
        r.feasibility[at++] = std::min(0.0, lin.term.g[i]);
        comp.push_back(z.nu[i] * lin.term.g[i]);
      }
    }
    r.complementarity.resize(static_cast<Eigen::Index>(comp.size()));
    for (std::size_t i = 0; i < comp.size(); ++i) r.complementarity[static_cast<Eigen::Index>(i)] = comp[i];
    r.inf_norm = 0.0;
    if (r.stationarity.size()) r.inf_norm = r.stationarity.cwiseAbs().maxCoeff();
    if (r.feasibility.size())
      r.inf_norm = std::max(r.inf_norm, r.feasibility.cwiseAbs().maxCoeff());
    if (r.complementarity.size())
      r.inf_norm = std::max(r.inf_norm, r.complementarity.cwiseAbs().maxCoeff());
    return r;
  }

  /// Builds and solves the SQP subproblem at linearization `lin` with
  /// Hessian `hb`: equalities are eliminated by the shooting-structured
  /// nullspace (condensing), inequalities handled by the reduced
  /// active-set solver, and the eliminated multipliers are recovered by a
  /// backward sweep.
  OcpQpResult solve_qp(const Vec& w, const Linearization& lin, const HessianBlocks& hb,
                       const ActiveSetHint& hint = {}) const {
    const int nxu = nx() + nu();
    const int ny = N() * nu();

    // particular solution (defect propagation) and input-to-state map
    Mat part(nx(), N() + 1);
    part.col(0) = x_hat0_ - x_at(w, 0);
    for (int k = 0; k < N(); ++k) {
      part.col(k + 1) =
          lin.stage[k].A * part.col(k) + (lin.stage[k].f - w.segment((k + 1) * nxu, nx()));
    }
    Mat SX = Mat::Zero((N() + 1) * nx(), ny);
    for (int k = 0; k < N(); ++k) {
      if (k > 0)
        SX.block((k + 1) * nx(), 0, nx(), k * nu()) =
            lin.stage[k].A * SX.block(k * nx(), 0, nx(), k * nu());
      SX.block((k + 1) * nx(), k * nu(), nx(), nu()) = lin.stage[k].B;
    }

    // condensed Hessian, column block j at a time (backward adjoint sweep)
    Mat P = Mat::Zero(ny, ny);
    const Mat& QN = hb.terminal;
    for (int j = 0; j < N(); ++j) {
      Mat W = QN * SX.block(N() * nx(), j * nu(), nx(), nu());
      for (int l = N() - 1; l >= j; --l) {
        const Mat& Ql = hb.stage[l].topLeftCorner(nx(), nx());
        auto Sl = hb.stage[l].topRightCorner(nx(), nu());
        auto Rl = hb.stage[l].bottomRightCorner(nu(), nu());
        Mat Plj = lin.stage[l].B.transpose() * W;
        if (l > j) {
          auto dgl = SX.block(l * nx(), j * nu(), nx(), nu());
          Plj += Sl.transpose() * dgl;
          W = Ql * dgl + lin.stage[l].A.transpose() * W;
        } else {
          Plj += Rl;
        }
        P.block(l * nu(), j * nu(), nu(), nu()) = Plj;
      }
    }
    {
      Mat Pfull = P.selfadjointView<Eigen::Lower>();
      P = std::move(Pfull);
    }

    // condensed gradient
    Vec q(ny);
    {
      Mat wbar(nx(), N() + 1);
      wbar.col(N()) = QN * part.col(N()) + lin.term.grad;
      for (int l = N() - 1; l >= 1; --l) {
        const Mat& Ql = hb.stage[l].topLeftCorner(nx(), nx());
        wbar.col(l) = Ql * part.col(l) + lin.stage[l].grad.head(nx()) +
                      lin.stage[l].A.transpose() * wbar.col(l + 1);
      }
      for (int j = 0; j < N(); ++j) {
        auto Sj = hb.stage[j].topRightCorner(nx(), nu());
        q.segment(j * nu(), nu()) = lin.stage[j].grad.tail(nu()) +
                                    Sj.transpose() * part.col(j) +
                                    lin.stage[j].B.transpose() * wbar.col(j + 1);
      }
    }

    // reduced rows: terminal equalities first, then enabled path rows, then
    // terminal inequalities
    std::vector<std::pair<int, int>> row_ids;
    int n_eq = 0;
    for (int i = 0; i < mt(); ++i) {
      if (ocp_.terminal_kinds[i] == RowKind::Equality) {
        row_ids.emplace_back(N(), i);
        ++n_eq;
      }
    }
    for (int k = 0; k < N(); ++k)
      for (int i = 0; i < mh(); ++i)
        if (row_mask_[k][i]) row_ids.emplace_back(k, i);
    for (int i = 0; i < mt(); ++i)
      if (ocp_.terminal_kinds[i] == RowKind::Inequality) row_ids.emplace_back(N(), i);

    const int m_red = static_cast<int>(row_ids.size());
    Mat G(m_red, ny);
    Vec h(m_red);
    for (int r = 0; r < m_red; ++r) {
      auto [k, i] = row_ids[r];
      if (k == N()) {
        Vec dx = lin.term.D.row(i).transpose();
        G.row(r) = dx.transpose() * SX.block(N() * nx(), 0, nx(), ny);
        h[r] = -lin.term.g[i] - dx.dot(part.col(N()));
      } else {
        Vec ax = lin.stage[k].C.row(i).head(nx());
        Vec au = lin.stage[k].C.row(i).tail(nu());
        G.row(r) = ax.transpose() * SX.block(k * nx(), 0, nx(), ny);
        G.row(r).segment(k * nu(), nu()) += au.transpose();
        h[r] = -lin.stage[k].h[i] - ax.dot(part.col(k));
      }
    }

    std::vector<int> red_hint;
    for (auto [k, i] : hint.rows) {
      for (int r = n_eq; r < m_red; ++r) {
        if (row_ids[r].first == k && row_ids[r].second == i) {
          red_hint.push_back(r);
          break;
        }
      }
    }

    ReducedQp red{std::move(P), std::move(q), std::move(G), std::move(h), n_eq};
    ReducedQpResult rr = solve_reduced_qp(red, red_hint);

    OcpQpResult out;
    out.status = rr.status;
    out.changes = rr.changes;
    if (rr.status != QpStatus::optimal) return out;

    out.dw.resize(n_w());
    for (int k = 0; k < N(); ++k) {
      out.dw.segment(k * nxu, nx()) =
          part.col(k) + SX.block(k * nx(), 0, nx(), ny) * rr.y;
      out.dw.segment(k * nxu + nx(), nu()) = rr.y.segment(k * nu(), nu());
    }
    out.dw.tail(nx()) = part.col(N()) + SX.block(N() * nx(), 0, nx(), ny) * rr.y;

    out.mu = Mat::Zero(mh(), N());
    out.nu = Vec::Zero(mt());
    for (int r = 0; r < m_red; ++r) {
      auto [k, i] = row_ids[r];
      if (k == N()) out.nu[i] = rr.mult[r];
      else out.mu(i, k) = rr.mult[r];
    }
    for (int r : rr.active) {
      auto [k, i] = row_ids[r];
      if (k < N() || ocp_.terminal_kinds[i] == RowKind::Inequality)
        out.active.rows.emplace_back(k, i);
    }

    // recover dynamics/initial multipliers by the adjoint recursion
    out.lam = Mat::Zero(nx(), N() + 1);
    {
      Vec dxN = out.dw.tail(nx());
      Vec lamN = QN * dxN + lin.term.grad;
      if (mt() > 0) lamN -= lin.term.D.transpose() * out.nu;
      out.lam.col(N()) = lamN;
      for (int k = N() - 1; k >= 0; --k) {
        const Mat& Hk = hb.stage[k];
        Vec dxu = out.dw.segment(k * nxu, nxu);
        Vec st = Hk.topRows(nx()) * dxu + lin.stage[k].grad.head(nx()) +
                 lin.stage[k].A.transpose() * out.lam.col(k + 1);
        for (int i = 0; i < mh(); ++i) {
          if (row_mask_[k][i] && out.mu(i, k) != 0.0)
            st -= lin.stage[k].C.row(i).head(nx()).transpose() * out.mu(i, k);
        }
        out.lam.col(k) = st;
      }
    }
    return out;
  }

  Vec stage_input(const Vec& w, int k) const {
    const int nxu = nx() + nu();
    Vec in(nxu + ocp_.np);
    in.head(nxu) = w.segment(k * nxu, nxu);
    if (ocp_.np > 0) in.tail(ocp_.np) = params_.col(k);
    return in;
  }

  Vec xu(const Vec& w, int k) const { return w.segment(k * (nx() + nu()), nx() + nu()); }

 private:
  OcpSpec ocp_;
  Vec x_hat0_;
  Mat params_;
  std::vector<std::vector<char>> row_mask_;
  mutable EvalWorkspace ws_;
};

/// Convenience constructor mirroring the stage-structured build operation.
inline TranscribedNlp build_nlp(const OcpSpec& ocp, const Vec& x_hat0) {
  return TranscribedNlp(ocp, x_hat0);
}

/// Identity Hessian blocks (steepest-descent-like strategy).
inline HessianBlocks identity_blocks(const OcpSpec& ocp) {
  HessianBlocks hb;
  hb.stage.assign(ocp.N, Mat::Identity(ocp.nx() + ocp.nu(), ocp.nx() + ocp.nu()));
  hb.terminal = Mat::Identity(ocp.nx(), ocp.nx());
  return hb;
}

/// Constant blocks from fixed stage/terminal matrices (Gauss-Newton-like
/// and indefinite steady-Hessian strategies).
inline HessianBlocks fixed_blocks(const OcpSpec& ocp, const Mat& M, const Mat& Mf) {
  HessianBlocks hb;
  hb.stage.assign(ocp.N, M);
  hb.terminal = Mf;
  return hb;
}

/// Full-space per-block regularization: eigenvalues floored at eps.
inline HessianBlocks regularize(const HessianBlocks& hb, double eps) {
  HessianBlocks out;
  out.stage.reserve(hb.stage.size());
  for (const Mat& b : hb.stage) out.stage.push_back(eigenvalue_floor(b, eps));
  out.terminal = eigenvalue_floor(hb.terminal, eps);
  return out;
}

}  // namespace enmpc

#endif  // ENMPC_NLP_HPP_
